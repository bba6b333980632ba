use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use abra_core::abra::UncertaintySite;
use abra_core::data::{encode_sidecar, self_standardize, sidecar_path, write_plt1, read_plt1, PlateDataset, PlateSpec, Split};
use abra_core::losses::LossConfig;
use abra_core::nn::{Checkpoint, InsertionSite};
use abra_core::train::{
    batch_size_sweep, bn_shift_diagnostics, evaluate, evaluation_table, export_embeddings, train_with_mode, InferMode,
    Method, TrainConfig,
};
use clap::parser::ValueSource;
use clap::ArgMatches;

use crate::args::{EvalArgs, GenArgs, MethodArg, ModeArg, PlateSet, TrainArgs};
use crate::manifest::{FileRef, RunManifest};
use crate::CliError;

fn method(m: MethodArg) -> Method {
    match m {
        MethodArg::Erm => Method::Erm,
        MethodArg::Adabn => Method::Adabn,
        MethodArg::Advstyle => Method::Advstyle,
        MethodArg::Abra => Method::Abra,
    }
}

fn mode(m: ModeArg) -> InferMode {
    match m {
        ModeArg::Plain => InferMode::Plain,
        ModeArg::Tta => InferMode::Tta,
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(&format!("writing {}", path.display()), e))
}

fn file_ref(path: &Path) -> Result<FileRef, CliError> {
    FileRef::of(path).map_err(|e| CliError::io(&format!("hashing {}", path.display()), e))
}

fn manifest_line(path: &Path) -> String {
    format!("manifest: {}\n", path.display())
}

fn load_dataset(path: &Path) -> Result<PlateDataset, CliError> {
    if !path.exists() {
        return Err(CliError::usage(format!("dataset {} does not exist", path.display())));
    }
    if !sidecar_path(path).exists() {
        return Err(CliError::usage(format!(
            "dataset sidecar {} does not exist",
            sidecar_path(path).display()
        )));
    }
    Ok(read_plt1(path)?)
}

pub fn gen(a: &GenArgs, name: &str, matches: &ArgMatches) -> Result<(), CliError> {
    let out_dir = a.out.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = RunManifest::start(name, matches, a.config.as_deref(), &out_dir);
    let spec = PlateSpec {
        images_per_plate: a.per_plate,
        num_classes: a.classes,
        channels: a.channels,
        image_size: a.size,
        shift_severity: a.tau,
        contrast: a.contrast,
        noise_level: a.noise,
        jitter: a.jitter,
        ..PlateSpec::with_split(a.plates, a.val_plates, a.test_plates)
    };
    if a.val_plates + a.test_plates > a.plates {
        return Err(CliError::usage(format!(
            "invalid split: {} validation + {} test plates exceed {} plates",
            a.val_plates, a.test_plates, a.plates
        )));
    }
    let mut ds = abra_core::data::generate(&spec, a.seed)?;
    if a.self_standardize {
        for p in &mut ds.plates {
            p.images = self_standardize(&p.images)?;
        }
    }
    write_plt1(&ds, &a.out)?;
    let manifest_path = manifest_path_for(&a.out);
    let side = sidecar_path(&a.out);
    write(&side, format!("manifest = {:?}\n{}", manifest_path.display().to_string(), encode_sidecar(&ds)?))?;
    let mut manifest = manifest;
    manifest.artifacts = vec![file_ref(&a.out)?, file_ref(&side)?];
    manifest
        .finish(&manifest_path)
        .map_err(|e| CliError::io("writing manifest", e))?;
    println!(
        "wrote {} ({} plates, {} images) and {}",
        a.out.display(),
        ds.plates.len(),
        ds.num_samples(),
        side.display()
    );
    Ok(())
}

fn manifest_path_for(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".manifest.toml");
    PathBuf::from(s)
}

fn is_default(m: &ArgMatches, id: &str) -> bool {
    !matches!(m.value_source(id), Some(ValueSource::CommandLine) | Some(ValueSource::EnvVariable))
}

pub fn train_config(a: &TrainArgs, matches: &ArgMatches) -> TrainConfig {
    let mut loss = LossConfig {
        lambda: a.lambda,
        margin: a.margin,
        scale: a.scale,
        js_weight: a.js_weight,
    };
    if let Some(preset) = a.loss {
        let (lambda, js) = preset.lambda_and_js();
        if is_default(matches, "lambda") {
            loss.lambda = lambda;
        }
        if is_default(matches, "js_weight") {
            loss.js_weight = js;
        }
    }
    TrainConfig {
        method: method(a.method),
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        warmup_frac: a.warmup_frac,
        weight_decay: a.weight_decay,
        loss,
        sites: a.sites.clone(),
        ascent_steps: a.ascent_steps,
        ascent_lr: a.ascent_lr,
        seed: a.seed,
        augment: a.augment,
    }
}

pub fn train(a: &TrainArgs, name: &str, matches: &ArgMatches) -> Result<(), CliError> {
    let mut manifest = RunManifest::start(name, matches, a.config.as_deref(), &a.out);
    let ds = load_dataset(&a.data)?;
    manifest.dataset = Some(file_ref(&a.data)?);
    let cfg = train_config(a, matches);
    cfg.validate()?;
    let infer = a.mode.map_or(cfg.method.default_mode(), mode);
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::io(&format!("creating {}", a.out.display()), e))?;
    let manifest_path = a.out.join("manifest.toml");
    let run = train_with_mode(&ds, &cfg, infer)?;

    let ckpt = a.out.join("checkpoint.abra");
    run.checkpoint().save(&ckpt)?;
    let report = a.out.join("report.txt");
    let mut text = manifest_line(&manifest_path);
    let _ = writeln!(text, "data: {}", a.data.display());
    text.push_str(&run.report.to_text());
    write(&report, &text)?;
    let traces = a.out.join("traces.csv");
    write(&traces, format!("# {}{}", manifest_line(&manifest_path), run.report.traces_csv()))?;
    manifest.artifacts = vec![file_ref(&ckpt)?, file_ref(&report)?, file_ref(&traces)?];
    manifest
        .finish(&manifest_path)
        .map_err(|e| CliError::io("writing manifest", e))?;
    println!(
        "{} {}: total accuracy {:.4} on {} test plates in {:.1}s, artifacts in {}",
        cfg.method,
        infer,
        run.report.total_accuracy(),
        run.report.test.plates.len(),
        run.report.wall_time_secs,
        a.out.display()
    );
    Ok(())
}

fn plate_set(ds: &PlateDataset, set: PlateSet) -> Vec<usize> {
    match set {
        PlateSet::Train => ds.plate_indices(Split::Train),
        PlateSet::Val => ds.plate_indices(Split::Val),
        PlateSet::Test => ds.plate_indices(Split::Test),
        PlateSet::All => (0..ds.plates.len()).collect(),
    }
}

pub fn eval(a: &EvalArgs, name: &str, matches: &ArgMatches) -> Result<(), CliError> {
    let out_dir = a.out.clone().unwrap_or_default();
    let mut manifest = RunManifest::start(name, matches, a.config.as_deref(), &out_dir);
    if !a.checkpoint.exists() {
        return Err(CliError::usage(format!("checkpoint {} does not exist", a.checkpoint.display())));
    }
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.to_model()?;
    let ds = load_dataset(&a.data)?;
    manifest.dataset = Some(file_ref(&a.data)?);
    let cfg = model.config();
    if cfg.in_channels != ds.spec.channels || cfg.num_classes != ds.spec.num_classes {
        return Err(CliError::usage(format!(
            "checkpoint expects {} channels and {} classes, dataset has {} and {}",
            cfg.in_channels, cfg.num_classes, ds.spec.channels, ds.spec.num_classes
        )));
    }
    let plates = plate_set(&ds, a.plates);
    if plates.is_empty() {
        return Err(CliError::usage(format!("dataset has no {:?} plates", a.plates).to_lowercase()));
    }
    let infer = mode(a.mode);
    let mut text = String::new();
    if let Some(dir) = &a.out {
        text.push_str(&manifest_line(&dir.join("manifest.toml")));
    }
    let _ = writeln!(text, "[eval]");
    let _ = writeln!(text, "checkpoint: {}", a.checkpoint.display());
    let _ = writeln!(text, "data: {}", a.data.display());
    let _ = writeln!(text, "mode: {infer}");
    let perturbed: Vec<String> = (0..model.num_blocks())
        .filter_map(|i| {
            let mut s = UncertaintySite::new(InsertionSite(i), model.config().blocks[i].out_channels);
            s.restore(&ckpt).ok().filter(|&found| found).map(|_| format!("{i}:{:.4}", s.k_norm()))
        })
        .collect();
    if !perturbed.is_empty() {
        let _ = writeln!(text, "k_norm: {}", perturbed.join(" "));
    }
    let _ = writeln!(text);
    let evaluation = evaluate(&model, &ds, &plates, infer)?;
    evaluation_table(&mut text, &evaluation);

    if let Some(sizes) = &a.sweep {
        let rows = batch_size_sweep(&model, &ds, &plates, sizes, a.repeats, infer, a.seed)?;
        let _ = writeln!(text, "\n[sweep]\nrepeats: {}", a.repeats);
        let _ = writeln!(text, "size  mean_accuracy  std");
        for r in rows {
            let _ = writeln!(text, "{:>4}  {:.6}  {:.6}", r.size, r.mean(), r.std());
        }
    }
    if a.diagnostics.is_some() {
        for &p in &plates {
            let plate = &ds.plates[p];
            let shifts = bn_shift_diagnostics(&model, &plate.images)?;
            let _ = writeln!(text, "\n[bnshift plate {}]", plate.plate_id);
            let _ = writeln!(text, "layer  kl  mmd");
            for s in shifts {
                let _ = writeln!(text, "{}  {:.6e}  {:.6e}", s.layer, s.kl, s.mmd);
            }
        }
    }
    if let Some(path) = &a.export {
        let rows = export_embeddings(&model, &ds, &plates, infer, path)?;
        let _ = writeln!(text, "\n[export]\npath: {}\nrows: {rows}", path.display());
    }
    print!("{text}");
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(&format!("creating {}", dir.display()), e))?;
        let report = dir.join("report.txt");
        write(&report, &text)?;
        manifest.artifacts.push(file_ref(&report)?);
        if let Some(path) = &a.export {
            manifest.artifacts.push(file_ref(path)?);
        }
        manifest
            .finish(&dir.join("manifest.toml"))
            .map_err(|e| CliError::io("writing manifest", e))?;
    }
    Ok(())
}
