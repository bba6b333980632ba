use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use abra_core::data::{read_plt1, PlateSpec};

fn abra() -> Command {
    Command::new(env!("CARGO_BIN_EXE_abra"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    abra().current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: [&str; 10] = [
    "--plates", "3", "--test-plates", "1", "--per-plate", "128", "--classes", "4", "--size", "8",
];

fn dataset(dir: &Path) -> PathBuf {
    let mut args = vec!["gen"];
    args.extend(SMALL);
    args.extend(["--seed", "1", "-o", "ds.plt"]);
    ok(dir, &args);
    dir.join("ds.plt")
}

fn trained(dir: &Path, out: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec!["train", "--data", "ds.plt", "--epochs", "2", "--out", out];
    args.extend(extra);
    ok(dir, &args);
    dir.join(out)
}

fn traces(run_dir: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(run_dir.join("traces.csv"))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("epoch"))
        .map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap_or(f64::NAN)).collect())
        .collect()
}

fn total_accuracy(run_dir: &Path) -> String {
    std::fs::read_to_string(run_dir.join("report.txt"))
        .unwrap()
        .lines()
        .find(|l| l.starts_with("total_accuracy"))
        .unwrap()
        .to_string()
}

#[test]
fn gen_round_trips_the_spec_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--plates", "8", "--classes", "10", "--tau", "0.5", "--seed", "1", "-o", "a.plt"]);
    ok(d, &["gen", "--plates", "8", "--classes", "10", "--tau", "0.5", "--seed", "1", "-o", "b.plt"]);
    let ds = read_plt1(d.join("a.plt")).unwrap();
    assert_eq!(ds.spec, PlateSpec::default());
    assert_eq!(ds.seed, 1);
    assert_eq!(std::fs::read(d.join("a.plt")).unwrap(), std::fs::read(d.join("b.plt")).unwrap());
    let side = std::fs::read_to_string(d.join("a.plt.toml")).unwrap();
    assert!(side.starts_with("manifest = \"a.plt.manifest.toml\""));
    let manifest = std::fs::read_to_string(d.join("a.plt.manifest.toml")).unwrap();
    assert!(manifest.contains("tau = \"0.5\""));
    assert!(manifest.contains("git_blob"));
}

#[test]
fn invalid_spec_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["gen", "--tau", "-1", "-o", "x.plt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("shift_severity"));
    let out = run(dir.path(), &["gen", "--per-plate", "15", "-o", "x.plt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("images_per_plate"));
}

#[test]
fn missing_inputs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["train", "--data", "nope.plt"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(dir.path(), &["train", "--data", "nope.plt", "--method", "sgd"]);
    assert_eq!(out.status.code(), Some(2));
    dataset(dir.path());
    let out = run(dir.path(), &["eval", "--data", "ds.plt", "--checkpoint", "none.abra"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn training_is_reproducible_and_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d);
    let a = trained(d, "a", &["--seed", "1"]);
    let b = trained(d, "b", &["--seed", "1"]);
    for f in ["checkpoint.abra", "report.txt", "traces.csv", "manifest.toml"] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert_eq!(total_accuracy(&a), total_accuracy(&b));
    assert_eq!(
        std::fs::read(a.join("checkpoint.abra")).unwrap(),
        std::fs::read(b.join("checkpoint.abra")).unwrap()
    );
    let report = std::fs::read_to_string(a.join("report.txt")).unwrap();
    assert!(report.starts_with("manifest: a/manifest.toml"));
    for key in ["lambda: 0.5", "margin: 0.2", "scale: 16", "js_weight: 1", "sites: 2"] {
        assert!(report.contains(key), "{key}");
    }
}

#[test]
fn unit_lambda_makes_the_margin_irrelevant() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d);
    let a = trained(d, "a", &["--lambda", "1.0", "--margin", "0"]);
    let b = trained(d, "b", &["--lambda", "1.0", "--margin", "0.4", "--scale", "64"]);
    let (ta, tb) = (traces(&a), traces(&b));
    assert_eq!(ta.len(), tb.len());
    for (ra, rb) in ta.iter().zip(&tb) {
        for (x, y) in ra.iter().zip(rb) {
            assert!((x - y).abs() <= 1e-10 || (x.is_nan() && y.is_nan()), "{x} vs {y}");
        }
    }
}

#[test]
fn loss_presets_yield_to_explicit_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d);
    let a = trained(d, "a", &["--loss", "ce", "--epochs", "1"]);
    let report = std::fs::read_to_string(a.join("report.txt")).unwrap();
    assert!(report.contains("lambda: 1\n") && report.contains("js_weight: 0\n"));
    let b = trained(d, "b", &["--loss", "ce", "--js-weight", "0.5", "--epochs", "1"]);
    let report = std::fs::read_to_string(b.join("report.txt")).unwrap();
    assert!(report.contains("lambda: 1\n") && report.contains("js_weight: 0.5\n"));
}

#[test]
fn divergence_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d);
    let out = run(
        d,
        &["train", "--data", "ds.plt", "--ascent-lr", "1e308", "--ascent-steps", "3", "--out", "r"],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("consecutive non-finite"));
}

#[test]
fn config_file_fills_in_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d);
    std::fs::write(
        d.join("run.toml"),
        "seed = 7\n[train]\ndata = \"ds.plt\"\nepochs = 5\nmethod = \"erm\"\nsites = [1, 2]\n",
    )
    .unwrap();
    ok(d, &["train", "--config", "run.toml", "--epochs", "1", "--out", "c"]);
    let report = std::fs::read_to_string(d.join("c/report.txt")).unwrap();
    assert!(report.contains("epochs: 1\n"));
    assert!(report.contains("seed: 7\n"));
    assert!(report.contains("method: erm\n"));
    assert!(report.contains("sites: 1,2\n"));
    let manifest = std::fs::read_to_string(d.join("c/manifest.toml")).unwrap();
    assert!(manifest.contains("config_path = \"run.toml\""));
    std::fs::write(d.join("bad.toml"), "[train]\nepoch = 5\n").unwrap();
    let out = run(d, &["train", "--config", "bad.toml", "--data", "ds.plt"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluation_reports_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d);
    trained(d, "r", &["--method", "erm"]);
    let args = ["eval", "--checkpoint", "r/checkpoint.abra", "--data", "ds.plt", "--mode", "plain"];
    let one = ok(d, &args);
    let two = abra().current_dir(d).args(args).env("ABRA_NUM_THREADS", "1").output().unwrap();
    assert_eq!(one, String::from_utf8(two.stdout).unwrap());
    assert!(one.contains("total_accuracy:"));
}

#[test]
fn sweep_diagnostics_and_export_have_the_expected_shape() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d);
    trained(d, "r", &[]);
    let text = ok(
        d,
        &[
            "eval",
            "--checkpoint",
            "r/checkpoint.abra",
            "--data",
            "ds.plt",
            "--mode",
            "tta",
            "--sweep",
            "8,32,128",
            "--repeats",
            "10",
            "--diagnostics",
            "bnshift",
            "--export",
            "emb.csv",
            "--out",
            "ev",
        ],
    );
    let sweep: Vec<&str> = text
        .split("[sweep]")
        .nth(1)
        .unwrap()
        .lines()
        .skip_while(|l| !l.starts_with("size"))
        .take_while(|l| !l.is_empty())
        .collect();
    assert!(sweep[0].contains("std"));
    assert_eq!(sweep.len(), 4);
    let layers: Vec<&str> = text
        .split("[bnshift plate 2]")
        .nth(1)
        .unwrap()
        .lines()
        .skip(2)
        .take_while(|l| !l.is_empty())
        .collect();
    assert_eq!(layers.len(), 3);
    assert!(layers.iter().all(|l| l.split_whitespace().count() == 3));
    let csv = std::fs::read_to_string(d.join("emb.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 128);
    assert!(d.join("ev/report.txt").exists() && d.join("ev/manifest.toml").exists());
}

#[test]
fn stale_checkpoint_versions_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d);
    trained(d, "r", &["--epochs", "1"]);
    let path = d.join("r/checkpoint.abra");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
    std::fs::write(&path, bytes).unwrap();
    let out = run(d, &["eval", "--checkpoint", "r/checkpoint.abra", "--data", "ds.plt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));
}

#[test]
fn help_lists_defaults() {
    let out = abra().args(["train", "--help"]).output().unwrap();
    let help = String::from_utf8(out.stdout).unwrap();
    for flag in [
        "--epochs <EPOCHS>",
        "[default: 20]",
        "[default: 32]",
        "[default: 0.001]",
        "[default: 0.1]",
        "[default: 0.00001]",
        "[default: 0.5]",
        "[default: 0.2]",
        "[default: 16]",
        "[default: abra]",
        "--ascent-lr",
    ] {
        assert!(help.contains(flag), "missing {flag} in\n{help}");
    }
    let out = abra().args(["gen", "--help"]).output().unwrap();
    let help = String::from_utf8(out.stdout).unwrap();
    for flag in ["[default: 8]", "[default: 200]", "[default: 10]", "[default: 0.5]", "[default: 16]"] {
        assert!(help.contains(flag), "missing {flag}");
    }
}
