use std::fmt::Write as _;
use std::time::Instant;

use crate::abra::UncertaintySite;
use crate::data::{PlateDataset, Split};
use crate::error::Result;
use crate::nn::{Backbone, Checkpoint};
use crate::train::config::{InferMode, TrainConfig};
use crate::train::eval::{evaluate, Evaluation};
use crate::train::trainer::{EpochTrace, Trainer};

#[derive(Clone, Debug)]
pub struct RunReport {
    pub config: TrainConfig,
    pub dataset_seed: u64,
    pub test: Evaluation,
    pub val: Option<Evaluation>,
    pub traces: Vec<EpochTrace>,
    pub iterations: usize,
    pub events: Vec<String>,
    pub wall_time_secs: f64,
}

fn fmt_f(v: f64) -> String {
    if v.is_nan() {
        "-".to_string()
    } else {
        format!("{v:.6}")
    }
}

fn fmt_e(v: f64) -> String {
    if v.is_nan() {
        "-".to_string()
    } else {
        format!("{v:.6e}")
    }
}

/// `key: value` lines for every setting that shaped a run.
pub fn config_echo(cfg: &TrainConfig) -> Vec<(&'static str, String)> {
    let sites: Vec<String> = cfg.sites.iter().map(usize::to_string).collect();
    vec![
        ("method", cfg.method.to_string()),
        ("seed", cfg.seed.to_string()),
        ("epochs", cfg.epochs.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("lr", cfg.lr.to_string()),
        ("warmup_frac", cfg.warmup_frac.to_string()),
        ("weight_decay", cfg.weight_decay.to_string()),
        ("lambda", cfg.loss.lambda.to_string()),
        ("margin", cfg.loss.margin.to_string()),
        ("scale", cfg.loss.scale.to_string()),
        ("js_weight", cfg.loss.js_weight.to_string()),
        ("sites", sites.join(",")),
        ("ascent_steps", cfg.ascent_steps.to_string()),
        (
            "ascent_lr",
            cfg.ascent_lr.map_or_else(|| "schedule".to_string(), |v| v.to_string()),
        ),
        ("augment", cfg.augment.to_string()),
        ("profile", "f64".to_string()),
    ]
}

pub fn evaluation_table(out: &mut String, e: &Evaluation) {
    let _ = writeln!(out, "plate_id  split  samples  correct  accuracy");
    for p in &e.plates {
        let _ = writeln!(
            out,
            "{:>8}  {:>5}  {:>7}  {:>7}  {:.4}",
            p.plate_id,
            p.split.as_str(),
            p.samples,
            p.correct,
            p.accuracy()
        );
    }
    let _ = writeln!(out, "total_accuracy: {:.6}", e.total());
}

impl RunReport {
    pub fn total_accuracy(&self) -> f64 {
        self.test.total()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[config]");
        for (k, v) in config_echo(&self.config) {
            let _ = writeln!(s, "{k}: {v}");
        }
        let _ = writeln!(s, "dataset_seed: {}", self.dataset_seed);
        let _ = writeln!(s, "\n[run]");
        let _ = writeln!(s, "iterations: {}", self.iterations);
        let _ = writeln!(s, "wall_time_secs: {:.2}", self.wall_time_secs);
        let _ = writeln!(s, "\n[test]\nmode: {}", self.test.mode);
        evaluation_table(&mut s, &self.test);
        if let Some(v) = &self.val {
            let _ = writeln!(s, "\n[val]\nmode: {}", v.mode);
            evaluation_table(&mut s, v);
        }
        let _ = writeln!(s, "\n[epochs]");
        s.push_str(&self.traces_table(' '));
        if !self.events.is_empty() {
            let _ = writeln!(s, "\n[events]");
            for e in &self.events {
                let _ = writeln!(s, "{e}");
            }
        }
        s
    }

    fn traces_table(&self, sep: char) -> String {
        let mut s = String::new();
        let cols = ["epoch", "iterations", "train_loss", "adv_loss", "js", "lr", "k_norm"];
        let _ = writeln!(s, "{}", cols.join(&sep.to_string()));
        for t in &self.traces {
            let row = [
                t.epoch.to_string(),
                t.iterations.to_string(),
                fmt_f(t.train_loss),
                fmt_f(t.adv_loss),
                fmt_e(t.js),
                format!("{:e}", t.lr),
                fmt_e(t.k_norm),
            ];
            let _ = writeln!(s, "{}", row.join(&sep.to_string()));
        }
        s
    }

    /// Per-epoch loss traces as comma-separated text.
    pub fn traces_csv(&self) -> String {
        self.traces_table(',')
    }
}

#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub model: Backbone,
    pub sites: Vec<UncertaintySite>,
    pub report: RunReport,
}

impl TrainedRun {
    pub fn checkpoint(&self) -> Checkpoint {
        let extras: Vec<_> = self.sites.iter().flat_map(|s| s.checkpoint_tensors()).collect();
        Checkpoint::from_model(&self.model, &extras)
    }
}

/// Trains with `cfg` and scores the test (and validation) plates with the
/// method's natural inference mode.
pub fn train(ds: &PlateDataset, cfg: &TrainConfig) -> Result<TrainedRun> {
    train_with_mode(ds, cfg, cfg.method.default_mode())
}

pub fn train_with_mode(ds: &PlateDataset, cfg: &TrainConfig, mode: InferMode) -> Result<TrainedRun> {
    let start = Instant::now();
    let out = Trainer::new(ds, cfg.clone())?.train()?;
    let test = evaluate(&out.model, ds, &ds.plate_indices(Split::Test), mode)?;
    let val_plates = ds.plate_indices(Split::Val);
    let val = if val_plates.is_empty() {
        None
    } else {
        Some(evaluate(&out.model, ds, &val_plates, mode)?)
    };
    Ok(TrainedRun {
        report: RunReport {
            config: cfg.clone(),
            dataset_seed: ds.seed,
            test,
            val,
            traces: out.traces,
            iterations: out.iterations,
            events: out.events,
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
        model: out.model,
        sites: out.sites,
    })
}
