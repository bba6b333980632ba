//! Trains every method on the default synthetic plates and prints unseen-plate
//! accuracy per seed.
//!
//! `cargo run --release --example desk -- [seeds] [epochs]`
//!
//! Environment overrides: CONTRAST, NOISE, JITTER, TAU, ALPHA, SITES, METHODS,
//! LAMBDA, JSW, MARGIN, SHOW.

use std::time::Instant;

use abra_core::data::{generate, PlateSpec};
use abra_core::losses::LossConfig;
use abra_core::train::{train_with_mode, InferMode, Method, TrainConfig};

fn main() -> abra_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(20);
    let env = |k: &str, d: f64| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);
    let base = PlateSpec::default();
    let spec = PlateSpec {
        contrast: env("CONTRAST", base.contrast),
        noise_level: env("NOISE", base.noise_level),
        jitter: env("JITTER", base.jitter),
        shift_severity: env("TAU", base.shift_severity),
        ..base
    };
    let sites: Vec<usize> = std::env::var("SITES")
        .ok()
        .map(|m| m.split(',').map(|s| s.parse().unwrap()).collect())
        .unwrap_or(vec![2]);
    for seed in 0..seeds {
        let ds = generate(&spec, seed)?;
        for (p, s) in ds.plates.iter().zip(&ds.shifts) {
            if std::env::var("SHOW").is_ok() {
                println!("seed {seed} plate {} {}: gain {:.2?} offset {:.2?}", p.plate_id, p.split, s.gain, s.offset);
            }
        }
    }
    let ascent_lr = std::env::var("ALPHA").ok().and_then(|v| v.parse().ok());
    let methods: Vec<Method> = std::env::var("METHODS")
        .ok()
        .map(|m| m.split(',').map(|s| s.parse().unwrap()).collect())
        .unwrap_or(Method::ALL.to_vec());
    for seed in 0..seeds {
        let ds = generate(&spec, seed)?;
        for &method in &methods {
            let cfg = TrainConfig {
                method,
                epochs,
                seed,
                ascent_lr,
                sites: sites.clone(),
                loss: LossConfig {
                    lambda: env("LAMBDA", 0.5),
                    js_weight: env("JSW", 1.0),
                    margin: env("MARGIN", 0.2),
                    ..LossConfig::default()
                },
                ..TrainConfig::default()
            };
            let t = Instant::now();
            let run = train_with_mode(&ds, &cfg, InferMode::Plain)?;
            let plain = run.report.total_accuracy();
            let tta = abra_core::train::evaluate(
                &run.model,
                &ds,
                &ds.plate_indices(abra_core::data::Split::Test),
                InferMode::Tta,
            )?
            .total();
            let last = run.report.traces.last().map_or(f64::NAN, |t| t.train_loss);
            println!(
                "seed {seed} {method:>8}: plain {:.3} tta {:.3} loss {:.3} ({:.1}s)",
                plain,
                tta,
                last,
                t.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
