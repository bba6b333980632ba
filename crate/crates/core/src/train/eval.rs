use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::data::{Plate, PlateDataset, Split};
use crate::error::{Error, Result};
use crate::nn::{Backbone, BnMode};
use crate::rng::substream;
use crate::stats::{adabn_recalibrate, BatchStats, STAT_EPS};
use crate::tensor::Tensor;
use crate::train::config::InferMode;

/// Rows per forward pass during plain inference.
const PLAIN_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub classes: Vec<usize>,
    /// `N x feature_dim`
    pub embeddings: Tensor,
}

/// Predictions and pre-classifier embeddings for one plate's images.
///
/// `Plain` uses the stored running statistics and treats every image
/// independently. `Tta` first recalibrates a copy of the model on all of
/// `images` and then predicts with the recalibrated statistics.
pub fn infer(model: &Backbone, images: &Tensor, mode: InferMode) -> Result<Prediction> {
    let n = *images.shape().first().unwrap_or(&0);
    if n == 0 {
        return Err(Error::EmptyReduction { op: "infer" });
    }
    let adapted;
    let model = match mode {
        InferMode::Plain => model,
        InferMode::Tta => {
            let mut m = model.clone();
            adabn_recalibrate(&mut m, std::slice::from_ref(images))?;
            adapted = m;
            &adapted
        }
    };
    let mut classes = Vec::with_capacity(n);
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + PLAIN_CHUNK).min(n);
        let (logits, emb) = model.predict(&images.slice_rows(start, end), BnMode::Running)?;
        classes.extend(logits.argmax_rows());
        parts.push(emb);
        start = end;
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(Prediction {
        classes,
        embeddings: Tensor::concat_rows(&refs)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlateAccuracy {
    pub plate_id: u32,
    pub split: Split,
    pub samples: usize,
    pub correct: usize,
}

impl PlateAccuracy {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.samples.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub mode: InferMode,
    pub plates: Vec<PlateAccuracy>,
}

impl Evaluation {
    /// Sample-weighted accuracy over all evaluated plates.
    pub fn total(&self) -> f64 {
        let n: usize = self.plates.iter().map(|p| p.samples).sum();
        let c: usize = self.plates.iter().map(|p| p.correct).sum();
        c as f64 / n.max(1) as f64
    }
}

/// Worker count for per-plate evaluation: `ABRA_NUM_THREADS` if set, else the
/// available parallelism.
pub fn thread_budget() -> usize {
    std::env::var("ABRA_NUM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn score(model: &Backbone, plate: &Plate, mode: InferMode) -> Result<PlateAccuracy> {
    let pred = infer(model, &plate.images, mode)?;
    let correct = pred.classes.iter().zip(&plate.labels).filter(|(a, b)| a == b).count();
    Ok(PlateAccuracy {
        plate_id: plate.plate_id,
        split: plate.split,
        samples: plate.len(),
        correct,
    })
}

/// Per-plate accuracy on `plates` (indices into `ds.plates`). Plates are
/// spread over up to [`thread_budget`] threads; the model is only read.
pub fn evaluate(model: &Backbone, ds: &PlateDataset, plates: &[usize], mode: InferMode) -> Result<Evaluation> {
    let threads = thread_budget().min(plates.len()).max(1);
    let results: Vec<Result<PlateAccuracy>> = if threads == 1 {
        plates.iter().map(|&i| score(model, &ds.plates[i], mode)).collect()
    } else {
        let chunk = plates.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = plates
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|&i| score(model, &ds.plates[i], mode))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    Ok(Evaluation {
        mode,
        plates: results.into_iter().collect::<Result<_>>()?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub size: usize,
    pub accuracies: Vec<f64>,
}

impl SweepRow {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len().max(1) as f64
    }

    /// Sample standard deviation over repeats (0 for a single repeat).
    ///
    /// Computed from deviations around the first repeat, so identical
    /// accuracies give exactly 0.
    pub fn std(&self) -> f64 {
        let n = self.accuracies.len();
        if n < 2 {
            return 0.0;
        }
        let first = self.accuracies[0];
        let (s, q) = self
            .accuracies
            .iter()
            .map(|a| a - first)
            .fold((0.0, 0.0), |(s, q), d| (s + d, q + d * d));
        ((q - s * s / n as f64) / (n - 1) as f64).max(0.0).sqrt()
    }
}

/// Accuracy over `plates` when each plate is shuffled and cut into chunks of
/// `size`, each chunk adapted and predicted on its own. Repeated `repeats`
/// times per size with independent shuffles.
pub fn batch_size_sweep(
    model: &Backbone,
    ds: &PlateDataset,
    plates: &[usize],
    sizes: &[usize],
    repeats: usize,
    mode: InferMode,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if repeats == 0 {
        return Err(Error::config("repeats", "must be >= 1"));
    }
    let smallest = plates.iter().map(|&p| ds.plates[p].len()).min().unwrap_or(0);
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        if size == 0 || size > smallest {
            return Err(Error::config(
                "sweep",
                format!("chunk size {size} must be in 1..={smallest} (smallest plate)"),
            ));
        }
        let mut accuracies = Vec::with_capacity(repeats);
        for r in 0..repeats {
            let mut rng = substream(seed, &format!("sweep.{size}.{r}"));
            let (mut correct, mut total) = (0usize, 0usize);
            for &pi in plates {
                let plate = &ds.plates[pi];
                let mut order: Vec<usize> = (0..plate.len()).collect();
                order.shuffle(&mut rng);
                for chunk in order.chunks(size) {
                    let (images, labels) = plate.gather(chunk);
                    let pred = infer(model, &images, mode)?;
                    correct += pred.classes.iter().zip(&labels).filter(|(a, b)| a == b).count();
                    total += labels.len();
                }
            }
            accuracies.push(correct as f64 / total.max(1) as f64);
        }
        rows.push(SweepRow { size, accuracies });
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerShift {
    pub layer: usize,
    pub kl: f64,
    pub mmd: f64,
}

/// Channel-averaged `KL(N(mu_s, var_s) || N(mu_t, var_t))`, variances floored at `STAT_EPS`.
pub fn gaussian_kl(source: &BatchStats, target: &BatchStats) -> f64 {
    let c = source.mu.len();
    let mut total = 0.0;
    for i in 0..c {
        let vs = source.sigma2[i].max(STAT_EPS);
        let vt = target.sigma2[i].max(STAT_EPS);
        let d = source.mu[i] - target.mu[i];
        total += 0.5 * ((vt / vs).ln() + (vs + d * d) / vt - 1.0);
    }
    total / c.max(1) as f64
}

/// Unbiased squared MMD with a Gaussian kernel between the per-channel
/// `(mu, sigma)` points of two statistic sets. Bandwidth: median pairwise
/// distance of the pooled points.
pub fn stats_mmd(source: &BatchStats, target: &BatchStats) -> f64 {
    let pts = |s: &BatchStats| -> Vec<[f64; 2]> {
        s.mu.iter()
            .zip(&s.sigma2)
            .map(|(&m, &v)| [m, v.max(STAT_EPS).sqrt()])
            .collect()
    };
    let (x, y) = (pts(source), pts(target));
    let d2 = |a: &[f64; 2], b: &[f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let pooled: Vec<[f64; 2]> = x.iter().chain(&y).copied().collect();
    let mut dists = Vec::with_capacity(pooled.len() * pooled.len() / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            dists.push(d2(&pooled[i], &pooled[j]).sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let median = dists.get(dists.len() / 2).copied().unwrap_or(0.0);
    let bw = if median > 0.0 { median } else { 1.0 };
    let k = |a: &[f64; 2], b: &[f64; 2]| (-d2(a, b) / (2.0 * bw * bw)).exp();
    let within = |p: &[[f64; 2]]| {
        let n = p.len();
        if n < 2 {
            return 0.0;
        }
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += k(&p[i], &p[j]);
                }
            }
        }
        s / (n * (n - 1)) as f64
    };
    let mut cross = 0.0;
    for a in &x {
        for b in &y {
            cross += k(a, b);
        }
    }
    cross /= (x.len() * y.len()).max(1) as f64;
    within(&x) + within(&y) - 2.0 * cross
}

/// KL and MMD between the model's running (source) statistics and the
/// statistics `target` induces, per BN layer.
pub fn bn_shift_diagnostics(model: &Backbone, target: &Tensor) -> Result<Vec<LayerShift>> {
    let source = model.running_stats();
    let tgt = model.batch_statistics(target)?;
    Ok(source
        .iter()
        .zip(&tgt)
        .enumerate()
        .map(|(layer, (s, t))| LayerShift {
            layer,
            kl: gaussian_kl(s, t),
            mmd: stats_mmd(s, t),
        })
        .collect())
}

/// Writes `sample_id,plate_id,label,split,f0..` rows for every sample of `plates`.
pub fn export_embeddings(
    model: &Backbone,
    ds: &PlateDataset,
    plates: &[usize],
    mode: InferMode,
    path: impl AsRef<Path>,
) -> Result<usize> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let dim = model.config().feature_dim;
    let header: Vec<String> = ["sample_id", "plate_id", "label", "split"]
        .into_iter()
        .map(String::from)
        .chain((0..dim).map(|i| format!("f{i}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    let mut rows = 0;
    let mut base = 0;
    for (pi, plate) in ds.plates.iter().enumerate() {
        if plates.contains(&pi) {
            let pred = infer(model, &plate.images, mode)?;
            for (i, emb) in pred.embeddings.data().chunks(dim).enumerate() {
                write!(out, "{},{},{},{}", base + i, plate.plate_id, plate.labels[i], plate.split)?;
                for v in emb {
                    write!(out, ",{v}")?;
                }
                writeln!(out)?;
                rows += 1;
            }
        }
        base += plate.len();
    }
    out.flush()?;
    Ok(rows)
}
