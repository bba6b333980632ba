//! Deterministic check suites shared by the focused tests and the acceptance run.
//! Each returns a list of failure descriptions; empty means every check held.

use abra_core::abra::{abra_transform, sample_noise, UncertaintySite};
use abra_core::nn::InsertionSite;
use abra_core::losses::{arcface_loss, cross_entropy, js_divergence, LossConfig};
use abra_core::rng::substream;
use abra_core::stats::{adain_renormalize, batch_channel_stats, instance_channel_stats};
use abra_core::{Graph, Tensor};
use rand::Rng;

use super::{channel_values, ce_oracle, conv_oracle, instance_values, js_oracle, simplex, two_pass, ORACLE_TOL};

pub const IDENTITY_TOL: f64 = 1e-10;
pub const ARC_CE_TOL: f64 = 1e-12;
pub const ORACLE_INSTANCES: u64 = 20;

/// Norm-wise relative error `||a - b|| / ||b||`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn identity_suite() -> Vec<String> {
    let mut fails = Vec::new();
    for seed in 0..10u64 {
        let mut rng = substream(seed, "identity");
        let x = Tensor::randn(vec![6, 4, 5, 5], 2.0, &mut rng).map(|v| v + 0.7);

        let mut site = UncertaintySite::new(InsertionSite(0), 4);
        sample_noise(&mut site, &mut rng);
        let out = abra_transform(&x, &site).unwrap();
        let d = max_abs_diff(out.data(), x.data());
        if d > IDENTITY_TOL {
            fails.push(format!("zero-K transform moved features by {d:e} (seed {seed})"));
        }

        let zeros = Tensor::zeros(vec![6, 4]);
        let out = adain_renormalize(&x, &zeros, &zeros).unwrap();
        let d = max_abs_diff(out.data(), x.data());
        if d > IDENTITY_TOL {
            fails.push(format!("AdaIN with zero deltas moved features by {d:e} (seed {seed})"));
        }

        let k = rng.random_range(2..9);
        let n = rng.random_range(1..7);
        let cos = Tensor::uniform(vec![n, k], -1.0, 1.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let scale = rng.random_range(1.0..64.0);
        let cfg = LossConfig {
            margin: 0.0,
            scale,
            ..LossConfig::default()
        };
        let arc = arcface_loss(&cos, &labels, &cfg).unwrap();
        let ce = cross_entropy(&cos.map(|c| scale * c), &labels).unwrap();
        if (arc - ce).abs() > ARC_CE_TOL * ce.abs().max(1.0) {
            fails.push(format!("margin-free ArcFace {arc} differs from CE {ce} (seed {seed})"));
        }

        let p = simplex(n, k, &mut rng);
        let q = simplex(n, k, &mut rng);
        let same = js_divergence(&p, &p).unwrap();
        if same != 0.0 {
            fails.push(format!("JS(p, p) = {same:e} (seed {seed})"));
        }
        let pq = js_divergence(&p, &q).unwrap();
        let qp = js_divergence(&q, &p).unwrap();
        if pq.to_bits() != qp.to_bits() {
            fails.push(format!("JS not symmetric: {pq} vs {qp} (seed {seed})"));
        }
        let one_hot_a = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let one_hot_b = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let disjoint = js_divergence(&one_hot_a, &one_hot_b).unwrap();
        if pq > std::f64::consts::LN_2 || disjoint > std::f64::consts::LN_2 {
            fails.push(format!("JS above ln 2: {pq}, {disjoint} (seed {seed})"));
        }
    }
    fails
}

pub fn oracle_suite() -> Vec<String> {
    let mut fails = Vec::new();
    let mut check = |what: &str, seed: u64, got: &[f64], want: &[f64]| {
        let e = rel_err(got, want);
        if !(e <= ORACLE_TOL) {
            fails.push(format!("{what} (instance {seed}): relative error {e:e}"));
        }
    };
    for seed in 0..ORACLE_INSTANCES {
        let mut rng = substream(seed, "oracle");
        let n = rng.random_range(1..5);
        let c = rng.random_range(1..5);
        let h = rng.random_range(3..9);
        let w = rng.random_range(3..9);
        let x = Tensor::randn(vec![n, c, h, w], 1.5, &mut rng).map(|v| v + 3.0);

        let stats = batch_channel_stats(&x).unwrap();
        let (mut mu, mut var) = (Vec::new(), Vec::new());
        for ch in 0..c {
            let (m, v) = two_pass(&channel_values(&x, ch));
            mu.push(m);
            var.push(v);
        }
        check("batch mean", seed, &stats.mu, &mu);
        check("batch variance", seed, &stats.sigma2, &var);

        let (imu, ivar) = instance_channel_stats(&x).unwrap();
        let (mut mu, mut var) = (Vec::new(), Vec::new());
        for b in 0..n {
            for ch in 0..c {
                let (m, v) = two_pass(instance_values(&x, b, ch));
                mu.push(m);
                var.push(v);
            }
        }
        check("instance mean", seed, imu.data(), &mu);
        check("instance variance", seed, ivar.data(), &var);

        let o = rng.random_range(1..5);
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..2);
        let wt = Tensor::randn(vec![o, c, 3, 3], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(wt.clone());
        let y = g.conv2d(xv, wv, stride, pad).unwrap();
        let want = conv_oracle(&x, &wt, stride, pad);
        if g.shape(y) != want.shape() {
            let e = f64::INFINITY;
            check(&format!("convolution shape {:?} vs {:?}", g.shape(y), want.shape()), seed, &[e], &[0.0]);
        } else {
            let got = g.value(y).data().to_vec();
            check("convolution", seed, &got, want.data());
        }

        let rows = rng.random_range(1..9);
        let k = rng.random_range(2..12);
        let logits = Tensor::randn(vec![rows, k], 3.0, &mut rng);
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..k)).collect();
        let ce = cross_entropy(&logits, &labels).unwrap();
        check("cross-entropy", seed, &[ce], &[ce_oracle(&logits, &labels)]);

        let p = simplex(rows, k, &mut rng);
        let q = simplex(rows, k, &mut rng);
        let js = js_divergence(&p, &q).unwrap();
        check("JS divergence", seed, &[js], &[js_oracle(&p, &q)]);
    }
    fails
}
