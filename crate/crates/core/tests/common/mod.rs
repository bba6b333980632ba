#![allow(dead_code)]

pub mod cases;
pub mod suites;

use abra_core::{Graph, Result, Tensor, Var};
use rand::Rng;

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-3;
pub const ORACLE_TOL: f64 = 1e-12;

/// Worst norm-wise relative error between the analytic gradient and central
/// differences, over all inputs. Non-scalar outputs are contracted with a fixed
/// random weight tensor so every output entry contributes.
pub fn gradcheck<R, F>(inputs: &[Tensor], rng: &mut R, f: F) -> f64
where
    R: Rng,
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    gradcheck_step(inputs, rng, FD_STEP, f)
}

/// [`gradcheck`] with an explicit finite-difference step.
pub fn gradcheck_step<R, F>(inputs: &[Tensor], rng: &mut R, step: f64, f: F) -> f64
where
    R: Rng,
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars).expect("forward");
        g.shape(out).to_vec()
    };
    let weights = Tensor::randn(probe, 1.0, rng);
    let eval = |values: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars).expect("forward");
        g.value(out)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars).expect("forward");
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w).expect("weights match output");
    let loss = g.sum(prod);
    g.backward(loss).expect("backward");

    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = g
            .grad(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
        let mut numeric = vec![0.0; t.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= step;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * step);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let scale = analytic.norm().max(numeric.iter().map(|v| v * v).sum::<f64>().sqrt());
        let rel = if scale < 1e-10 { diff } else { diff / scale };
        worst = worst.max(rel);
    }
    worst
}

/// Standard normals pushed at least `gap` away from zero.
pub fn away_from_zero<R: Rng>(shape: &[usize], gap: f64, rng: &mut R) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng).map(|v| v.signum() * (gap + v.abs()))
}

/// Random rows on the probability simplex with strictly positive entries.
pub fn simplex<R: Rng>(n: usize, k: usize, rng: &mut R) -> Tensor {
    let mut data = Vec::with_capacity(n * k);
    for _ in 0..n {
        let row: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / s));
    }
    Tensor::new(vec![n, k], data).unwrap()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

// ---- naive oracles -----------------------------------------------------------

/// Direct four-loop cross-correlation, zero padding.
pub fn conv_oracle(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((b * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * c + ic) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

/// Two-pass sequential mean and biased variance of `values`.
pub fn two_pass(values: &[f64]) -> (f64, f64) {
    let mut s = 0.0;
    for v in values {
        s += v;
    }
    let mean = s / values.len() as f64;
    let mut q = 0.0;
    for v in values {
        q += (v - mean) * (v - mean);
    }
    (mean, q / values.len() as f64)
}

/// Per-channel values of an NCHW tensor, gathered over (n, h, w).
pub fn channel_values(x: &Tensor, ch: usize) -> Vec<f64> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let hw = x.shape()[2] * x.shape()[3];
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        out.extend_from_slice(&x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw]);
    }
    out
}

pub fn instance_values(x: &Tensor, b: usize, ch: usize) -> &[f64] {
    let c = x.shape()[1];
    let hw = x.shape()[2] * x.shape()[3];
    &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw]
}

/// Mean of `-log softmax(row)[label]` with the max subtracted first.
pub fn ce_oracle(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let mut total = 0.0;
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

/// Mean over rows of `0.5 KL(p||m) + 0.5 KL(q||m)`.
pub fn js_oracle(p: &Tensor, q: &Tensor) -> f64 {
    let k = p.shape()[1];
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .map(|(&x, &y)| if x > 0.0 { x * (x / y).ln() } else { 0.0 })
            .sum()
    };
    let rows = p.shape()[0];
    let mut total = 0.0;
    for (a, b) in p.data().chunks(k).zip(q.data().chunks(k)) {
        let m: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
        total += 0.5 * kl(a, &m) + 0.5 * kl(b, &m);
    }
    total / rows as f64
}
