//! Finite-difference cases for every differentiable operation.

use abra_core::abra::abra_transform_on;
use abra_core::losses::{arcface_loss_on, robust_objective_on, HeadOutputs, LossConfig};
use abra_core::nn::{Backbone, BackboneConfig, BlockConfig, BnMode};
use abra_core::rng::{substream, StreamRng};
use abra_core::stats::{adain_renormalize_on, STAT_EPS};
use abra_core::{Graph, Tensor};
use rand::Rng;

use super::{away_from_zero, gradcheck, gradcheck_step, simplex};

pub const ALL_CASES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "relu",
    "exp",
    "log",
    "sqrt",
    "clamp_min",
    "std_from_var",
    "reshape",
    "matmul",
    "linear",
    "conv2d",
    "conv2d_strided",
    "avg_pool2",
    "global_avg_pool",
    "sum",
    "mean",
    "channel_mean",
    "channel_var",
    "instance_mean",
    "instance_var",
    "broadcast_channels",
    "bn_transform",
    "stat_shift",
    "adain",
    "abra_transform",
    "softmax",
    "normalize_rows",
    "cosine_rows",
    "cross_entropy",
    "arc_margin",
    "arcface",
    "js_divergence",
    "js_of_logits",
    "robust_objective",
    "backbone_first_kernel",
];

fn labels(rng: &mut StreamRng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

/// Worst relative error of case `name` for one seed.
pub fn run_case(name: &str, seed: u64) -> f64 {
    let mut rng = substream(seed, name);
    let r = &mut rng;
    let randn = |shape: &[usize], r: &mut StreamRng| Tensor::randn(shape.to_vec(), 1.0, r);
    match name {
        "add" | "sub" | "mul" => {
            let a = randn(&[3, 4], r);
            let b = randn(&[3, 4], r);
            let op = name.to_string();
            gradcheck(&[a, b], r, move |g, v| match op.as_str() {
                "add" => g.add(v[0], v[1]),
                "sub" => g.sub(v[0], v[1]),
                _ => g.mul(v[0], v[1]),
            })
        }
        "div" => {
            let a = randn(&[3, 4], r);
            let b = away_from_zero(&[3, 4], 0.5, r);
            gradcheck(&[a, b], r, |g, v| g.div(v[0], v[1]))
        }
        "scale" => gradcheck(&[randn(&[5], r)], r, |g, v| Ok(g.scale(v[0], -1.7))),
        "relu" => gradcheck(&[away_from_zero(&[4, 5], 0.05, r)], r, |g, v| Ok(g.relu(v[0]))),
        "exp" => gradcheck(&[randn(&[6], r)], r, |g, v| Ok(g.exp(v[0]))),
        "log" => {
            let x = Tensor::uniform(vec![6], 0.3, 3.0, r);
            gradcheck(&[x], r, |g, v| Ok(g.log(v[0])))
        }
        "sqrt" => {
            let x = Tensor::uniform(vec![6], 0.3, 3.0, r);
            gradcheck(&[x], r, |g, v| Ok(g.sqrt(v[0])))
        }
        "clamp_min" => {
            let x = away_from_zero(&[8], 0.05, r);
            gradcheck(&[x], r, |g, v| Ok(g.clamp_min(v[0], 0.0)))
        }
        "std_from_var" => {
            let x = Tensor::uniform(vec![6], 0.2, 3.0, r);
            gradcheck(&[x], r, |g, v| Ok(g.std_from_var(v[0], STAT_EPS)))
        }
        "reshape" => gradcheck(&[randn(&[2, 6], r)], r, |g, v| g.reshape(v[0], vec![3, 4])),
        "matmul" => {
            let a = randn(&[3, 4], r);
            let b = randn(&[4, 2], r);
            gradcheck(&[a, b], r, |g, v| g.matmul(v[0], v[1]))
        }
        "linear" => {
            let x = randn(&[4, 5], r);
            let w = randn(&[3, 5], r);
            let b = randn(&[3], r);
            gradcheck(&[x, w, b], r, |g, v| g.linear(v[0], v[1], Some(v[2])))
        }
        "conv2d" => {
            let x = randn(&[2, 3, 5, 5], r);
            let w = randn(&[4, 3, 3, 3], r);
            gradcheck(&[x, w], r, |g, v| g.conv2d(v[0], v[1], 1, 1))
        }
        "conv2d_strided" => {
            let x = randn(&[2, 2, 6, 6], r);
            let w = randn(&[3, 2, 3, 3], r);
            gradcheck(&[x, w], r, |g, v| g.conv2d(v[0], v[1], 2, 0))
        }
        "avg_pool2" => gradcheck(&[randn(&[2, 3, 5, 4], r)], r, |g, v| g.avg_pool2(v[0])),
        "global_avg_pool" => gradcheck(&[randn(&[2, 3, 3, 4], r)], r, |g, v| g.global_avg_pool(v[0])),
        "sum" => gradcheck(&[randn(&[3, 3], r)], r, |g, v| Ok(g.sum(v[0]))),
        "mean" => gradcheck(&[randn(&[3, 3], r)], r, |g, v| g.mean(v[0])),
        "channel_mean" => gradcheck(&[randn(&[3, 2, 3, 3], r)], r, |g, v| g.channel_mean(v[0])),
        "channel_var" => gradcheck(&[randn(&[3, 2, 3, 3], r)], r, |g, v| g.channel_var(v[0])),
        "instance_mean" => gradcheck(&[randn(&[3, 2, 3, 3], r)], r, |g, v| g.instance_mean(v[0])),
        "instance_var" => gradcheck(&[randn(&[3, 2, 3, 3], r)], r, |g, v| g.instance_var(v[0])),
        "broadcast_channels" => {
            let a = randn(&[2, 3], r);
            gradcheck(&[a], r, |g, v| g.broadcast_channels(v[0], &[2, 3, 2, 2]))
        }
        "bn_transform" => {
            let x = randn(&[4, 3, 3, 3], r);
            let gamma = randn(&[3], r);
            let beta = randn(&[3], r);
            gradcheck(&[x, gamma, beta], r, |g, v| {
                let mu = g.channel_mean(v[0])?;
                let var = g.channel_var(v[0])?;
                g.bn_transform(v[0], mu, var, v[1], v[2], STAT_EPS)
            })
        }
        "stat_shift" => {
            let x = randn(&[3, 2, 3, 3], r);
            let mu = randn(&[2], r);
            let sigma = Tensor::uniform(vec![2], 0.5, 2.0, r);
            let dmu = randn(&[2], r);
            let ds = randn(&[2], r);
            gradcheck(&[x, mu, sigma, dmu, ds], r, |g, v| g.stat_shift(v[0], v[1], v[2], v[3], v[4]))
        }
        "adain" => {
            let x = randn(&[3, 2, 3, 3], r);
            let dmu = randn(&[3, 2], r);
            let ds = randn(&[3, 2], r).map(|v| 0.5 * v);
            gradcheck(&[x, dmu, ds], r, |g, v| adain_renormalize_on(g, v[0], v[1], v[2]))
        }
        "abra_transform" => {
            let x = randn(&[4, 3, 3, 3], r);
            let km = randn(&[3], r);
            let ks = randn(&[3], r).map(|v| 0.5 * v);
            let em: Vec<f64> = (0..3).map(|_| r.random_range(-1.5..1.5)).collect();
            let es: Vec<f64> = (0..3).map(|_| r.random_range(-1.5..1.5)).collect();
            gradcheck(&[x, km, ks], r, move |g, v| abra_transform_on(g, v[0], v[1], v[2], &em, &es))
        }
        "softmax" => gradcheck(&[randn(&[3, 4], r)], r, |g, v| g.softmax(v[0])),
        "normalize_rows" => gradcheck(&[randn(&[3, 4], r)], r, |g, v| g.normalize_rows(v[0])),
        "cosine_rows" => {
            let a = randn(&[4, 5], r);
            let b = randn(&[3, 5], r);
            gradcheck(&[a, b], r, |g, v| g.cosine_rows(v[0], v[1]))
        }
        "cross_entropy" => {
            let z = randn(&[5, 7], r).map(|v| 2.0 * v);
            let y = labels(r, 5, 7);
            gradcheck(&[z], r, move |g, v| g.cross_entropy(v[0], &y))
        }
        "arc_margin" => {
            let c = Tensor::uniform(vec![4, 3], -0.9, 0.9, r);
            let y = labels(r, 4, 3);
            gradcheck(&[c], r, move |g, v| g.arc_margin(v[0], &y, 0.3))
        }
        "arcface" => {
            let c = Tensor::uniform(vec![5, 4], -0.9, 0.9, r);
            let y = labels(r, 5, 4);
            let cfg = LossConfig::default();
            gradcheck(&[c], r, move |g, v| arcface_loss_on(g, v[0], &y, &cfg))
        }
        "js_divergence" => {
            let p = simplex(4, 3, r);
            let q = simplex(4, 3, r);
            gradcheck(&[p, q], r, |g, v| g.js_divergence(v[0], v[1]))
        }
        "js_of_logits" => {
            let a = randn(&[4, 5], r);
            let b = randn(&[4, 5], r);
            gradcheck(&[a, b], r, |g, v| {
                let p = g.softmax(v[0])?;
                let q = g.softmax(v[1])?;
                g.js_divergence(p, q)
            })
        }
        "robust_objective" => {
            let zc = randn(&[4, 3], r);
            let zp = randn(&[4, 3], r);
            let cc = Tensor::uniform(vec![4, 3], -0.9, 0.9, r);
            let cp = Tensor::uniform(vec![4, 3], -0.9, 0.9, r);
            let y = labels(r, 4, 3);
            let cfg = LossConfig::default();
            gradcheck(&[zc, cc, zp, cp], r, move |g, v| {
                let t = robust_objective_on(
                    g,
                    HeadOutputs { logits: v[0], cosphi: v[1] },
                    HeadOutputs { logits: v[2], cosphi: v[3] },
                    &y,
                    &cfg,
                )?;
                Ok(t.total)
            })
        }
        "backbone_first_kernel" => {
            let cfg = BackboneConfig {
                in_channels: 2,
                blocks: vec![
                    BlockConfig { out_channels: 3, downsample: true },
                    BlockConfig { out_channels: 4, downsample: false },
                ],
                feature_dim: 4,
                num_classes: 3,
            };
            let model = Backbone::new(cfg, r).unwrap();
            let images = randn(&[4, 2, 6, 6], r);
            let y = labels(r, 4, 3);
            let kernel_id = model.params.find("block0.conv.weight").unwrap();
            let kernel = model.params.get(kernel_id).value.clone();
            gradcheck_step(&[kernel], r, 1e-6, move |g, v| {
                let m = &model;
                let p = m.params.bind(g, false);
                let x = g.constant(images.clone());
                let h = g.conv2d(x, v[0], 1, 1)?;
                let mut stats = Vec::new();
                let h = block_tail(m, g, &p, h)?;
                let out = m.run_blocks(g, &p, h, 1..2, BnMode::Batch, &mut stats)?;
                let head = m.head(g, &p, out)?;
                g.cross_entropy(head.logits, &y)
            })
        }
        other => panic!("unknown case {other}"),
    }
}

/// BN, ReLU and pooling of block 0 applied to an already convolved map.
fn block_tail(m: &Backbone, g: &mut Graph, p: &abra_core::nn::Bound, h: abra_core::Var) -> abra_core::Result<abra_core::Var> {
    let b = &m.blocks()[0];
    let mu = g.channel_mean(h)?;
    let var = g.channel_var(h)?;
    let h = g.bn_transform(h, mu, var, p.var(b.gamma), p.var(b.beta), STAT_EPS)?;
    let h = g.relu(h);
    g.avg_pool2(h)
}
