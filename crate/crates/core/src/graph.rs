//! Reverse-mode differentiation over a fixed vocabulary of tensor ops.
//!
//! A [`Graph`] is an append-only arena. Every op pushes one node; nodes are
//! therefore already in topological order and [`Graph::backward`] simply walks
//! them in reverse. Gradients are stored on leaves only and accumulate across
//! repeated `backward` calls until [`Graph::zero_grad`].

use crate::error::{Error, Result};
use crate::kernels::{col2im_add, gemm, im2col, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape of per-channel statistics consumed by [`Graph::stat_shift`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum StatLayout {
    /// One value per channel, shared by the batch.
    Channel,
    /// One value per (sample, channel).
    Instance,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    ReverseGrad(Var),
    Matmul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, geom: ConvGeometry, cols: Vec<f64> },
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    StdFromVar(Var, f64),
    Reshape(Var),
    AvgPool2(Var),
    GlobalAvgPool(Var),
    Sum(Var),
    Mean(Var),
    ChannelMean(Var),
    ChannelVar(Var),
    InstanceMean(Var),
    InstanceVar(Var),
    BroadcastChannels(Var),
    BnTransform { x: Var, mu: Var, var: Var, gamma: Var, beta: Var, eps: f64 },
    StatShift { x: Var, mu: Var, sigma: Var, dmu: Var, dsigma: Var, layout: StatLayout },
    Softmax(Var),
    NormalizeRows(Var),
    CosineRows { a: Var, b: Var, a_hat: Vec<f64>, b_hat: Vec<f64>, a_norm: Vec<f64>, b_norm: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    ArcMargin { cos: Var, labels: Vec<usize>, margin: f64 },
    JsDivergence { p: Var, q: Var },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Lower clamp applied to cosines before `acos` in the angular margin.
pub const COS_CLAMP: f64 = 1e-7;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn add_into(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Value-identical constant through which no gradient flows.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; `None` if nothing flowed into it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // constant sub-expressions keep no backward state
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.value(a).zip_map(self.value(b), name, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, &[a, b], Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(out, &[a, b], Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| k * x);
        self.push(out, &[a], Op::Scale(a, k))
    }

    /// Identity forward, negated gradient backward.
    pub fn reverse_grad(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(out, &[a], Op::ReverseGrad(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, &[a], Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, &[a], Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, &[a], Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::sqrt);
        self.push(out, &[a], Op::Sqrt(a))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let out = self.value(a).map(|x| x.max(lo));
        self.push(out, &[a], Op::ClampMin(a, lo))
    }

    /// Standard deviation from a variance, clamped below at `eps`:
    /// `max(sqrt(var), eps)`. The clamped region has zero gradient.
    pub fn std_from_var(&mut self, var: Var, eps: f64) -> Var {
        let out = self.value(var).map(|v| v.max(0.0).sqrt().max(eps));
        self.push(out, &[var], Op::StdFromVar(var, eps))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, &[a], Op::Reshape(a)))
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), &[a, b], Op::Matmul(a, b)))
    }

    /// `x * w^T + b` for `x: N x D`, `w: O x D`, `b: O`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, d) = self.value(x).dims2("linear")?;
        let (o, d2) = self.value(w).dims2("linear")?;
        if d != d2 {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        let mut out = vec![0.0; n * o];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.shape() != [o] {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    lhs: vec![o],
                    rhs: bias.shape().to_vec(),
                });
            }
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bias.data());
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(n, d, o, 1.0, self.value(x).data(), false, self.value(w).data(), true, beta, &mut out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Tensor::from_parts(vec![n, o], out), &inputs, Op::Linear { x, w, b }))
    }

    /// 2-D cross-correlation without bias. `x: N x C x H x W`, `w: O x C x kh x kw`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4("conv2d")?;
        let (o, c2, kh, kw) = self.value(w).dims4("conv2d")?;
        if c != c2 || kh > h + 2 * pad || kw > wd + 2 * pad || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: wd,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad,
        };
        let (rows, ncol) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; n * rows * ncol];
        let mut out = vec![0.0; n * o * ncol];
        let xin = self.value(x).data();
        let wdat = self.value(w).data();
        for i in 0..n {
            let col = &mut cols[i * rows * ncol..(i + 1) * rows * ncol];
            im2col(&xin[i * c * h * wd..(i + 1) * c * h * wd], &geom, col);
            gemm(o, rows, ncol, 1.0, wdat, false, col, false, 0.0, &mut out[i * o * ncol..(i + 1) * o * ncol]);
        }
        let value = Tensor::from_parts(vec![n, o, geom.out_h(), geom.out_w()], out);
        let keep = self.requires_grad(w) || self.requires_grad(x);
        let cols = if keep { cols } else { Vec::new() };
        Ok(self.push(value, &[x, w], Op::Conv2d { x, w, geom, cols }))
    }

    // ---- pooling and reductions --------------------------------------------

    /// Non-overlapping 2x2 average pooling; a trailing odd row/column is dropped.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(a).dims4("avg_pool2")?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::InvalidShape {
                op: "avg_pool2",
                shape: self.shape(a).to_vec(),
                expected: "H, W >= 2",
            });
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for x in 0..ow {
                    let s = plane[2 * y * w + 2 * x]
                        + plane[2 * y * w + 2 * x + 1]
                        + plane[(2 * y + 1) * w + 2 * x]
                        + plane[(2 * y + 1) * w + 2 * x + 1];
                    out[p * oh * ow + y * ow + x] = 0.25 * s;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, c, oh, ow], out), &[a], Op::AvgPool2(a)))
    }

    /// `N x C x H x W -> N x C`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(a).dims4("global_avg_pool")?;
        let hw = h * w;
        if hw == 0 {
            return Err(Error::EmptyReduction { op: "global_avg_pool" });
        }
        let out = self
            .value(a)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        Ok(self.push(Tensor::from_parts(vec![n, c], out), &[a], Op::GlobalAvgPool(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let len = self.value(a).len();
        if len == 0 {
            return Err(Error::EmptyReduction { op: "mean" });
        }
        let out = Tensor::scalar(self.value(a).sum() / len as f64);
        Ok(self.push(out, &[a], Op::Mean(a)))
    }

    /// Per-channel mean over `(n, h, w)`.
    pub fn channel_mean(&mut self, a: Var) -> Result<Var> {
        let out = channel_moments(self.value(a), false)?;
        Ok(self.push(out, &[a], Op::ChannelMean(a)))
    }

    /// Per-channel biased variance over `(n, h, w)`.
    pub fn channel_var(&mut self, a: Var) -> Result<Var> {
        let out = channel_moments(self.value(a), true)?;
        Ok(self.push(out, &[a], Op::ChannelVar(a)))
    }

    /// Per-(sample, channel) mean over `(h, w)`.
    pub fn instance_mean(&mut self, a: Var) -> Result<Var> {
        let out = instance_moments(self.value(a), false)?;
        Ok(self.push(out, &[a], Op::InstanceMean(a)))
    }

    /// Per-(sample, channel) biased variance over `(h, w)`.
    pub fn instance_var(&mut self, a: Var) -> Result<Var> {
        let out = instance_moments(self.value(a), true)?;
        Ok(self.push(out, &[a], Op::InstanceVar(a)))
    }

    /// Expands a `C` or `N x C` tensor over the axes of an `N x C x H x W` shape.
    pub fn broadcast_channels(&mut self, a: Var, like: &[usize]) -> Result<Var> {
        let [n, c, h, w] = *like else {
            return Err(Error::InvalidShape {
                op: "broadcast_channels",
                shape: like.to_vec(),
                expected: "rank 4 target",
            });
        };
        let layout = stat_layout("broadcast_channels", self.shape(a), n, c)?;
        let src = self.value(a).data();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * c * hw);
        for i in 0..n {
            for ch in 0..c {
                let v = match layout {
                    StatLayout::Channel => src[ch],
                    StatLayout::Instance => src[i * c + ch],
                };
                out.extend(std::iter::repeat_n(v, hw));
            }
        }
        Ok(self.push(Tensor::from_parts(like.to_vec(), out), &[a], Op::BroadcastChannels(a)))
    }

    // ---- normalization -----------------------------------------------------

    /// `gamma * (x - mu) / sqrt(var + eps) + beta` with per-channel `mu`, `var`,
    /// `gamma`, `beta`; differentiable in all five inputs.
    pub fn bn_transform(&mut self, x: Var, mu: Var, var: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("bn_transform")?;
        for v in [mu, var, gamma, beta] {
            if self.shape(v) != [c] {
                return Err(Error::ShapeMismatch {
                    op: "bn_transform",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(v).to_vec(),
                });
            }
        }
        let hw = h * w;
        let (xd, md, vd, gd, bd) = (
            self.value(x).data(),
            self.value(mu).data(),
            self.value(var).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let mut out = vec![0.0; n * c * hw];
        for i in 0..n {
            for ch in 0..c {
                let scale = gd[ch] / (vd[ch] + eps).sqrt();
                let off = (i * c + ch) * hw;
                for k in off..off + hw {
                    out[k] = scale * (xd[k] - md[ch]) + bd[ch];
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        Ok(self.push(
            value,
            &[x, mu, var, gamma, beta],
            Op::BnTransform { x, mu, var, gamma, beta, eps },
        ))
    }

    /// Re-normalization with shifted statistics:
    /// `x + dsigma * (x - mu) / sigma + dmu`, which equals
    /// `(sigma + dsigma) * (x - mu) / sigma + (mu + dmu)`.
    ///
    /// `mu`, `sigma`, `dmu`, `dsigma` are all `C` (batch statistics) or all
    /// `N x C` (instance statistics). Zero deltas return `x` bitwise.
    pub fn stat_shift(&mut self, x: Var, mu: Var, sigma: Var, dmu: Var, dsigma: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("stat_shift")?;
        let layout = stat_layout("stat_shift", self.shape(mu), n, c)?;
        for v in [sigma, dmu, dsigma] {
            if self.shape(v) != self.shape(mu) {
                return Err(Error::ShapeMismatch {
                    op: "stat_shift",
                    lhs: self.shape(mu).to_vec(),
                    rhs: self.shape(v).to_vec(),
                });
            }
        }
        let hw = h * w;
        let (xd, md, sd, dm, ds) = (
            self.value(x).data(),
            self.value(mu).data(),
            self.value(sigma).data(),
            self.value(dmu).data(),
            self.value(dsigma).data(),
        );
        let mut out = xd.to_vec();
        for i in 0..n {
            for ch in 0..c {
                let s = match layout {
                    StatLayout::Channel => ch,
                    StatLayout::Instance => i * c + ch,
                };
                let off = (i * c + ch) * hw;
                for v in &mut out[off..off + hw] {
                    *v = *v + ds[s] * (*v - md[s]) / sd[s] + dm[s];
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        Ok(self.push(
            value,
            &[x, mu, sigma, dmu, dsigma],
            Op::StatShift { x, mu, sigma, dmu, dsigma, layout },
        ))
    }

    // ---- classification heads ------------------------------------------------

    /// Row-wise softmax of an `N x K` tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2("softmax")?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(k) {
            softmax_in_place(row);
        }
        Ok(self.push(Tensor::from_parts(vec![n, k], out), &[a], Op::Softmax(a)))
    }

    /// Scales each row of an `N x D` tensor to unit Euclidean length.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.value(a).dims2("normalize_rows")?;
        let (hat, _) = unit_rows(self.value(a), "normalize_rows")?;
        Ok(self.push(Tensor::from_parts(vec![n, d], hat), &[a], Op::NormalizeRows(a)))
    }

    /// Cosine of the angle between every row of `a: N x D` and every row of
    /// `b: O x D`, giving `N x O`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.value(a).dims2("cosine_rows")?;
        let (o, d2) = self.value(b).dims2("cosine_rows")?;
        if d != d2 {
            return Err(Error::ShapeMismatch {
                op: "cosine_rows",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let (a_hat, a_norm) = unit_rows(self.value(a), "cosine_rows lhs")?;
        let (b_hat, b_norm) = unit_rows(self.value(b), "cosine_rows rhs")?;
        let mut out = vec![0.0; n * o];
        gemm(n, d, o, 1.0, &a_hat, false, &b_hat, true, 0.0, &mut out);
        Ok(self.push(
            Tensor::from_parts(vec![n, o], out),
            &[a, b],
            Op::CosineRows { a, b, a_hat, b_hat, a_norm, b_norm },
        ))
    }

    /// Mean negative log-softmax probability of the labelled class.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.value(logits).dims2("cross_entropy")?;
        check_labels(labels, n, k)?;
        if n == 0 {
            return Err(Error::EmptyReduction { op: "cross_entropy" });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for (row, (p, &y)) in self.value(logits).data().chunks(k).zip(probs.chunks_mut(k).zip(labels)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
            softmax_in_place(p);
        }
        let value = Tensor::scalar(total / n as f64);
        Ok(self.push(
            value,
            &[logits],
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
        ))
    }

    /// Replaces the labelled entry of each row of a cosine matrix with
    /// `cos(min(acos(c) + margin, pi))`; other entries pass through.
    pub fn arc_margin(&mut self, cos: Var, labels: &[usize], margin: f64) -> Result<Var> {
        let (n, k) = self.value(cos).dims2("arc_margin")?;
        check_labels(labels, n, k)?;
        let mut out = self.value(cos).data().to_vec();
        for (row, &y) in out.chunks_mut(k).zip(labels) {
            row[y] = margin_cos(row[y], margin);
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, k], out),
            &[cos],
            Op::ArcMargin { cos, labels: labels.to_vec(), margin },
        ))
    }

    /// Mean over rows of the Jensen-Shannon divergence between `p` and `q`
    /// (natural log). Rows must already be probability vectors.
    pub fn js_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        let (n, _) = self.value(p).dims2("js_divergence")?;
        self.value(p).expect_same_shape(self.value(q), "js_divergence")?;
        if n == 0 {
            return Err(Error::EmptyReduction { op: "js_divergence" });
        }
        let v = js_rows(self.value(p), self.value(q)).iter().sum::<f64>() / n as f64;
        Ok(self.push(Tensor::scalar(v), &[p, q], Op::JsDivergence { p, q }))
    }

    // ---- backward ------------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every gradient-requiring leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(shape.to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                add_into(&mut self.nodes[i].grad, g);
            } else {
                self.propagate(i, g, &mut grads);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, t: Tensor| {
            if self.nodes[v.0].requires_grad {
                add_into(&mut grads[v.0], t);
            }
        };
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &self.nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                send(*b, g.clone());
                send(*a, g);
            }
            Op::Sub(a, b) => {
                send(*b, g.map(|x| -x));
                send(*a, g);
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    send(*a, elementwise(&g, val(*b), |g, y| g * y));
                }
                if wants(*b) {
                    send(*b, elementwise(&g, val(*a), |g, x| g * x));
                }
            }
            Op::Div(a, b) => {
                if wants(*a) {
                    send(*a, elementwise(&g, val(*b), |g, y| g / y));
                }
                if wants(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let tmp = elementwise(&g, out, |g, o| g * o);
                    send(*b, elementwise(&tmp, val(*b), |t, y| -t / y));
                }
            }
            Op::Scale(a, k) => send(*a, g.map(|x| k * x)),
            Op::ReverseGrad(a) => send(*a, g.map(|x| -x)),
            Op::Relu(a) => send(*a, elementwise(&g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 })),
            Op::Exp(a) => send(*a, elementwise(&g, out, |g, y| g * y)),
            Op::Log(a) => send(*a, elementwise(&g, val(*a), |g, x| g / x)),
            Op::Sqrt(a) => send(*a, elementwise(&g, out, |g, y| 0.5 * g / y)),
            Op::ClampMin(a, lo) => send(*a, elementwise(&g, val(*a), |g, x| if x > *lo { g } else { 0.0 })),
            Op::StdFromVar(a, eps) => send(
                *a,
                elementwise(&g, val(*a), |g, v| {
                    let s = v.max(0.0).sqrt();
                    if s > *eps {
                        0.5 * g / s
                    } else {
                        0.0
                    }
                }),
            ),
            Op::Reshape(a) => {
                let shape = val(*a).shape().to_vec();
                send(*a, Tensor::from_parts(shape, g.into_data()));
            }
            Op::Matmul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g.data(), false, val(*b).data(), true, 0.0, &mut da);
                    send(*a, Tensor::from_parts(vec![m, k], da));
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, val(*a).data(), true, g.data(), false, 0.0, &mut db);
                    send(*b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Linear { x, w, b } => {
                let (n, d) = (val(*x).shape()[0], val(*x).shape()[1]);
                let o = val(*w).shape()[0];
                if wants(*x) {
                    let mut dx = vec![0.0; n * d];
                    gemm(n, o, d, 1.0, g.data(), false, val(*w).data(), false, 0.0, &mut dx);
                    send(*x, Tensor::from_parts(vec![n, d], dx));
                }
                if wants(*w) {
                    let mut dw = vec![0.0; o * d];
                    gemm(o, n, d, 1.0, g.data(), true, val(*x).data(), false, 0.0, &mut dw);
                    send(*w, Tensor::from_parts(vec![o, d], dw));
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; o];
                    for row in g.data().chunks(o) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    send(*b, Tensor::from_parts(vec![o], db));
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let n = val(*x).shape()[0];
                let o = val(*w).shape()[0];
                let (rows, ncol) = (geom.col_rows(), geom.col_cols());
                let chw = geom.channels * geom.height * geom.width;
                if wants(*w) {
                    let mut dw = vec![0.0; o * rows];
                    for s in 0..n {
                        gemm(
                            o,
                            ncol,
                            rows,
                            1.0,
                            &g.data()[s * o * ncol..(s + 1) * o * ncol],
                            false,
                            &cols[s * rows * ncol..(s + 1) * rows * ncol],
                            true,
                            1.0,
                            &mut dw,
                        );
                    }
                    send(*w, Tensor::from_parts(val(*w).shape().to_vec(), dw));
                }
                if wants(*x) {
                    let mut dx = vec![0.0; n * chw];
                    let mut dcol = vec![0.0; rows * ncol];
                    for s in 0..n {
                        gemm(
                            rows,
                            o,
                            ncol,
                            1.0,
                            val(*w).data(),
                            true,
                            &g.data()[s * o * ncol..(s + 1) * o * ncol],
                            false,
                            0.0,
                            &mut dcol,
                        );
                        col2im_add(&dcol, geom, &mut dx[s * chw..(s + 1) * chw]);
                    }
                    send(*x, Tensor::from_parts(val(*x).shape().to_vec(), dx));
                }
            }
            Op::AvgPool2(a) => {
                let shape = val(*a).shape().to_vec();
                let (h, w) = (shape[2], shape[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; val(*a).len()];
                for (p, gp) in g.data().chunks(oh * ow).enumerate() {
                    let plane = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..oh {
                        for x in 0..ow {
                            let v = 0.25 * gp[y * ow + x];
                            plane[2 * y * w + 2 * x] = v;
                            plane[2 * y * w + 2 * x + 1] = v;
                            plane[(2 * y + 1) * w + 2 * x] = v;
                            plane[(2 * y + 1) * w + 2 * x + 1] = v;
                        }
                    }
                }
                send(*a, Tensor::from_parts(shape, dx));
            }
            Op::GlobalAvgPool(a) => {
                let shape = val(*a).shape().to_vec();
                let hw = shape[2] * shape[3];
                let mut dx = Vec::with_capacity(val(*a).len());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv / hw as f64, hw));
                }
                send(*a, Tensor::from_parts(shape, dx));
            }
            Op::Sum(a) => send(*a, Tensor::full(val(*a).shape().to_vec(), g.item())),
            Op::Mean(a) => {
                let len = val(*a).len() as f64;
                send(*a, Tensor::full(val(*a).shape().to_vec(), g.item() / len));
            }
            Op::ChannelMean(a) | Op::ChannelVar(a) | Op::InstanceMean(a) | Op::InstanceVar(a) => {
                let x = val(*a);
                let (n, c, h, w) = x.dims4("moments").expect("checked in forward");
                let hw = h * w;
                let instance = matches!(self.nodes[i].op, Op::InstanceMean(_) | Op::InstanceVar(_));
                let variance = matches!(self.nodes[i].op, Op::ChannelVar(_) | Op::InstanceVar(_));
                let count = if instance { hw } else { n * hw } as f64;
                let means = if variance {
                    if instance {
                        instance_moments(x, false).expect("checked in forward")
                    } else {
                        channel_moments(x, false).expect("checked in forward")
                    }
                } else {
                    Tensor::scalar(0.0)
                };
                let mut dx = vec![0.0; x.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let k = if instance { s * c + ch } else { ch };
                        let gk = g.data()[k];
                        let off = (s * c + ch) * hw;
                        if variance {
                            let m = means.data()[k];
                            for j in off..off + hw {
                                dx[j] = gk * 2.0 * (x.data()[j] - m) / count;
                            }
                        } else {
                            dx[off..off + hw].fill(gk / count);
                        }
                    }
                }
                send(*a, Tensor::from_parts(x.shape().to_vec(), dx));
            }
            Op::BroadcastChannels(a) => {
                let src_shape = val(*a).shape().to_vec();
                let [n, c, h, w] = out.shape()[..] else { unreachable!() };
                let hw = h * w;
                let mut da = vec![0.0; val(*a).len()];
                for s in 0..n {
                    for ch in 0..c {
                        let k = if src_shape.len() == 1 { ch } else { s * c + ch };
                        let off = (s * c + ch) * hw;
                        da[k] += g.data()[off..off + hw].iter().sum::<f64>();
                    }
                }
                send(*a, Tensor::from_parts(src_shape, da));
            }
            Op::BnTransform { x, mu, var, gamma, beta, eps } => {
                let xv = val(*x);
                let [n, c, h, w] = xv.shape()[..] else { unreachable!() };
                let hw = h * w;
                let (md, vd, gd) = (val(*mu).data(), val(*var).data(), val(*gamma).data());
                let mut dx = vec![0.0; xv.len()];
                let (mut dmu, mut dvar, mut dgamma, mut dbeta) =
                    (vec![0.0; c], vec![0.0; c], vec![0.0; c], vec![0.0; c]);
                for s in 0..n {
                    for ch in 0..c {
                        let inv = 1.0 / (vd[ch] + eps).sqrt();
                        let off = (s * c + ch) * hw;
                        for j in off..off + hw {
                            let gj = g.data()[j];
                            let centered = xv.data()[j] - md[ch];
                            dx[j] = gj * gd[ch] * inv;
                            dmu[ch] -= gj * gd[ch] * inv;
                            dvar[ch] -= 0.5 * gj * gd[ch] * centered * inv * inv * inv;
                            dgamma[ch] += gj * centered * inv;
                            dbeta[ch] += gj;
                        }
                    }
                }
                send(*x, Tensor::from_parts(xv.shape().to_vec(), dx));
                send(*mu, Tensor::from_parts(vec![c], dmu));
                send(*var, Tensor::from_parts(vec![c], dvar));
                send(*gamma, Tensor::from_parts(vec![c], dgamma));
                send(*beta, Tensor::from_parts(vec![c], dbeta));
            }
            Op::StatShift { x, mu, sigma, dmu, dsigma, layout } => {
                let xv = val(*x);
                let [n, c, h, w] = xv.shape()[..] else { unreachable!() };
                let hw = h * w;
                let (md, sd, ds) = (val(*mu).data(), val(*sigma).data(), val(*dsigma).data());
                let stat_len = md.len();
                let mut dx = vec![0.0; xv.len()];
                let (mut gmu, mut gsigma, mut gdmu, mut gdsigma) = (
                    vec![0.0; stat_len],
                    vec![0.0; stat_len],
                    vec![0.0; stat_len],
                    vec![0.0; stat_len],
                );
                for s in 0..n {
                    for ch in 0..c {
                        let k = match layout {
                            StatLayout::Channel => ch,
                            StatLayout::Instance => s * c + ch,
                        };
                        let ratio = ds[k] / sd[k];
                        let off = (s * c + ch) * hw;
                        for j in off..off + hw {
                            let gj = g.data()[j];
                            let z = (xv.data()[j] - md[k]) / sd[k];
                            dx[j] = gj * (1.0 + ratio);
                            gmu[k] -= gj * ratio;
                            gsigma[k] -= gj * ratio * z;
                            gdmu[k] += gj;
                            gdsigma[k] += gj * z;
                        }
                    }
                }
                let stat_shape = val(*mu).shape().to_vec();
                send(*x, Tensor::from_parts(xv.shape().to_vec(), dx));
                send(*mu, Tensor::from_parts(stat_shape.clone(), gmu));
                send(*sigma, Tensor::from_parts(stat_shape.clone(), gsigma));
                send(*dmu, Tensor::from_parts(stat_shape.clone(), gdmu));
                send(*dsigma, Tensor::from_parts(stat_shape, gdsigma));
            }
            Op::Softmax(a) => {
                let k = out.shape()[1];
                let mut dx = vec![0.0; out.len()];
                for ((y, gr), d) in out.data().chunks(k).zip(g.data().chunks(k)).zip(dx.chunks_mut(k)) {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        d[j] = y[j] * (gr[j] - dot);
                    }
                }
                send(*a, Tensor::from_parts(out.shape().to_vec(), dx));
            }
            Op::NormalizeRows(a) => {
                let d = out.shape()[1];
                let mut dx = vec![0.0; out.len()];
                for ((xr, (yr, gr)), dr) in val(*a)
                    .data()
                    .chunks(d)
                    .zip(out.data().chunks(d).zip(g.data().chunks(d)))
                    .zip(dx.chunks_mut(d))
                {
                    unit_row_backward(xr, yr, gr, dr);
                }
                send(*a, Tensor::from_parts(out.shape().to_vec(), dx));
            }
            Op::CosineRows { a, b, a_hat, b_hat, a_norm, b_norm } => {
                let (n, d) = (val(*a).shape()[0], val(*a).shape()[1]);
                let o = val(*b).shape()[0];
                if wants(*a) {
                    let mut dhat = vec![0.0; n * d];
                    gemm(n, o, d, 1.0, g.data(), false, b_hat, false, 0.0, &mut dhat);
                    send(*a, Tensor::from_parts(vec![n, d], through_unit_rows(a_hat, a_norm, &dhat, d)));
                }
                if wants(*b) {
                    let mut dhat = vec![0.0; o * d];
                    gemm(o, n, d, 1.0, g.data(), true, a_hat, false, 0.0, &mut dhat);
                    send(*b, Tensor::from_parts(vec![o, d], through_unit_rows(b_hat, b_norm, &dhat, d)));
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = val(*logits).shape()[1];
                let scale = g.item() / labels.len() as f64;
                let mut dz = probs.clone();
                for (row, &y) in dz.chunks_mut(k).zip(labels) {
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                send(*logits, Tensor::from_parts(val(*logits).shape().to_vec(), dz));
            }
            Op::ArcMargin { cos, labels, margin } => {
                let k = out.shape()[1];
                let mut dc = g.into_data();
                let cv = val(*cos).data();
                for (r, &y) in labels.iter().enumerate() {
                    let idx = r * k + y;
                    dc[idx] *= margin_cos_derivative(cv[idx], *margin);
                }
                send(*cos, Tensor::from_parts(out.shape().to_vec(), dc));
            }
            Op::JsDivergence { p, q } => {
                let n = val(*p).shape()[0] as f64;
                let scale = g.item() / n;
                let (pd, qd) = (val(*p).data(), val(*q).data());
                let half_log_ratio = |a: f64, b: f64| {
                    let m = 0.5 * (a + b);
                    if a > 0.0 {
                        0.5 * scale * (a / m).ln()
                    } else {
                        0.0
                    }
                };
                if wants(*p) {
                    let dp = pd.iter().zip(qd).map(|(&a, &b)| half_log_ratio(a, b)).collect();
                    send(*p, Tensor::from_parts(val(*p).shape().to_vec(), dp));
                }
                if wants(*q) {
                    let dq = qd.iter().zip(pd).map(|(&b, &a)| half_log_ratio(b, a)).collect();
                    send(*q, Tensor::from_parts(val(*q).shape().to_vec(), dq));
                }
            }
        }
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn stat_layout(op: &'static str, shape: &[usize], n: usize, c: usize) -> Result<StatLayout> {
    if shape == [c] {
        Ok(StatLayout::Channel)
    } else if shape == [n, c] {
        Ok(StatLayout::Instance)
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: vec![n, c],
            rhs: shape.to_vec(),
        })
    }
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "labels",
            lhs: vec![n],
            rhs: vec![labels.len()],
        });
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &y)| y >= k) {
        return Err(Error::LabelOutOfRange {
            index,
            label,
            classes: k,
        });
    }
    Ok(())
}

/// Per-channel mean (or biased variance) over `(n, h, w)`, two-pass.
pub(crate) fn channel_moments(x: &Tensor, variance: bool) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("channel_moments")?;
    let hw = h * w;
    if n * hw == 0 {
        return Err(Error::EmptyReduction { op: "channel_moments" });
    }
    let count = (n * hw) as f64;
    let d = x.data();
    let mut mean = vec![0.0; c];
    for s in 0..n {
        for (ch, m) in mean.iter_mut().enumerate() {
            let off = (s * c + ch) * hw;
            *m += d[off..off + hw].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    if !variance {
        return Ok(Tensor::from_parts(vec![c], mean));
    }
    let mut var = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * hw;
            var[ch] += d[off..off + hw].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    Ok(Tensor::from_parts(vec![c], var))
}

/// Per-(sample, channel) mean (or biased variance) over `(h, w)`, two-pass.
pub(crate) fn instance_moments(x: &Tensor, variance: bool) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("instance_moments")?;
    let hw = h * w;
    if hw == 0 {
        return Err(Error::EmptyReduction { op: "instance_moments" });
    }
    let out = x
        .data()
        .chunks(hw)
        .map(|p| {
            let m = p.iter().sum::<f64>() / hw as f64;
            if variance {
                p.iter().map(|v| (v - m).powi(2)).sum::<f64>() / hw as f64
            } else {
                m
            }
        })
        .collect();
    Ok(Tensor::from_parts(vec![n, c], out))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn unit_rows(t: &Tensor, which: &'static str) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = t.shape()[1];
    let mut hat = t.data().to_vec();
    let mut norms = Vec::with_capacity(t.shape()[0]);
    for (row, r) in hat.chunks_mut(d.max(1)).enumerate() {
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroNormRow { which, row });
        }
        r.iter_mut().for_each(|v| *v /= norm);
        norms.push(norm);
    }
    Ok((hat, norms))
}

fn unit_row_backward(x: &[f64], y: &[f64], g: &[f64], out: &mut [f64]) {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    for j in 0..x.len() {
        out[j] = (g[j] - y[j] * dot) / norm;
    }
}

fn through_unit_rows(hat: &[f64], norms: &[f64], dhat: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; hat.len()];
    for (r, norm) in norms.iter().enumerate() {
        let y = &hat[r * d..(r + 1) * d];
        let g = &dhat[r * d..(r + 1) * d];
        let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
        for j in 0..d {
            out[r * d + j] = (g[j] - y[j] * dot) / norm;
        }
    }
    out
}

/// `cos(min(acos(c) + m, pi))` with `c` clamped away from +-1.
pub fn margin_cos(c: f64, margin: f64) -> f64 {
    let clamped = c.clamp(-1.0 + COS_CLAMP, 1.0 - COS_CLAMP);
    (clamped.acos() + margin).min(std::f64::consts::PI).cos()
}

fn margin_cos_derivative(c: f64, margin: f64) -> f64 {
    if c <= -1.0 + COS_CLAMP || c >= 1.0 - COS_CLAMP {
        return 0.0;
    }
    let phi = c.acos();
    if phi + margin >= std::f64::consts::PI {
        return 0.0;
    }
    (phi + margin).sin() / phi.sin()
}

/// Per-row `0.5 KL(p||m) + 0.5 KL(q||m)` with `m = (p + q) / 2` and `0 log 0 = 0`.
pub(crate) fn js_rows(p: &Tensor, q: &Tensor) -> Vec<f64> {
    let k = p.shape()[1];
    let term = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    p.data()
        .chunks(k)
        .zip(q.data().chunks(k))
        .map(|(pr, qr)| {
            pr.iter()
                .zip(qr)
                .map(|(&a, &b)| {
                    let m = 0.5 * (a + b);
                    0.5 * term(a, m) + 0.5 * term(b, m)
                })
                .sum()
        })
        .collect()
}
