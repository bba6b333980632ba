//! Feature-statistics machinery: batch and instance moments, the normalizing
//! transform, AdaIN-style re-normalization and gradient reversal.
//!
//! Variances are biased (divide by the element count). Standard deviations
//! used as denominators are clamped below at [`STAT_EPS`].

use crate::error::{Error, Result};
use crate::graph::{channel_moments, instance_moments, Graph, Var};
use crate::nn::Backbone;
use crate::tensor::Tensor;

/// Stabilizer inside `sqrt(var + eps)` and lower clamp for standard deviations.
pub const STAT_EPS: f64 = 1e-5;

/// Per-channel mean and (biased) variance of a feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
}

impl BatchStats {
    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.sigma2.iter().map(|v| v.max(0.0).sqrt()).collect()
    }
}

/// Learnable per-channel scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl AffineParams {
    pub fn identity(channels: usize) -> Self {
        AffineParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
        }
    }
}

pub fn batch_channel_stats(x: &Tensor) -> Result<BatchStats> {
    Ok(BatchStats {
        mu: channel_moments(x, false)?.into_data(),
        sigma2: channel_moments(x, true)?.into_data(),
    })
}

/// Differentiable `(mu, sigma2)` of a feature map on the graph.
pub fn batch_channel_stats_on(g: &mut Graph, x: Var) -> Result<(Var, Var)> {
    Ok((g.channel_mean(x)?, g.channel_var(x)?))
}

/// Per-(sample, channel) mean and variance, each `N x C`.
pub fn instance_channel_stats(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, _, h, w) = x.dims4("instance_channel_stats")?;
    if h * w == 0 {
        return Err(Error::EmptyReduction {
            op: "instance_channel_stats",
        });
    }
    Ok((instance_moments(x, false)?, instance_moments(x, true)?))
}

/// `gamma * (x - mu) / sqrt(sigma2 + eps) + beta` on plain values.
pub fn bn_transform(x: &Tensor, stats: &BatchStats, affine: &AffineParams, eps: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let c = x.dims4("bn_transform")?.1;
    if stats.channels() != c || affine.gamma.len() != c || affine.beta.len() != c {
        return Err(Error::ShapeMismatch {
            op: "bn_transform",
            lhs: x.shape().to_vec(),
            rhs: vec![stats.channels(), affine.gamma.len(), affine.beta.len()],
        });
    }
    let xv = g.constant(x.clone());
    let mu = g.constant(Tensor::from_vec(stats.mu.clone()));
    let var = g.constant(Tensor::from_vec(stats.sigma2.clone()));
    let gamma = g.constant(Tensor::from_vec(affine.gamma.clone()));
    let beta = g.constant(Tensor::from_vec(affine.beta.clone()));
    let out = g.bn_transform(xv, mu, var, gamma, beta, eps)?;
    Ok(g.value(out).clone())
}

/// AdaIN-style re-normalization with instance statistics:
/// `(sigma_nc + dsigma) * (x - mu_nc) / sigma_nc + (mu_nc + dmu)`.
///
/// `dmu` and `dsigma` are `N x C`. Instance standard deviations below
/// [`STAT_EPS`] are clamped to it.
pub fn adain_renormalize_on(g: &mut Graph, x: Var, dmu: Var, dsigma: Var) -> Result<Var> {
    let mu = g.instance_mean(x)?;
    let var = g.instance_var(x)?;
    let sigma = g.std_from_var(var, STAT_EPS);
    g.stat_shift(x, mu, sigma, dmu, dsigma)
}

pub fn adain_renormalize(x: &Tensor, delta_mu: &Tensor, delta_sigma: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let dm = g.constant(delta_mu.clone());
    let ds = g.constant(delta_sigma.clone());
    let out = adain_renormalize_on(&mut g, xv, dm, ds)?;
    Ok(g.value(out).clone())
}

/// Identity forward; the gradient arriving at the output is negated.
pub fn gradient_reversal(g: &mut Graph, x: Var) -> Var {
    g.reverse_grad(x)
}

/// Outcome of an AdaBN recalibration.
#[derive(Clone, Debug, Default)]
pub struct Recalibration {
    pub samples: usize,
    pub warnings: Vec<String>,
}

/// Replaces every BN layer's running statistics with the statistics of the
/// concatenated test stream. Classifier weights are left untouched.
pub fn adabn_recalibrate(model: &mut Backbone, stream: &[Tensor]) -> Result<Recalibration> {
    let parts: Vec<&Tensor> = stream.iter().collect();
    let images = Tensor::concat_rows(&parts)?;
    let samples = images.shape().first().copied().unwrap_or(0);
    if samples == 0 {
        return Err(Error::EmptyReduction { op: "adabn_recalibrate" });
    }
    let mut warnings = Vec::new();
    if samples < 2 {
        let msg = format!("recalibrating on {samples} sample; variance is ill-estimated");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let stats = model.batch_statistics(&images)?;
    model.set_running_stats(&stats)?;
    Ok(Recalibration { samples, warnings })
}
