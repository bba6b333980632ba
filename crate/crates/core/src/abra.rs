//! Adversarial batch representation augmentation.
//!
//! An [`UncertaintySite`] holds per-channel magnitudes `K_mu`, `K_sigma` and the
//! current standard-normal draws. The perturbed feature map is
//!
//! ```text
//! X_t = (sigma_c + eps_sigma * K_sigma) * (X - mu_c) / sigma_c + (mu_c + eps_mu * K_mu)
//! ```
//!
//! with `mu_c`, `sigma_c` the batch statistics of `X`. The magnitudes are pushed
//! toward the worst case by gradient ascent on the adversarial objective while
//! the network weights stay frozen.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{adversarial_objective_on, LossConfig};
use crate::nn::{Backbone, BnMode, Bound, Checkpoint, InsertionSite};
use crate::stats::STAT_EPS;
use crate::tensor::Tensor;

/// Source of standard-normal draws.
pub trait GaussianSource {
    fn standard_normal(&mut self) -> f64;
}

impl<R: Rng + ?Sized> GaussianSource for R {
    fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(self)
    }
}

/// Always returns zero. Useful to switch the perturbation off.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroNoise;

impl GaussianSource for ZeroNoise {
    fn standard_normal(&mut self) -> f64 {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintySite {
    pub site: InsertionSite,
    pub k_mu: Vec<f64>,
    pub k_sigma: Vec<f64>,
    pub eps_mu: Vec<f64>,
    pub eps_sigma: Vec<f64>,
}

impl UncertaintySite {
    /// Zero magnitudes and zero noise: the transform starts as the identity.
    pub fn new(site: InsertionSite, channels: usize) -> Self {
        UncertaintySite {
            site,
            k_mu: vec![0.0; channels],
            k_sigma: vec![0.0; channels],
            eps_mu: vec![0.0; channels],
            eps_sigma: vec![0.0; channels],
        }
    }

    /// One site per requested insertion point, sized to the hosting block.
    pub fn for_model(model: &Backbone, sites: &[InsertionSite]) -> Vec<Self> {
        let mut sites = sites.to_vec();
        sites.sort();
        sites.dedup();
        sites
            .into_iter()
            .map(|s| UncertaintySite::new(s, model.config().blocks[s.0].out_channels))
            .collect()
    }

    pub fn channels(&self) -> usize {
        self.k_mu.len()
    }

    pub fn delta_mu(&self) -> Vec<f64> {
        self.eps_mu.iter().zip(&self.k_mu).map(|(e, k)| e * k).collect()
    }

    pub fn delta_sigma(&self) -> Vec<f64> {
        self.eps_sigma.iter().zip(&self.k_sigma).map(|(e, k)| e * k).collect()
    }

    pub fn k_norm(&self) -> f64 {
        self.k_mu.iter().chain(&self.k_sigma).map(|v| v * v).sum::<f64>().sqrt()
    }

    fn tensor_names(&self) -> [String; 2] {
        let i = self.site.0;
        [format!("abra.site{i}.k_mu"), format!("abra.site{i}.k_sigma")]
    }

    pub fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        let [m, s] = self.tensor_names();
        vec![
            (m, Tensor::from_vec(self.k_mu.clone())),
            (s, Tensor::from_vec(self.k_sigma.clone())),
        ]
    }

    /// Restores `K` from a checkpoint if present. Returns whether it was found.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<bool> {
        let [m, s] = self.tensor_names();
        match (ck.get(&m), ck.get(&s)) {
            (Some(km), Some(ks)) => {
                if km.len() != self.channels() || ks.len() != self.channels() {
                    return Err(Error::ShapeMismatch {
                        op: "restore uncertainty site",
                        lhs: vec![self.channels()],
                        rhs: vec![km.len(), ks.len()],
                    });
                }
                self.k_mu = km.data().to_vec();
                self.k_sigma = ks.data().to_vec();
                Ok(true)
            }
            _ => Ok(false),
        }
    }
}

/// Overwrites both noise vectors of `site` with fresh standard-normal draws.
pub fn sample_noise<G: GaussianSource + ?Sized>(site: &mut UncertaintySite, src: &mut G) {
    for v in site.eps_mu.iter_mut() {
        *v = src.standard_normal();
    }
    for v in site.eps_sigma.iter_mut() {
        *v = src.standard_normal();
    }
}

/// Perturbed transform on the graph; `k_mu` and `k_sigma` are `[C]` nodes.
pub fn abra_transform_on(
    g: &mut Graph,
    x: Var,
    k_mu: Var,
    k_sigma: Var,
    eps_mu: &[f64],
    eps_sigma: &[f64],
) -> Result<Var> {
    let mu = g.channel_mean(x)?;
    let var = g.channel_var(x)?;
    let sigma = g.std_from_var(var, STAT_EPS);
    let em = g.constant(Tensor::from_vec(eps_mu.to_vec()));
    let es = g.constant(Tensor::from_vec(eps_sigma.to_vec()));
    let dmu = g.mul(em, k_mu)?;
    let dsigma = g.mul(es, k_sigma)?;
    g.stat_shift(x, mu, sigma, dmu, dsigma)
}

pub fn abra_transform(x: &Tensor, site: &UncertaintySite) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let km = g.constant(Tensor::from_vec(site.k_mu.clone()));
    let ks = g.constant(Tensor::from_vec(site.k_sigma.clone()));
    let out = abra_transform_on(&mut g, xv, km, ks, &site.eps_mu, &site.eps_sigma)?;
    Ok(g.value(out).clone())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdvOptState {
    /// Ascent step size.
    pub alpha: f64,
    /// Ascent steps per training iteration.
    pub steps: usize,
}

impl Default for AdvOptState {
    fn default() -> Self {
        AdvOptState { alpha: 1e-3, steps: 1 }
    }
}

impl AdvOptState {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", format!("{} must be a finite non-negative step", self.alpha)));
        }
        if self.steps == 0 {
            return Err(Error::config("ascent_steps", "must be >= 1"));
        }
        Ok(())
    }
}

/// Objective values seen during one ascent call, each recorded before the
/// update it drives.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AscentTrace {
    pub losses: Vec<f64>,
    /// Set when a non-finite objective stopped the ascent and `K` was reset.
    pub aborted: bool,
}

/// Gradient ascent on leaf vectors `ks`: `k <- k + alpha * dL/dk`, `steps` times.
///
/// `loss` builds the objective from one leaf per vector. If the objective or an
/// update turns non-finite, or an embedding row collapses to zero, every vector
/// is restored to its value on entry.
pub fn gradient_ascent<F>(ks: &mut [Vec<f64>], alpha: f64, steps: usize, mut loss: F) -> Result<AscentTrace>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let initial: Vec<Vec<f64>> = ks.to_vec();
    let mut trace = AscentTrace::default();
    for _ in 0..steps {
        let mut g = Graph::new();
        let vars: Vec<Var> = ks.iter().map(|k| g.param(Tensor::from_vec(k.clone()))).collect();
        let l = match loss(&mut g, &vars) {
            Err(Error::ZeroNormRow { .. }) => {
                ks.clone_from_slice(&initial);
                trace.losses.push(f64::NAN);
                trace.aborted = true;
                break;
            }
            other => other?,
        };
        let value = g.value(l).item();
        trace.losses.push(value);
        if !value.is_finite() {
            ks.clone_from_slice(&initial);
            trace.aborted = true;
            break;
        }
        g.backward(l)?;
        for (k, &v) in ks.iter_mut().zip(&vars) {
            if let Some(grad) = g.grad(v) {
                for (a, d) in k.iter_mut().zip(grad.data()) {
                    *a += alpha * d;
                }
            }
        }
        if ks.iter().flatten().any(|v| !v.is_finite()) {
            ks.clone_from_slice(&initial);
            trace.aborted = true;
            break;
        }
    }
    Ok(trace)
}

/// Blocks `first + 1 ..` and the head applied to `features`, the output of
/// block `first`, with every site in `sites` perturbed by the matching pair in
/// `ks` (`[k_mu, k_sigma]` per site).
pub(crate) fn perturbed_tail(
    model: &Backbone,
    g: &mut Graph,
    p: &Bound,
    features: Var,
    sites: &[UncertaintySite],
    ks: &[Var],
) -> Result<crate::nn::HeadOutput> {
    let first = sites.first().map_or(0, |s| s.site.0);
    let apply = |g: &mut Graph, idx: usize, x: Var| -> Result<Var> {
        let s = &sites[idx];
        abra_transform_on(g, x, ks[2 * idx], ks[2 * idx + 1], &s.eps_mu, &s.eps_sigma)
    };
    let mut x = apply(g, 0, features)?;
    let mut unused = Vec::new();
    for i in first + 1..model.num_blocks() {
        x = model.run_blocks(g, p, x, i..i + 1, BnMode::Batch, &mut unused)?;
        if let Some(idx) = sites.iter().position(|s| s.site.0 == i) {
            x = apply(g, idx, x)?;
        }
    }
    model.head(g, p, x)
}

/// Network input up to and including block `last`, with frozen weights.
pub(crate) fn frozen_trunk(model: &Backbone, images: &Tensor, last: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let x = g.constant(images.clone());
    let out = model.run_blocks(&mut g, &p, x, 0..last + 1, BnMode::Batch, &mut Vec::new())?;
    Ok(g.value(out).clone())
}

/// Ascent on the `K` vectors of `sites` starting from the output of the first
/// site's block. The network weights enter the graph as constants.
pub fn ascent_from_features(
    model: &Backbone,
    sites: &mut [UncertaintySite],
    features: &Tensor,
    labels: &[usize],
    cfg: &LossConfig,
    opt: &AdvOptState,
) -> Result<AscentTrace> {
    opt.validate()?;
    if sites.is_empty() {
        return Err(Error::config("sites", "at least one insertion site is required"));
    }
    sites.sort_by_key(|s| s.site);
    let mut ks: Vec<Vec<f64>> = sites
        .iter()
        .flat_map(|s| [s.k_mu.clone(), s.k_sigma.clone()])
        .collect();
    let frozen: &[UncertaintySite] = sites;
    let trace = gradient_ascent(&mut ks, opt.alpha, opt.steps, |g, vars| {
        let p = model.params.bind(g, false);
        let x = g.constant(features.clone());
        let head = perturbed_tail(model, g, &p, x, frozen, vars)?;
        let cosphi = model.class_cosines(g, &p, head.embedding)?;
        adversarial_objective_on(g, head.logits, cosphi, labels, cfg)
    })?;
    for (s, pair) in sites.iter_mut().zip(ks.chunks(2)) {
        s.k_mu.clone_from(&pair[0]);
        s.k_sigma.clone_from(&pair[1]);
    }
    Ok(trace)
}

/// Phase-1 worst-case exploration on one mini-batch: `K <- K + alpha * dL_adv/dK`
/// for `opt.steps` steps with the current noise held fixed and `theta` frozen.
pub fn adversarial_ascent(
    sites: &mut [UncertaintySite],
    images: &Tensor,
    labels: &[usize],
    model: &Backbone,
    cfg: &LossConfig,
    opt: &AdvOptState,
) -> Result<AscentTrace> {
    let first = sites
        .iter()
        .map(|s| s.site.0)
        .min()
        .ok_or_else(|| Error::config("sites", "at least one insertion site is required"))?;
    let features = frozen_trunk(model, images, first)?;
    ascent_from_features(model, sites, &features, labels, cfg, opt)
}
