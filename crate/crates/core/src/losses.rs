//! Hybrid objective: cross-entropy, additive angular margin (ArcFace), their
//! convex mix, and the Jensen-Shannon alignment term.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Row sums of a probability matrix must be within this of 1.
pub const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of cross-entropy; ArcFace gets `1 - lambda`.
    pub lambda: f64,
    /// Additive angular margin in radians.
    pub margin: f64,
    /// Scale applied to cosines before the softmax.
    pub scale: f64,
    /// Coefficient of the JS term in the robust objective.
    pub js_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.5,
            margin: 0.2,
            scale: 16.0,
            js_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("lambda", format!("{} not in [0, 1]", self.lambda)));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::config("margin", format!("{} not in [0, pi/2)", self.margin)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::config("scale", format!("{} must be positive", self.scale)));
        }
        if !(self.js_weight >= 0.0 && self.js_weight.is_finite()) {
            return Err(Error::config("js_weight", format!("{} must be non-negative", self.js_weight)));
        }
        Ok(())
    }
}

pub fn arcface_loss_on(g: &mut Graph, cosphi: Var, labels: &[usize], cfg: &LossConfig) -> Result<Var> {
    let shifted = g.arc_margin(cosphi, labels, cfg.margin)?;
    let logits = g.scale(shifted, cfg.scale);
    g.cross_entropy(logits, labels)
}

/// `lambda * CE(logits) + (1 - lambda) * Arc(cosphi)`.
pub fn adversarial_objective_on(
    g: &mut Graph,
    logits: Var,
    cosphi: Var,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    let ce = g.cross_entropy(logits, labels)?;
    let arc = arcface_loss_on(g, cosphi, labels, cfg)?;
    let ce = g.scale(ce, cfg.lambda);
    let arc = g.scale(arc, 1.0 - cfg.lambda);
    g.add(ce, arc)
}

fn check_simplex(t: &Tensor, which: &'static str) -> Result<()> {
    let (_, k) = t.dims2("js_divergence")?;
    for (row, r) in t.data().chunks(k.max(1)).enumerate() {
        let sum: f64 = r.iter().sum();
        if r.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::NotADistribution { which, row, sum });
        }
    }
    Ok(())
}

pub fn js_divergence_on(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    check_simplex(g.value(p), "p")?;
    check_simplex(g.value(q), "q")?;
    g.js_divergence(p, q)
}

/// Logits and cosine matrix produced by one pass of the classifier.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub logits: Var,
    pub cosphi: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct RobustTerms {
    pub total: Var,
    pub supervised: Var,
    pub js: Var,
}

/// Supervised mix averaged over the clean and perturbed rows (equal weight),
/// plus `js_weight * JS(softmax(clean), softmax(perturbed))`.
pub fn robust_objective_on(
    g: &mut Graph,
    clean: HeadOutputs,
    perturbed: HeadOutputs,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<RobustTerms> {
    let lc = adversarial_objective_on(g, clean.logits, clean.cosphi, labels, cfg)?;
    let lp = adversarial_objective_on(g, perturbed.logits, perturbed.cosphi, labels, cfg)?;
    let both = g.add(lc, lp)?;
    let supervised = g.scale(both, 0.5);
    let p = g.softmax(clean.logits)?;
    let q = g.softmax(perturbed.logits)?;
    let js = js_divergence_on(g, p, q)?;
    let weighted = g.scale(js, cfg.js_weight);
    let total = g.add(supervised, weighted)?;
    Ok(RobustTerms { total, supervised, js })
}

// ---- value-level entry points ------------------------------------------------

fn eval(f: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let out = f(&mut g)?;
    Ok(g.value(out).item())
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    eval(|g| {
        let z = g.constant(logits.clone());
        g.cross_entropy(z, labels)
    })
}

pub fn arcface_loss(cosphi: &Tensor, labels: &[usize], cfg: &LossConfig) -> Result<f64> {
    eval(|g| {
        let c = g.constant(cosphi.clone());
        arcface_loss_on(g, c, labels, cfg)
    })
}

pub fn adversarial_objective(logits: &Tensor, cosphi: &Tensor, labels: &[usize], cfg: &LossConfig) -> Result<f64> {
    eval(|g| {
        let z = g.constant(logits.clone());
        let c = g.constant(cosphi.clone());
        adversarial_objective_on(g, z, c, labels, cfg)
    })
}

pub fn js_divergence(p: &Tensor, q: &Tensor) -> Result<f64> {
    eval(|g| {
        let pv = g.constant(p.clone());
        let qv = g.constant(q.clone());
        js_divergence_on(g, pv, qv)
    })
}

/// Value of the robust objective for `(logits, cosphi)` pairs.
pub fn robust_objective(
    clean: (&Tensor, &Tensor),
    perturbed: (&Tensor, &Tensor),
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<f64> {
    eval(|g| {
        let c = HeadOutputs {
            logits: g.constant(clean.0.clone()),
            cosphi: g.constant(clean.1.clone()),
        };
        let p = HeadOutputs {
            logits: g.constant(perturbed.0.clone()),
            cosphi: g.constant(perturbed.1.clone()),
        };
        Ok(robust_objective_on(g, c, p, labels, cfg)?.total)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let l = cross_entropy(&Tensor::full(vec![3, 4], 0.7), &[0, 1, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logit_gives_vanishing_loss() {
        let l = cross_entropy(&t(&[1, 3], &[50.0, 0.0, 0.0]), &[0]).unwrap();
        assert!(l < 1e-20, "{l}");
    }

    #[test]
    fn out_of_range_label_is_rejected_with_index() {
        let err = cross_entropy(&Tensor::zeros(vec![2, 3]), &[0, 3]).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { index: 1, label: 3, classes: 3 }));
    }

    #[test]
    fn arcface_hand_evaluation() {
        let cfg = LossConfig {
            scale: 1.0,
            margin: 0.0,
            ..LossConfig::default()
        };
        let l = arcface_loss(&t(&[1, 2], &[1.0, 0.0]), &[0], &cfg).unwrap();
        let e = std::f64::consts::E;
        assert!((l - (-(e / (e + 1.0)).ln())).abs() < 1e-6, "{l}");
        assert!((l - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn objective_endpoints_and_midpoint() {
        let mut rng = substream(11, "test");
        let z = Tensor::randn(vec![4, 3], 1.0, &mut rng);
        let c = Tensor::uniform(vec![4, 3], -0.9, 0.9, &mut rng);
        let y = [0, 2, 1, 1];
        let base = LossConfig::default();
        let ce = cross_entropy(&z, &y).unwrap();
        let arc = arcface_loss(&c, &y, &base).unwrap();
        let at = |lambda| adversarial_objective(&z, &c, &y, &LossConfig { lambda, ..base }).unwrap();
        assert_eq!(at(1.0), ce);
        assert_eq!(at(0.0), arc);
        assert!((at(0.5) - 0.5 * (ce + arc)).abs() < 1e-12);
    }

    #[test]
    fn convex_combination_of_known_components() {
        // lambda * 1.0 + (1 - lambda) * 3.0 at lambda = 0.5
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(1.0));
        let b = g.constant(Tensor::scalar(3.0));
        let a = g.scale(a, 0.5);
        let b = g.scale(b, 0.5);
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).item(), 2.0);
    }

    #[test]
    fn js_extremes_and_validation() {
        let p = t(&[1, 2], &[1.0, 0.0]);
        let q = t(&[1, 2], &[0.0, 1.0]);
        assert!((js_divergence(&p, &q).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        let bad = t(&[1, 2], &[0.7, 0.7]);
        assert!(matches!(js_divergence(&bad, &p), Err(Error::NotADistribution { row: 0, .. })));
    }

    #[test]
    fn robust_objective_degenerates_without_perturbation() {
        let mut rng = substream(12, "test");
        let z = Tensor::randn(vec![5, 4], 1.0, &mut rng);
        let c = Tensor::uniform(vec![5, 4], -0.9, 0.9, &mut rng);
        let y = [0, 1, 2, 3, 0];
        let cfg = LossConfig::default();
        let rob = robust_objective((&z, &c), (&z, &c), &y, &cfg).unwrap();
        let adv = adversarial_objective(&z, &c, &y, &cfg).unwrap();
        assert!((rob - adv).abs() < 1e-12);
    }

    #[test]
    fn robust_objective_is_invariant_to_batch_duplication() {
        let mut rng = substream(13, "test");
        let mk = |rng: &mut crate::rng::StreamRng| {
            (
                Tensor::randn(vec![3, 4], 1.0, rng),
                Tensor::uniform(vec![3, 4], -0.9, 0.9, rng),
            )
        };
        let (zc, cc) = mk(&mut rng);
        let (zp, cp) = mk(&mut rng);
        let y: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
        let cfg = LossConfig::default();
        let once = robust_objective((&zc, &cc), (&zp, &cp), &y, &cfg).unwrap();
        let dup = |t: &Tensor| Tensor::concat_rows(&[t, t]).unwrap();
        let y2: Vec<usize> = y.iter().chain(&y).copied().collect();
        let twice = robust_objective((&dup(&zc), &dup(&cc)), (&dup(&zp), &dup(&cp)), &y2, &cfg).unwrap();
        assert!((once - twice).abs() < 1e-12);
    }

    #[test]
    fn config_validation_names_field() {
        let bad = LossConfig {
            margin: 2.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("margin"));
        let bad = LossConfig {
            lambda: -0.1,
            ..LossConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("lambda"));
    }
}
