use crate::abra::{ascent_from_features, frozen_trunk, perturbed_tail, sample_noise, AdvOptState, UncertaintySite};
use crate::data::{augment, PlateDataset, PlateSampler, Split};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{adversarial_objective_on, robust_objective_on, HeadOutputs};
use crate::nn::{Backbone, BackboneConfig, BnMode, InsertionSite, ParamStore, BN_MOMENTUM};
use crate::rng::{substream, StreamRng};
use crate::stats::adain_renormalize_on;
use crate::tensor::Tensor;
use crate::train::config::{Method, TrainConfig};
use crate::train::optim::{Adam, WarmupSchedule};

/// Consecutive non-finite iterations tolerated before training aborts.
pub const MAX_NONFINITE_STREAK: usize = 3;

/// Per-epoch averages. Columns that do not apply to a method are `NaN`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochTrace {
    pub epoch: usize,
    pub iterations: usize,
    /// Objective minimized over the network weights.
    pub train_loss: f64,
    /// Adversarial objective at the start of the ascent.
    pub adv_loss: f64,
    pub js: f64,
    /// Learning rate at the end of the epoch.
    pub lr: f64,
    /// Euclidean norm of all uncertainty magnitudes at the end of the epoch.
    pub k_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Before anything in the iteration has run.
    Start,
    /// After the uncertainty ascent, before the weight update.
    AfterAscent,
    /// After the weight update.
    AfterDescent,
}

/// State handed to a phase observer.
pub struct PhaseSnapshot<'s> {
    pub iteration: usize,
    pub phase: Phase,
    pub params: &'s ParamStore,
    pub sites: &'s [UncertaintySite],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub adv_loss: Option<f64>,
    pub js: Option<f64>,
    /// The update was skipped because a loss was not finite.
    pub skipped: bool,
}

/// What a finished training run hands back.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Backbone,
    pub sites: Vec<UncertaintySite>,
    pub traces: Vec<EpochTrace>,
    pub events: Vec<String>,
    pub iterations: usize,
}

/// Per-sample style perturbations for the AdvStyle baseline, `[batch_size, C]`.
#[derive(Clone, Debug)]
struct StyleState {
    site: usize,
    mu: Tensor,
    sigma: Tensor,
}

type Observer<'a> = Box<dyn FnMut(&PhaseSnapshot<'_>) + 'a>;

/// Owns the model and optimizer state for one training run.
pub struct Trainer<'a> {
    ds: &'a PlateDataset,
    cfg: TrainConfig,
    model: Backbone,
    sites: Vec<UncertaintySite>,
    style: Option<StyleState>,
    adam: Adam,
    schedule: WarmupSchedule,
    sampler: PlateSampler,
    sampler_rng: StreamRng,
    augment_rng: StreamRng,
    noise_rng: StreamRng,
    iteration: usize,
    epoch: usize,
    freeze_k: bool,
    observer: Option<Observer<'a>>,
    streak: usize,
    traces: Vec<EpochTrace>,
    events: Vec<String>,
}

impl<'a> Trainer<'a> {
    pub fn new(ds: &'a PlateDataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let train_plates = ds.plate_indices(Split::Train);
        if train_plates.is_empty() {
            return Err(Error::config("split", "dataset has no train plate"));
        }
        let bcfg = BackboneConfig::desk(ds.spec.channels, ds.spec.num_classes);
        let mut sites = Vec::new();
        for &s in &cfg.sites {
            sites.push(InsertionSite::new(s, &bcfg)?);
        }
        let model = Backbone::new(bcfg, &mut substream(cfg.seed, "init"))?;
        let sampler = PlateSampler::new(ds, &train_plates, cfg.batch_size)?;
        let per_epoch = sampler.batches_per_epoch();
        let warmup = (cfg.warmup_frac * (cfg.epochs * per_epoch) as f64).round() as usize;
        let uncertainty = match cfg.method {
            Method::Abra => UncertaintySite::for_model(&model, &sites),
            _ => Vec::new(),
        };
        let style = match cfg.method {
            Method::Advstyle => {
                let site = sites.iter().map(|s| s.0).min().unwrap_or(0);
                let c = model.config().blocks[site].out_channels;
                Some(StyleState {
                    site,
                    mu: Tensor::zeros(vec![cfg.batch_size, c]),
                    sigma: Tensor::zeros(vec![cfg.batch_size, c]),
                })
            }
            _ => None,
        };
        Ok(Trainer {
            ds,
            adam: Adam::new(&model.params, cfg.weight_decay),
            schedule: WarmupSchedule { peak: cfg.lr, warmup },
            sampler,
            sampler_rng: substream(cfg.seed, "sampler"),
            augment_rng: substream(cfg.seed, "augment"),
            noise_rng: substream(cfg.seed, "noise"),
            cfg,
            model,
            sites: uncertainty,
            style,
            iteration: 0,
            epoch: 0,
            freeze_k: false,
            observer: None,
            streak: 0,
            traces: Vec::new(),
            events: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Backbone {
        &self.model
    }

    pub fn sites(&self) -> &[UncertaintySite] {
        &self.sites
    }

    pub fn iterations(&self) -> usize {
        self.iteration
    }

    pub fn traces(&self) -> &[EpochTrace] {
        &self.traces
    }

    /// Keeps `K` at its current value by skipping the ascent (test hook).
    pub fn set_freeze_k(&mut self, on: bool) {
        self.freeze_k = on;
    }

    /// Called at the start of each iteration, after the ascent and after the
    /// weight update.
    pub fn set_observer(&mut self, f: impl FnMut(&PhaseSnapshot<'_>) + 'a) {
        self.observer = Some(Box::new(f));
    }

    fn observe(&mut self, phase: Phase) {
        if let Some(obs) = self.observer.as_mut() {
            obs(&PhaseSnapshot {
                iteration: self.iteration,
                phase,
                params: &self.model.params,
                sites: &self.sites,
            });
        }
    }

    pub fn lr(&self) -> f64 {
        self.schedule.at(self.iteration)
    }

    pub fn run_epoch(&mut self) -> Result<EpochTrace> {
        let batches = self.sampler.epoch(&mut self.sampler_rng);
        let mut sums = [0.0; 3];
        let mut counts = [0usize; 3];
        for b in &batches {
            let (mut images, labels) = self.ds.plates[b.plate].gather(&b.indices);
            if self.cfg.augment {
                augment(&mut images, &mut self.augment_rng)?;
            }
            let st = self.step(images, &labels)?;
            for (i, v) in [Some(st.loss), st.adv_loss, st.js].into_iter().enumerate() {
                if let Some(v) = v.filter(|v| v.is_finite()) {
                    sums[i] += v;
                    counts[i] += 1;
                }
            }
        }
        self.epoch += 1;
        let mean = |i: usize| if counts[i] > 0 { sums[i] / counts[i] as f64 } else { f64::NAN };
        let trace = EpochTrace {
            epoch: self.epoch,
            iterations: batches.len(),
            train_loss: mean(0),
            adv_loss: mean(1),
            js: mean(2),
            lr: self.schedule.at(self.iteration.saturating_sub(1)),
            k_norm: self.k_norm(),
        };
        log::info!(
            "epoch {} {}: loss {:.4} adv {:.4} js {:.4} |K| {:.4}",
            trace.epoch,
            self.cfg.method,
            trace.train_loss,
            trace.adv_loss,
            trace.js,
            trace.k_norm
        );
        self.traces.push(trace.clone());
        Ok(trace)
    }

    fn k_norm(&self) -> f64 {
        self.sites.iter().map(|s| s.k_norm().powi(2)).sum::<f64>().sqrt()
    }

    /// Runs every remaining epoch.
    pub fn train(mut self) -> Result<TrainOutcome> {
        while self.epoch < self.cfg.epochs {
            self.run_epoch()?;
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            model: self.model,
            sites: self.sites,
            traces: self.traces,
            events: self.events,
            iterations: self.iteration,
        }
    }

    /// One training iteration on a plate-consistent batch.
    pub fn step(&mut self, images: Tensor, labels: &[usize]) -> Result<StepStats> {
        let lr = self.lr();
        self.model.params.zero_grads();
        self.observe(Phase::Start);
        let stats = match self.cfg.method {
            Method::Erm | Method::Adabn => self.step_erm(&images, labels, lr)?,
            Method::Advstyle => self.step_advstyle(&images, labels, lr)?,
            Method::Abra => self.step_abra(&images, labels, lr)?,
        };
        self.iteration += 1;
        if stats.skipped {
            self.streak += 1;
            if self.streak >= MAX_NONFINITE_STREAK {
                return Err(Error::TrainingAborted(format!(
                    "{} consecutive non-finite losses at iteration {} (epoch {}): loss {}, adv {:?}, |K| {:.6e}, lr {:.3e}",
                    self.streak,
                    self.iteration,
                    self.epoch + 1,
                    stats.loss,
                    stats.adv_loss,
                    self.k_norm(),
                    lr
                )));
            }
        } else {
            self.streak = 0;
        }
        Ok(stats)
    }

    /// Backpropagates `loss`, applies the weight update and folds the clean
    /// batch statistics into the running estimates.
    fn descend(&mut self, g: &mut Graph, p: &crate::nn::Bound, loss: Var, stats: &[crate::stats::BatchStats], lr: f64) -> Result<()> {
        g.backward(loss)?;
        self.model.params.accumulate(g, p);
        self.adam.step(&mut self.model.params, lr);
        self.model.update_running_stats(stats, BN_MOMENTUM)
    }

    fn skipped(&mut self, what: &str, loss: f64) -> StepStats {
        self.events
            .push(format!("iteration {}: non-finite {what} ({loss}), update skipped", self.iteration));
        StepStats {
            loss,
            adv_loss: None,
            js: None,
            skipped: true,
        }
    }

    fn step_erm(&mut self, images: &Tensor, labels: &[usize], lr: f64) -> Result<StepStats> {
        let mut g = Graph::new();
        let p = self.model.params.bind(&mut g, true);
        let x = g.constant(images.clone());
        let out = self.model.forward(&mut g, &p, x, BnMode::Batch, &[], None)?;
        let cos = self.model.class_cosines(&mut g, &p, out.embedding)?;
        let loss = adversarial_objective_on(&mut g, out.logits, cos, labels, &self.cfg.loss)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Ok(self.skipped("loss", value));
        }
        self.descend(&mut g, &p, loss, &out.batch_stats, lr)?;
        self.observe(Phase::AfterDescent);
        Ok(StepStats {
            loss: value,
            adv_loss: None,
            js: None,
            skipped: false,
        })
    }

    fn step_abra(&mut self, images: &Tensor, labels: &[usize], lr: f64) -> Result<StepStats> {
        let first = self.sites[0].site.0;
        let n_blocks = self.model.num_blocks();
        for s in &mut self.sites {
            sample_noise(s, &mut self.noise_rng);
        }
        let mut adv_loss = None;
        if !self.freeze_k {
            let features = frozen_trunk(&self.model, images, first)?;
            let opt = AdvOptState {
                alpha: self.cfg.ascent_lr.unwrap_or(lr),
                steps: self.cfg.ascent_steps,
            };
            let trace = ascent_from_features(&self.model, &mut self.sites, &features, labels, &self.cfg.loss, &opt)?;
            adv_loss = trace.losses.first().copied();
            if trace.aborted {
                self.events.push(format!(
                    "iteration {}: non-finite adversarial objective, K reset",
                    self.iteration
                ));
                self.observe(Phase::AfterAscent);
                return Ok(StepStats {
                    loss: f64::NAN,
                    adv_loss,
                    js: None,
                    skipped: true,
                });
            }
        }
        self.observe(Phase::AfterAscent);

        for s in &mut self.sites {
            sample_noise(s, &mut self.noise_rng);
        }
        let mut g = Graph::new();
        let p = self.model.params.bind(&mut g, true);
        let x = g.constant(images.clone());
        let mut stats = Vec::with_capacity(n_blocks);
        let shared = self.model.run_blocks(&mut g, &p, x, 0..first + 1, BnMode::Batch, &mut stats)?;
        let clean_feat = self.model.run_blocks(&mut g, &p, shared, first + 1..n_blocks, BnMode::Batch, &mut stats)?;
        let clean = self.model.head(&mut g, &p, clean_feat)?;
        let clean_cos = self.model.class_cosines(&mut g, &p, clean.embedding)?;
        let ks: Vec<Var> = self
            .sites
            .iter()
            .flat_map(|s| [s.k_mu.clone(), s.k_sigma.clone()])
            .map(|k| g.constant(Tensor::from_vec(k)))
            .collect();
        let pert = perturbed_tail(&self.model, &mut g, &p, shared, &self.sites, &ks)?;
        let pert_cos = self.model.class_cosines(&mut g, &p, pert.embedding)?;
        let terms = robust_objective_on(
            &mut g,
            HeadOutputs {
                logits: clean.logits,
                cosphi: clean_cos,
            },
            HeadOutputs {
                logits: pert.logits,
                cosphi: pert_cos,
            },
            labels,
            &self.cfg.loss,
        )?;
        let value = g.value(terms.total).item();
        if !value.is_finite() {
            let mut st = self.skipped("robust loss", value);
            st.adv_loss = adv_loss;
            return Ok(st);
        }
        let js = g.value(terms.js).item();
        self.descend(&mut g, &p, terms.total, &stats, lr)?;
        self.observe(Phase::AfterDescent);
        Ok(StepStats {
            loss: value,
            adv_loss,
            js: Some(js),
            skipped: false,
        })
    }

    fn step_advstyle(&mut self, images: &Tensor, labels: &[usize], lr: f64) -> Result<StepStats> {
        let style = self.style.as_ref().expect("style state exists for advstyle");
        let site = style.site;
        let n = labels.len();
        let n_blocks = self.model.num_blocks();
        let mut g = Graph::new();
        let p = self.model.params.bind(&mut g, true);
        let x = g.constant(images.clone());
        let mut stats = Vec::with_capacity(n_blocks);
        let shared = self.model.run_blocks(&mut g, &p, x, 0..site + 1, BnMode::Batch, &mut stats)?;
        let clean_feat = self.model.run_blocks(&mut g, &p, shared, site + 1..n_blocks, BnMode::Batch, &mut stats)?;
        let clean = self.model.head(&mut g, &p, clean_feat)?;
        let sig_mu = g.param(style.mu.slice_rows(0, n));
        let sig_sigma = g.param(style.sigma.slice_rows(0, n));
        let rev_mu = g.reverse_grad(sig_mu);
        let rev_sigma = g.reverse_grad(sig_sigma);
        let styled = adain_renormalize_on(&mut g, shared, rev_mu, rev_sigma)?;
        let adv_feat = self
            .model
            .run_blocks(&mut g, &p, styled, site + 1..n_blocks, BnMode::Batch, &mut Vec::new())?;
        let adv = self.model.head(&mut g, &p, adv_feat)?;
        let ce_clean = g.cross_entropy(clean.logits, labels)?;
        let ce_adv = g.cross_entropy(adv.logits, labels)?;
        let both = g.add(ce_clean, ce_adv)?;
        let loss = g.scale(both, 0.5);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Ok(self.skipped("loss", value));
        }
        let adv_value = g.value(ce_adv).item();
        self.descend(&mut g, &p, loss, &stats, lr)?;
        // The reversed gradient makes this descent step an ascent on the loss.
        let alpha = self.cfg.ascent_lr.unwrap_or(lr);
        let style = self.style.as_mut().expect("style state exists for advstyle");
        for (buf, var) in [(&mut style.mu, sig_mu), (&mut style.sigma, sig_sigma)] {
            let c = buf.shape()[1];
            if let Some(grad) = g.grad(var) {
                for (w, d) in buf.data_mut()[..n * c].iter_mut().zip(grad.data()) {
                    *w -= alpha * d;
                }
            }
        }
        self.observe(Phase::AfterDescent);
        Ok(StepStats {
            loss: value,
            adv_loss: Some(adv_value),
            js: None,
            skipped: false,
        })
    }
}
