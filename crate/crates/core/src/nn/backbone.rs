use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::params::{Bound, ParamId, ParamStore};
use crate::stats::{BatchStats, STAT_EPS};
use crate::tensor::Tensor;

/// Exponential-moving-average factor for running BN statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub out_channels: usize,
    pub downsample: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub blocks: Vec<BlockConfig>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl BackboneConfig {
    /// Three conv blocks (16, 32, 64 channels), each halving the resolution,
    /// pooled to a 64-wide embedding.
    pub fn desk(in_channels: usize, num_classes: usize) -> Self {
        BackboneConfig {
            in_channels,
            blocks: [16, 32, 64]
                .into_iter()
                .map(|out_channels| BlockConfig {
                    out_channels,
                    downsample: true,
                })
                .collect(),
            feature_dim: 64,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("in_channels", "must be >= 1"));
        }
        if self.blocks.is_empty() {
            return Err(Error::config("blocks", "at least one block is required"));
        }
        if self.blocks.iter().any(|b| b.out_channels == 0) {
            return Err(Error::config("blocks", "out_channels must be >= 1"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim", "must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be >= 2"));
        }
        Ok(())
    }

    fn last_channels(&self) -> usize {
        self.blocks.last().map_or(self.in_channels, |b| b.out_channels)
    }
}

/// Index of the block after whose output a statistics perturbation may attach.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InsertionSite(pub usize);

impl InsertionSite {
    pub fn new(site: usize, config: &BackboneConfig) -> Result<Self> {
        if site >= config.blocks.len() {
            return Err(Error::config(
                "sites",
                format!("site {site} out of range for {} blocks", config.blocks.len()),
            ));
        }
        Ok(InsertionSite(site))
    }
}

/// Which statistics the BN layers normalize with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Stored running statistics (inference).
    Running,
    /// Statistics of the current batch (training, recalibration).
    Batch,
}

#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running: BatchStats,
    pub downsample: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub embedding: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub embedding: Var,
    pub logits: Var,
    /// Per-BN-layer batch statistics (empty in [`BnMode::Running`]).
    pub batch_stats: Vec<BatchStats>,
}

/// Rewrites the feature map at an active insertion site.
pub type SiteHook<'a> = dyn FnMut(&mut Graph, InsertionSite, Var) -> Result<Var> + 'a;

/// Block-structured conv net with a linear classifier whose weight rows double
/// as the ArcFace class centers.
#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    pub params: ParamStore,
    blocks: Vec<ConvBlock>,
    projection: Option<(ParamId, ParamId)>,
    head_w: ParamId,
    head_b: ParamId,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let mut blocks = Vec::with_capacity(config.blocks.len());
        let mut cin = config.in_channels;
        for (i, b) in config.blocks.iter().enumerate() {
            let fan_in = (cin * 9) as f64;
            let w = Tensor::randn(vec![b.out_channels, cin, 3, 3], (2.0 / fan_in).sqrt(), rng);
            let conv = params.add(format!("block{i}.conv.weight"), w, true);
            let gamma = params.add(format!("block{i}.bn.gamma"), Tensor::ones(vec![b.out_channels]), false);
            let beta = params.add(format!("block{i}.bn.beta"), Tensor::zeros(vec![b.out_channels]), false);
            blocks.push(ConvBlock {
                conv,
                gamma,
                beta,
                running: BatchStats {
                    mu: vec![0.0; b.out_channels],
                    sigma2: vec![1.0; b.out_channels],
                },
                downsample: b.downsample,
            });
            cin = b.out_channels;
        }
        let last = config.last_channels();
        let projection = (config.feature_dim != last).then(|| {
            let w = Tensor::randn(vec![config.feature_dim, last], (2.0 / last as f64).sqrt(), rng);
            (
                params.add("proj.weight", w, true),
                params.add("proj.bias", Tensor::zeros(vec![config.feature_dim]), false),
            )
        });
        let d = config.feature_dim;
        let head_w = params.add(
            "head.weight",
            Tensor::randn(vec![config.num_classes, d], (1.0 / d as f64).sqrt(), rng),
            true,
        );
        let head_b = params.add("head.bias", Tensor::zeros(vec![config.num_classes]), false);
        Ok(Backbone {
            config,
            params,
            blocks,
            projection,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[ConvBlock] {
        &self.blocks
    }

    pub fn head_weight(&self) -> ParamId {
        self.head_w
    }

    pub fn running_stats(&self) -> Vec<BatchStats> {
        self.blocks.iter().map(|b| b.running.clone()).collect()
    }

    /// Replaces (not blends) every layer's running statistics.
    pub fn set_running_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        self.check_stats(stats)?;
        for (b, s) in self.blocks.iter_mut().zip(stats) {
            b.running = s.clone();
        }
        Ok(())
    }

    /// `running = (1 - momentum) * running + momentum * batch` per layer.
    pub fn update_running_stats(&mut self, stats: &[BatchStats], momentum: f64) -> Result<()> {
        self.check_stats(stats)?;
        for (b, s) in self.blocks.iter_mut().zip(stats) {
            for (r, v) in b.running.mu.iter_mut().zip(&s.mu) {
                *r = (1.0 - momentum) * *r + momentum * v;
            }
            for (r, v) in b.running.sigma2.iter_mut().zip(&s.sigma2) {
                *r = (1.0 - momentum) * *r + momentum * v;
            }
        }
        Ok(())
    }

    fn check_stats(&self, stats: &[BatchStats]) -> Result<()> {
        let ok = stats.len() == self.blocks.len()
            && stats.iter().zip(&self.config.blocks).all(|(s, b)| {
                s.mu.len() == b.out_channels && s.sigma2.len() == b.out_channels
            });
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op: "running stats",
                lhs: self.config.blocks.iter().map(|b| b.out_channels).collect(),
                rhs: stats.iter().map(|s| s.mu.len()).collect(),
            })
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [_, c, _, _] if *c == self.config.in_channels => Ok(()),
            _ => Err(Error::ShapeMismatch {
                op: "backbone_forward",
                lhs: vec![0, self.config.in_channels, 0, 0],
                rhs: shape.to_vec(),
            }),
        }
    }

    /// conv3x3 -> BN -> ReLU -> optional 2x2 average pool.
    pub fn block(&self, g: &mut Graph, p: &Bound, i: usize, x: Var, mode: BnMode) -> Result<(Var, Option<BatchStats>)> {
        let b = &self.blocks[i];
        let h = g.conv2d(x, p.var(b.conv), 1, 1)?;
        let (mu, var, stats) = match mode {
            BnMode::Batch => {
                let mu = g.channel_mean(h)?;
                let var = g.channel_var(h)?;
                let stats = BatchStats {
                    mu: g.value(mu).data().to_vec(),
                    sigma2: g.value(var).data().to_vec(),
                };
                (mu, var, Some(stats))
            }
            BnMode::Running => (
                g.constant(Tensor::from_vec(b.running.mu.clone())),
                g.constant(Tensor::from_vec(b.running.sigma2.clone())),
                None,
            ),
        };
        let h = g.bn_transform(h, mu, var, p.var(b.gamma), p.var(b.beta), STAT_EPS)?;
        let h = g.relu(h);
        let h = if b.downsample { g.avg_pool2(h)? } else { h };
        Ok((h, stats))
    }

    /// Applies blocks `range` in order, collecting batch statistics.
    pub fn run_blocks(
        &self,
        g: &mut Graph,
        p: &Bound,
        mut x: Var,
        range: Range<usize>,
        mode: BnMode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        for i in range {
            let (out, s) = self.block(g, p, i, x, mode)?;
            stats.extend(s);
            x = out;
        }
        Ok(x)
    }

    /// Global average pool, optional projection, and the classifier.
    pub fn head(&self, g: &mut Graph, p: &Bound, features: Var) -> Result<HeadOutput> {
        let pooled = g.global_avg_pool(features)?;
        let embedding = match self.projection {
            Some((w, b)) => g.linear(pooled, p.var(w), Some(p.var(b)))?,
            None => pooled,
        };
        let logits = g.linear(embedding, p.var(self.head_w), Some(p.var(self.head_b)))?;
        Ok(HeadOutput { embedding, logits })
    }

    /// Cosine between each embedding row and each class-weight row.
    pub fn class_cosines(&self, g: &mut Graph, p: &Bound, embedding: Var) -> Result<Var> {
        g.cosine_rows(embedding, p.var(self.head_w))
    }

    /// Full pass. At every site in `active_sites` the hook (when given)
    /// replaces the block output before it enters the next block.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        images: Var,
        mode: BnMode,
        active_sites: &[InsertionSite],
        mut hook: Option<&mut SiteHook<'_>>,
    ) -> Result<ForwardOutput> {
        self.check_input(g.shape(images))?;
        let mut x = images;
        let mut batch_stats = Vec::new();
        for i in 0..self.blocks.len() {
            let (out, s) = self.block(g, p, i, x, mode)?;
            batch_stats.extend(s);
            x = out;
            if let Some(h) = hook.as_deref_mut() {
                if active_sites.contains(&InsertionSite(i)) {
                    x = h(g, InsertionSite(i), x)?;
                }
            }
        }
        let head = self.head(g, p, x)?;
        Ok(ForwardOutput {
            embedding: head.embedding,
            logits: head.logits,
            batch_stats,
        })
    }

    /// Gradient-free pass returning `(logits, embedding)`.
    pub fn predict(&self, images: &Tensor, mode: BnMode) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, &p, x, mode, &[], None)?;
        Ok((g.value(out.logits).clone(), g.value(out.embedding).clone()))
    }

    /// Per-layer statistics a batch-mode pass over `images` would normalize with.
    pub fn batch_statistics(&self, images: &Tensor) -> Result<Vec<BatchStats>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        Ok(self.forward(&mut g, &p, x, BnMode::Batch, &[], None)?.batch_stats)
    }
}

/// Cosine between every embedding row and every class-weight row.
pub fn arcface_angles(embedding: &Tensor, class_weights: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let e = g.constant(embedding.clone());
    let w = g.constant(class_weights.clone());
    let c = g.cosine_rows(e, w)?;
    Ok(g.value(c).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn identity_hook_is_bitwise_noop() {
        let mut rng = substream(1, "init");
        let model = Backbone::new(BackboneConfig::desk(3, 4), &mut rng).unwrap();
        let images = Tensor::randn(vec![4, 3, 16, 16], 1.0, &mut rng);
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false);
        let x = g.constant(images);
        let plain = model.forward(&mut g, &p, x, BnMode::Batch, &[], None).unwrap();
        let sites = [InsertionSite(0), InsertionSite(1), InsertionSite(2)];
        let mut id = |_: &mut Graph, _: InsertionSite, v: Var| Ok(v);
        let hooked = model.forward(&mut g, &p, x, BnMode::Batch, &sites, Some(&mut id)).unwrap();
        assert_eq!(g.value(plain.logits), g.value(hooked.logits));
    }

    #[test]
    fn zero_network_gives_uniform_softmax() {
        let mut rng = substream(2, "init");
        let cfg = BackboneConfig {
            in_channels: 2,
            blocks: vec![BlockConfig {
                out_channels: 4,
                downsample: false,
            }],
            feature_dim: 4,
            num_classes: 3,
        };
        let mut model = Backbone::new(cfg, &mut rng).unwrap();
        for p in model.params.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        let images = Tensor::randn(vec![2, 2, 5, 5], 1.0, &mut rng);
        let (logits, _) = model.predict(&images, BnMode::Running).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let mut g = Graph::new();
        let z = g.constant(logits);
        let s = g.softmax(z).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut rng = substream(3, "init");
        let model = Backbone::new(BackboneConfig::desk(3, 4), &mut rng).unwrap();
        let err = model.predict(&Tensor::zeros(vec![1, 2, 16, 16]), BnMode::Running).unwrap_err();
        assert!(err.to_string().contains("backbone_forward"), "{err}");
    }

    #[test]
    fn config_invariants() {
        let mut cfg = BackboneConfig::desk(3, 1);
        assert!(cfg.validate().is_err());
        cfg.num_classes = 2;
        cfg.blocks.clear();
        assert!(cfg.validate().is_err());
        assert!(InsertionSite::new(3, &BackboneConfig::desk(3, 2)).is_err());
        assert!(InsertionSite::new(2, &BackboneConfig::desk(3, 2)).is_ok());
    }

    #[test]
    fn projection_when_feature_dim_differs() {
        let mut rng = substream(4, "init");
        let mut cfg = BackboneConfig::desk(3, 5);
        cfg.feature_dim = 8;
        let model = Backbone::new(cfg, &mut rng).unwrap();
        let (logits, emb) = model
            .predict(&Tensor::randn(vec![2, 3, 8, 8], 1.0, &mut rng), BnMode::Running)
            .unwrap();
        assert_eq!(emb.shape(), &[2, 8]);
        assert_eq!(logits.shape(), &[2, 5]);
    }

    #[test]
    fn arcface_angles_basic_cases() {
        let w = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0]).unwrap();
        let e = Tensor::new(vec![1, 3], vec![3.0, 0.0, 0.0]).unwrap();
        let c = arcface_angles(&e, &w).unwrap();
        assert_eq!(c.data(), &[1.0, 0.0]);
        let zero = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let err = arcface_angles(&e, &zero).unwrap_err();
        assert!(matches!(err, Error::ZeroNormRow { row: 1, .. }));
    }
}
