//! Binary model checkpoint.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ABRA" | version u32
//! in_channels u32 | n_blocks u32 | (out_channels u32, downsample u8) * n_blocks
//! feature_dim u32 | num_classes u32
//! n_tensors u32 | per tensor: name_len u32, name utf-8, ndim u32, dims u64 * ndim, f64 * len
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::nn::backbone::{Backbone, BackboneConfig, BlockConfig};
use crate::stats::BatchStats;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ABRA";
pub const CHECKPOINT_VERSION: u32 = 1;

const RUNNING_MEAN: &str = "bn.running_mean";
const RUNNING_VAR: &str = "bn.running_var";

/// A backbone plus any extra named tensors (for example uncertainty vectors).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: BackboneConfig,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Backbone, extras: &[(String, Tensor)]) -> Self {
        let mut tensors: Vec<(String, Tensor)> = model
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        for (i, s) in model.running_stats().into_iter().enumerate() {
            tensors.push((format!("block{i}.{RUNNING_MEAN}"), Tensor::from_vec(s.mu)));
            tensors.push((format!("block{i}.{RUNNING_VAR}"), Tensor::from_vec(s.sigma2)));
        }
        tensors.extend(extras.iter().cloned());
        Checkpoint {
            config: model.config().clone(),
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuilds the model. Every parameter and running statistic must be present.
    pub fn to_model(&self) -> Result<Backbone> {
        // Initial values are overwritten below; the rng only fixes shapes.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = Backbone::new(self.config.clone(), &mut rng)?;
        let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
        for name in names {
            let t = self
                .get(&name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {name}")))?;
            model.params.load(&name, t.clone())?;
        }
        let mut stats = Vec::with_capacity(model.num_blocks());
        for i in 0..model.num_blocks() {
            let fetch = |suffix: &str| {
                let name = format!("block{i}.{suffix}");
                self.get(&name)
                    .map(|t| t.data().to_vec())
                    .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {name}")))
            };
            stats.push(BatchStats {
                mu: fetch(RUNNING_MEAN)?,
                sigma2: fetch(RUNNING_VAR)?,
            });
        }
        model.set_running_stats(&stats)?;
        Ok(model)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut buf, CHECKPOINT_VERSION);
        let c = &self.config;
        put_u32(&mut buf, c.in_channels as u32);
        put_u32(&mut buf, c.blocks.len() as u32);
        for b in &c.blocks {
            put_u32(&mut buf, b.out_channels as u32);
            buf.push(b.downsample as u8);
        }
        put_u32(&mut buf, c.feature_dim as u32);
        put_u32(&mut buf, c.num_classes as u32);
        put_u32(&mut buf, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_u32(&mut buf, name.len() as u32);
            buf.extend_from_slice(name.as_bytes());
            put_u32(&mut buf, t.ndim() as u32);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                what: "checkpoint",
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let in_channels = cur.u32()? as usize;
        let n_blocks = cur.u32()? as usize;
        let mut blocks = Vec::with_capacity(n_blocks.min(1024));
        for _ in 0..n_blocks {
            let out_channels = cur.u32()? as usize;
            let downsample = cur.take(1)?[0] != 0;
            blocks.push(BlockConfig {
                out_channels,
                downsample,
            });
        }
        let config = BackboneConfig {
            in_channels,
            blocks,
            feature_dim: cur.u32()? as usize,
            num_classes: cur.u32()? as usize,
        };
        config.validate()?;
        let n = cur.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::format("checkpoint", "tensor name is not utf-8"))?
                .to_string();
            let ndim = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(cur.array()?) as usize);
            }
            let count: usize = shape.iter().product();
            let mut data = Vec::with_capacity(count.min(bytes.len() / 8));
            for _ in 0..count {
                data.push(f64::from_le_bytes(cur.array()?));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if cur.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        Self::read_from(&mut f)
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("binary file", "unexpected end of file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
}
