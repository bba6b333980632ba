//! Plate-structured synthetic images with per-plate channel gain and offset.

mod augment;
mod io;
mod sampler;

pub use augment::{augment, self_standardize, AUGMENT_PROB};
pub use io::{decode, encode_plt1, encode_sidecar, read_plt1, sidecar_path, write_plt1, DATASET_MAGIC};
pub use sampler::{Batch, PlateSampler};

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateSpec {
    pub num_plates: usize,
    pub images_per_plate: usize,
    pub num_classes: usize,
    pub channels: usize,
    pub image_size: usize,
    /// Standard deviation of the per-plate gain (around 1) and offset (around 0).
    pub shift_severity: f64,
    /// Per-channel standard deviation of the class prototypes.
    pub contrast: f64,
    /// Standard deviation of i.i.d. pixel noise.
    pub noise_level: f64,
    /// Amplitude of the smooth per-sample deformation added to the class prototype.
    pub jitter: f64,
    /// Role of each plate, indexed by plate id.
    pub split: Vec<Split>,
}

impl Default for PlateSpec {
    fn default() -> Self {
        PlateSpec::with_split(8, 0, 2)
    }
}

impl PlateSpec {
    /// Desk defaults with the first plates for training, then `val`, then `test`.
    pub fn with_split(num_plates: usize, val: usize, test: usize) -> Self {
        let train = num_plates.saturating_sub(val + test);
        let split = std::iter::repeat_n(Split::Train, train)
            .chain(std::iter::repeat_n(Split::Val, val))
            .chain(std::iter::repeat_n(Split::Test, test))
            .collect();
        PlateSpec {
            num_plates,
            images_per_plate: 200,
            num_classes: 10,
            channels: 3,
            image_size: 16,
            shift_severity: 0.5,
            contrast: 0.3,
            noise_level: 0.5,
            jitter: 0.5,
            split,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_plates == 0 {
            return Err(Error::config("num_plates", "must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be >= 2"));
        }
        if self.num_classes > usize::from(u16::MAX) + 1 {
            return Err(Error::config("num_classes", "labels must fit in u16"));
        }
        if self.images_per_plate == 0 || self.images_per_plate % self.num_classes != 0 {
            return Err(Error::config(
                "images_per_plate",
                format!(
                    "{} is not a positive multiple of num_classes {}",
                    self.images_per_plate, self.num_classes
                ),
            ));
        }
        if self.channels == 0 {
            return Err(Error::config("channels", "must be >= 1"));
        }
        if self.image_size < 2 {
            return Err(Error::config("image_size", "must be >= 2"));
        }
        if !(self.shift_severity >= 0.0 && self.shift_severity.is_finite()) {
            return Err(Error::config(
                "shift_severity",
                format!("{} must be finite and >= 0", self.shift_severity),
            ));
        }
        if !(self.contrast > 0.0 && self.contrast.is_finite()) {
            return Err(Error::config("contrast", format!("{} must be finite and > 0", self.contrast)));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::config("noise_level", format!("{} must be finite and >= 0", self.noise_level)));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::config("jitter", format!("{} must be finite and >= 0", self.jitter)));
        }
        if self.split.len() != self.num_plates {
            return Err(Error::config(
                "split",
                format!("{} entries for {} plates", self.split.len(), self.num_plates),
            ));
        }
        if !self.split.contains(&Split::Train) {
            return Err(Error::config("split", "at least one train plate is required"));
        }
        Ok(())
    }
}

/// Ground-truth plate effect: `image = gain * clean + offset` per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateShift {
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Plate {
    pub plate_id: u32,
    pub split: Split,
    /// `N x C x H x W`
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Plate {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images and labels at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.images.len() / self.len().max(1);
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("gathered rows match shape"), labels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlateDataset {
    pub spec: PlateSpec,
    pub seed: u64,
    pub plates: Vec<Plate>,
    pub shifts: Vec<PlateShift>,
}

impl PlateDataset {
    pub fn plate_indices(&self, split: Split) -> Vec<usize> {
        (0..self.plates.len()).filter(|&i| self.plates[i].split == split).collect()
    }

    pub fn num_samples(&self) -> usize {
        self.plates.iter().map(Plate::len).sum()
    }
}

/// Bilinear upsampling of a `g x g` grid of standard normals to `size x size`.
fn smooth_field<R: Rng + ?Sized>(grid: usize, size: usize, rng: &mut R) -> Vec<f64> {
    let coarse: Vec<f64> = (0..grid * grid).map(|_| StandardNormal.sample(rng)).collect();
    let mut out = vec![0.0; size * size];
    let scale = (grid - 1) as f64 / (size - 1) as f64;
    for y in 0..size {
        let fy = y as f64 * scale;
        let y0 = (fy.floor() as usize).min(grid - 2);
        let ty = fy - y0 as f64;
        for x in 0..size {
            let fx = x as f64 * scale;
            let x0 = (fx.floor() as usize).min(grid - 2);
            let tx = fx - x0 as f64;
            let at = |r: usize, c: usize| coarse[r * grid + c];
            out[y * size + x] = (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x0 + 1))
                + ty * ((1.0 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
        }
    }
    out
}

/// Average over the eight flips and quarter turns of a square image.
fn symmetrize(img: &[f64], size: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    let m = size - 1;
    for y in 0..size {
        for x in 0..size {
            let v = img[y * size + x];
            for (a, b) in [(y, x), (x, m - y), (m - y, m - x), (m - x, y)] {
                out[a * size + b] += v / 8.0;
                out[a * size + (m - b)] += v / 8.0;
            }
        }
    }
    out
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-12);
    for x in v {
        *x = (*x - mean) / sd;
    }
}

const PROTOTYPE_GRID: usize = 5;
const JITTER_GRID: usize = 4;

/// Deterministic dataset for `spec` and `seed`.
///
/// Class prototypes are smooth random patterns made invariant to flips and
/// quarter turns, standardized per channel. A sample of class `y` on plate `b`
/// is `gain_b * (prototype_y + jitter) + offset_b + noise`, rounded to `f32`.
pub fn generate(spec: &PlateSpec, seed: u64) -> Result<PlateDataset> {
    spec.validate()?;
    let (c, s) = (spec.channels, spec.image_size);
    let hw = s * s;
    let mut proto_rng = substream(seed, "data.prototypes");
    let prototypes: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            let mut p = Vec::with_capacity(c * hw);
            for _ in 0..c {
                let field = smooth_field(PROTOTYPE_GRID.min(s), s, &mut proto_rng);
                let mut sym = symmetrize(&field, s);
                standardize(&mut sym);
                p.extend(sym);
            }
            p
        })
        .collect();

    let mut shift_rng = substream(seed, "data.shifts");
    let gain_dist = Normal::new(1.0, spec.shift_severity).map_err(|e| Error::config("shift_severity", e.to_string()))?;
    let offset_dist = Normal::new(0.0, spec.shift_severity).map_err(|e| Error::config("shift_severity", e.to_string()))?;
    let shifts: Vec<PlateShift> = (0..spec.num_plates)
        .map(|_| PlateShift {
            gain: (0..c).map(|_| gain_dist.sample(&mut shift_rng)).collect(),
            offset: (0..c).map(|_| offset_dist.sample(&mut shift_rng)).collect(),
        })
        .collect();

    let mut sample_rng = substream(seed, "data.samples");
    let per_class = spec.images_per_plate / spec.num_classes;
    let mut plates = Vec::with_capacity(spec.num_plates);
    for (b, shift) in shifts.iter().enumerate() {
        let n = spec.images_per_plate;
        let mut data = Vec::with_capacity(n * c * hw);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i / per_class;
            labels.push(y);
            for ch in 0..c {
                let jitter = smooth_field(JITTER_GRID.min(s), s, &mut sample_rng);
                let proto = &prototypes[y][ch * hw..(ch + 1) * hw];
                for (p, j) in proto.iter().zip(&jitter) {
                    let noise: f64 = StandardNormal.sample(&mut sample_rng);
                    let v = shift.gain[ch] * (spec.contrast * p + spec.jitter * j) + shift.offset[ch] + spec.noise_level * noise;
                    data.push(v as f32 as f64);
                }
            }
        }
        plates.push(Plate {
            plate_id: b as u32,
            split: spec.split[b],
            images: Tensor::new(vec![n, c, s, s], data)?,
            labels,
        });
    }
    Ok(PlateDataset {
        spec: spec.clone(),
        seed,
        plates,
        shifts,
    })
}
