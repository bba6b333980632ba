use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::PlateDataset;
use crate::error::{Error, Result};

/// Sample indices drawn from a single plate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Position of the plate in `PlateDataset::plates`.
    pub plate: usize,
    pub indices: Vec<usize>,
}

/// Plate-consistent mini-batches: every batch comes from exactly one plate.
///
/// Each epoch visits the plates in a fresh random order and walks a fresh
/// permutation of each plate in consecutive chunks of `batch_size`. A trailing
/// chunk of at least two samples is emitted as a smaller batch.
#[derive(Clone, Debug)]
pub struct PlateSampler {
    plates: Vec<(usize, usize)>,
    batch_size: usize,
}

impl PlateSampler {
    pub fn new(ds: &PlateDataset, plates: &[usize], batch_size: usize) -> Result<Self> {
        if plates.is_empty() {
            return Err(Error::config("plates", "sampler needs at least one plate"));
        }
        if batch_size < 2 {
            return Err(Error::config("batch_size", "must be >= 2"));
        }
        let sizes: Vec<(usize, usize)> = plates.iter().map(|&p| (p, ds.plates[p].len())).collect();
        let smallest = sizes.iter().map(|&(_, n)| n).min().unwrap_or(0);
        if batch_size > smallest {
            return Err(Error::config(
                "batch_size",
                format!("{batch_size} exceeds the smallest plate ({smallest} samples)"),
            ));
        }
        Ok(PlateSampler {
            plates: sizes,
            batch_size,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn batches_per_epoch(&self) -> usize {
        let b = self.batch_size;
        self.plates.iter().map(|&(_, n)| n / b + usize::from(n % b >= 2)).sum()
    }

    pub fn epoch<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Batch> {
        let mut order = self.plates.clone();
        order.shuffle(rng);
        let mut out = Vec::new();
        for (plate, n) in order {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(rng);
            for chunk in perm.chunks(self.batch_size) {
                if chunk.len() >= 2 {
                    out.push(Batch {
                        plate,
                        indices: chunk.to_vec(),
                    });
                }
            }
        }
        out
    }
}
