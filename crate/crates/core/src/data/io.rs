//! `PLT1` binary dataset plus a TOML sidecar with the generating spec, the
//! split and the planted per-plate shifts.
//!
//! ```text
//! "PLT1" | K u32 | O u32 | C u32 | H u32 | W u32
//! per plate: plate_id u32 | count u32 | labels u16 * count | f32 * count*C*H*W
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Plate, PlateDataset, PlateShift, PlateSpec, Split};
use crate::error::{Error, Result};
use crate::nn::checkpoint::Cursor;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"PLT1";

#[derive(Serialize, Deserialize)]
struct Sidecar {
    seed: u64,
    spec: PlateSpec,
    plates: Vec<SidecarPlate>,
}

#[derive(Serialize, Deserialize)]
struct SidecarPlate {
    plate_id: u32,
    split: Split,
    gain: Vec<f64>,
    offset: Vec<f64>,
}

/// `data.plt` -> `data.plt.toml`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".toml");
    PathBuf::from(s)
}

pub fn encode_plt1(ds: &PlateDataset) -> Vec<u8> {
    let spec = &ds.spec;
    let mut buf = Vec::with_capacity(24 + ds.plates.iter().map(|p| 8 + p.len() * 2 + p.images.len() * 4).sum::<usize>());
    buf.extend_from_slice(DATASET_MAGIC);
    for v in [spec.num_plates, spec.num_classes, spec.channels, spec.image_size, spec.image_size] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for p in &ds.plates {
        buf.extend_from_slice(&p.plate_id.to_le_bytes());
        buf.extend_from_slice(&(p.len() as u32).to_le_bytes());
        for &l in &p.labels {
            buf.extend_from_slice(&(l as u16).to_le_bytes());
        }
        for &v in p.images.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    buf
}

pub fn encode_sidecar(ds: &PlateDataset) -> Result<String> {
    let sidecar = Sidecar {
        seed: ds.seed,
        spec: ds.spec.clone(),
        plates: ds
            .plates
            .iter()
            .zip(&ds.shifts)
            .map(|(p, s)| SidecarPlate {
                plate_id: p.plate_id,
                split: p.split,
                gain: s.gain.clone(),
                offset: s.offset.clone(),
            })
            .collect(),
    };
    toml::to_string(&sidecar).map_err(|e| Error::format("dataset manifest", e.to_string()))
}

/// Writes the binary file and its sidecar manifest.
pub fn write_plt1(ds: &PlateDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_plt1(ds))?;
    std::fs::write(sidecar_path(path), encode_sidecar(ds)?)?;
    Ok(())
}

pub fn decode(bytes: &[u8], sidecar: &str) -> Result<PlateDataset> {
    let side: Sidecar = toml::from_str(sidecar).map_err(|e| Error::format("dataset manifest", e.to_string()))?;
    side.spec.validate()?;
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != DATASET_MAGIC {
        return Err(Error::format("dataset", "bad magic (expected PLT1)"));
    }
    let mut header = [0usize; 5];
    for h in header.iter_mut() {
        *h = cur.u32()? as usize;
    }
    let [k, o, c, h, w] = header;
    let spec = &side.spec;
    if [k, o, c, h, w] != [spec.num_plates, spec.num_classes, spec.channels, spec.image_size, spec.image_size] {
        return Err(Error::format("dataset", "header disagrees with the manifest"));
    }
    if side.plates.len() != k {
        return Err(Error::format("dataset manifest", "plate count disagrees with the header"));
    }
    let mut plates = Vec::with_capacity(k);
    let mut shifts = Vec::with_capacity(k);
    for meta in side.plates {
        let plate_id = cur.u32()?;
        if plate_id != meta.plate_id {
            return Err(Error::format("dataset", format!("plate {plate_id} out of order")));
        }
        let count = cur.u32()? as usize;
        let mut labels = Vec::with_capacity(count.min(bytes.len()));
        for _ in 0..count {
            let l = u16::from_le_bytes(cur.array()?) as usize;
            if l >= o {
                return Err(Error::format("dataset", format!("label {l} out of range for {o} classes")));
            }
            labels.push(l);
        }
        let len = count * c * h * w;
        let raw = cur.take(len.checked_mul(4).ok_or_else(|| Error::format("dataset", "plate too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        plates.push(Plate {
            plate_id,
            split: meta.split,
            images: Tensor::new(vec![count, c, h, w], data)?,
            labels,
        });
        shifts.push(PlateShift {
            gain: meta.gain,
            offset: meta.offset,
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::format("dataset", "trailing bytes"));
    }
    Ok(PlateDataset {
        spec: side.spec,
        seed: side.seed,
        plates,
        shifts,
    })
}

/// Reads a dataset written by [`write_plt1`]; the sidecar must sit next to it.
pub fn read_plt1(path: impl AsRef<Path>) -> Result<PlateDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let side = std::fs::read_to_string(sidecar_path(path))?;
    decode(&bytes, &side)
}
