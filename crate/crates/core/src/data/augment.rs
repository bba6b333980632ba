use rand::Rng;

use crate::error::Result;
use crate::stats::STAT_EPS;
use crate::tensor::Tensor;

/// Probability of each of the flip and the rotation.
pub const AUGMENT_PROB: f64 = 0.5;

/// Random horizontal flip, then random quarter-turn rotation, per image.
/// Images must be square.
pub fn augment<R: Rng + ?Sized>(images: &mut Tensor, rng: &mut R) -> Result<()> {
    let (n, c, h, w) = images.dims4("augment")?;
    if h != w {
        return Err(crate::Error::InvalidShape {
            op: "augment",
            shape: images.shape().to_vec(),
            expected: "square images",
        });
    }
    let hw = h * w;
    let m = h - 1;
    let mut scratch = vec![0.0; hw];
    for i in 0..n {
        let flip = rng.random_bool(AUGMENT_PROB);
        let turns = if rng.random_bool(AUGMENT_PROB) {
            rng.random_range(1..4)
        } else {
            0
        };
        if !flip && turns == 0 {
            continue;
        }
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            let img = &mut images.data_mut()[off..off + hw];
            scratch.copy_from_slice(img);
            for y in 0..h {
                for x in 0..w {
                    let sx = if flip { m - x } else { x };
                    let (ty, tx) = match turns {
                        1 => (sx, m - y),
                        2 => (m - y, m - sx),
                        3 => (m - sx, y),
                        _ => (y, sx),
                    };
                    img[ty * w + tx] = scratch[y * w + x];
                }
            }
        }
    }
    Ok(())
}

/// Per image and channel: subtract the spatial mean and divide by the spatial
/// standard deviation (floored at a small epsilon).
pub fn self_standardize(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4("self_standardize")?;
    let hw = h * w;
    let mut out = x.clone();
    if hw == 0 {
        return Ok(out);
    }
    for img in out.data_mut().chunks_mut(hw) {
        let mean = img.iter().sum::<f64>() / hw as f64;
        let var = img.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
        let sd = var.sqrt().max(STAT_EPS);
        for v in img.iter_mut() {
            *v = (*v - mean) / sd;
        }
    }
    Ok(out)
}
