//! Small interactive views over `abra-core`, compiled to WebAssembly for the
//! static page in `www/`.
//!
//! Every operation is a plain Rust function returning flat numeric buffers so
//! the same code runs natively in tests. On `wasm32` the [`wasm`] module wraps
//! them with `wasm-bindgen`.

use abra_core::abra::{abra_transform, sample_noise, UncertaintySite};
use abra_core::data::{generate, PlateSpec};
use abra_core::graph::margin_cos;
use abra_core::nn::InsertionSite;
use abra_core::rng::substream;
use abra_core::{Error, Result, Tensor};

/// Images shown per plate in the preview strip, one per class.
pub const PREVIEW_IMAGES: usize = 10;
pub const IMAGE_SIZE: usize = 16;
pub const PREVIEW_PLATES: usize = 8;

fn preview_spec(tau: f64, contrast: f64) -> PlateSpec {
    PlateSpec {
        images_per_plate: PREVIEW_IMAGES,
        num_classes: PREVIEW_IMAGES,
        image_size: IMAGE_SIZE,
        shift_severity: tau,
        contrast,
        ..PlateSpec::with_split(PREVIEW_PLATES, 0, 2)
    }
}

/// RGBA strip of `PREVIEW_IMAGES` images from `plate`, `IMAGE_SIZE` pixels high.
///
/// Pixel values are mapped to bytes with one per-channel range shared by all
/// plates of the dataset, so plate-to-plate colour casts stay visible.
pub fn plate_preview(seed: u64, tau: f64, contrast: f64, plate: usize) -> Result<Vec<u8>> {
    let ds = generate(&preview_spec(tau, contrast), seed)?;
    let p = ds.plates.get(plate).ok_or_else(|| Error::config("plate", format!("{plate} out of range")))?;
    let (c, hw) = (3, IMAGE_SIZE * IMAGE_SIZE);
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for q in &ds.plates {
        for (i, v) in q.images.data().iter().enumerate() {
            let ch = (i / hw) % c;
            lo[ch] = lo[ch].min(*v);
            hi[ch] = hi[ch].max(*v);
        }
    }
    let width = PREVIEW_IMAGES * IMAGE_SIZE;
    let mut rgba = vec![255u8; width * IMAGE_SIZE * 4];
    let data = p.images.data();
    for n in 0..PREVIEW_IMAGES {
        for ch in 0..c {
            let span = (hi[ch] - lo[ch]).max(1e-12);
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    let v = data[(n * c + ch) * hw + y * IMAGE_SIZE + x];
                    let byte = ((v - lo[ch]) / span * 255.0).round().clamp(0.0, 255.0) as u8;
                    rgba[(y * width + n * IMAGE_SIZE + x) * 4 + ch] = byte;
                }
            }
        }
    }
    Ok(rgba)
}

/// Ground-truth gains followed by offsets of `plate`.
pub fn plate_shift(seed: u64, tau: f64, contrast: f64, plate: usize) -> Result<Vec<f64>> {
    let ds = generate(&preview_spec(tau, contrast), seed)?;
    let s = ds.shifts.get(plate).ok_or_else(|| Error::config("plate", format!("{plate} out of range")))?;
    Ok(s.gain.iter().chain(&s.offset).copied().collect())
}

/// Histograms of one channel before and after the ABRA statistic shift.
///
/// Layout: `[lo, hi, delta_mu, delta_sigma, clean[bins], perturbed[bins]]`,
/// where `lo..hi` covers both samples.
pub fn abra_histogram(seed: u64, k_mu: f64, k_sigma: f64, bins: usize) -> Result<Vec<f64>> {
    if bins == 0 {
        return Err(Error::config("bins", "must be >= 1"));
    }
    let mut rng = substream(seed, "demo.features");
    let x = Tensor::randn(vec![16, 1, 8, 8], 1.0, &mut rng).map(|v| 1.5 * v + 0.5);
    let mut site = UncertaintySite::new(InsertionSite(0), 1);
    site.k_mu = vec![k_mu];
    site.k_sigma = vec![k_sigma];
    sample_noise(&mut site, &mut substream(seed, "demo.noise"));
    let y = abra_transform(&x, &site)?;
    let all = x.data().iter().chain(y.data());
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![lo, hi, site.delta_mu()[0], site.delta_sigma()[0]];
    out.extend(histogram(x.data(), lo, hi, bins));
    out.extend(histogram(y.data(), lo, hi, bins));
    Ok(out)
}

fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut counts = vec![0.0; bins];
    let span = (hi - lo).max(1e-12);
    for v in values {
        let b = (((v - lo) / span) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1.0;
    }
    counts
}

/// Target-class logit against the angle to its class centre.
///
/// Triples `[theta, s * cos(theta), s * cos(theta + m)]` for `points` angles
/// evenly spaced over `[0, pi]`.
pub fn arcface_curve(margin: f64, scale: f64, points: usize) -> Result<Vec<f64>> {
    if points < 2 {
        return Err(Error::config("points", "must be >= 2"));
    }
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::config("margin", format!("{margin} must be finite and >= 0")));
    }
    let mut out = Vec::with_capacity(3 * points);
    for i in 0..points {
        let theta = std::f64::consts::PI * i as f64 / (points - 1) as f64;
        let c = theta.cos();
        out.extend([theta, scale * c, scale * margin_cos(c, margin)]);
    }
    Ok(out)
}

#[cfg(target_arch = "wasm32")]
pub mod wasm {
    use wasm_bindgen::prelude::*;

    fn js(e: abra_core::Error) -> JsError {
        JsError::new(&e.to_string())
    }

    #[wasm_bindgen(js_name = platePreview)]
    pub fn plate_preview(seed: u32, tau: f64, contrast: f64, plate: u32) -> Result<Vec<u8>, JsError> {
        super::plate_preview(seed.into(), tau, contrast, plate as usize).map_err(js)
    }

    #[wasm_bindgen(js_name = plateShift)]
    pub fn plate_shift(seed: u32, tau: f64, contrast: f64, plate: u32) -> Result<Vec<f64>, JsError> {
        super::plate_shift(seed.into(), tau, contrast, plate as usize).map_err(js)
    }

    #[wasm_bindgen(js_name = abraHistogram)]
    pub fn abra_histogram(seed: u32, k_mu: f64, k_sigma: f64, bins: u32) -> Result<Vec<f64>, JsError> {
        super::abra_histogram(seed.into(), k_mu, k_sigma, bins as usize).map_err(js)
    }

    #[wasm_bindgen(js_name = arcfaceCurve)]
    pub fn arcface_curve(margin: f64, scale: f64, points: u32) -> Result<Vec<f64>, JsError> {
        super::arcface_curve(margin, scale, points as usize).map_err(js)
    }
}
