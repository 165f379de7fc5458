//! 8-bit image input/output and the depth-noise harness.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageReader};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::granularity::DepthMap;
use crate::tensor::Tensor;

fn image_err(path: &Path, message: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path)
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?
        .with_guessed_format()
        .map_err(|e| image_err(path, e))?;
    match reader.format() {
        Some(image::ImageFormat::Png | image::ImageFormat::Pnm) => {}
        Some(f) => return Err(image_err(path, format!("unsupported format {f:?}"))),
        None => return Err(image_err(path, "unrecognized image format")),
    }
    reader.decode().map_err(|e| image_err(path, e))
}

/// Loads an 8-bit PNG/PGM/PPM as `1×H×W` (gray) or `3×H×W` (color) with
/// values `byte/255`. Alpha channels are dropped.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(g) => Tensor::new(&[1, h, w], scale(g.as_raw())),
        DynamicImage::ImageLumaA8(_) => {
            Tensor::new(&[1, h, w], scale(img.to_luma8().as_raw()))
        }
        DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => {
            let rgb = img.to_rgb8();
            let raw = rgb.as_raw();
            let plane = h * w;
            let mut data = vec![0.0; 3 * plane];
            for (p, px) in raw.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    data[c * plane + p] = px[c] as f64 / 255.0;
                }
            }
            Tensor::new(&[3, h, w], data)
        }
        other => Err(image_err(
            path,
            format!("unsupported pixel type {:?} (8-bit only)", other.color()),
        )),
    }
}

/// Loads any supported image as a single-channel `1×H×W` map (color images
/// are converted to luma).
pub fn load_gray(path: &Path) -> Result<Tensor> {
    let t = load_image(path)?;
    if t.shape()[0] == 1 {
        return Ok(t);
    }
    let img = decode(path)?.to_luma8();
    Tensor::new(&[1, img.height() as usize, img.width() as usize], scale(img.as_raw()))
}

pub fn load_depth(path: &Path) -> Result<DepthMap> {
    DepthMap::from_tensor(&load_gray(path)?)
}

fn scale(bytes: &[u8]) -> Vec<f64> {
    bytes.iter().map(|&b| b as f64 / 255.0).collect()
}

/// `floor(v·255 + 0.5)`.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Writes 8-bit grayscale bytes; `.pgm` gives binary PGM, anything else PNG.
pub fn save_gray_bytes(bytes: &[u8], height: usize, width: usize, path: &Path) -> Result<()> {
    if bytes.len() != height * width {
        return Err(Error::shape("save_map", "byte count does not match size"));
    }
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let out = BufWriter::new(file);
    let (w, h) = (width as u32, height as u32);
    let pgm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    let res = if pgm {
        PnmEncoder::new(out)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(bytes, w, h, ExtendedColorType::L8)
    } else {
        image::codecs::png::PngEncoder::new(out).write_image(bytes, w, h, ExtendedColorType::L8)
    };
    res.map_err(|e| image_err(path, e))
}

/// Saves a single-channel map in `[0, 1]` (`H×W` with any leading 1-axes).
pub fn save_map(map: &Tensor, path: &Path) -> Result<()> {
    let s = map.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
        return Err(Error::shape("save_map", format!("expected one channel, got {s:?}")));
    }
    if let Some(v) = map.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(image_err(path, format!("value {v} outside [0, 1]")));
    }
    let bytes: Vec<u8> = map.data().iter().map(|&v| quantize(v)).collect();
    save_gray_bytes(&bytes, s[s.len() - 2], s[s.len() - 1], path)
}

pub fn save_depth(depth: &DepthMap, path: &Path) -> Result<()> {
    save_map(&depth.to_tensor(), path)
}

/// Named noise levels (target RMSE) for the three reference datasets.
pub const NOISE_PRESETS: [(&str, f64); 3] = [("des", 0.261), ("nlpr", 0.259), ("nju2k", 0.236)];

pub fn noise_preset(name: &str) -> Option<f64> {
    NOISE_PRESETS
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .map(|(_, v)| *v)
}

/// Calibrated noise level and what it achieved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub target_rmse: f64,
    pub seed: u64,
    pub sigma: f64,
    pub achieved_rmse: f64,
    /// Fraction of guarded pixels whose clean/noisy ratio exceeds 1.25.
    pub achieved_delta1: f64,
    pub iterations: usize,
}

/// Relative calibration tolerance on the achieved RMSE.
pub const CALIBRATION_TOLERANCE: f64 = 0.05;
const MAX_BISECTIONS: usize = 20;
/// Depth values at or below this are excluded from the ratio statistic.
pub const DELTA_GUARD: f64 = 1e-3;
pub const DELTA_RATIO: f64 = 1.25;

/// `(RMSE, δ1)`; δ1 is the fraction of pixels with both values above
/// [`DELTA_GUARD`] where `max(a/b, b/a) > 1.25` (0 if no pixel qualifies).
pub fn noise_stats(clean: &DepthMap, noisy: &DepthMap) -> Result<(f64, f64)> {
    if (clean.height(), clean.width()) != (noisy.height(), noisy.width()) {
        return Err(Error::shape(
            "noise_stats",
            format!(
                "{}x{} vs {}x{}",
                clean.height(),
                clean.width(),
                noisy.height(),
                noisy.width()
            ),
        ));
    }
    let (mut sq, mut guarded, mut failing) = (0.0, 0usize, 0usize);
    for (&a, &b) in clean.values().iter().zip(noisy.values()) {
        sq += (a - b) * (a - b);
        if a > DELTA_GUARD && b > DELTA_GUARD {
            guarded += 1;
            if (a / b).max(b / a) > DELTA_RATIO {
                failing += 1;
            }
        }
    }
    let rmse = (sq / clean.values().len() as f64).sqrt();
    let delta = if guarded == 0 {
        0.0
    } else {
        failing as f64 / guarded as f64
    };
    Ok((rmse, delta))
}

/// Adds clamped i.i.d. Gaussian noise whose standard deviation is calibrated
/// so that the post-clamp RMSE matches `target_rmse`.
pub fn add_depth_noise(depth: &DepthMap, target_rmse: f64, seed: u64) -> Result<(DepthMap, NoiseSpec)> {
    if !(target_rmse > 0.0 && target_rmse < 1.0) {
        return Err(Error::invalid(format!(
            "target RMSE must lie in (0, 1), got {target_rmse}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: Vec<f64> = (0..depth.values().len())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let apply = |sigma: f64| -> Vec<f64> {
        depth
            .values()
            .iter()
            .zip(&z)
            .map(|(a, z)| (a + sigma * z).clamp(0.0, 1.0))
            .collect()
    };
    let rmse_of = |vals: &[f64]| -> f64 {
        let s: f64 = depth
            .values()
            .iter()
            .zip(vals)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (s / vals.len() as f64).sqrt()
    };
    // Infinite noise pushes every pixel to the bound its draw points at.
    let ceiling = {
        let s: f64 = depth
            .values()
            .iter()
            .zip(&z)
            .map(|(a, z)| {
                let b = if *z > 0.0 {
                    1.0
                } else if *z < 0.0 {
                    0.0
                } else {
                    *a
                };
                (a - b) * (a - b)
            })
            .sum();
        (s / z.len() as f64).sqrt()
    };
    if ceiling < target_rmse {
        return Err(Error::UnreachableNoise {
            target: target_rmse,
            max: ceiling,
        });
    }

    let (mut lo, mut hi) = (0.0, target_rmse);
    while rmse_of(&apply(hi)) < target_rmse {
        lo = hi;
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::UnreachableNoise {
                target: target_rmse,
                max: ceiling,
            });
        }
    }
    let mut best = (hi, rmse_of(&apply(hi)));
    let mut iterations = 0;
    while iterations < MAX_BISECTIONS {
        iterations += 1;
        let mid = 0.5 * (lo + hi);
        let r = rmse_of(&apply(mid));
        if (r - target_rmse).abs() < (best.1 - target_rmse).abs() {
            best = (mid, r);
        }
        if r < target_rmse {
            lo = mid;
        } else {
            hi = mid;
        }
        if (best.1 - target_rmse).abs() <= 1e-4 * target_rmse {
            break;
        }
    }
    let (sigma, achieved) = best;
    if (achieved - target_rmse).abs() > CALIBRATION_TOLERANCE * target_rmse {
        return Err(Error::UnreachableNoise {
            target: target_rmse,
            max: ceiling,
        });
    }
    let noisy = DepthMap::new(depth.height(), depth.width(), apply(sigma))?;
    let (_, delta) = noise_stats(depth, &noisy)?;
    Ok((
        noisy,
        NoiseSpec {
            target_rmse,
            seed,
            sigma,
            achieved_rmse: achieved,
            achieved_delta1: delta,
            iterations,
        },
    ))
}
