//! Training-time augmentation: pad, crop, flip, brightness/contrast jitter,
//! standardize. Each stage can be switched off; with everything off except
//! standardization the pipeline is plain standardization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ChannelStats;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Zero-pad each image symmetrically to this square size.
    pub pad_to: Option<usize>,
    /// Random square crop of this size.
    pub crop: Option<usize>,
    pub flip: bool,
    /// Uniform additive brightness offset in [-d, d].
    pub brightness: Option<f64>,
    /// Uniform contrast factor range around each image's per-channel mean.
    pub contrast: Option<(f64, f64)>,
    pub standardize: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { pad_to: None, crop: None, flip: false, brightness: None, contrast: None, standardize: true }
    }
}

impl AugmentConfig {
    /// Pad 40, crop 32, flip, brightness ±0.2, contrast [0.8, 1.2], standardize.
    pub fn cifar() -> Self {
        AugmentConfig {
            pad_to: Some(40),
            crop: Some(32),
            flip: true,
            brightness: Some(0.2),
            contrast: Some((0.8, 1.2)),
            standardize: true,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.pad_to.is_none()
            && self.crop.is_none()
            && !self.flip
            && self.brightness.is_none()
            && self.contrast.is_none()
    }
}

fn pad(x: &Tensor, size: usize) -> Result<Tensor> {
    let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if size < h || size < w {
        return Err(Error::invalid(format!("pad_to {size} is smaller than the {h}x{w} image")));
    }
    let (top, left) = ((size - h) / 2, (size - w) / 2);
    let mut out = Tensor::zeros(&[n, size, size, c]);
    let od = out.data_mut();
    for b in 0..n {
        for i in 0..h {
            let src = ((b * h + i) * w) * c;
            let dst = ((b * size + i + top) * size + left) * c;
            od[dst..dst + w * c].copy_from_slice(&x.data()[src..src + w * c]);
        }
    }
    Ok(out)
}

/// Applies the enabled stages in order pad → crop → flip → brightness/contrast
/// → standardize. Deterministic given the RNG state.
pub fn augment<R: Rng + ?Sized>(
    batch: &Tensor,
    config: &AugmentConfig,
    stats: Option<&ChannelStats>,
    rng: &mut R,
) -> Result<Tensor> {
    if batch.rank() != 4 {
        return Err(Error::shape(format!("augment expects NHWC, got {:?}", batch.shape())));
    }
    let mut x = match config.pad_to {
        Some(p) => pad(batch, p)?,
        None => batch.clone(),
    };
    if let Some(s) = config.crop {
        let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if s > h || s > w {
            return Err(Error::invalid(format!("crop {s} is larger than the padded {h}x{w} image")));
        }
        let mut out = Tensor::zeros(&[n, s, s, c]);
        for b in 0..n {
            let oy = rng.gen_range(0..=h - s);
            let ox = rng.gen_range(0..=w - s);
            for i in 0..s {
                let src = ((b * h + oy + i) * w + ox) * c;
                let dst = (b * s + i) * s * c;
                out.data_mut()[dst..dst + s * c].copy_from_slice(&x.data()[src..src + s * c]);
            }
        }
        x = out;
    }
    let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let per = h * w * c;
    for b in 0..n {
        let img = &mut x.data_mut()[b * per..(b + 1) * per];
        if config.flip && rng.gen_bool(0.5) {
            for i in 0..h {
                for j in 0..w / 2 {
                    for k in 0..c {
                        img.swap((i * w + j) * c + k, (i * w + (w - 1 - j)) * c + k);
                    }
                }
            }
        }
        if let Some(d) = config.brightness {
            let delta = rng.gen_range(-d..=d);
            img.iter_mut().for_each(|v| *v += delta);
        }
        if let Some((lo, hi)) = config.contrast {
            let f = rng.gen_range(lo..=hi);
            for k in 0..c {
                let mean = (0..h * w).map(|p| img[p * c + k]).sum::<f64>() / (h * w) as f64;
                for p in 0..h * w {
                    img[p * c + k] = (img[p * c + k] - mean) * f + mean;
                }
            }
        }
    }
    if config.standardize {
        if let Some(s) = stats {
            x = s.apply(&x)?;
        }
    }
    Ok(x)
}
