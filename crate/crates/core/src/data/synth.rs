//! Gaussian-blob image classes.
//!
//! Each class owns a prototype made of a few Gaussian bumps per informative
//! channel. A sample is its class prototype, shifted by a random integer
//! offset, plus i.i.d. pixel noise. Noise channels carry pure noise and no
//! label information.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub informative_channels: usize,
    pub noise_channels: usize,
    pub samples: usize,
    pub blobs_per_class: usize,
    pub blob_sigma: f64,
    pub amplitude: f64,
    pub noise_std: f64,
    pub max_shift: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec::mnist_like(4000, 0)
    }
}

impl SynthSpec {
    /// Ten classes of 28x28 single-channel images.
    pub fn mnist_like(samples: usize, seed: u64) -> Self {
        SynthSpec {
            num_classes: 10,
            height: 28,
            width: 28,
            informative_channels: 1,
            noise_channels: 0,
            samples,
            blobs_per_class: 3,
            blob_sigma: 2.5,
            amplitude: 1.0,
            noise_std: 0.5,
            max_shift: 2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("synthetic dataset: {m}")));
        if self.num_classes < 2 {
            return bad("need at least 2 classes");
        }
        if self.height == 0 || self.width == 0 || self.samples == 0 {
            return bad("dimensions and sample count must be positive");
        }
        if self.informative_channels == 0 {
            return bad("need at least one informative channel");
        }
        if self.blobs_per_class == 0 || !(self.blob_sigma > 0.0) {
            return bad("blobs need a positive count and width");
        }
        if !(self.noise_std >= 0.0) || !self.amplitude.is_finite() {
            return bad("noise_std must be >= 0 and amplitude finite");
        }
        if 2 * self.max_shift >= self.height.min(self.width) {
            return bad("max_shift too large for the image");
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.informative_channels + self.noise_channels
    }

    /// Noise-free class templates, `[num_classes, H, W, C]`.
    pub fn prototypes(&self) -> Result<Tensor> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let centers = self.blob_centers(&mut rng);
        let c = self.channels();
        let mut out = Tensor::zeros(&[self.num_classes, self.height, self.width, c]);
        let len = self.sample_len();
        for (centers, out) in centers.iter().zip(out.data_mut().chunks_exact_mut(len)) {
            self.render(centers, 0, 0, out);
        }
        Ok(out)
    }

    fn sample_len(&self) -> usize {
        self.height * self.width * self.channels()
    }

    fn blob_centers(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<Vec<(f64, f64)>>> {
        let margin = (self.max_shift as f64 + self.blob_sigma).min(self.height.min(self.width) as f64 / 2.0 - 0.5);
        (0..self.num_classes)
            .map(|_| {
                (0..self.informative_channels)
                    .map(|_| {
                        (0..self.blobs_per_class)
                            .map(|_| {
                                let y = rng.gen_range(margin..=(self.height as f64 - 1.0 - margin));
                                let x = rng.gen_range(margin..=(self.width as f64 - 1.0 - margin));
                                (y, x)
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    fn render(&self, centers: &[Vec<(f64, f64)>], dy: i64, dx: i64, out: &mut [f64]) {
        let c = self.channels();
        let inv = 1.0 / (2.0 * self.blob_sigma * self.blob_sigma);
        for (ch, blobs) in centers.iter().enumerate() {
            for i in 0..self.height {
                for j in 0..self.width {
                    let mut v = 0.0;
                    for &(cy, cx) in blobs {
                        let ddy = i as f64 - cy - dy as f64;
                        let ddx = j as f64 - cx - dx as f64;
                        v += self.amplitude * (-(ddy * ddy + ddx * ddx) * inv).exp();
                    }
                    out[(i * self.width + j) * c + ch] += v;
                }
            }
        }
    }
}

/// Generates a class-balanced, shuffled dataset; bitwise reproducible from `spec.seed`.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = spec.blob_centers(&mut rng);
    let mut labels: Vec<usize> = (0..spec.samples).map(|i| i % spec.num_classes).collect();
    labels.shuffle(&mut rng);
    let len = spec.sample_len();
    let mut data = vec![0.0; spec.samples * len];
    let shift = spec.max_shift as i64;
    for (s, &label) in labels.iter().enumerate() {
        let dy = rng.gen_range(-shift..=shift);
        let dx = rng.gen_range(-shift..=shift);
        let out = &mut data[s * len..(s + 1) * len];
        spec.render(&centers[label], dy, dx, out);
        for v in out.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += spec.noise_std * z;
        }
    }
    let images = Tensor::new(vec![spec.samples, spec.height, spec.width, spec.channels()], data)?;
    Dataset::new(images, labels, spec.num_classes, Split::Train)
}
