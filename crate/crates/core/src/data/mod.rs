//! Datasets: in-memory image sets, file loaders, the synthetic generator and
//! the training-time augmentation pipeline.

mod augment;
mod cifar;
mod idx;
mod synth;

pub use augment::{augment, AugmentConfig};
pub use cifar::{load_cifar10, parse_cifar10, CIFAR10_RECORD_BYTES};
pub use idx::{load_mnist, parse_idx_images, parse_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synth::{synth_dataset, SynthSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::FeatureDims;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel mean and standard deviation (population).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn of(images: &Tensor) -> Result<Self> {
        let m = crate::ops::channel_moments(images)?;
        Ok(ChannelStats { mean: m.mean.into_data(), std: m.var.data().iter().map(|v| v.sqrt()).collect() })
    }

    /// `(x - mean) / std` per channel; zero-variance channels are only centered.
    pub fn apply(&self, images: &Tensor) -> Result<Tensor> {
        let c = images.channels();
        if self.mean.len() != c {
            return Err(Error::shape(format!(
                "standardization stats for {} channels applied to {:?}",
                self.mean.len(),
                images.shape()
            )));
        }
        let mut out = images.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (k, v) in row.iter_mut().enumerate() {
                let s = if self.std[k] > 0.0 { self.std[k] } else { 1.0 };
                *v = (*v - self.mean[k]) / s;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    /// Standardization statistics of the training set this data belongs to.
    pub stats: Option<ChannelStats>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::shape(format!("dataset images must be NHWC, got {:?}", images.shape())));
        }
        let n = images.shape()[0];
        if n == 0 || labels.len() != n {
            return Err(Error::shape(format!("{} labels for {n} images", labels.len())));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::LabelOutOfRange { index, label, classes: num_classes });
        }
        Ok(Dataset { images, labels, num_classes, split, stats: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> FeatureDims {
        let s = self.images.shape();
        FeatureDims::new(s[1], s[2], s[3])
    }

    fn sample_len(&self) -> usize {
        let d = self.dims();
        d.area() * d.channels
    }

    /// Gathers the given samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * len..(i + 1) * len]);
        }
        let d = self.dims();
        let images = Tensor::new(vec![indices.len(), d.height, d.width, d.channels], data).expect("batch shape");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Samples `[start, end)` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Result<Dataset> {
        if start >= end || end > self.len() {
            return Err(Error::invalid(format!("slice {start}..{end} of a {}-sample dataset", self.len())));
        }
        let idx: Vec<usize> = (start..end).collect();
        let (images, labels) = self.batch(&idx);
        Ok(Dataset { images, labels, num_classes: self.num_classes, split: self.split, stats: self.stats.clone() })
    }

    /// Splits off the last `n` samples as a test set.
    pub fn split_off_test(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::invalid(format!("cannot hold out {n} of {} samples", self.len())));
        }
        let cut = self.len() - n;
        let train = self.slice(0, cut)?;
        let mut test = self.slice(cut, self.len())?;
        test.split = Split::Test;
        Ok((train, test))
    }

    pub fn channel_stats(&self) -> Result<ChannelStats> {
        ChannelStats::of(&self.images)
    }

    /// Records standardization statistics without changing the pixels.
    pub fn with_stats(mut self, stats: ChannelStats) -> Self {
        self.stats = Some(stats);
        self
    }

    /// Pixels standardized with `stats`.
    pub fn standardized(&self, stats: &ChannelStats) -> Result<Dataset> {
        Ok(Dataset {
            images: stats.apply(&self.images)?,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            split: self.split,
            stats: Some(stats.clone()),
        })
    }
}
