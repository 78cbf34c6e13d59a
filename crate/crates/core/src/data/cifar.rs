//! CIFAR-10 binary batches: a sequence of 3073-byte records, each one label
//! byte followed by 3072 pixel bytes stored channel-planar (1024 R, 1024 G,
//! 1024 B, rows of 32).

use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR10_RECORD_BYTES: usize = 1 + 3 * 32 * 32;

/// Decodes records into `[N, 32, 32, 3]` with pixels scaled to [0, 1].
pub fn parse_cifar10(bytes: &[u8], split: Split) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(Error::Truncated { offset: 0, detail: "empty CIFAR-10 file".into() });
    }
    let rem = bytes.len() % CIFAR10_RECORD_BYTES;
    if rem != 0 {
        let offset = bytes.len() - rem;
        return Err(Error::Truncated {
            offset,
            detail: format!("partial record of {rem} bytes (records are {CIFAR10_RECORD_BYTES} bytes)"),
        });
    }
    let n = bytes.len() / CIFAR10_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut data = vec![0.0; n * 3072];
    for (i, rec) in bytes.chunks_exact(CIFAR10_RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::LabelOutOfRange { index: i, label, classes: 10 });
        }
        labels.push(label);
        let out = &mut data[i * 3072..(i + 1) * 3072];
        for c in 0..3 {
            for p in 0..1024 {
                out[p * 3 + c] = f64::from(rec[1 + c * 1024 + p]) / 255.0;
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, 32, 32, 3], data)?, labels, 10, split)
}

pub fn load_cifar10(path: &Path, split: Split) -> Result<Dataset> {
    parse_cifar10(&std::fs::read(path)?, split)
}
