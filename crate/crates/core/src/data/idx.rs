//! MNIST IDX files.
//!
//! Layout (all integers big-endian):
//!
//! ```text
//! images: magic 0x00000803 | count u32 | rows u32 | cols u32 | count*rows*cols u8 pixels
//! labels: magic 0x00000801 | count u32 | count u8 labels
//! ```

use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes.get(offset..offset + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]])).ok_or_else(|| {
        Error::Truncated { offset: bytes.len(), detail: format!("header field at byte {offset} missing") }
    })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = read_u32(bytes, 0)?;
    if found != expected {
        return Err(Error::BadMagic { found, expected });
    }
    Ok(())
}

/// Decodes an IDX image file into `[N, rows, cols, 1]` with pixels scaled to [0, 1].
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::format(format!("IDX image file declares empty dims {n}x{rows}x{cols}")));
    }
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(Error::Truncated {
            offset: bytes.len(),
            detail: format!("{n} images of {rows}x{cols} need {need} bytes"),
        });
    }
    if bytes.len() > need {
        return Err(Error::format(format!("{} trailing bytes after {n} images", bytes.len() - need)));
    }
    let data = bytes[16..need].iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(vec![n, rows, cols, 1], data)
}

pub fn parse_idx_labels(bytes: &[u8], classes: usize) -> Result<Vec<usize>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    let need = 8 + n;
    if bytes.len() < need {
        return Err(Error::Truncated { offset: bytes.len(), detail: format!("{n} labels need {need} bytes") });
    }
    if bytes.len() > need {
        return Err(Error::format(format!("{} trailing bytes after {n} labels", bytes.len() - need)));
    }
    let labels: Vec<usize> = bytes[8..need].iter().map(|&b| b as usize).collect();
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::LabelOutOfRange { index, label, classes });
    }
    Ok(labels)
}

/// Loads an image/label IDX file pair (uncompressed).
pub fn load_mnist(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let imgs = parse_idx_images(&std::fs::read(images)?)?;
    let labs = parse_idx_labels(&std::fs::read(labels)?, 10)?;
    if imgs.shape()[0] != labs.len() {
        return Err(Error::format(format!("{} images but {} labels", imgs.shape()[0], labs.len())));
    }
    Dataset::new(imgs, labs, 10, split)
}
