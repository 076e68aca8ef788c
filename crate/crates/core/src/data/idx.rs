//! Big-endian IDX image/label pairs (the MNIST container format).

use std::path::Path;

use super::{DataError, LabeledDataset};
use crate::autodiff::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn need(file: &'static str, bytes: &[u8], expected: usize) -> Result<(), DataError> {
    if bytes.len() < expected {
        return Err(DataError::Truncated { file, expected, found: bytes.len() });
    }
    Ok(())
}

fn magic(file: &'static str, bytes: &[u8], expected: u32) -> Result<(), DataError> {
    need(file, bytes, 4)?;
    let found = read_u32(bytes, 0);
    if found != expected {
        return Err(DataError::BadMagic { file, expected, found });
    }
    Ok(())
}

/// Decodes an image file (`count × rows × cols` unsigned bytes) and a label
/// file into a dataset with pixels scaled to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledDataset, DataError> {
    magic("images", images, IDX_IMAGES_MAGIC)?;
    magic("labels", labels, IDX_LABELS_MAGIC)?;
    need("images", images, 16)?;
    need("labels", labels, 8)?;
    let count = read_u32(images, 4) as usize;
    let rows = read_u32(images, 8) as usize;
    let cols = read_u32(images, 12) as usize;
    let label_count = read_u32(labels, 4) as usize;
    if count != label_count {
        return Err(DataError::CountMismatch { images: count, labels: label_count });
    }
    let pixels = rows * cols;
    need("images", images, 16 + count * pixels)?;
    need("labels", labels, 8 + count)?;

    let features: Vec<f64> = images[16..16 + count * pixels].iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = labels[8..8 + count].iter().map(|&b| usize::from(b)).collect();
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    LabeledDataset::new(Tensor::matrix(count, pixels, features), labels, classes)
}

pub fn load_idx(path_images: impl AsRef<Path>, path_labels: impl AsRef<Path>) -> Result<LabeledDataset, DataError> {
    let images = std::fs::read(path_images)?;
    let labels = std::fs::read(path_labels)?;
    parse_idx(&images, &labels)
}

/// Encodes `count` images of `rows × cols` bytes.
pub fn encode_idx_images(rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let per = (rows * cols) as usize;
    let count = pixels.len().checked_div(per).unwrap_or(0);
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(count as u32).to_be_bytes());
    out.extend_from_slice(&rows.to_be_bytes());
    out.extend_from_slice(&cols.to_be_bytes());
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
