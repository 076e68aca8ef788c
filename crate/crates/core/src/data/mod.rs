//! Labeled datasets, splits, label noise and batch sampling.

mod idx;
mod sampler;
mod split;
mod synth;
mod text;

use thiserror::Error;

use crate::autodiff::Tensor;

pub use idx::{encode_idx_images, encode_idx_labels, load_idx, parse_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use sampler::{BatchSampler, Replacement};
pub use split::{split_90_5_5, SplitSet, TrainingSplits};
pub use synth::{gen_blobs, inject_label_noise};
pub use text::{read_delimited, write_delimited};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("invalid dataset parameters: {0}")]
    InvalidSize(String),
    #[error("noise fraction {0} outside [0, 1]")]
    FractionOutOfRange(f64),
    #[error("dataset of {n} samples is too small, need at least {min}")]
    TooSmall { n: usize, min: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{file}: bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { file: &'static str, expected: u32, found: u32 },
    #[error("IDX count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{file}: truncated, expected {expected} bytes, found {found}")]
    Truncated { file: &'static str, expected: usize, found: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("batch size {batch} exceeds the {n} available samples")]
    BatchTooLarge { batch: usize, n: usize },
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e.to_string())
    }
}

/// Features (`n×d`) with integer class labels.
///
/// `ids` are positions in the dataset this one was carved from, so disjointness
/// of splits can be checked. When noise has been injected, `noise_mask` marks
/// the resampled rows and `clean_labels` keeps the labels before corruption.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    ids: Vec<usize>,
    noise_mask: Option<Vec<bool>>,
    clean_labels: Option<Vec<usize>>,
}

impl LabeledDataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        if features.rank() != 2 || features.rows() != labels.len() {
            return Err(DataError::InvalidSize(format!(
                "features {:?} do not match {} labels",
                features.shape(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::LabelOutOfRange { label, classes: num_classes });
        }
        let ids = (0..labels.len()).collect();
        Ok(Self { features, labels, num_classes, ids, noise_mask: None, clean_labels: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn noise_mask(&self) -> Option<&[bool]> {
        self.noise_mask.as_deref()
    }

    pub fn clean_labels(&self) -> Option<&[usize]> {
        self.clean_labels.as_deref()
    }

    /// Fraction of rows whose label differs from the pre-noise label.
    pub fn flipped_fraction(&self) -> f64 {
        match &self.clean_labels {
            Some(clean) if !clean.is_empty() => {
                let flipped = clean.iter().zip(&self.labels).filter(|(a, b)| a != b).count();
                flipped as f64 / clean.len() as f64
            }
            _ => 0.0,
        }
    }

    /// Rows selected by position; `ids` keep pointing at the original source.
    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            noise_mask: self.noise_mask.as_ref().map(|m| idx.iter().map(|&i| m[i]).collect()),
            clean_labels: self.clean_labels.as_ref().map(|c| idx.iter().map(|&i| c[i]).collect()),
        }
    }

    /// Feature rows and labels for a batch of positions.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (self.features.select_rows(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub(crate) fn with_labels(&self, labels: Vec<usize>, mask: Vec<bool>) -> LabeledDataset {
        let clean = self.clean_labels.clone().unwrap_or_else(|| self.labels.clone());
        LabeledDataset {
            features: self.features.clone(),
            labels,
            num_classes: self.num_classes,
            ids: self.ids.clone(),
            noise_mask: Some(mask),
            clean_labels: Some(clean),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_labels_and_shape() {
        let f = Tensor::matrix(2, 1, vec![0.0, 1.0]);
        assert!(LabeledDataset::new(f.clone(), vec![0, 1], 2).is_ok());
        assert_eq!(
            LabeledDataset::new(f.clone(), vec![0, 2], 2),
            Err(DataError::LabelOutOfRange { label: 2, classes: 2 })
        );
        assert!(matches!(LabeledDataset::new(f, vec![0], 2), Err(DataError::InvalidSize(_))));
    }

    #[test]
    fn subset_tracks_ids() {
        let f = Tensor::matrix(4, 1, vec![0.0, 1.0, 2.0, 3.0]);
        let ds = LabeledDataset::new(f, vec![0, 1, 0, 1], 2).unwrap();
        let s = ds.subset(&[3, 1]);
        assert_eq!(s.ids(), &[3, 1]);
        assert_eq!(s.features().data(), &[3.0, 1.0]);
        let t = s.subset(&[1]);
        assert_eq!(t.ids(), &[1]);
        assert_eq!(t.labels(), &[1]);
    }
}
