use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{DataError, LabeledDataset};
use crate::autodiff::Tensor;

/// `C` Gaussian clusters in `d` dimensions.
///
/// Centers have i.i.d. standard normal coordinates; each sample is its
/// class center plus isotropic noise with standard deviation `spread`.
/// Class `i mod C` is assigned to the `i`-th draw before shuffling, so class
/// counts differ by at most one.
pub fn gen_blobs(seed: u64, n: usize, classes: usize, dim: usize, spread: f64) -> Result<LabeledDataset, DataError> {
    if classes < 2 || n < classes || dim == 0 || !(spread > 0.0) {
        return Err(DataError::InvalidSize(format!(
            "blobs need n >= C >= 2, d >= 1 and spread > 0 (n={n}, C={classes}, d={dim}, spread={spread})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<f64> = (0..classes * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let noise = Normal::new(0.0, spread).map_err(|e| DataError::InvalidSize(e.to_string()))?;

    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(n * dim);
    for &label in &labels {
        let c = &centers[label * dim..(label + 1) * dim];
        features.extend(c.iter().map(|&m| m + noise.sample(&mut rng)));
    }
    LabeledDataset::new(Tensor::matrix(n, dim, features), labels, classes)
}

/// Resamples the labels of exactly `round(fraction·n)` rows, chosen uniformly
/// without replacement, uniformly over all classes (possibly the same label).
pub fn inject_label_noise(ds: &LabeledDataset, fraction: f64, seed: u64) -> Result<LabeledDataset, DataError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(DataError::FractionOutOfRange(fraction));
    }
    let n = ds.len();
    let count = (fraction * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = ds.labels().to_vec();
    let mut mask = vec![false; n];
    let mut chosen = sample(&mut rng, n, count).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        mask[i] = true;
        labels[i] = rng.random_range(0..ds.num_classes());
    }
    Ok(ds.with_labels(labels, mask))
}
