use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, LabeledDataset};

const MIN_SPLIT: usize = 20;

/// Train / validation / hyper-validation partitions of one training pool,
/// plus the untouched test set.
#[derive(Debug, Clone)]
pub struct SplitSet {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub hyper_val: LabeledDataset,
    pub test: Option<LabeledDataset>,
    pub seed: u64,
}

/// The only view training code receives: the test set is not reachable.
#[derive(Debug, Clone, Copy)]
pub struct TrainingSplits<'a> {
    pub train: &'a LabeledDataset,
    pub val: &'a LabeledDataset,
    pub hyper_val: &'a LabeledDataset,
}

impl SplitSet {
    pub fn with_test(mut self, test: LabeledDataset) -> Self {
        self.test = Some(test);
        self
    }

    pub fn training(&self) -> TrainingSplits<'_> {
        TrainingSplits { train: &self.train, val: &self.val, hyper_val: &self.hyper_val }
    }
}

/// Random 90/5/5 partition. Validation and hyper-validation get
/// `⌊n/20⌋` rows each; train takes the remainder.
pub fn split_90_5_5(ds: &LabeledDataset, seed: u64) -> Result<SplitSet, DataError> {
    let n = ds.len();
    if n < MIN_SPLIT {
        return Err(DataError::TooSmall { n, min: MIN_SPLIT });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let five = n * 5 / 100;
    let (val, rest) = order.split_at(five);
    let (hyper_val, train) = rest.split_at(five);
    Ok(SplitSet { train: ds.subset(train), val: ds.subset(val), hyper_val: ds.subset(hyper_val), test: None, seed })
}
