use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DataError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Replacement {
    /// Each index at most once per epoch; a short final batch is dropped.
    WithoutReplacement,
    WithReplacement,
}

/// Yields batches of row positions into a dataset of `n` rows.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    n: usize,
    batch: usize,
    rng: ChaCha8Rng,
    policy: Replacement,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64, policy: Replacement) -> Result<Self, DataError> {
        if batch == 0 || n == 0 {
            return Err(DataError::InvalidSize(format!("sampler over {n} rows with batch {batch}")));
        }
        if policy == Replacement::WithoutReplacement && batch > n {
            return Err(DataError::BatchTooLarge { batch, n });
        }
        let mut s = Self {
            n,
            batch,
            rng: ChaCha8Rng::seed_from_u64(seed),
            policy,
            order: (0..n).collect(),
            cursor: 0,
            epoch: 0,
        };
        if policy == Replacement::WithoutReplacement {
            s.order.shuffle(&mut s.rng);
        }
        Ok(s)
    }

    /// Without replacement when `batch <= n`, otherwise with replacement.
    pub fn auto(n: usize, batch: usize, seed: u64) -> Result<Self, DataError> {
        let policy = if batch > n { Replacement::WithReplacement } else { Replacement::WithoutReplacement };
        Self::new(n, batch, seed, policy)
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn policy(&self) -> Replacement {
        self.policy
    }

    /// Completed passes over the data (without-replacement mode).
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Full batches per epoch.
    pub fn batches_per_epoch(&self) -> usize {
        self.n / self.batch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        match self.policy {
            Replacement::WithReplacement => (0..self.batch).map(|_| self.rng.random_range(0..self.n)).collect(),
            Replacement::WithoutReplacement => {
                if self.cursor + self.batch > self.n {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                    self.epoch += 1;
                }
                let b = self.order[self.cursor..self.cursor + self.batch].to_vec();
                self.cursor += self.batch;
                b
            }
        }
    }
}
