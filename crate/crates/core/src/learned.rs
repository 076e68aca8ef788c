//! The learnable mini-batch risk head: a softmax-weighted convex combination
//! of a batch's losses sorted from largest to smallest.

use thiserror::Error;

use crate::autodiff::{softmax, AutodiffError, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnedError {
    #[error("risk head needs a batch size of at least 1")]
    ZeroBatch,
    #[error("risk head is bound to batch size {expected}, got {got} losses")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Pre-softmax logits, one per sorted loss position. Index 0 multiplies the
/// largest loss in the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiParams {
    logits: Vec<f64>,
}

impl PhiParams {
    /// Zero logits: uniform weights, so the head starts as the batch mean.
    pub fn init(batch_size: usize) -> Result<Self, LearnedError> {
        if batch_size == 0 {
            return Err(LearnedError::ZeroBatch);
        }
        Ok(Self { logits: vec![0.0; batch_size] })
    }

    pub fn from_logits(logits: Vec<f64>) -> Result<Self, LearnedError> {
        if logits.is_empty() {
            return Err(LearnedError::ZeroBatch);
        }
        Ok(Self { logits })
    }

    pub fn batch_size(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    /// Places the logits on `tape` as a differentiable leaf.
    pub fn to_var(&self, tape: &Tape) -> Var {
        tape.var(Tensor::vector(self.logits.clone()))
    }

    /// Plain evaluation of the head on a loss vector.
    pub fn apply_values(&self, losses: &[f64]) -> Result<f64, LearnedError> {
        self.check_len(losses.len())?;
        let perm = crate::autodiff::argsort_desc(losses);
        Ok(self.weights().iter().zip(perm).map(|(w, i)| w * losses[i]).sum())
    }

    pub fn snapshot(&self, step: usize) -> WeightSnapshot {
        let weights = self.weights();
        let entropy = entropy(&weights);
        WeightSnapshot { step, weights, entropy }
    }

    fn check_len(&self, got: usize) -> Result<(), LearnedError> {
        if got != self.logits.len() {
            return Err(LearnedError::LengthMismatch { expected: self.logits.len(), got });
        }
        Ok(())
    }
}

/// `Σ_i softmax(phi)_i · sort_desc(losses)_i`, differentiable in both inputs.
pub fn apply(phi: &Var, losses: &Var) -> Result<Var, LearnedError> {
    let b = phi.value().len();
    let shape = losses.shape();
    if shape.len() != 1 || shape[0] != b {
        return Err(LearnedError::LengthMismatch { expected: b, got: losses.value().len() });
    }
    let weights = phi.softmax()?;
    let (sorted, _) = losses.sort_desc()?;
    Ok(weights.mul(&sorted)?.sum()?)
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(weights: &[f64]) -> f64 {
    -weights.iter().filter(|&&w| w > 0.0).map(|w| w * w.ln()).sum::<f64>()
}

/// Post-softmax weights of the head at one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSnapshot {
    pub step: usize,
    pub weights: Vec<f64>,
    pub entropy: f64,
}

impl WeightSnapshot {
    pub fn csv_header(b: usize) -> String {
        let mut s = String::from("step");
        for i in 0..b {
            s.push_str(&format!(",w_{i}"));
        }
        s.push_str(",entropy");
        s
    }

    /// `step,w_0,...,w_{b-1},entropy`, `w_0` being the largest-loss weight.
    pub fn csv_row(&self) -> String {
        let mut s = self.step.to_string();
        for w in &self.weights {
            s.push_str(&format!(",{w:e}"));
        }
        s.push_str(&format!(",{:e}", self.entropy));
        s
    }

    pub fn parse_csv_row(line: &str) -> Option<Self> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() < 3 {
            return None;
        }
        let step = fields[0].parse().ok()?;
        let nums: Option<Vec<f64>> = fields[1..].iter().map(|f| f.parse().ok()).collect();
        let mut nums = nums?;
        let entropy = nums.pop()?;
        Some(Self { step, weights: nums, entropy })
    }
}
