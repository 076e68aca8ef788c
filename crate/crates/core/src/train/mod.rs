//! Training loops: plain per-batch risk minimization, warm-started
//! fine-tuning, and the learned risk head trained by differentiating through
//! unrolled SGD.

mod meta;
mod optim;
mod schedule;
mod trainer;

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::data::DataError;
use crate::learned::LearnedError;
use crate::model::ModelError;
use crate::risk::{RiskError, RiskFunctional};

pub use meta::{inner_adapt, meta_gradient, outer_step, Adapted, OuterOutcome};
pub use optim::{clip_global_norm, Adam, AdamConfig, Sgd};
pub use schedule::OneCycle;
pub use trainer::{
    early_stop, records_csv, snapshot_milestones, stalled, train_fixed_rho, train_learned, warm_start_then, Objective,
    TrainOutcome, TrainRecord, Trainer,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },
    #[error("non-finite {stage} loss at step {step} (batch min {min}, max {max}, mean {mean})")]
    NonFiniteLoss { stage: &'static str, step: usize, min: f64, max: f64, mean: f64 },
    #[error("validation risk does not depend on the risk head: meta-gradient path severed")]
    SeveredMetaGradient,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Learned(#[from] LearnedError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl TrainError {
    fn at_step(self, at: usize) -> Self {
        match self {
            TrainError::NonFiniteLoss { stage, min, max, mean, .. } => {
                TrainError::NonFiniteLoss { stage, step: at, min, max, mean }
            }
            other => other,
        }
    }
}

/// Step size of the differentiable inner SGD steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InnerLr {
    /// The outer step's scheduled learning rate.
    Scheduled,
    Fixed(f64),
}

/// Validation metric for early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopMetric {
    /// The `monitor` risk.
    Risk,
    /// Classification error rate.
    Error,
}

/// What happens to the head's gradient inside the inner loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhiGradPolicy {
    /// Inner backward passes also produce a direct gradient on φ; it is thrown
    /// away, and φ is trained only through θ′.
    Drop,
    /// The head is detached inside the inner loop, which cuts every path from
    /// φ to θ′. The outer gradient is then identically zero.
    Detach,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub inner_lr: InnerLr,
    pub adam: AdamConfig,
    pub inner_steps: usize,
    pub batch_size: usize,
    pub meta_val_batch: usize,
    pub total_steps: usize,
    pub schedule: OneCycle,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global L2 norm cap on the loss gradient of the real θ update.
    pub grad_clip: Option<f64>,
    pub warm_start_steps: usize,
    /// Epochs without improvement before stopping; `None` never stops early.
    pub early_stop_patience: Option<usize>,
    /// Validation-split risk logged as `val_risk`.
    pub monitor: RiskFunctional,
    /// Which validation metric early stopping watches.
    pub stop_on: StopMetric,
    pub seed: u64,
    pub phi_grad: PhiGradPolicy,
    /// Draw a new batch for every inner step instead of reusing one.
    pub fresh_inner_batches: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            inner_lr: InnerLr::Scheduled,
            adam: AdamConfig::default(),
            inner_steps: 5,
            batch_size: 32,
            meta_val_batch: 256,
            total_steps: 4000,
            schedule: OneCycle::default(),
            momentum: 0.9,
            weight_decay: 5e-4,
            grad_clip: Some(5.0),
            warm_start_steps: 2000,
            early_stop_patience: Some(5),
            monitor: RiskFunctional::ExpectedValue,
            stop_on: StopMetric::Risk,
            seed: 0,
            phi_grad: PhiGradPolicy::Drop,
            fresh_inner_batches: true,
        }
    }
}

impl TrainerConfig {
    /// Every violated constraint, described by field name.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let InnerLr::Fixed(b) = self.inner_lr {
            if !(b > 0.0) {
                v.push(format!("inner_lr: must be > 0, got {b}"));
            }
        }
        let a = &self.adam;
        if !(a.lr > 0.0) {
            v.push(format!("outer_lr: must be > 0, got {}", a.lr));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            v.push("adam: betas must lie in [0, 1) and eps be > 0".into());
        }
        for (name, n) in [
            ("inner_steps", self.inner_steps),
            ("batch_size", self.batch_size),
            ("meta_val_batch", self.meta_val_batch),
            ("total_steps", self.total_steps),
        ] {
            if n == 0 {
                v.push(format!("{name}: must be positive"));
            }
        }
        if self.schedule.validate().is_err() {
            v.push(format!("schedule: rates must be > 0 and warm_fraction in [0, 1], got {:?}", self.schedule));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!("momentum: must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            v.push(format!("weight_decay: must be >= 0, got {}", self.weight_decay));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                v.push(format!("grad_clip: must be > 0, got {c}"));
            }
        }
        if self.warm_start_steps > self.total_steps {
            v.push(format!("warm_start_steps: {} exceeds total_steps {}", self.warm_start_steps, self.total_steps));
        }
        if self.early_stop_patience == Some(0) {
            v.push("early_stop_patience: must be positive".into());
        }
        if let Err(e) = self.monitor.validate() {
            v.push(format!("monitor: {e}"));
        }
        v
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig(v.join("; ")))
        }
    }
}

/// Independent seed for one of a run's random streams.
pub(crate) fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn loss_stats(values: &[f64]) -> (f64, f64, f64) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
    (min, max, mean)
}

fn check_finite(stage: &'static str, values: &[f64]) -> Result<(), TrainError> {
    if values.iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    let (min, max, mean) = loss_stats(values);
    Err(TrainError::NonFiniteLoss { stage, step: 0, min, max, mean })
}
