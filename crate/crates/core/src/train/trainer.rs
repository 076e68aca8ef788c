use std::fmt::Write as _;

use super::meta::{inner_adapt, outer_step};
use super::{
    check_finite, clip_global_norm, stream_seed, Adam, InnerLr, PhiGradPolicy, Sgd, StopMetric, TrainError,
    TrainerConfig,
};
use crate::autodiff::{backward, Tape, TapeMode, Tensor};
use crate::data::{BatchSampler, LabeledDataset, Replacement, TrainingSplits};
use crate::learned::{apply, entropy, PhiParams, WeightSnapshot};
use crate::model::{accuracy, cross_entropy_values, ClassBatch, LossModel, MlpSpec, ModelParams};
use crate::risk::RiskFunctional;

const TRAIN_STREAM: u64 = 1;
const INNER_STREAM: u64 = 2;
const META_VAL_STREAM: u64 = 3;

/// What the real θ update minimizes.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// `ρ` applied to each training batch.
    Fixed(RiskFunctional),
    /// The learned head, meta-trained so that `rho` on validation data falls.
    /// A frozen head keeps its initial uniform weights.
    Learned { rho: RiskFunctional, frozen: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub train_risk: f64,
    pub val_risk: f64,
    pub lr: f64,
    pub phi_entropy: Option<f64>,
}

/// Serializes records as `step,train_risk,val_risk,lr,phi_entropy`; the last
/// field is empty for runs without a learned head.
pub fn records_csv(records: &[TrainRecord]) -> String {
    let mut s = String::from("step,train_risk,val_risk,lr,phi_entropy\n");
    for r in records {
        let _ = write!(s, "{},{},{},{},", r.step, r.train_risk, r.val_risk, r.lr);
        if let Some(h) = r.phi_entropy {
            let _ = write!(s, "{h}");
        }
        s.push('\n');
    }
    s
}

/// True once the best value is at least `patience` entries old. Lower is better.
pub fn stalled(metrics: &[f64], patience: usize) -> bool {
    let Some(first) = metrics.first() else {
        return false;
    };
    let mut best = *first;
    let mut best_at = 0;
    for (i, &m) in metrics.iter().enumerate().skip(1) {
        if m < best {
            best = m;
            best_at = i;
        }
    }
    metrics.len() - 1 - best_at >= patience
}

/// Applies [`stalled`] to `val_risk` at each epoch boundary in `records`.
pub fn early_stop(records: &[TrainRecord], steps_per_epoch: usize, patience: usize) -> bool {
    let epoch = steps_per_epoch.max(1);
    let boundary: Vec<f64> = records.iter().filter(|r| (r.step + 1) % epoch == 0).map(|r| r.val_risk).collect();
    stalled(&boundary, patience)
}

/// Steps at which the head's weights are recorded: the start, 1, 5, 10, 25
/// and 50 percent of the run, and the end.
pub fn snapshot_milestones(total_steps: usize) -> Vec<usize> {
    let mut m: Vec<usize> =
        [0.0, 0.01, 0.05, 0.10, 0.25, 0.50, 1.0].iter().map(|f| (f * total_steps as f64).round() as usize).collect();
    m.dedup();
    m
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub theta: ModelParams,
    pub phi: Option<PhiParams>,
    pub records: Vec<TrainRecord>,
    pub snapshots: Vec<WeightSnapshot>,
    pub steps_run: usize,
    pub stopped_early: bool,
}

struct Learned {
    rho: RiskFunctional,
    frozen: bool,
    phi: PhiParams,
    adam: Adam,
}

/// Training state for one run. The test split is not reachable from here.
pub struct Trainer<'a> {
    spec: &'a MlpSpec,
    data: TrainingSplits<'a>,
    config: TrainerConfig,
    theta: ModelParams,
    fixed: Option<RiskFunctional>,
    learned: Option<Learned>,
    sgd: Sgd,
    train_sampler: BatchSampler,
    inner_sampler: BatchSampler,
    val_sampler: BatchSampler,
    step: usize,
    phase_step: usize,
    phase_len: usize,
    epoch_metrics: Vec<f64>,
    records: Vec<TrainRecord>,
    snapshots: Vec<WeightSnapshot>,
    milestones: Vec<usize>,
    stopped_early: bool,
}

fn class_batch(ds: &LabeledDataset, idx: &[usize]) -> ClassBatch {
    let (features, labels) = ds.batch(idx);
    ClassBatch { features, labels }
}

impl<'a> Trainer<'a> {
    /// Starts a run whose first phase lasts `phase_len` steps.
    pub fn new(
        spec: &'a MlpSpec,
        data: TrainingSplits<'a>,
        theta: ModelParams,
        objective: Objective,
        phase_len: usize,
        config: TrainerConfig,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let seed = config.seed;
        let b = config.batch_size;
        let n = data.train.len();
        let train_sampler = BatchSampler::new(n, b, stream_seed(seed, TRAIN_STREAM), Replacement::WithoutReplacement)?;
        let inner_sampler = BatchSampler::new(n, b, stream_seed(seed, INNER_STREAM), Replacement::WithoutReplacement)?;
        let val_sampler =
            BatchSampler::auto(data.val.len(), config.meta_val_batch, stream_seed(seed, META_VAL_STREAM))?;
        let milestones = snapshot_milestones(config.total_steps);
        let mut t = Self {
            spec,
            data,
            sgd: Sgd::new(config.momentum, config.weight_decay),
            config,
            theta,
            fixed: None,
            learned: None,
            train_sampler,
            inner_sampler,
            val_sampler,
            step: 0,
            phase_step: 0,
            phase_len,
            epoch_metrics: Vec::new(),
            records: Vec::new(),
            snapshots: Vec::new(),
            milestones,
            stopped_early: false,
        };
        t.set_objective(objective)?;
        Ok(t)
    }

    fn set_objective(&mut self, objective: Objective) -> Result<(), TrainError> {
        match objective {
            Objective::Fixed(rho) => {
                rho.validate()?;
                self.fixed = Some(rho);
                self.learned = None;
            }
            Objective::Learned { rho, frozen } => {
                rho.validate()?;
                let phi = PhiParams::init(self.config.batch_size)?;
                let adam = Adam::new(self.config.adam, phi.batch_size());
                if self.milestones.first() == Some(&self.step) {
                    self.snapshots.push(phi.snapshot(self.step));
                }
                self.fixed = None;
                self.learned = Some(Learned { rho, frozen, phi, adam });
            }
        }
        Ok(())
    }

    /// Switches objective and restarts the learning-rate schedule and the
    /// momentum buffers for a new phase of `phase_len` steps.
    pub fn begin_phase(&mut self, objective: Objective, phase_len: usize) -> Result<(), TrainError> {
        self.set_objective(objective)?;
        self.sgd.reset();
        self.phase_step = 0;
        self.phase_len = phase_len;
        self.epoch_metrics.clear();
        Ok(())
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn theta(&self) -> &ModelParams {
        &self.theta
    }

    pub fn phi(&self) -> Option<&PhiParams> {
        self.learned.as_ref().map(|l| &l.phi)
    }

    pub fn records(&self) -> &[TrainRecord] {
        &self.records
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train_sampler.batches_per_epoch().max(1)
    }

    /// Current learning rate from the phase's one-cycle schedule.
    pub fn lr(&self) -> Result<f64, TrainError> {
        self.config.schedule.lr(self.phase_step, self.phase_len)
    }

    /// One optimization step: for a learned head, adapt a copy of θ, update
    /// φ from the validation risk, then discard the copy; finally update θ on
    /// a new training batch.
    pub fn train_step(&mut self) -> Result<(), TrainError> {
        let step = self.step;
        let lr = self.lr()?;
        self.meta_update(lr).map_err(|e| e.at_step(step))?;
        let train_risk = self.real_update(lr).map_err(|e| e.at_step(step))?;
        let (val_risk, stop_metric) = self.validation_metrics()?;
        let phi_entropy = self.learned.as_ref().map(|l| entropy(&l.phi.weights()));
        self.records.push(TrainRecord { step, train_risk, val_risk, lr, phi_entropy });
        self.step += 1;
        self.phase_step += 1;
        if self.phase_step.is_multiple_of(self.steps_per_epoch()) {
            self.epoch_metrics.push(stop_metric);
        }
        if let Some(l) = &self.learned {
            if self.milestones.contains(&self.step) {
                self.snapshots.push(l.phi.snapshot(self.step));
            }
        }
        Ok(())
    }

    fn meta_update(&mut self, lr: f64) -> Result<(), TrainError> {
        let Some(learned) = self.learned.as_mut() else {
            return Ok(());
        };
        if learned.frozen {
            return Ok(());
        }
        let beta = match self.config.inner_lr {
            InnerLr::Scheduled => lr,
            InnerLr::Fixed(b) => b,
        };
        let tape = Tape::new(TapeMode::HigherOrder);
        let theta = self.theta.to_vars(&tape);
        let phi = learned.phi.to_var(&tape);
        let k = self.config.inner_steps;
        let batches: Vec<ClassBatch> = if self.config.fresh_inner_batches {
            (0..k).map(|_| class_batch(self.data.train, &self.inner_sampler.next_batch())).collect()
        } else {
            vec![class_batch(self.data.train, &self.inner_sampler.next_batch()); k]
        };
        let policy = self.config.phi_grad;
        let adapted = inner_adapt(self.spec, &theta, &phi, &batches, beta, policy)?;
        let val = class_batch(self.data.val, &self.val_sampler.next_batch());
        outer_step(
            self.spec,
            &mut learned.phi,
            &phi,
            &adapted.theta_prime,
            &val,
            &learned.rho,
            &mut learned.adam,
            policy == PhiGradPolicy::Drop,
        )?;
        Ok(())
    }

    fn real_update(&mut self, lr: f64) -> Result<f64, TrainError> {
        let batch = class_batch(self.data.train, &self.train_sampler.next_batch());
        let tape = Tape::new(TapeMode::FirstOrder);
        let theta = self.theta.to_vars(&tape);
        let losses = self.spec.per_sample_losses(&theta, &batch)?;
        check_finite("train", losses.value().data())?;
        let risk = match (&self.fixed, &self.learned) {
            (Some(rho), _) => rho.evaluate_var(&losses)?,
            (None, Some(l)) => apply(&tape.constant(Tensor::vector(l.phi.logits().to_vec())), &losses)?,
            (None, None) => unreachable!("trainer always holds an objective"),
        };
        let grads = backward(&risk, &theta, false)?;
        let mut grads: Vec<Tensor> = grads.iter().map(|g| (*g.value()).clone()).collect();
        if let Some(c) = self.config.grad_clip {
            clip_global_norm(&mut grads, c);
        }
        let mut values: Vec<Tensor> = self.theta.values().cloned().collect();
        self.sgd.step(&mut values, &grads, lr);
        self.theta = self.theta.with_values(values);
        Ok(risk.item())
    }

    /// Validation risk, and the value early stopping watches.
    fn validation_metrics(&self) -> Result<(f64, f64), TrainError> {
        let logits = self.spec.predict(&self.theta, self.data.val.features())?;
        let losses = cross_entropy_values(&logits, self.data.val.labels())?;
        let risk = self.config.monitor.evaluate(&losses)?;
        let stop = match self.config.stop_on {
            StopMetric::Risk => risk,
            StopMetric::Error => 1.0 - accuracy(&logits, self.data.val.labels()),
        };
        Ok((risk, stop))
    }

    /// Runs the rest of the current phase, optionally stopping once the
    /// validation metric has stalled for the configured patience.
    pub fn run_phase(&mut self, allow_early_stop: bool) -> Result<(), TrainError> {
        let patience = self.config.early_stop_patience.filter(|_| allow_early_stop);
        while self.phase_step < self.phase_len {
            self.train_step()?;
            if let Some(p) = patience {
                if stalled(&self.epoch_metrics, p) {
                    self.stopped_early = true;
                    break;
                }
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> TrainOutcome {
        if let Some(l) = &self.learned {
            if self.snapshots.last().map(|s| s.step) != Some(self.step) {
                self.snapshots.push(l.phi.snapshot(self.step));
            }
        }
        TrainOutcome {
            theta: self.theta,
            phi: self.learned.map(|l| l.phi),
            records: self.records,
            snapshots: self.snapshots,
            steps_run: self.step,
            stopped_early: self.stopped_early,
        }
    }
}

/// Mini-batch SGD on `ρ(batch losses)` for `total_steps` steps.
pub fn train_fixed_rho(
    spec: &MlpSpec,
    data: TrainingSplits<'_>,
    theta: ModelParams,
    rho: RiskFunctional,
    config: &TrainerConfig,
) -> Result<TrainOutcome, TrainError> {
    let mut t = Trainer::new(spec, data, theta, Objective::Fixed(rho), config.total_steps, config.clone())?;
    t.run_phase(true)?;
    Ok(t.finish())
}

/// Learns the head alongside the model for `total_steps` steps.
pub fn train_learned(
    spec: &MlpSpec,
    data: TrainingSplits<'_>,
    theta: ModelParams,
    rho: RiskFunctional,
    frozen: bool,
    config: &TrainerConfig,
) -> Result<TrainOutcome, TrainError> {
    let objective = Objective::Learned { rho, frozen };
    let mut t = Trainer::new(spec, data, theta, objective, config.total_steps, config.clone())?;
    t.run_phase(true)?;
    Ok(t.finish())
}

/// Expected-value training for `warm_start_steps`, then `target` for the
/// remaining steps, each phase with its own schedule.
pub fn warm_start_then(
    spec: &MlpSpec,
    data: TrainingSplits<'_>,
    theta: ModelParams,
    target: Objective,
    config: &TrainerConfig,
) -> Result<TrainOutcome, TrainError> {
    let warm = config.warm_start_steps;
    let rest = config.total_steps.saturating_sub(warm);
    let first = if warm > 0 { Objective::Fixed(RiskFunctional::ExpectedValue) } else { target.clone() };
    let mut t = Trainer::new(spec, data, theta, first, if warm > 0 { warm } else { rest }, config.clone())?;
    if warm > 0 {
        t.run_phase(rest == 0)?;
        if rest > 0 {
            t.begin_phase(target, rest)?;
            t.run_phase(true)?;
        }
    } else {
        t.run_phase(true)?;
    }
    Ok(t.finish())
}
