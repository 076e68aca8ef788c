//! Desk-scale classifiers and the unreduced cross-entropy loss.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

pub use checkpoint::{read_checkpoint, write_checkpoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("expected {expected} parameter tensors, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Named parameter tensors of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tensors: Vec<(String, Tensor)>,
}

impl ModelParams {
    pub fn new(tensors: Vec<(String, Tensor)>) -> Self {
        Self { tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|(_, t)| t.all_finite())
    }

    pub fn values(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter().map(|(_, t)| t)
    }

    /// Differentiable leaves on `tape`, in order.
    pub fn to_vars(&self, tape: &Tape) -> Vec<Var> {
        self.tensors.iter().map(|(_, t)| tape.var(t.clone())).collect()
    }

    pub fn to_constants(&self, tape: &Tape) -> Vec<Var> {
        self.tensors.iter().map(|(_, t)| tape.constant(t.clone())).collect()
    }

    /// Same names, new values (e.g. read back from adapted nodes).
    pub fn with_values(&self, values: Vec<Tensor>) -> Self {
        Self { tensors: self.tensors.iter().map(|(n, _)| n.clone()).zip(values).collect() }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.tensors.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect()
    }
}

/// A model that maps parameters and a batch to a vector of per-sample losses.
pub trait LossModel {
    type Batch;

    fn per_sample_losses(&self, params: &[Var], batch: &Self::Batch) -> Result<Var, ModelError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

/// Fully connected network: affine layers with ReLU in between and no
/// activation after the last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub init_seed: u64,
}

/// Features and labels of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassBatch {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, init_seed: u64) -> Result<Self, ModelError> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(ModelError::InvalidSpec(format!("layer widths {widths:?}")));
        }
        Ok(Self { widths, activation: Activation::Relu, init_seed })
    }

    /// Single affine layer `d -> C`.
    pub fn linear(dim: usize, classes: usize, init_seed: u64) -> Result<Self, ModelError> {
        Self::new(vec![dim, classes], init_seed)
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Glorot-uniform weights `U(-s, s)`, `s = sqrt(6 / (fan_in + fan_out))`; zero biases.
    pub fn init_params(&self) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(self.init_seed);
        let mut tensors = Vec::with_capacity(2 * self.num_layers());
        for (l, w) in self.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.random_range(-s..s)).collect();
            tensors.push((format!("w{l}"), Tensor::matrix(fan_in, fan_out, data)));
            tensors.push((format!("b{l}"), Tensor::zeros(&[fan_out])));
        }
        ModelParams::new(tensors)
    }

    pub fn zero_params(&self) -> ModelParams {
        let mut tensors = Vec::new();
        for (l, w) in self.widths.windows(2).enumerate() {
            tensors.push((format!("w{l}"), Tensor::zeros(&[w[0], w[1]])));
            tensors.push((format!("b{l}"), Tensor::zeros(&[w[1]])));
        }
        ModelParams::new(tensors)
    }

    /// Logits `b×C` for inputs `b×d`.
    pub fn forward(&self, params: &[Var], x: &Var) -> Result<Var, ModelError> {
        let layers = self.num_layers();
        if params.len() != 2 * layers {
            return Err(ModelError::ParamCount { expected: 2 * layers, got: params.len() });
        }
        let mut h = x.clone();
        for l in 0..layers {
            h = h.matmul(&params[2 * l])?.add_row(&params[2 * l + 1])?;
            if l + 1 < layers {
                h = match self.activation {
                    Activation::Relu => h.relu()?,
                };
            }
        }
        Ok(h)
    }

    /// Logits computed on a scratch tape with no gradient tracking.
    pub fn predict(&self, params: &ModelParams, x: &Tensor) -> Result<Tensor, ModelError> {
        let tape = Tape::new(crate::autodiff::TapeMode::FirstOrder);
        let p = params.to_constants(&tape);
        let out = self.forward(&p, &tape.constant(x.clone()))?;
        Ok((*out.value()).clone())
    }
}

impl LossModel for MlpSpec {
    type Batch = ClassBatch;

    fn per_sample_losses(&self, params: &[Var], batch: &ClassBatch) -> Result<Var, ModelError> {
        let tape = params.first().ok_or(ModelError::ParamCount { expected: 2, got: 0 })?.tape();
        let x = tape.constant(batch.features.clone());
        let logits = self.forward(params, &x)?;
        cross_entropy_per_sample(&logits, &batch.labels)
    }
}

/// `ℓ_i = logsumexp(z_i) - z_i[y_i]` for every row, no reduction.
pub fn cross_entropy_per_sample(logits: &Var, labels: &[usize]) -> Result<Var, ModelError> {
    let shape = logits.shape();
    let classes = shape.get(1).copied().unwrap_or(0);
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(ModelError::LabelOutOfRange { label, classes });
    }
    Ok(logits.log_softmax_rows()?.select_per_row(labels)?.neg()?)
}

/// Per-sample cross-entropy on plain logits.
pub fn cross_entropy_values(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>, ModelError> {
    let classes = logits.cols();
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            if y >= classes {
                return Err(ModelError::LabelOutOfRange { label: y, classes });
            }
            let row = logits.row(i);
            Ok(crate::autodiff::log_sum_exp(row) - row[y])
        })
        .collect()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels.iter().enumerate().filter(|(i, &y)| argmax(logits.row(*i)) == y).count();
    hits as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::backward;

    #[test]
    fn zero_weights_give_zero_logits() {
        let spec = MlpSpec::new(vec![3, 4, 2], 0).unwrap();
        let x = Tensor::matrix(2, 3, vec![1., -2., 3., 0.5, 0.1, -0.7]);
        let out = spec.predict(&spec.zero_params(), &x).unwrap();
        assert_eq!(out.data(), &[0.0; 4]);
    }

    #[test]
    fn identity_layer_passes_inputs() {
        let spec = MlpSpec::linear(3, 3, 0).unwrap();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let params =
            ModelParams::new(vec![("w0".into(), Tensor::matrix(3, 3, eye)), ("b0".into(), Tensor::zeros(&[3]))]);
        let x = Tensor::matrix(2, 3, vec![1., -2., 3., 0.5, 0.1, -0.7]);
        assert_eq!(spec.predict(&params, &x).unwrap(), x);
    }

    #[test]
    fn forward_gradient_matches_finite_differences() {
        let spec = MlpSpec::new(vec![3, 5, 2], 4).unwrap();
        let params = spec.init_params();
        let x = Tensor::matrix(4, 3, vec![0.3, -1.2, 0.8, 1.5, 0.2, -0.4, -0.9, 0.6, 1.1, 0.05, -0.3, 0.7]);
        let sum_logits = |p: &ModelParams| spec.predict(p, &x).unwrap().data().iter().sum::<f64>();
        let tape = Tape::default();
        let vars = params.to_vars(&tape);
        let out = spec.forward(&vars, &tape.constant(x.clone())).unwrap().sum().unwrap();
        let grads = backward(&out, &vars, false).unwrap();
        let h = 1e-5;
        for (k, g) in grads.iter().enumerate() {
            for j in 0..params.tensors[k].1.len() {
                let mut p = params.clone();
                let mut m = params.clone();
                p.tensors[k].1.data_mut()[j] += h;
                m.tensors[k].1.data_mut()[j] -= h;
                let fd = (sum_logits(&p) - sum_logits(&m)) / (2.0 * h);
                let a = g.value().data()[j];
                assert!((a - fd).abs() <= 1e-5 * a.abs().max(fd.abs()).max(1e-6), "tensor {k}[{j}]: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let tape = Tape::default();
        let uniform = tape.constant(Tensor::filled(&[3, 10], 0.4));
        let l = cross_entropy_per_sample(&uniform, &[0, 4, 9]).unwrap();
        for v in l.value().data() {
            assert!((v - 10f64.ln()).abs() < 1e-12);
        }
        let mut z = vec![0.0; 10];
        z[2] = 30.0;
        let sharp = tape.constant(Tensor::matrix(1, 10, z));
        assert!(cross_entropy_per_sample(&sharp, &[2]).unwrap().item() < 1e-9);
        let two = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]));
        assert!((cross_entropy_per_sample(&two, &[0]).unwrap().item() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(
            cross_entropy_per_sample(&two, &[2]).unwrap_err(),
            ModelError::LabelOutOfRange { label: 2, classes: 2 }
        );
    }

    #[test]
    fn cross_entropy_is_shift_invariant_and_matches_softmax() {
        let logits = Tensor::matrix(2, 3, vec![1.0, -0.5, 2.0, 0.3, 0.3, -4.0]);
        let shifted = Tensor::matrix(2, 3, vec![101.0, 99.5, 102.0, -6.7, -6.7, -11.0]);
        let a = cross_entropy_values(&logits, &[1, 2]).unwrap();
        let b = cross_entropy_values(&shifted, &[1, 2]).unwrap();
        for i in 0..2 {
            assert!((a[i] - b[i]).abs() < 1e-12);
            let p = crate::autodiff::softmax(logits.row(i));
            assert!((a[i] + p[[1, 2][i]].ln()).abs() < 1e-12);
            assert!(a[i] >= 0.0);
        }
    }

    #[test]
    fn accuracy_examples() {
        let eye = Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        assert_eq!(accuracy(&eye, &[0, 1, 2]), 1.0);
        assert_eq!(accuracy(&Tensor::zeros(&[4, 3]), &[0, 0, 0, 0]), 1.0);
        let crafted = Tensor::matrix(4, 2, vec![1., 0., 0., 1., 1., 0., 0., 1.]);
        assert_eq!(accuracy(&crafted, &[0, 1, 1, 0]), 0.5);
    }

    #[test]
    fn glorot_bounds() {
        let spec = MlpSpec::new(vec![20, 64, 10], 1).unwrap();
        let p = spec.init_params();
        let s0 = (6.0f64 / 84.0).sqrt();
        assert!(p.tensors[0].1.data().iter().all(|v| v.abs() <= s0));
        assert!(p.tensors[1].1.data().iter().all(|&v| v == 0.0));
        assert_eq!(p, spec.init_params());
        assert_eq!(p.num_scalars(), 20 * 64 + 64 + 64 * 10 + 10);
    }
}
