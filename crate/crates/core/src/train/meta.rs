use super::{check_finite, Adam, PhiGradPolicy, TrainError};
use crate::autodiff::{backward, Var};
use crate::learned::{apply, PhiParams};
use crate::model::LossModel;
use crate::risk::RiskFunctional;

/// Result of the differentiable inner loop.
#[derive(Debug)]
pub struct Adapted {
    /// Adapted parameters, still connected to φ on the tape.
    pub theta_prime: Vec<Var>,
    /// Sum of the direct φ gradients produced by the inner backward passes.
    /// Reported for inspection only; it never reaches the φ update.
    pub dropped_phi_grad: Vec<f64>,
    /// Head value on each inner batch.
    pub inner_risks: Vec<f64>,
}

/// Runs one differentiable SGD step per batch, `θ′ ← θ′ − β ∇θ′ g_φ(ℓ)`.
pub fn inner_adapt<M: LossModel>(
    model: &M,
    theta: &[Var],
    phi: &Var,
    batches: &[M::Batch],
    beta: f64,
    policy: PhiGradPolicy,
) -> Result<Adapted, TrainError> {
    adapt(model, theta, phi, batches, beta, policy, true)
}

pub(super) fn adapt<M: LossModel>(
    model: &M,
    theta: &[Var],
    phi: &Var,
    batches: &[M::Batch],
    beta: f64,
    policy: PhiGradPolicy,
    request_phi_grad: bool,
) -> Result<Adapted, TrainError> {
    if batches.is_empty() {
        return Err(TrainError::InvalidConfig("inner_steps: must be positive".into()));
    }
    let head = match policy {
        PhiGradPolicy::Drop => phi.clone(),
        PhiGradPolicy::Detach => phi.detach(),
    };
    let with_phi = request_phi_grad && policy == PhiGradPolicy::Drop;
    let mut theta_prime = theta.to_vec();
    let mut dropped = vec![0.0; phi.value().len()];
    let mut inner_risks = Vec::with_capacity(batches.len());
    for batch in batches {
        let losses = model.per_sample_losses(&theta_prime, batch)?;
        check_finite("inner", losses.value().data())?;
        let g = apply(&head, &losses)?;
        inner_risks.push(g.item());
        let mut wrt = theta_prime.clone();
        if with_phi {
            wrt.push(phi.clone());
        }
        let mut grads = backward(&g, &wrt, true)?;
        if with_phi {
            let direct = grads.pop().expect("phi gradient requested");
            for (d, v) in dropped.iter_mut().zip(direct.value().data()) {
                *d += v;
            }
        }
        theta_prime =
            theta_prime.iter().zip(&grads).map(|(p, gp)| p.sub(&gp.scale(beta)?)).collect::<Result<_, _>>()?;
    }
    Ok(Adapted { theta_prime, dropped_phi_grad: dropped, inner_risks })
}

/// `∇φ ρ(ℓ(θ′; val))` and the validation risk value. With `require_path`,
/// a validation risk that does not depend on φ is an error.
pub fn meta_gradient<M: LossModel>(
    model: &M,
    theta_prime: &[Var],
    phi: &Var,
    val_batch: &M::Batch,
    rho: &RiskFunctional,
    require_path: bool,
) -> Result<(Vec<f64>, f64), TrainError> {
    let losses = model.per_sample_losses(theta_prime, val_batch)?;
    check_finite("validation", losses.value().data())?;
    let risk = rho.evaluate_var(&losses)?;
    if require_path && !phi.tape().depends_on(&risk, phi) {
        return Err(TrainError::SeveredMetaGradient);
    }
    let grad = backward(&risk, std::slice::from_ref(phi), false)?.remove(0);
    let grad = grad.value().data().to_vec();
    Ok((grad, risk.item()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OuterOutcome {
    pub grad: Vec<f64>,
    pub val_risk: f64,
}

/// One Adam step on φ along the meta-gradient.
#[allow(clippy::too_many_arguments)]
pub fn outer_step<M: LossModel>(
    model: &M,
    params: &mut PhiParams,
    phi: &Var,
    theta_prime: &[Var],
    val_batch: &M::Batch,
    rho: &RiskFunctional,
    adam: &mut Adam,
    require_path: bool,
) -> Result<OuterOutcome, TrainError> {
    let (grad, val_risk) = meta_gradient(model, theta_prime, phi, val_batch, rho, require_path)?;
    adam.step(params.logits_mut(), &grad);
    Ok(OuterOutcome { grad, val_risk })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};
    use crate::model::ModelError;
    use crate::train::AdamConfig;

    /// `ŷ = w·x` with squared error, one scalar parameter.
    pub(crate) struct ScalarRegression;

    pub(crate) struct Pairs {
        pub x: Vec<f64>,
        pub y: Vec<f64>,
    }

    impl LossModel for ScalarRegression {
        type Batch = Pairs;

        fn per_sample_losses(&self, params: &[Var], batch: &Pairs) -> Result<Var, ModelError> {
            let tape = params[0].tape();
            let n = batch.x.len();
            let x = tape.constant(Tensor::vector(batch.x.clone()));
            let y = tape.constant(Tensor::vector(batch.y.clone()));
            Ok(params[0].expand(&[n])?.mul(&x)?.sub(&y)?.square()?)
        }
    }

    fn pairs(x: &[f64], y: &[f64]) -> Pairs {
        Pairs { x: x.to_vec(), y: y.to_vec() }
    }

    #[test]
    fn one_hand_computed_step() {
        let tape = Tape::default();
        let w = tape.var(Tensor::scalar(1.0));
        let phi = PhiParams::init(1).unwrap().to_var(&tape);
        let a = inner_adapt(&ScalarRegression, &[w], &phi, &[pairs(&[1.0], &[0.0])], 0.1, PhiGradPolicy::Drop).unwrap();
        assert!((a.theta_prime[0].item() - 0.8).abs() < 1e-15);
        assert_eq!(a.inner_risks, vec![1.0]);
    }

    #[test]
    fn zero_step_size_leaves_theta_and_kills_meta_gradient() {
        let tape = Tape::default();
        let w = tape.var(Tensor::scalar(0.7));
        let phi = tape.var(Tensor::vector(vec![0.3, -0.2, 0.5]));
        let batch = pairs(&[1.0, 2.0, -1.0], &[0.5, 0.1, 0.4]);
        let a = inner_adapt(&ScalarRegression, &[w], &phi, &[batch], 0.0, PhiGradPolicy::Drop).unwrap();
        assert_eq!(a.theta_prime[0].item(), 0.7);
        let val = pairs(&[0.5, 1.5, 3.0], &[0.0, 1.0, 2.0]);
        let (g, _) =
            meta_gradient(&ScalarRegression, &a.theta_prime, &phi, &val, &RiskFunctional::ExpectedValue, true).unwrap();
        assert!(g.iter().all(|v| *v == 0.0), "{g:?}");
    }

    #[test]
    fn saturated_head_matches_single_sample_step() {
        let tape = Tape::default();
        let w = tape.var(Tensor::scalar(0.5));
        // largest loss is sample 1: (0.5*2 - 3)^2 = 4
        let batch = pairs(&[1.0, 2.0, 1.0], &[0.0, 3.0, 1.0]);
        let phi = tape.var(Tensor::vector(vec![20.0, -20.0, -20.0]));
        let a = inner_adapt(&ScalarRegression, &[w], &phi, &[batch], 0.1, PhiGradPolicy::Drop).unwrap();
        // plain step on sample 1: grad = 2(wx - y)x = 2(-2)(2) = -8
        let expected = 0.5 + 0.1 * 8.0;
        assert!((a.theta_prime[0].item() - expected).abs() < 1e-6);
    }

    #[test]
    fn detached_head_severs_the_meta_gradient() {
        let tape = Tape::default();
        let w = tape.var(Tensor::scalar(0.5));
        let phi = tape.var(Tensor::vector(vec![0.0, 0.0]));
        let a =
            inner_adapt(&ScalarRegression, &[w], &phi, &[pairs(&[1.0, 2.0], &[0.0, 3.0])], 0.1, PhiGradPolicy::Detach)
                .unwrap();
        let val = pairs(&[1.0], &[1.0]);
        let rho = RiskFunctional::ExpectedValue;
        assert_eq!(
            meta_gradient(&ScalarRegression, &a.theta_prime, &phi, &val, &rho, true).unwrap_err(),
            TrainError::SeveredMetaGradient
        );
        let (g, _) = meta_gradient(&ScalarRegression, &a.theta_prime, &phi, &val, &rho, false).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn discarding_direct_phi_gradients_changes_nothing() {
        let run = |request: bool| {
            let tape = Tape::default();
            let w = tape.var(Tensor::scalar(0.2));
            let phi = tape.var(Tensor::vector(vec![0.4, -0.1, 0.2]));
            let batches = [pairs(&[1.0, -2.0, 0.5], &[1.0, 0.3, -0.4]), pairs(&[0.3, 1.2, -0.7], &[0.9, -1.1, 0.2])];
            let a = adapt(&ScalarRegression, &[w], &phi, &batches, 0.05, PhiGradPolicy::Drop, request).unwrap();
            let val = pairs(&[1.0, 2.0, 3.0, -1.0], &[0.5, 1.0, 0.2, 0.0]);
            let rho = RiskFunctional::Cvar { alpha: 0.5 };
            let out = meta_gradient(&ScalarRegression, &a.theta_prime, &phi, &val, &rho, true).unwrap();
            (out, a.dropped_phi_grad)
        };
        let (with, dropped) = run(true);
        let (without, none) = run(false);
        assert_eq!(with, without);
        assert!(dropped.iter().any(|v| *v != 0.0));
        assert!(none.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn meta_gradient_matches_finite_differences() {
        let batches = [
            pairs(&[1.0, -2.0, 0.5, 1.5], &[1.0, 0.3, -0.4, 2.0]),
            pairs(&[0.3, 1.2, -0.7, 2.2], &[0.9, -1.1, 0.2, 1.0]),
        ];
        let val = pairs(&[1.0, 2.0, 3.0, -1.0, 0.4], &[0.5, 1.0, 0.2, 0.0, 0.7]);
        let rho = RiskFunctional::Cvar { alpha: 0.4 };
        let logits = vec![0.3, -0.5, 0.1, 0.6];
        let value = |l: &[f64], grad: bool| {
            let tape = Tape::default();
            let w = tape.var(Tensor::scalar(0.2));
            let phi = tape.var(Tensor::vector(l.to_vec()));
            let a = inner_adapt(&ScalarRegression, &[w], &phi, &batches, 0.05, PhiGradPolicy::Drop).unwrap();
            if grad {
                meta_gradient(&ScalarRegression, &a.theta_prime, &phi, &val, &rho, true).unwrap()
            } else {
                let losses = ScalarRegression.per_sample_losses(&a.theta_prime, &val).unwrap();
                (Vec::new(), rho.evaluate(losses.value().data()).unwrap())
            }
        };
        let (g, _) = value(&logits, true);
        let h = 1e-5;
        for i in 0..logits.len() {
            let mut p = logits.clone();
            let mut m = logits.clone();
            p[i] += h;
            m[i] -= h;
            let fd = (value(&p, false).1 - value(&m, false).1) / (2.0 * h);
            assert!((g[i] - fd).abs() <= 1e-4 * g[i].abs().max(fd.abs()).max(1e-8), "{i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn symmetric_batch_keeps_phi_symmetric() {
        // every sample identical: sorted positions are exchangeable
        let tape = Tape::default();
        let w = tape.var(Tensor::scalar(0.3));
        let phi_params = PhiParams::init(4).unwrap();
        let phi = phi_params.to_var(&tape);
        let batch = pairs(&[1.0; 4], &[2.0; 4]);
        let a = inner_adapt(&ScalarRegression, &[w], &phi, &[batch], 0.1, PhiGradPolicy::Drop).unwrap();
        let mut params = phi_params.clone();
        let mut adam = Adam::new(AdamConfig::default(), 4);
        let val = pairs(&[1.0, 0.5], &[0.0, 1.0]);
        outer_step(
            &ScalarRegression,
            &mut params,
            &phi,
            &a.theta_prime,
            &val,
            &RiskFunctional::ExpectedValue,
            &mut adam,
            true,
        )
        .unwrap();
        let l = params.logits();
        assert!(l.iter().all(|v| *v == l[0]), "{l:?}");
    }
}
