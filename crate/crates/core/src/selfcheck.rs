//! Quick oracle and invariant checks behind the `check` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{backward, Tape, Tensor};
use crate::data::{gen_blobs, split_90_5_5};
use crate::learned::PhiParams;
use crate::model::{ClassBatch, LossModel, MlpSpec};
use crate::risk::{brute_force_oracle, RiskFunctional};
use crate::train::{inner_adapt, meta_gradient, train_fixed_rho, train_learned, PhiGradPolicy, TrainerConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn result(name: &'static str, failures: usize, total: usize) -> CheckResult {
    CheckResult { name, passed: failures == 0, detail: format!("{} of {total} cases agree", total - failures) }
}

pub fn run_all() -> Vec<CheckResult> {
    vec![risk_oracle(), head_bounds(), second_order(), meta_gradient_fd(), uniform_head_equivalence()]
}

fn functionals() -> Vec<RiskFunctional> {
    let mut f = vec![RiskFunctional::ExpectedValue, RiskFunctional::human(2.0)];
    for a in [0.1, 0.25, 0.5] {
        f.push(RiskFunctional::Cvar { alpha: a });
        f.push(RiskFunctional::Icvar { alpha: a });
    }
    f.push(RiskFunctional::Trimmed { alpha: 0.1 });
    f.push(RiskFunctional::Trimmed { alpha: 0.25 });
    for c in [0.0, 0.5, 1.0] {
        f.push(RiskFunctional::MeanVariance { c });
    }
    f
}

fn risk_oracle() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut fails, mut total) = (0, 0);
    for _ in 0..300 {
        let n = rng.random_range(1..=12);
        let losses: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        for f in functionals() {
            let (Ok(a), Ok(b)) = (f.evaluate(&losses), brute_force_oracle(&losses, &f)) else {
                continue;
            };
            total += 1;
            if (a - b).abs() > 1e-12 {
                fails += 1;
            }
        }
    }
    result("risk estimators vs brute-force oracle", fails, total)
}

fn head_bounds() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut fails = 0;
    for _ in 0..1000 {
        let b = rng.random_range(1..=16);
        let phi = PhiParams::from_logits((0..b).map(|_| rng.random_range(-10.0..10.0)).collect()).expect("b >= 1");
        let losses: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..10.0)).collect();
        let v = phi.apply_values(&losses).expect("matching length");
        let lo = losses.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = phi.weights().iter().sum();
        if v < lo - 1e-12 || v > hi + 1e-12 || (sum - 1.0).abs() > 1e-12 {
            fails += 1;
        }
    }
    result("risk head stays within [min, max] loss", fails, 1000)
}

fn second_order() -> CheckResult {
    // f(x) = sum(exp(x) * x^2); d2f/dx_i2 = exp(x)(x^2 + 4x + 2)
    let x = [0.3, -0.7, 1.1];
    let tape = Tape::default();
    let v = tape.var(Tensor::vector(x.to_vec()));
    let f = v.exp().and_then(|e| e.mul(&v.square()?)).and_then(|y| y.sum());
    let mut fails = 0;
    match f.and_then(|f| backward(&f, std::slice::from_ref(&v), true)) {
        Ok(g) => {
            for (i, &xi) in x.iter().enumerate() {
                let gi = g[0].gather(&[i]).and_then(|s| s.sum());
                let h = gi.and_then(|s| backward(&s, std::slice::from_ref(&v), false));
                let want = xi.exp() * (xi * xi + 4.0 * xi + 2.0);
                match h {
                    Ok(h) if (h[0].value().data()[i] - want).abs() <= 1e-12 * want.abs().max(1.0) => {}
                    _ => fails += 1,
                }
            }
        }
        Err(_) => fails = 3,
    }
    result("second-order gradients", fails, 3)
}

fn meta_gradient_fd() -> CheckResult {
    let spec = MlpSpec::linear(2, 2, 3).expect("valid widths");
    let theta0 = spec.init_params();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut batch = |n: usize| ClassBatch {
        features: Tensor::matrix(n, 2, (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect()),
        labels: (0..n).map(|i| i % 2).collect(),
    };
    let batches = [batch(4), batch(4)];
    let val = batch(6);
    let rho = RiskFunctional::Cvar { alpha: 0.5 };
    let logits = [0.2, -0.4, 0.1, 0.5];
    let eval = |l: &[f64], want_grad: bool| -> Option<(Vec<f64>, f64)> {
        let tape = Tape::default();
        let theta = theta0.to_vars(&tape);
        let phi = tape.var(Tensor::vector(l.to_vec()));
        let a = inner_adapt(&spec, &theta, &phi, &batches, 0.3, PhiGradPolicy::Drop).ok()?;
        if want_grad {
            return meta_gradient(&spec, &a.theta_prime, &phi, &val, &rho, true).ok();
        }
        let losses = spec.per_sample_losses(&a.theta_prime, &val).ok()?;
        Some((Vec::new(), rho.evaluate(losses.value().data()).ok()?))
    };
    let Some((g, _)) = eval(&logits, true) else {
        return result("meta-gradient vs finite differences", 4, 4);
    };
    let h = 1e-5;
    let mut fails = 0;
    for i in 0..4 {
        let mut p = logits;
        let mut m = logits;
        p[i] += h;
        m[i] -= h;
        let fd = match (eval(&p, false), eval(&m, false)) {
            (Some(a), Some(b)) => (a.1 - b.1) / (2.0 * h),
            _ => f64::NAN,
        };
        if !((g[i] - fd).abs() <= 1e-4 * g[i].abs().max(fd.abs()).max(1e-8)) {
            fails += 1;
        }
    }
    result("meta-gradient vs finite differences", fails, 4)
}

fn uniform_head_equivalence() -> CheckResult {
    let name = "frozen uniform head equals expected-value training";
    let fail = |d: String| CheckResult { name, passed: false, detail: d };
    let Ok(ds) = gen_blobs(5, 300, 3, 4, 1.0) else { return fail("data".into()) };
    let Ok(split) = split_90_5_5(&ds, 6) else { return fail("split".into()) };
    let Ok(spec) = MlpSpec::new(vec![4, 8, 3], 7) else { return fail("model".into()) };
    let cfg = TrainerConfig {
        batch_size: 8,
        meta_val_batch: 16,
        total_steps: 50,
        warm_start_steps: 25,
        early_stop_patience: None,
        ..TrainerConfig::default()
    };
    let ev = train_fixed_rho(&spec, split.training(), spec.init_params(), RiskFunctional::ExpectedValue, &cfg);
    let frozen = train_learned(&spec, split.training(), spec.init_params(), RiskFunctional::ExpectedValue, true, &cfg);
    match (ev, frozen) {
        (Ok(a), Ok(b)) => {
            let fails = a
                .records
                .iter()
                .zip(&b.records)
                .filter(|(x, y)| (x.train_risk - y.train_risk).abs() > 1e-9 * x.train_risk.abs())
                .count();
            result(name, fails, a.records.len())
        }
        (Err(e), _) | (_, Err(e)) => fail(e.to_string()),
    }
}
