use super::{check_alpha, tail_count, Distortion, RiskError};
use crate::autodiff::{argsort_desc, Tensor, Var};

fn non_empty(losses: &[f64]) -> Result<(), RiskError> {
    if losses.is_empty() {
        Err(RiskError::Empty)
    } else {
        Ok(())
    }
}

fn sorted_desc(losses: &[f64]) -> Vec<f64> {
    argsort_desc(losses).into_iter().map(|i| losses[i]).collect()
}

fn mean_of(values: impl Iterator<Item = f64>, count: usize) -> f64 {
    values.sum::<f64>() / count as f64
}

pub fn expected_value(losses: &[f64]) -> Result<f64, RiskError> {
    non_empty(losses)?;
    Ok(mean_of(losses.iter().copied(), losses.len()))
}

/// The `⌈α·n⌉`-th smallest loss.
pub fn var_alpha(losses: &[f64], alpha: f64) -> Result<f64, RiskError> {
    check_alpha("var", alpha, 1.0)?;
    non_empty(losses)?;
    let n = losses.len();
    let k = tail_count(alpha, n);
    Ok(sorted_desc(losses)[n - k])
}

/// Mean of the `⌈α·n⌉` largest losses, summed from the largest down.
pub fn cvar(losses: &[f64], alpha: f64) -> Result<f64, RiskError> {
    check_alpha("cvar", alpha, 1.0)?;
    non_empty(losses)?;
    let k = tail_count(alpha, losses.len());
    Ok(mean_of(sorted_desc(losses).into_iter().take(k), k))
}

/// Mean of the `⌈α·n⌉` smallest losses, summed from the smallest up.
pub fn icvar(losses: &[f64], alpha: f64) -> Result<f64, RiskError> {
    check_alpha("icvar", alpha, 1.0)?;
    non_empty(losses)?;
    let k = tail_count(alpha, losses.len());
    Ok(mean_of(sorted_desc(losses).into_iter().rev().take(k), k))
}

/// Mean after dropping `⌈α·n⌉` losses from each end, summed in ascending order.
pub fn trimmed(losses: &[f64], alpha: f64) -> Result<f64, RiskError> {
    check_alpha("trimmed", alpha, 0.5)?;
    non_empty(losses)?;
    let n = losses.len();
    let k = trim_count(alpha, n)?;
    let asc: Vec<f64> = sorted_desc(losses).into_iter().rev().collect();
    Ok(mean_of(asc[k..n - k].iter().copied(), n - 2 * k))
}

fn trim_count(alpha: f64, n: usize) -> Result<usize, RiskError> {
    let k = tail_count(alpha, n);
    if 2 * k >= n {
        return Err(RiskError::TrimLeavesNothing { n, k });
    }
    Ok(k)
}

/// Mean plus `c` times the population variance.
pub fn mean_variance(losses: &[f64], c: f64) -> Result<f64, RiskError> {
    if !(c >= 0.0) {
        return Err(RiskError::NegativeCoefficient(c));
    }
    let m = expected_value(losses)?;
    let var = mean_of(losses.iter().map(|l| (l - m) * (l - m)), losses.len());
    Ok(m + c * var)
}

/// `F̂(ℓ_i) = rank_i / n` with ascending ranks; tied losses share the largest rank.
pub fn empirical_cdf(losses: &[f64]) -> Vec<f64> {
    let n = losses.len();
    let asc: Vec<usize> = argsort_desc(losses).into_iter().rev().collect();
    let mut cdf = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && losses[asc[end]] == losses[asc[start]] {
            end += 1;
        }
        for &i in &asc[start..end] {
            cdf[i] = end as f64 / n as f64;
        }
        start = end;
    }
    cdf
}

/// `(1/n) Σ ℓ_i · w(F̂(ℓ_i))`.
pub fn human_aligned(losses: &[f64], w: &Distortion) -> Result<f64, RiskError> {
    non_empty(losses)?;
    let cdf = empirical_cdf(losses);
    Ok(mean_of(losses.iter().zip(&cdf).map(|(l, p)| l * w.apply(*p)), losses.len()))
}

fn losses_of(v: &Var) -> Result<Vec<f64>, RiskError> {
    let t = v.value();
    if t.rank() != 1 {
        return Err(crate::autodiff::AutodiffError::Shape { op: "risk", shapes: vec![t.shape().to_vec()] }.into());
    }
    non_empty(t.data())?;
    Ok(t.data().to_vec())
}

pub(super) fn expected_value_var(losses: &Var) -> Result<Var, RiskError> {
    losses_of(losses)?;
    Ok(losses.mean()?)
}

pub(super) fn cvar_var(losses: &Var, alpha: f64) -> Result<Var, RiskError> {
    check_alpha("cvar", alpha, 1.0)?;
    let n = losses_of(losses)?.len();
    let k = tail_count(alpha, n);
    let (sorted, _) = losses.sort_desc()?;
    let idx: Vec<usize> = (0..k).collect();
    Ok(sorted.gather(&idx)?.mean()?)
}

pub(super) fn icvar_var(losses: &Var, alpha: f64) -> Result<Var, RiskError> {
    check_alpha("icvar", alpha, 1.0)?;
    let n = losses_of(losses)?.len();
    let k = tail_count(alpha, n);
    let (sorted, _) = losses.sort_desc()?;
    let idx: Vec<usize> = (n - k..n).collect();
    Ok(sorted.gather(&idx)?.mean()?)
}

pub(super) fn trimmed_var(losses: &Var, alpha: f64) -> Result<Var, RiskError> {
    check_alpha("trimmed", alpha, 0.5)?;
    let n = losses_of(losses)?.len();
    let k = trim_count(alpha, n)?;
    let (sorted, _) = losses.sort_desc()?;
    let idx: Vec<usize> = (k..n - k).collect();
    Ok(sorted.gather(&idx)?.mean()?)
}

pub(super) fn mean_variance_var(losses: &Var, c: f64) -> Result<Var, RiskError> {
    if !(c >= 0.0) {
        return Err(RiskError::NegativeCoefficient(c));
    }
    let n = losses_of(losses)?.len();
    let m = losses.mean()?;
    let centered = losses.sub(&m.expand(&[n])?)?;
    let var = centered.square()?.mean()?;
    Ok(m.add(&var.scale(c)?)?)
}

pub(super) fn human_aligned_var(losses: &Var, w: &Distortion) -> Result<Var, RiskError> {
    let values = losses_of(losses)?;
    let n = values.len() as f64;
    let weights: Vec<f64> = empirical_cdf(&values).into_iter().map(|p| w.apply(p) / n).collect();
    let wt = losses.tape().constant(Tensor::vector(weights));
    Ok(losses.mul(&wt)?.sum()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{backward, Tape};
    use crate::risk::RiskFunctional;

    fn one_to_ten() -> Vec<f64> {
        (1..=10).map(f64::from).collect()
    }

    #[test]
    fn expected_value_examples() {
        assert_eq!(expected_value(&[1.0, 2.0, 3.0]).unwrap(), 2.0);
        assert!((expected_value(&[0.37; 7]).unwrap() - 0.37).abs() < 1e-15);
        assert!((expected_value(&[0.1, 0.5, 0.9, 1.3]).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(expected_value(&[]), Err(RiskError::Empty));
    }

    #[test]
    fn var_examples() {
        assert_eq!(var_alpha(&one_to_ten(), 0.9).unwrap(), 9.0);
        assert_eq!(var_alpha(&one_to_ten(), 0.1).unwrap(), 1.0);
        assert_eq!(var_alpha(&[5.0], 0.37).unwrap(), 5.0);
        assert!(var_alpha(&[5.0], 1.0).is_err());
    }

    #[test]
    fn cvar_icvar_examples() {
        let l = [0.1, 0.5, 0.9, 1.3];
        assert!((cvar(&l, 0.5).unwrap() - 1.1).abs() < 1e-15);
        assert_eq!(cvar(&one_to_ten(), 0.1).unwrap(), 10.0);
        assert_eq!(cvar(&[0.4; 6], 0.3).unwrap(), 0.4);
        assert!((icvar(&l, 0.5).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(icvar(&one_to_ten(), 0.1).unwrap(), 1.0);
        assert_eq!(icvar(&[0.4; 6], 0.3).unwrap(), 0.4);
        assert!(matches!(cvar(&l, 0.0), Err(RiskError::AlphaOutOfRange { .. })));
        assert!(matches!(icvar(&l, 1.0), Err(RiskError::AlphaOutOfRange { .. })));
    }

    #[test]
    fn trimmed_examples() {
        assert_eq!(trimmed(&[1.0, 2.0, 3.0, 4.0], 0.25).unwrap(), 2.5);
        assert_eq!(trimmed(&one_to_ten(), 0.1).unwrap(), 5.5);
        assert_eq!(trimmed(&[2.0; 5], 0.2).unwrap(), 2.0);
        assert_eq!(trimmed(&[1.0, 2.0], 0.1), Err(RiskError::TrimLeavesNothing { n: 2, k: 1 }));
    }

    #[test]
    fn mean_variance_examples() {
        let l = [0.3, 1.7, 0.2];
        assert_eq!(mean_variance(&l, 0.0).unwrap(), expected_value(&l).unwrap());
        assert_eq!(mean_variance(&[0.0, 2.0], 1.0).unwrap(), 2.0);
        assert_eq!(mean_variance(&[0.8; 4], 3.0).unwrap(), 0.8);
    }

    #[test]
    fn human_aligned_examples() {
        assert_eq!(human_aligned(&[1.0, 2.0], &Distortion::Identity).unwrap(), 1.25);
        let one = Distortion::Custom(std::sync::Arc::new(|p| if p > 0.0 { 1.0 } else { 0.0 }));
        let l = [0.3, 1.1, 0.7];
        assert!((human_aligned(&l, &one).unwrap() - expected_value(&l).unwrap()).abs() < 1e-15);
        assert_eq!(human_aligned(&[5.0], &Distortion::Tversky { gamma: 2.0 }).unwrap(), 5.0);
        assert_eq!(empirical_cdf(&[3.0, 1.0, 3.0, 2.0]), vec![1.0, 0.25, 1.0, 0.5]);
    }

    fn fd(rf: &RiskFunctional, x: &[f64]) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (rf.evaluate(&p).unwrap() - rf.evaluate(&m).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn node_estimators_match_values_and_gradients() {
        let losses = [0.83, 0.12, 1.94, 0.47, 0.66, 1.21, 0.05, 0.38, 2.6, 0.91];
        for rf in RiskFunctional::report_set()
            .into_iter()
            .chain([RiskFunctional::Cvar { alpha: 0.5 }, RiskFunctional::MeanVariance { c: 0.5 }])
        {
            let tape = Tape::default();
            let v = tape.var(Tensor::vector(losses.to_vec()));
            let r = rf.evaluate_var(&v).unwrap();
            let direct = rf.evaluate(&losses).unwrap();
            assert!((r.item() - direct).abs() < 1e-12, "{rf}: {} vs {direct}", r.item());
            let g = backward(&r, &[v], false).unwrap().remove(0);
            for (a, b) in g.value().data().iter().zip(fd(&rf, &losses)) {
                assert!((a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1e-6), "{rf}: {a} vs {b}");
            }
        }
    }
}
