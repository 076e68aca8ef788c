//! Naive reference evaluation of every risk functional.
//!
//! Shares no code with the estimators: order statistics come from repeated
//! linear-scan selection rather than sorting, ranks from pairwise counting
//! and the variance from the pairwise-difference identity. Tail sums run in
//! the same canonical order as the estimators (largest-first for CVaR,
//! smallest-first otherwise) so the order-statistic kinds agree bitwise.

use super::{RiskError, RiskFunctional};

const MAX_LEN: usize = 16;

/// Evaluates `functional` on `losses` (at most 16 values) by enumeration.
pub fn brute_force_oracle(losses: &[f64], functional: &RiskFunctional) -> Result<f64, RiskError> {
    if losses.len() > MAX_LEN {
        return Err(RiskError::Oversize(losses.len()));
    }
    if losses.is_empty() {
        return Err(RiskError::Empty);
    }
    functional.validate()?;
    let n = losses.len();
    Ok(match functional {
        RiskFunctional::ExpectedValue => {
            let mut s = 0.0;
            for &l in losses {
                s += l;
            }
            s / n as f64
        }
        RiskFunctional::Cvar { alpha } => {
            let k = count(*alpha, n);
            let order = selection_order(losses, true);
            let mut s = 0.0;
            for &i in order.iter().take(k) {
                s += losses[i];
            }
            s / k as f64
        }
        RiskFunctional::Icvar { alpha } => {
            let k = count(*alpha, n);
            let order = selection_order(losses, false);
            let mut s = 0.0;
            for &i in order.iter().take(k) {
                s += losses[i];
            }
            s / k as f64
        }
        RiskFunctional::Trimmed { alpha } => {
            let k = count(*alpha, n);
            if 2 * k >= n {
                return Err(RiskError::TrimLeavesNothing { n, k });
            }
            let order = selection_order(losses, false);
            let mut s = 0.0;
            for &i in &order[k..n - k] {
                s += losses[i];
            }
            s / (n - 2 * k) as f64
        }
        RiskFunctional::MeanVariance { c } => {
            let mut s = 0.0;
            for &l in losses {
                s += l;
            }
            let mean = s / n as f64;
            let mut pair = 0.0;
            for &a in losses {
                for &b in losses {
                    pair += (a - b) * (a - b);
                }
            }
            mean + c * pair / (2.0 * (n * n) as f64)
        }
        RiskFunctional::HumanAligned { w } => {
            let mut s = 0.0;
            for &l in losses {
                let at_or_below = losses.iter().filter(|&&o| o <= l).count();
                s += l * w.apply(at_or_below as f64 / n as f64);
            }
            s / n as f64
        }
    })
}

/// Smallest integer `k ≥ 1` with `k ≥ α·n` (up to rounding slack).
fn count(alpha: f64, n: usize) -> usize {
    let target = alpha * n as f64;
    let mut k = 1;
    while (k as f64) < target - 1e-9 && k < n {
        k += 1;
    }
    k
}

/// Indices in selection order: repeatedly take the extreme of what remains,
/// the lowest index winning ties.
fn selection_order(losses: &[f64], largest_first: bool) -> Vec<usize> {
    let n = losses.len();
    let mut taken = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) => {
                    let better = if largest_first { losses[i] > losses[b] } else { losses[i] < losses[b] };
                    Some(if better { i } else { b })
                }
            };
        }
        let b = best.expect("remaining element");
        taken[b] = true;
        order.push(b);
    }
    order
}
