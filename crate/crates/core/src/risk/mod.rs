//! Risk functionals over a finite vector of per-sample losses.
//!
//! Quantile-based functionals use the order-statistic convention
//! `k = ⌈α·n⌉`: CVaR averages the `k` largest losses, ICVaR the `k`
//! smallest, and trimmed risk drops `k` from each end.

mod estimators;
pub mod oracle;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Var};

pub use estimators::{cvar, empirical_cdf, expected_value, human_aligned, icvar, mean_variance, trimmed, var_alpha};
pub use oracle::brute_force_oracle;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiskError {
    #[error("loss vector is empty")]
    Empty,
    #[error("{kind}: alpha {alpha} outside its valid range {range}")]
    AlphaOutOfRange { kind: &'static str, alpha: f64, range: &'static str },
    #[error("mean-variance coefficient must be nonnegative, got {0}")]
    NegativeCoefficient(f64),
    #[error("trimming {k} from each end of {n} losses leaves nothing")]
    TrimLeavesNothing { n: usize, k: usize },
    #[error("brute-force oracle accepts at most 16 losses, got {0}")]
    Oversize(usize),
    #[error("invalid risk functional spec `{0}`")]
    Parse(String),
    #[error("distortion gamma must be positive, got {0}")]
    BadGamma(f64),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Probability distortion used by the human-aligned functional.
#[derive(Clone)]
pub enum Distortion {
    Identity,
    /// `w(p) = p^γ / (p^γ + (1-p)^γ)^(1/γ)`.
    Tversky {
        gamma: f64,
    },
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl Distortion {
    pub fn apply(&self, p: f64) -> f64 {
        match self {
            Distortion::Identity => p,
            Distortion::Tversky { gamma } => {
                let a = p.powf(*gamma);
                let b = (1.0 - p).powf(*gamma);
                a / (a + b).powf(1.0 / gamma)
            }
            Distortion::Custom(f) => f(p),
        }
    }
}

impl fmt::Debug for Distortion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Distortion::Identity => write!(f, "Identity"),
            Distortion::Tversky { gamma } => write!(f, "Tversky({gamma})"),
            Distortion::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl PartialEq for Distortion {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Distortion::Identity, Distortion::Identity) => true,
            (Distortion::Tversky { gamma: a }, Distortion::Tversky { gamma: b }) => a == b,
            (Distortion::Custom(a), Distortion::Custom(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

pub const DEFAULT_HUMAN_GAMMA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RiskKind {
    ExpectedValue,
    Cvar,
    Icvar,
    HumanAligned,
    MeanVariance,
    Trimmed,
}

/// A dataset-level risk functional with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum RiskFunctional {
    ExpectedValue,
    Cvar { alpha: f64 },
    Icvar { alpha: f64 },
    Trimmed { alpha: f64 },
    MeanVariance { c: f64 },
    HumanAligned { w: Distortion },
}

impl RiskFunctional {
    pub fn human(gamma: f64) -> Self {
        RiskFunctional::HumanAligned { w: Distortion::Tversky { gamma } }
    }

    pub fn kind(&self) -> RiskKind {
        match self {
            RiskFunctional::ExpectedValue => RiskKind::ExpectedValue,
            RiskFunctional::Cvar { .. } => RiskKind::Cvar,
            RiskFunctional::Icvar { .. } => RiskKind::Icvar,
            RiskFunctional::Trimmed { .. } => RiskKind::Trimmed,
            RiskFunctional::MeanVariance { .. } => RiskKind::MeanVariance,
            RiskFunctional::HumanAligned { .. } => RiskKind::HumanAligned,
        }
    }

    /// Checks parameter ranges.
    pub fn validate(&self) -> Result<(), RiskError> {
        match *self {
            RiskFunctional::Cvar { alpha } => check_alpha("cvar", alpha, 1.0),
            RiskFunctional::Icvar { alpha } => check_alpha("icvar", alpha, 1.0),
            RiskFunctional::Trimmed { alpha } => check_alpha("trimmed", alpha, 0.5),
            RiskFunctional::MeanVariance { c } if !(c >= 0.0) => Err(RiskError::NegativeCoefficient(c)),
            RiskFunctional::HumanAligned { w: Distortion::Tversky { gamma } } if !(gamma > 0.0) => {
                Err(RiskError::BadGamma(gamma))
            }
            _ => Ok(()),
        }
    }

    pub fn evaluate(&self, losses: &[f64]) -> Result<f64, RiskError> {
        match self {
            RiskFunctional::ExpectedValue => expected_value(losses),
            RiskFunctional::Cvar { alpha } => cvar(losses, *alpha),
            RiskFunctional::Icvar { alpha } => icvar(losses, *alpha),
            RiskFunctional::Trimmed { alpha } => trimmed(losses, *alpha),
            RiskFunctional::MeanVariance { c } => mean_variance(losses, *c),
            RiskFunctional::HumanAligned { w } => human_aligned(losses, w),
        }
    }

    /// Differentiable version over a rank-1 loss node.
    pub fn evaluate_var(&self, losses: &Var) -> Result<Var, RiskError> {
        match self {
            RiskFunctional::ExpectedValue => estimators::expected_value_var(losses),
            RiskFunctional::Cvar { alpha } => estimators::cvar_var(losses, *alpha),
            RiskFunctional::Icvar { alpha } => estimators::icvar_var(losses, *alpha),
            RiskFunctional::Trimmed { alpha } => estimators::trimmed_var(losses, *alpha),
            RiskFunctional::MeanVariance { c } => estimators::mean_variance_var(losses, *c),
            RiskFunctional::HumanAligned { w } => estimators::human_aligned_var(losses, w),
        }
    }

    /// The six functionals reported for every trained model.
    pub fn report_set() -> Vec<RiskFunctional> {
        vec![
            RiskFunctional::ExpectedValue,
            RiskFunctional::Cvar { alpha: 0.1 },
            RiskFunctional::Icvar { alpha: 0.1 },
            RiskFunctional::human(DEFAULT_HUMAN_GAMMA),
            RiskFunctional::MeanVariance { c: 1.0 },
            RiskFunctional::Trimmed { alpha: 0.1 },
        ]
    }
}

fn check_alpha(kind: &'static str, alpha: f64, upper: f64) -> Result<(), RiskError> {
    if alpha > 0.0 && alpha < upper {
        Ok(())
    } else {
        let range = if upper == 1.0 { "(0, 1)" } else { "(0, 0.5)" };
        Err(RiskError::AlphaOutOfRange { kind, alpha, range })
    }
}

/// `⌈α·n⌉`, clamped to `1..=n`. The small slack absorbs products such as
/// `0.7 * 10` landing one ulp above an integer.
pub fn tail_count(alpha: f64, n: usize) -> usize {
    let k = (alpha * n as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(n)
}

impl fmt::Display for RiskFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RiskFunctional::ExpectedValue => write!(f, "ev"),
            RiskFunctional::Cvar { alpha } => write!(f, "cvar:{alpha}"),
            RiskFunctional::Icvar { alpha } => write!(f, "icvar:{alpha}"),
            RiskFunctional::Trimmed { alpha } => write!(f, "trimmed:{alpha}"),
            RiskFunctional::MeanVariance { c } => write!(f, "meanvar:{c}"),
            RiskFunctional::HumanAligned { w: Distortion::Tversky { gamma } } => write!(f, "human:{gamma}"),
            RiskFunctional::HumanAligned { w: Distortion::Identity } => write!(f, "human:1"),
            RiskFunctional::HumanAligned { w: Distortion::Custom(_) } => write!(f, "human:custom"),
        }
    }
}

impl FromStr for RiskFunctional {
    type Err = RiskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || RiskError::Parse(s.to_string());
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim().parse::<f64>().map_err(|_| bad())?)),
            None => (s, None),
        };
        let rf = match (name, arg) {
            ("ev", None) => RiskFunctional::ExpectedValue,
            ("cvar", Some(alpha)) => RiskFunctional::Cvar { alpha },
            ("icvar", Some(alpha)) => RiskFunctional::Icvar { alpha },
            ("trimmed", Some(alpha)) => RiskFunctional::Trimmed { alpha },
            ("meanvar", Some(c)) => RiskFunctional::MeanVariance { c },
            ("human", Some(gamma)) => RiskFunctional::human(gamma),
            ("human", None) => RiskFunctional::human(DEFAULT_HUMAN_GAMMA),
            _ => return Err(bad()),
        };
        rf.validate()?;
        Ok(rf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_spec_strings() {
        for s in ["ev", "cvar:0.1", "icvar:0.1", "trimmed:0.1", "meanvar:1", "human:2"] {
            let rf: RiskFunctional = s.parse().unwrap();
            assert_eq!(rf.to_string(), s);
        }
        assert_eq!("meanvar:1.0".parse::<RiskFunctional>().unwrap(), RiskFunctional::MeanVariance { c: 1.0 });
        assert!("cvar".parse::<RiskFunctional>().is_err());
        assert!("cvar:1.5".parse::<RiskFunctional>().is_err());
        assert!("trimmed:0.5".parse::<RiskFunctional>().is_err());
        assert!("meanvar:-1".parse::<RiskFunctional>().is_err());
        assert!("median".parse::<RiskFunctional>().is_err());
    }

    #[test]
    fn tail_count_is_ceiling() {
        assert_eq!(tail_count(0.9, 10), 9);
        assert_eq!(tail_count(0.1, 10), 1);
        assert_eq!(tail_count(0.7, 10), 7);
        assert_eq!(tail_count(0.1, 32), 4);
        assert_eq!(tail_count(0.01, 5), 1);
    }

    #[test]
    fn tversky_distortion_is_a_valid_weighting() {
        let w = Distortion::Tversky { gamma: DEFAULT_HUMAN_GAMMA };
        assert_eq!(w.apply(0.0), 0.0);
        assert!((w.apply(1.0) - 1.0).abs() < 1e-15);
        let mut prev = 0.0;
        for i in 1..=1000 {
            let v = w.apply(i as f64 / 1000.0);
            assert!(v >= prev, "not monotone at {i}");
            prev = v;
        }
        let id = Distortion::Tversky { gamma: 1.0 };
        assert!((id.apply(0.3) - 0.3).abs() < 1e-15);
    }
}
