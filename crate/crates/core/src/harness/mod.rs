//! Seeded experiment runs from config files, test-set evaluation, and
//! summary tables.

mod config;
mod report;
mod run;

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::data::{DataError, LabeledDataset};
use crate::model::{accuracy, cross_entropy_values, MlpSpec, ModelError, ModelParams};
use crate::risk::{RiskError, RiskFunctional};
use crate::train::TrainError;

pub use config::{DataSource, ExperimentConfig, ExperimentKind, GridPoint, Method, RawConfig};
pub use report::{compare_report, parse_results_csv, results_csv, summary_csv, summary_text, ResultRow, SummaryEntry};
pub use run::{load_points, prepare_data, run, run_seed, RunSummary, SeedOutput};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("results file: {0}")]
    BadResults(String),
    #[error("no result rows to summarize")]
    EmptyReport,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

impl HarnessError {
    pub(crate) fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        HarnessError::Io { path: path.display().to_string(), msg: e.to_string() }
    }
}

/// Test-set risks of one model under every reported functional, plus accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskReport {
    pub entries: Vec<(String, f64)>,
    pub accuracy: f64,
}

impl RiskReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Names of the always-reported functionals, in column order.
pub fn report_names() -> Vec<String> {
    RiskFunctional::report_set().iter().map(ToString::to_string).collect()
}

/// Computes the per-sample test losses once and evaluates every reported
/// functional, and `extra` when it is not among them, on that one vector.
pub fn evaluate_all(
    spec: &MlpSpec,
    theta: &ModelParams,
    test: &LabeledDataset,
    extra: &RiskFunctional,
) -> Result<RiskReport, HarnessError> {
    let logits: Tensor = spec.predict(theta, test.features())?;
    let losses = cross_entropy_values(&logits, test.labels())?;
    let mut set = RiskFunctional::report_set();
    if !set.contains(extra) {
        set.push(extra.clone());
    }
    let entries =
        set.iter().map(|rf| Ok((rf.to_string(), rf.evaluate(&losses)?))).collect::<Result<Vec<_>, RiskError>>()?;
    Ok(RiskReport { entries, accuracy: accuracy(&logits, test.labels()) })
}
