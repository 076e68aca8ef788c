//! Experiment files: `key = value` lines grouped under `[section]` headers,
//! `#` starting a comment.
//!
//! ```text
//! [experiment]
//! kind = label_noise
//! method = learned
//! seeds = 0,1,2,3,4
//!
//! [data]
//! noise = 0.4
//! ```
//!
//! With `--grid`, any value other than `seeds` may be a comma-separated list;
//! the run matrix is the cartesian product of all lists.

use std::path::PathBuf;
use std::str::FromStr;

use super::HarnessError;
use crate::risk::RiskFunctional;
use crate::train::{AdamConfig, InnerLr, OneCycle, PhiGradPolicy, StopMetric, TrainerConfig};

/// Parsed `section.key = value` pairs in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawConfig {
    pub entries: Vec<(String, String)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut entries: Vec<(String, String)> = Vec::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| HarnessError::Parse { line: i + 1, msg };
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| err(format!("unterminated section `{line}`")))?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let key = if section.is_empty() { k.trim().to_string() } else { format!("{section}.{}", k.trim()) };
            if entries.iter().any(|(e, _)| *e == key) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            entries.push((key, v.trim().to_string()));
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set(&mut self, key: &str, value: String) {
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    /// One config per point of the comma-list product, each labelled by the
    /// values it fixes for the listed keys other than `experiment.method`.
    pub fn expand_grid(&self) -> Vec<GridPoint> {
        let mut points = vec![GridPoint { label: Vec::new(), raw: RawConfig::default() }];
        for (key, value) in &self.entries {
            let options: Vec<&str> =
                if key == SEEDS_KEY { vec![value.as_str()] } else { value.split(',').map(str::trim).collect() };
            let mut next = Vec::with_capacity(points.len() * options.len());
            for p in &points {
                for opt in &options {
                    let mut q = p.clone();
                    q.raw.entries.push((key.clone(), opt.to_string()));
                    if options.len() > 1 && key != METHOD_KEY {
                        q.label.push((key.clone(), opt.to_string()));
                    }
                    next.push(q);
                }
            }
            points = next;
        }
        points
    }
}

const SEEDS_KEY: &str = "experiment.seeds";
const METHOD_KEY: &str = "experiment.method";

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub label: Vec<(String, String)>,
    pub raw: RawConfig,
}

impl GridPoint {
    /// `key=value;...` over the grid keys that vary, empty without a grid.
    pub fn group(&self) -> String {
        self.label.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
    }

    /// Output subdirectory for the group, `.` when there is none.
    pub fn dir_name(&self) -> String {
        if self.label.is_empty() {
            return ".".into();
        }
        let s = self.label.iter().map(|(k, v)| format!("{k}-{v}")).collect::<Vec<_>>().join("_");
        s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' { c } else { '_' }).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    RiskCompare,
    LabelNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Ev,
    BatchRho,
    BatchRhoWarm,
    Learned,
    Oracle,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ev => "ev",
            Method::BatchRho => "batch_rho",
            Method::BatchRhoWarm => "batch_rho_warm",
            Method::Learned => "learned",
            Method::Oracle => "oracle",
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "ev" => Method::Ev,
            "batch_rho" => Method::BatchRho,
            "batch_rho_warm" => Method::BatchRhoWarm,
            "learned" => Method::Learned,
            "oracle" => Method::Oracle,
            other => return Err(format!("unknown method `{other}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Gaussian blobs; the test set is drawn from the same clusters.
    Blobs {
        seed: u64,
        n: usize,
        classes: usize,
        dim: usize,
        spread: f64,
        n_test: usize,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub rho: RiskFunctional,
    pub method: Method,
    pub data: DataSource,
    pub noise: f64,
    pub clean_val: bool,
    pub hidden: Vec<usize>,
    pub freeze_phi: bool,
    pub trainer: TrainerConfig,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

const KNOWN_KEYS: &[&str] = &[
    "experiment.kind",
    "experiment.rho",
    "experiment.method",
    "experiment.seeds",
    "experiment.out",
    "experiment.freeze_phi",
    "data.source",
    "data.seed",
    "data.n",
    "data.classes",
    "data.dim",
    "data.spread",
    "data.n_test",
    "data.noise",
    "data.clean_val",
    "data.train_images",
    "data.train_labels",
    "data.test_images",
    "data.test_labels",
    "model.hidden",
    "trainer.batch_size",
    "trainer.total_steps",
    "trainer.inner_steps",
    "trainer.meta_val_batch",
    "trainer.inner_lr",
    "trainer.outer_lr",
    "trainer.adam_beta1",
    "trainer.adam_beta2",
    "trainer.adam_eps",
    "trainer.start_lr",
    "trainer.max_lr",
    "trainer.final_lr",
    "trainer.warm_fraction",
    "trainer.momentum",
    "trainer.weight_decay",
    "trainer.grad_clip",
    "trainer.warm_start_steps",
    "trainer.early_stop_patience",
    "trainer.early_stop_metric",
    "trainer.phi_grad",
    "trainer.fresh_inner_batches",
];

struct Reader<'a> {
    raw: &'a RawConfig,
    errors: Vec<String>,
}

impl Reader<'_> {
    fn get<T: FromStr>(&mut self, key: &str, default: T) -> T
    where
        T::Err: std::fmt::Display,
    {
        match self.raw.get(key) {
            None => default,
            Some(v) if v.contains(',') && key != SEEDS_KEY => {
                self.errors.push(format!("{key}: `{v}` is a list; pass --grid to expand it"));
                default
            }
            Some(v) => v.parse().unwrap_or_else(|e| {
                self.errors.push(format!("{key}: cannot parse `{v}`: {e}"));
                default
            }),
        }
    }

    fn path(&mut self, key: &str) -> PathBuf {
        match self.raw.get(key) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => {
                self.errors.push(format!("{key}: required for data.source = idx"));
                PathBuf::new()
            }
        }
    }
}

struct Kind(ExperimentKind);

impl FromStr for Kind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "risk_compare" => Ok(Kind(ExperimentKind::RiskCompare)),
            "label_noise" => Ok(Kind(ExperimentKind::LabelNoise)),
            other => Err(format!("unknown kind `{other}`")),
        }
    }
}

/// `64`, `64x32`, or `none` for a linear model.
struct Hidden(Vec<usize>);

impl FromStr for Hidden {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "none" || s == "0" {
            return Ok(Hidden(Vec::new()));
        }
        s.split('x')
            .map(|w| w.trim().parse::<usize>().map_err(|e| format!("bad width `{w}`: {e}")))
            .collect::<Result<Vec<_>, _>>()
            .map(Hidden)
    }
}

struct Seeds(Vec<u64>);

impl FromStr for Seeds {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|v| v.trim().parse::<u64>().map_err(|e| format!("bad seed `{v}`: {e}")))
            .collect::<Result<Vec<_>, _>>()
            .map(Seeds)
    }
}

struct Patience(Option<usize>);

impl FromStr for Patience {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" | "off" => Ok(Patience(None)),
            v => v.parse().map(|p| Patience(Some(p))).map_err(|e| format!("{e}")),
        }
    }
}

struct Clip(Option<f64>);

impl FromStr for Clip {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" | "off" => Ok(Clip(None)),
            v => v.parse().map(|c| Clip(Some(c))).map_err(|e| format!("{e}")),
        }
    }
}

struct Stop(StopMetric);

impl FromStr for Stop {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rho" => Ok(Stop(StopMetric::Risk)),
            "accuracy" => Ok(Stop(StopMetric::Error)),
            other => Err(format!("expected `rho` or `accuracy`, got `{other}`")),
        }
    }
}

struct Beta(InnerLr);

impl FromStr for Beta {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "scheduled" => Ok(Beta(InnerLr::Scheduled)),
            v => v.parse().map(|b| Beta(InnerLr::Fixed(b))).map_err(|e| format!("{e}")),
        }
    }
}

struct Policy(PhiGradPolicy);

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "drop" => Ok(Policy(PhiGradPolicy::Drop)),
            "detach" => Ok(Policy(PhiGradPolicy::Detach)),
            other => Err(format!("expected `drop` or `detach`, got `{other}`")),
        }
    }
}

impl ExperimentConfig {
    /// Builds a validated config; every problem found is reported at once.
    pub fn from_raw(raw: &RawConfig) -> Result<Self, HarnessError> {
        let mut r = Reader { raw, errors: Vec::new() };
        for (k, _) in &raw.entries {
            if !KNOWN_KEYS.contains(&k.as_str()) {
                r.errors.push(format!("{k}: unknown key"));
            }
        }
        let kind = r.get("experiment.kind", Kind(ExperimentKind::RiskCompare)).0;
        let rho = r.get("experiment.rho", RiskFunctional::ExpectedValue);
        let method = r.get("experiment.method", Method::Learned);
        let seeds = r.get(SEEDS_KEY, Seeds(vec![0, 1, 2, 3, 4])).0;
        let out = PathBuf::from(raw.get("experiment.out").unwrap_or("results"));
        let freeze_phi = r.get("experiment.freeze_phi", false);

        let source = raw.get("data.source").unwrap_or("blobs").to_string();
        let data = match source.as_str() {
            "blobs" => DataSource::Blobs {
                seed: r.get("data.seed", 0),
                n: r.get("data.n", 5000),
                classes: r.get("data.classes", 10),
                dim: r.get("data.dim", 20),
                spread: r.get("data.spread", 1.2),
                n_test: r.get("data.n_test", 1000),
            },
            "idx" => DataSource::Idx {
                train_images: r.path("data.train_images"),
                train_labels: r.path("data.train_labels"),
                test_images: r.path("data.test_images"),
                test_labels: r.path("data.test_labels"),
            },
            other => {
                r.errors.push(format!("data.source: expected `blobs` or `idx`, got `{other}`"));
                DataSource::Blobs { seed: 0, n: 0, classes: 0, dim: 0, spread: 0.0, n_test: 0 }
            }
        };
        let noise = r.get("data.noise", 0.0);
        let clean_val = r.get("data.clean_val", false);
        let hidden = r.get("model.hidden", Hidden(vec![64])).0;

        let d = TrainerConfig::default();
        let total_steps = r.get("trainer.total_steps", d.total_steps);
        let trainer = TrainerConfig {
            inner_lr: r.get("trainer.inner_lr", Beta(d.inner_lr)).0,
            adam: AdamConfig {
                lr: r.get("trainer.outer_lr", d.adam.lr),
                beta1: r.get("trainer.adam_beta1", d.adam.beta1),
                beta2: r.get("trainer.adam_beta2", d.adam.beta2),
                eps: r.get("trainer.adam_eps", d.adam.eps),
            },
            inner_steps: r.get("trainer.inner_steps", d.inner_steps),
            batch_size: r.get("trainer.batch_size", d.batch_size),
            meta_val_batch: r.get("trainer.meta_val_batch", d.meta_val_batch),
            total_steps,
            schedule: OneCycle {
                start_lr: r.get("trainer.start_lr", d.schedule.start_lr),
                max_lr: r.get("trainer.max_lr", d.schedule.max_lr),
                final_lr: r.get("trainer.final_lr", d.schedule.final_lr),
                warm_fraction: r.get("trainer.warm_fraction", d.schedule.warm_fraction),
            },
            momentum: r.get("trainer.momentum", d.momentum),
            weight_decay: r.get("trainer.weight_decay", d.weight_decay),
            grad_clip: r.get("trainer.grad_clip", Clip(d.grad_clip)).0,
            warm_start_steps: r.get("trainer.warm_start_steps", total_steps / 2),
            early_stop_patience: r.get("trainer.early_stop_patience", Patience(d.early_stop_patience)).0,
            monitor: rho.clone(),
            stop_on: r.get("trainer.early_stop_metric", Stop(d.stop_on)).0,
            seed: 0,
            phi_grad: r.get("trainer.phi_grad", Policy(d.phi_grad)).0,
            fresh_inner_batches: r.get("trainer.fresh_inner_batches", d.fresh_inner_batches),
        };

        let mut errors = r.errors;
        errors.extend(trainer.violations().into_iter().map(|v| format!("trainer.{v}")));
        if let Err(e) = rho.validate() {
            errors.push(format!("experiment.rho: {e}"));
        }
        if seeds.is_empty() {
            errors.push("experiment.seeds: must not be empty".into());
        }
        if method == Method::Oracle && kind != ExperimentKind::LabelNoise {
            errors.push("experiment.method: `oracle` is only valid for kind = label_noise".into());
        }
        if !(0.0..=1.0).contains(&noise) {
            errors.push(format!("data.noise: must lie in [0, 1], got {noise}"));
        }
        if hidden.contains(&0) {
            errors.push("model.hidden: widths must be positive".into());
        }
        if let DataSource::Blobs { n, classes, dim, spread, n_test, .. } = &data {
            if *classes < 2 || *n < *classes || *dim == 0 || !(*spread > 0.0) {
                errors.push(format!(
                    "data: blobs need n >= classes >= 2, dim >= 1, spread > 0 (n={n}, classes={classes}, dim={dim}, spread={spread})"
                ));
            }
            if *n_test == 0 {
                errors.push("data.n_test: must be positive".into());
            }
        }
        if !errors.is_empty() {
            return Err(HarnessError::Config(errors));
        }
        Ok(Self { kind, rho, method, data, noise, clean_val, hidden, freeze_phi, trainer, seeds, out })
    }
}
