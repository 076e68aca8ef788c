use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use super::config::{DataSource, ExperimentConfig, GridPoint, Method, RawConfig};
use super::report::{compare_report, results_csv, summary_csv, summary_text, ResultRow};
use super::{evaluate_all, report_names, HarnessError};
use crate::data::{gen_blobs, inject_label_noise, load_idx, split_90_5_5, LabeledDataset, SplitSet};
use crate::learned::WeightSnapshot;
use crate::model::{write_checkpoint, MlpSpec};
use crate::risk::RiskFunctional;
use crate::train::{
    records_csv, stream_seed, train_fixed_rho, train_learned, warm_start_then, Objective, TrainOutcome,
};

const NOISE_STREAM: u64 = 10;
const SPLIT_STREAM: u64 = 11;
const INIT_STREAM: u64 = 12;

/// Reads a config file and expands it into validated grid points. Without
/// `grid`, the file must describe exactly one experiment.
pub fn load_points(path: &Path, grid: bool) -> Result<Vec<(GridPoint, ExperimentConfig)>, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let raw = RawConfig::parse(&text)?;
    let points = if grid { raw.expand_grid() } else { vec![GridPoint { label: Vec::new(), raw }] };
    let mut out = Vec::with_capacity(points.len());
    let mut errors = Vec::new();
    for p in points {
        match ExperimentConfig::from_raw(&p.raw) {
            Ok(c) => out.push((p, c)),
            Err(HarnessError::Config(e)) => {
                let prefix = if p.group().is_empty() { String::new() } else { format!("[{}] ", p.group()) };
                errors.extend(e.into_iter().map(|m| format!("{prefix}{m}")));
            }
            Err(other) => return Err(other),
        }
    }
    if !errors.is_empty() {
        errors.dedup();
        return Err(HarnessError::Config(errors));
    }
    Ok(out)
}

fn pool_and_test(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset), HarnessError> {
    match &cfg.data {
        DataSource::Blobs { seed, n, classes, dim, spread, n_test } => {
            let all = gen_blobs(*seed, n + n_test, *classes, *dim, *spread)?;
            let pool: Vec<usize> = (0..*n).collect();
            let test: Vec<usize> = (*n..n + n_test).collect();
            Ok((all.subset(&pool), all.subset(&test)))
        }
        DataSource::Idx { train_images, train_labels, test_images, test_labels } => {
            Ok((load_idx(train_images, train_labels)?, load_idx(test_images, test_labels)?))
        }
    }
}

/// Builds the splits for one seed. Without a clean validation set, noise is
/// injected into the whole pool before splitting; with one, only the train
/// split is corrupted and validation is a clean carve-out of 2% of the pool.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<SplitSet, HarnessError> {
    let (pool, test) = pool_and_test(cfg)?;
    let noise_seed = stream_seed(seed, NOISE_STREAM);
    let split_seed = stream_seed(seed, SPLIT_STREAM);
    let noisy = cfg.noise > 0.0;
    let splits = if noisy && !cfg.clean_val {
        split_90_5_5(&inject_label_noise(&pool, cfg.noise, noise_seed)?, split_seed)?
    } else {
        let mut s = split_90_5_5(&pool, split_seed)?;
        if noisy {
            s.train = inject_label_noise(&s.train, cfg.noise, noise_seed)?;
        }
        if cfg.clean_val {
            let keep: Vec<usize> = (0..(pool.len() * 2 / 100).clamp(1, s.val.len())).collect();
            s.val = s.val.subset(&keep);
        }
        s
    };
    Ok(splits.with_test(test))
}

fn model_spec(cfg: &ExperimentConfig, train: &LabeledDataset, seed: u64) -> Result<MlpSpec, HarnessError> {
    let mut widths = vec![train.dim()];
    widths.extend(&cfg.hidden);
    widths.push(train.num_classes());
    Ok(MlpSpec::new(widths, stream_seed(seed, INIT_STREAM))?)
}

/// ICVaR at the fraction of training labels that are actually correct.
fn oracle_objective(train: &LabeledDataset) -> Objective {
    let clean = 1.0 - train.flipped_fraction();
    if clean >= 1.0 {
        Objective::Fixed(RiskFunctional::ExpectedValue)
    } else {
        Objective::Fixed(RiskFunctional::Icvar { alpha: clean })
    }
}

/// Everything one seed produced.
#[derive(Debug, Clone)]
pub struct SeedOutput {
    pub row: ResultRow,
    pub outcome: Option<TrainOutcome>,
    pub error: Option<String>,
    pub seconds: f64,
}

fn train(cfg: &ExperimentConfig, splits: &SplitSet, spec: &MlpSpec, seed: u64) -> Result<TrainOutcome, HarnessError> {
    let mut tc = cfg.trainer.clone();
    tc.seed = seed;
    let data = splits.training();
    let theta = spec.init_params();
    let rho = cfg.rho.clone();
    let out = match cfg.method {
        Method::Ev => train_fixed_rho(spec, data, theta, RiskFunctional::ExpectedValue, &tc)?,
        Method::BatchRho => train_fixed_rho(spec, data, theta, rho, &tc)?,
        Method::BatchRhoWarm => warm_start_then(spec, data, theta, Objective::Fixed(rho), &tc)?,
        Method::Learned => train_learned(spec, data, theta, rho, cfg.freeze_phi, &tc)?,
        Method::Oracle => warm_start_then(spec, data, theta, oracle_objective(&splits.train), &tc)?,
    };
    Ok(out)
}

/// Trains and evaluates one seed. Failures are captured in the row.
pub fn run_seed(cfg: &ExperimentConfig, group: &str, seed: u64) -> SeedOutput {
    let start = Instant::now();
    let mut row = ResultRow {
        group: group.to_string(),
        method: cfg.method.name().to_string(),
        rho: cfg.rho.to_string(),
        seed,
        ok: false,
        steps: 0,
        test_risk: None,
        accuracy: None,
        report: vec![None; report_names().len()],
    };
    let result = (|| {
        let splits = prepare_data(cfg, seed)?;
        let spec = model_spec(cfg, &splits.train, seed)?;
        let outcome = train(cfg, &splits, &spec, seed)?;
        let test = splits.test.as_ref().expect("prepare_data attaches the test set");
        let report = evaluate_all(&spec, &outcome.theta, test, &cfg.rho)?;
        Ok::<_, HarnessError>((outcome, report))
    })();
    let seconds = start.elapsed().as_secs_f64();
    match result {
        Ok((outcome, report)) => {
            row.ok = true;
            row.steps = outcome.steps_run;
            row.test_risk = report.get(&cfg.rho.to_string());
            row.accuracy = Some(report.accuracy);
            row.report = report_names().iter().map(|n| report.get(n)).collect();
            SeedOutput { row, outcome: Some(outcome), error: None, seconds }
        }
        Err(e) => SeedOutput { row, outcome: None, error: Some(e.to_string()), seconds },
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub rows: Vec<ResultRow>,
    pub failed: usize,
    pub out: PathBuf,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), HarnessError> {
    fs::write(path, contents).map_err(|e| HarnessError::io(path, e))
}

fn phi_csv(snapshots: &[WeightSnapshot]) -> String {
    let b = snapshots.first().map_or(0, |s| s.weights.len());
    let mut s = WeightSnapshot::csv_header(b);
    s.push('\n');
    for snap in snapshots {
        s.push_str(&snap.csv_row());
        s.push('\n');
    }
    s
}

/// Runs every seed of every grid point (in parallel), then writes per-run
/// artifacts and the result and summary tables under `out`.
pub fn run(points: &[(GridPoint, ExperimentConfig)], out: &Path) -> Result<RunSummary, HarnessError> {
    let jobs: Vec<(&GridPoint, &ExperimentConfig, u64)> =
        points.iter().flat_map(|(p, c)| c.seeds.iter().map(move |&s| (p, c, s))).collect();
    let outputs: Vec<SeedOutput> = jobs.par_iter().map(|(p, c, s)| run_seed(c, &p.group(), *s)).collect();

    fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let mut timing = String::from("group,method,seed,seconds\n");
    let mut errors = String::new();
    for ((p, c, seed), o) in jobs.iter().zip(&outputs) {
        let dir = out.join(p.dir_name());
        fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
        let method = c.method.name();
        timing.push_str(&format!("{},{method},{seed},{:.3}\n", p.group(), o.seconds));
        if let Some(e) = &o.error {
            errors.push_str(&format!("[{}] {method} seed {seed}: {e}\n", p.group()));
        }
        if let Some(outcome) = &o.outcome {
            write(&dir.join(format!("train_{method}_{seed}.csv")), records_csv(&outcome.records))?;
            write(&dir.join(format!("model_{method}_{seed}.ckpt")), write_checkpoint(&outcome.theta))?;
            if c.method == Method::Learned {
                write(&dir.join(format!("phi_{seed}.csv")), phi_csv(&outcome.snapshots))?;
            }
        }
    }
    let rows: Vec<ResultRow> = outputs.iter().map(|o| o.row.clone()).collect();
    let failed = outputs.iter().filter(|o| o.error.is_some()).count();
    write(&out.join("results.csv"), results_csv(&rows))?;
    write(&out.join("timing.csv"), timing)?;
    if failed > 0 {
        write(&out.join("errors.txt"), errors)?;
    }
    if let Ok(entries) = compare_report(&rows) {
        write(&out.join("summary.csv"), summary_csv(&entries))?;
        write(&out.join("summary.txt"), summary_text(&entries))?;
    }
    Ok(RunSummary { rows, failed, out: out.to_path_buf() })
}
