use std::fmt::Write as _;

use super::{report_names, HarnessError};

/// One `(method, seed)` outcome. Metric values are `None` for failed runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub group: String,
    pub method: String,
    pub rho: String,
    pub seed: u64,
    pub ok: bool,
    pub steps: usize,
    pub test_risk: Option<f64>,
    pub accuracy: Option<f64>,
    pub report: Vec<Option<f64>>,
}

impl ResultRow {
    /// `(metric, value)` pairs in column order.
    pub fn metrics(&self) -> Vec<(String, Option<f64>)> {
        let mut m = vec![("test_risk".to_string(), self.test_risk), ("accuracy".to_string(), self.accuracy)];
        m.extend(report_names().into_iter().zip(self.report.iter().copied()));
        m
    }
}

fn header() -> String {
    let mut h = String::from("group,method,rho,seed,status,steps,test_risk,accuracy");
    for n in report_names() {
        h.push(',');
        h.push_str(&n);
    }
    h
}

fn num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut s = header();
    s.push('\n');
    for r in rows {
        let status = if r.ok { "ok" } else { "failed" };
        let _ = write!(
            s,
            "{},{},{},{},{status},{},{},{}",
            r.group,
            r.method,
            r.rho,
            r.seed,
            r.steps,
            num(r.test_risk),
            num(r.accuracy)
        );
        for v in &r.report {
            s.push(',');
            s.push_str(&num(*v));
        }
        s.push('\n');
    }
    s
}

pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>, HarnessError> {
    let mut lines = text.lines();
    if lines.next() != Some(header().as_str()) {
        return Err(HarnessError::BadResults("unexpected header".into()));
    }
    let width = header().split(',').count();
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = |m: &str| HarnessError::BadResults(format!("row {}: {m}", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != width {
                return Err(bad("wrong number of fields"));
            }
            let opt = |s: &str| -> Result<Option<f64>, HarnessError> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad("bad number"))
                }
            };
            Ok(ResultRow {
                group: f[0].to_string(),
                method: f[1].to_string(),
                rho: f[2].to_string(),
                seed: f[3].parse().map_err(|_| bad("bad seed"))?,
                ok: match f[4] {
                    "ok" => true,
                    "failed" => false,
                    _ => return Err(bad("bad status")),
                },
                steps: f[5].parse().map_err(|_| bad("bad steps"))?,
                test_risk: opt(f[6])?,
                accuracy: opt(f[7])?,
                report: f[8..].iter().map(|s| opt(s)).collect::<Result<_, _>>()?,
            })
        })
        .collect()
}

/// Mean and spread of one metric for one method.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryEntry {
    pub group: String,
    pub method: String,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
    pub n: usize,
    /// Best mean for this metric within the group, ties within 1e-12 included.
    pub best: bool,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

fn first_seen<'a>(items: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for s in items {
        if !out.iter().any(|o| o == s) {
            out.push(s.to_string());
        }
    }
    out
}

/// Per-(group, method, metric) mean and standard deviation over successful
/// runs, with the best method marked per metric: highest accuracy, lowest
/// risk otherwise.
pub fn compare_report(rows: &[ResultRow]) -> Result<Vec<SummaryEntry>, HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::EmptyReport);
    }
    let mut entries = Vec::new();
    for group in first_seen(rows.iter().map(|r| r.group.as_str())) {
        let in_group: Vec<&ResultRow> = rows.iter().filter(|r| r.group == group).collect();
        let methods = first_seen(in_group.iter().map(|r| r.method.as_str()));
        let metric_names: Vec<String> = in_group[0].metrics().into_iter().map(|(m, _)| m).collect();
        for (mi, metric) in metric_names.iter().enumerate() {
            let start = entries.len();
            for method in &methods {
                let values: Vec<f64> =
                    in_group.iter().filter(|r| r.ok && &r.method == method).filter_map(|r| r.metrics()[mi].1).collect();
                if values.is_empty() {
                    continue;
                }
                let (mean, std) = mean_std(&values);
                entries.push(SummaryEntry {
                    group: group.clone(),
                    method: method.clone(),
                    metric: metric.clone(),
                    mean,
                    std,
                    n: values.len(),
                    best: false,
                });
            }
            let block = &mut entries[start..];
            let higher_better = metric == "accuracy";
            let target = block.iter().map(|e| e.mean).fold(
                if higher_better { f64::NEG_INFINITY } else { f64::INFINITY },
                |a, b| {
                    if higher_better {
                        a.max(b)
                    } else {
                        a.min(b)
                    }
                },
            );
            for e in block.iter_mut() {
                e.best = (e.mean - target).abs() <= 1e-12;
            }
        }
    }
    if entries.is_empty() {
        return Err(HarnessError::EmptyReport);
    }
    Ok(entries)
}

pub fn summary_csv(entries: &[SummaryEntry]) -> String {
    let mut s = String::from("group,method,metric,mean,std,n,best\n");
    for e in entries {
        let _ = writeln!(s, "{},{},{},{},{},{},{}", e.group, e.method, e.metric, e.mean, e.std, e.n, u8::from(e.best));
    }
    s
}

fn cell(e: &SummaryEntry) -> String {
    let (scale, digits) = if e.metric == "accuracy" { (100.0, 2) } else { (1.0, 4) };
    let mark = if e.best { " *" } else { "" };
    format!("{:.digits$} ({:.3}){mark}", e.mean * scale, e.std * scale)
}

/// Aligned table per group: one row per method, `mean (std)` cells,
/// accuracy in percent, `*` marking the best method per column.
pub fn summary_text(entries: &[SummaryEntry]) -> String {
    let mut out = String::new();
    for group in first_seen(entries.iter().map(|e| e.group.as_str())) {
        let es: Vec<&SummaryEntry> = entries.iter().filter(|e| e.group == group).collect();
        let methods = first_seen(es.iter().map(|e| e.method.as_str()));
        let metrics = first_seen(es.iter().map(|e| e.metric.as_str()));
        let mut table = vec![std::iter::once("method".to_string()).chain(metrics.iter().cloned()).collect::<Vec<_>>()];
        for m in &methods {
            let mut row = vec![m.clone()];
            for metric in &metrics {
                row.push(
                    es.iter()
                        .find(|e| &e.method == m && &e.metric == metric)
                        .map(|e| cell(e))
                        .unwrap_or_else(|| "-".into()),
                );
            }
            table.push(row);
        }
        let widths: Vec<usize> =
            (0..table[0].len()).map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
        if !group.is_empty() {
            let _ = writeln!(out, "[{group}]");
        }
        for row in &table {
            let line: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out.push('\n');
    }
    out
}
