//! Delimited numeric text: a `d,C` header row, then `x_1,...,x_d,label` rows.

use std::fmt::Write as _;

use super::{DataError, LabeledDataset};
use crate::autodiff::Tensor;

pub fn write_delimited(ds: &LabeledDataset) -> String {
    let mut out = format!("{},{}\n", ds.dim(), ds.num_classes());
    for (i, label) in ds.labels().iter().enumerate() {
        for v in ds.features().row(i) {
            let _ = write!(out, "{v:e},");
        }
        let _ = writeln!(out, "{label}");
    }
    out
}

pub fn read_delimited(text: &str) -> Result<LabeledDataset, DataError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(DataError::Parse { line: 1, msg: "missing header".into() })?;
    let parse_usize = |s: &str, line: usize| {
        s.trim().parse::<usize>().map_err(|e| DataError::Parse { line, msg: format!("`{s}`: {e}") })
    };
    let head: Vec<&str> = header.split(',').collect();
    if head.len() != 2 {
        return Err(DataError::Parse { line: 1, msg: "header must be `d,C`".into() });
    }
    let dim = parse_usize(head[0], 1)?;
    let classes = parse_usize(head[1], 1)?;

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(DataError::Parse {
                line: lineno,
                msg: format!("expected {} fields, got {}", dim + 1, fields.len()),
            });
        }
        for f in &fields[..dim] {
            let v =
                f.trim().parse::<f64>().map_err(|e| DataError::Parse { line: lineno, msg: format!("`{f}`: {e}") })?;
            features.push(v);
        }
        labels.push(parse_usize(fields[dim], lineno)?);
    }
    let n = labels.len();
    LabeledDataset::new(Tensor::matrix(n, dim, features), labels, classes)
}
