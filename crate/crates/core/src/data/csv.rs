//! Plain-text dataset files.
//!
//! An optional first line `#classes=C`, then one row per sample:
//! `d` comma-separated reals followed by an integer label.

use std::fmt::Write as _;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_csv(&std::fs::read_to_string(path)?)
}

pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut declared = None;
    let mut dim = None;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if i == 0 {
                let v = rest
                    .trim()
                    .strip_prefix("classes=")
                    .ok_or_else(|| parse_err(line_no, "expected header #classes=C"))?;
                declared = Some(
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| parse_err(line_no, "class count is not an integer"))?,
                );
            }
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() < 2 {
            return Err(parse_err(line_no, "need at least one feature and a label"));
        }
        let d = cols.len() - 1;
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(parse_err(
                    line_no,
                    &format!("expected {expected} features, found {d}"),
                ))
            }
            _ => {}
        }
        for c in &cols[..d] {
            let v: f32 = c
                .parse()
                .map_err(|_| parse_err(line_no, &format!("bad feature value {c:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line_no, "non-finite feature"));
            }
            features.push(v);
        }
        let label: usize = cols[d]
            .parse()
            .map_err(|_| parse_err(line_no, &format!("label {:?} is not a non-negative integer", cols[d])))?;
        labels.push(label);
    }
    let d = dim.ok_or_else(|| parse_err(1, "no data rows"))?;
    let inferred = labels.iter().max().map_or(0, |m| m + 1);
    let classes = match declared {
        Some(c) if c < inferred => {
            return Err(Error::LabelOutOfRange {
                label: inferred - 1,
                classes: c,
            })
        }
        Some(c) => c,
        None => inferred,
    };
    Dataset::new(Tensor::new(vec![labels.len(), d], features)?, labels, classes)
}

/// Serialize with a `#classes=` header. Values use Rust's shortest
/// round-trip float formatting, so `parse_csv(to_csv(ds)) == ds`.
pub fn to_csv(ds: &Dataset) -> String {
    let mut s = format!("#classes={}\n", ds.num_classes);
    for i in 0..ds.len() {
        for v in ds.features.row(i) {
            let _ = write!(s, "{v},");
        }
        let _ = writeln!(s, "{}", ds.labels[i]);
    }
    s
}

pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_csv(ds))?;
    Ok(())
}

fn parse_err(line: usize, reason: &str) -> Error {
    Error::Parse {
        line,
        reason: reason.to_string(),
    }
}
