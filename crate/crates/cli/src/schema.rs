//! Checks run on every emitted file before the process exits.

use std::path::Path;

use asr_core::asrloop::StepRecord;
use serde::de::DeserializeOwned;

use crate::error::CliError;

fn schema(path: &Path, message: impl Into<String>) -> CliError {
    CliError::Schema {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// One [`StepRecord`] per line, steps numbered from 0, finite metrics and
/// distributions on the simplex.
pub fn jsonl_log(path: &Path) -> Result<usize, CliError> {
    let text = read(path)?;
    let mut count = 0;
    for (i, line) in text.lines().enumerate() {
        let rec: StepRecord =
            serde_json::from_str(line).map_err(|e| schema(path, format!("line {}: {e}", i + 1)))?;
        if rec.step != i {
            return Err(schema(path, format!("line {} has step {}", i + 1, rec.step)));
        }
        if !rec.report.weighted.is_finite() || !rec.reward.is_finite() {
            return Err(schema(path, format!("line {}: non-finite metric", i + 1)));
        }
        if let Some(d) = &rec.distribution {
            if !d.is_on_simplex(1e-9) || d.bin_edges().len() != d.bins() + 1 {
                return Err(schema(path, format!("line {}: malformed distribution", i + 1)));
            }
        }
        count += 1;
    }
    if count == 0 {
        return Err(schema(path, "log is empty"));
    }
    Ok(count)
}

pub fn json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read(path)?).map_err(|e| schema(path, e.to_string()))
}

/// Exact header, at least one row, equal row widths, and numeric values in
/// every column from `numeric_from` on.
pub fn csv_table(path: &Path, header: &[&str], numeric_from: usize) -> Result<usize, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| schema(path, e.to_string()))?;
    let got = reader.headers().map_err(|e| schema(path, e.to_string()))?.clone();
    if got.iter().collect::<Vec<_>>() != header {
        return Err(schema(path, format!("header {:?}, expected {header:?}", got.iter().collect::<Vec<_>>())));
    }
    let mut rows = 0;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| schema(path, e.to_string()))?;
        for field in rec.iter().skip(numeric_from) {
            if field.parse::<f64>().is_err() {
                return Err(schema(path, format!("row {}: `{field}` is not a number", i + 1)));
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(schema(path, "table has no rows"));
    }
    Ok(rows)
}
