//! Labeled feature matrices, synthetic generators, CSV I/O and splits.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Feature rows with contiguous 0-based class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    /// Validates row count, finiteness and label contiguity.
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::invalid("dataset must have at least one row"));
        }
        if features.nrows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if features.ncols() == 0 {
            return Err(Error::invalid("dataset must have at least one feature column"));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "feature at row {} is not finite",
                pos / features.ncols()
            )));
        }
        let distinct: BTreeSet<usize> = labels.iter().copied().collect();
        let num_classes = distinct.len();
        if distinct.iter().next_back() != Some(&(num_classes - 1)) {
            return Err(Error::invalid(
                "labels must form the contiguous set 0..C-1",
            ));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Row indices of every class, indexed by label.
    pub fn class_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            members[y].push(i);
        }
        members
    }

    /// Materialize the rows at `indices`, relabeling the classes present to
    /// 0..C'-1 in ascending order of their original id.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("subset must select at least one row"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!(
                "row index {bad} out of range for {} rows",
                self.len()
            )));
        }
        let present: BTreeSet<usize> = indices.iter().map(|&i| self.labels[i]).collect();
        let mut remap = vec![usize::MAX; self.num_classes];
        for (new, &old) in present.iter().enumerate() {
            remap[old] = new;
        }
        let features = self.features.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| remap[self.labels[i]]).collect();
        Self::new(features, labels)
    }
}

/// Validation split parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            val_fraction: 0.15,
            seed: 0,
        }
    }
}

/// Gaussian blobs: one mean per class drawn from `[0, 4]^dim`, isotropic noise
/// with standard deviation `spread`. Rows are grouped by class.
pub fn gen_gaussian_blobs(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes == 0 || per_class == 0 || dim == 0 {
        return Err(Error::invalid(
            "num_classes, per_class and dim must be positive",
        ));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::invalid(format!("spread must be positive, got {spread}")));
    }
    let mut rng = rng::stream(seed, rng::streams::DATA);
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| 4.0 * rng.random::<f64>()).collect())
        .collect();
    let n = num_classes * per_class;
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for r in 0..per_class {
            let row = c * per_class + r;
            for (j, mu) in mean.iter().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                features[[row, j]] = mu + spread * z;
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(features, labels)
}

/// Result of [`load_csv`]: the dataset plus the original label of each
/// remapped class id.
#[derive(Clone, Debug)]
pub struct CsvDataset {
    pub dataset: LabeledDataset,
    pub label_map: Vec<i64>,
}

/// Read comma-separated rows of `D_in` floats followed by one integer label.
pub fn load_csv(path: &Path, has_header: bool) -> Result<CsvDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;

    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut width: Option<usize> = None;
    let mut values: Vec<f64> = Vec::new();
    let mut raw_labels: Vec<i64> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        if record.len() < 2 {
            return Err(parse_err(
                line,
                "expected at least one feature and a label".into(),
            ));
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(parse_err(
                line,
                format!("expected {expected} fields, found {}", record.len()),
            ));
        }
        for (col, field) in record.iter().take(expected - 1).enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                parse_err(line, format!("field {} is not a number: `{field}`", col + 1))
            })?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("field {} is not finite", col + 1)));
            }
            values.push(v);
        }
        let label_field = &record[expected - 1];
        let label: i64 = label_field
            .parse()
            .map_err(|_| parse_err(line, format!("label is not an integer: `{label_field}`")))?;
        raw_labels.push(label);
    }
    let Some(width) = width else {
        return Err(parse_err(1, "file contains no data rows".into()));
    };
    let label_map: Vec<i64> = raw_labels
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let labels = raw_labels
        .iter()
        .map(|l| label_map.binary_search(l).expect("label present in map"))
        .collect();
    let features = Array2::from_shape_vec((raw_labels.len(), width - 1), values)
        .map_err(|e| Error::invalid(e.to_string()))?;
    Ok(CsvDataset {
        dataset: LabeledDataset::new(features, labels)?,
        label_map,
    })
}

/// Write the dataset in the format read by [`load_csv`] (no header).
pub fn save_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    for (row, label) in ds.features.rows().into_iter().zip(&ds.labels) {
        let mut fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        fields.push(label.to_string());
        writer.write_record(&fields).map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Row indices of the first ⌊C/2⌋ classes and of the remaining classes.
pub fn class_half_indices(ds: &LabeledDataset) -> Result<(Vec<usize>, Vec<usize>)> {
    if ds.num_classes() < 2 {
        return Err(Error::invalid(format!(
            "class-half split needs at least 2 classes, found {}",
            ds.num_classes()
        )));
    }
    let half = ds.num_classes() / 2;
    Ok((0..ds.len()).partition(|&i| ds.labels[i] < half))
}

/// Classes `0..⌊C/2⌋` go to train, the rest to test (relabeled from 0).
pub fn split_by_class_half(ds: &LabeledDataset) -> Result<(LabeledDataset, LabeledDataset)> {
    let (train, test) = class_half_indices(ds)?;
    Ok((ds.subset(&train)?, ds.subset(&test)?))
}

/// Uniform (unstratified) validation draw of `round(val_fraction * N)` rows.
/// Both index lists are returned in ascending order.
pub fn train_val_indices(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&spec.val_fraction) {
        return Err(Error::invalid(format!(
            "val_fraction must lie in [0, 1), got {}",
            spec.val_fraction
        )));
    }
    let n_val = (spec.val_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(spec.seed, rng::streams::SPLIT));
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

/// Materialized train/validation split. The validation set is `None` when
/// the fraction rounds to zero rows.
pub fn split_train_val(
    ds: &LabeledDataset,
    spec: &SplitSpec,
) -> Result<(LabeledDataset, Option<LabeledDataset>)> {
    let (train, val) = train_val_indices(ds.len(), spec)?;
    let val = if val.is_empty() {
        None
    } else {
        Some(ds.subset(&val)?)
    };
    Ok((ds.subset(&train)?, val))
}

/// Train, validation and test sets for one episode.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

impl Splits {
    /// Class-half split for test, then a validation draw from the train half.
    pub fn from_dataset(ds: &LabeledDataset, split: &SplitSpec) -> Result<Self> {
        let (train_full, test) = split_by_class_half(ds)?;
        let (train, val) = split_train_val(&train_full, split)?;
        let val = val.ok_or_else(|| Error::invalid("validation split is empty"))?;
        Ok(Self { train, val, test })
    }
}
