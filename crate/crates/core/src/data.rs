//! CSV ingestion, z-scoring, repeated random splits and the error metrics.
//!
//! Row numbers in ingestion errors are 1-based physical line numbers of the
//! file, so a header occupies row 1.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Targets, Task};
use crate::numerics::{RngStream, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Regression,
    Classification,
}

/// Schema descriptor stored next to each CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    /// Header name of the target, or its 0-based index for headerless files.
    pub target_column: String,
    pub task: TaskKind,
    /// Raw label text to class index. Without it, classes are numbered in
    /// sorted label order.
    #[serde(default)]
    pub positive_label_map: Option<BTreeMap<String, usize>>,
}

impl Schema {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            detail: format!("invalid schema: {e}"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TargetValues {
    /// N x m real targets.
    Regression(Tensor),
    Classification { labels: Vec<usize>, num_classes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// N x δ.
    pub features: Tensor,
    pub targets: TargetValues,
    pub feature_names: Vec<String>,
    pub target_name: String,
    /// Raw label text for each class index (classification only).
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        features: Tensor,
        targets: TargetValues,
        feature_names: Vec<String>,
        target_name: String,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let n = features.rows();
        let (tn, ok) = match &targets {
            TargetValues::Regression(y) => (y.rows(), y.shape().len() == 2),
            TargetValues::Classification { labels, num_classes } => {
                (labels.len(), labels.iter().all(|l| l < num_classes))
            }
        };
        if features.shape().len() != 2 || tn != n || !ok || feature_names.len() != features.cols() {
            return Err(Error::Usage(format!(
                "inconsistent dataset: {n} feature rows, {tn} targets, {} names for {} columns",
                feature_names.len(),
                features.cols()
            )));
        }
        Ok(Self {
            features,
            targets,
            feature_names,
            target_name,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn kind(&self) -> TaskKind {
        match self.targets {
            TargetValues::Regression(_) => TaskKind::Regression,
            TargetValues::Classification { .. } => TaskKind::Classification,
        }
    }

    /// Likelihood head for this dataset; `sigma_y2` applies to regression.
    pub fn task(&self, sigma_y2: f64) -> Task {
        match &self.targets {
            TargetValues::Regression(y) => Task::Regression {
                sigma_y2,
                out_dim: y.cols(),
            },
            TargetValues::Classification { num_classes, .. } => Task::Classification {
                num_classes: *num_classes,
            },
        }
    }

    pub fn targets(&self) -> Targets<'_> {
        match &self.targets {
            TargetValues::Regression(y) => Targets::Regression(y),
            TargetValues::Classification { labels, .. } => Targets::Classification(labels),
        }
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let targets = match &self.targets {
            TargetValues::Regression(y) => TargetValues::Regression(y.select_rows(idx)),
            TargetValues::Classification { labels, num_classes } => TargetValues::Classification {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                num_classes: *num_classes,
            },
        };
        Self {
            features: self.features.select_rows(idx),
            targets,
            feature_names: self.feature_names.clone(),
            target_name: self.target_name.clone(),
            class_names: self.class_names.clone(),
        }
    }

    /// The first `n` rows.
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    pub fn class_counts(&self) -> Option<Vec<usize>> {
        match &self.targets {
            TargetValues::Classification { labels, num_classes } => {
                let mut c = vec![0; *num_classes];
                labels.iter().for_each(|l| c[*l] += 1);
                Some(c)
            }
            TargetValues::Regression(_) => None,
        }
    }
}

fn ingest(path: &Path, detail: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Loads a comma-delimited file. The first line is treated as a header when
/// any of its non-target cells is not a number.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .quoting(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| ingest(path, format!("malformed CSV: {e}")))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        records.push((line, rec.iter().map(str::to_owned).collect::<Vec<String>>()));
    }
    let Some((_, first)) = records.first() else {
        return Err(ingest(path, "file contains no rows"));
    };
    let width = first.len();
    if width < 2 {
        return Err(ingest(path, "need at least one feature column and a target column"));
    }

    let index_target = schema.target_column.parse::<usize>().ok();
    let has_header = first
        .iter()
        .enumerate()
        .any(|(j, c)| Some(j) != index_target && c.parse::<f64>().is_err());
    let (names, body) = if has_header {
        (first.clone(), &records[1..])
    } else {
        ((0..width).map(|j| format!("c{j}")).collect(), &records[..])
    };
    let by_name = names.iter().position(|c| c == &schema.target_column);
    let target = match (by_name, index_target) {
        (Some(t), _) if has_header => t,
        (_, Some(t)) if t < width => t,
        _ if has_header => {
            return Err(ingest(
                path,
                format!("unknown target column '{}'; header is {:?}", schema.target_column, names),
            ))
        }
        _ => {
            return Err(ingest(
                path,
                format!(
                    "unknown target column '{}' (file has no header and {width} columns)",
                    schema.target_column
                ),
            ))
        }
    };
    if body.is_empty() {
        return Err(ingest(path, "file has a header but no data rows"));
    }

    let mut features = Vec::with_capacity(body.len() * (width - 1));
    let mut raw_targets = Vec::with_capacity(body.len());
    for (line, row) in body {
        if row.len() != width {
            return Err(ingest(
                path,
                format!("row {line} has {} fields, expected {width}", row.len()),
            ));
        }
        for (j, cell) in row.iter().enumerate() {
            if j == target {
                raw_targets.push((*line, cell.clone()));
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| {
                ingest(
                    path,
                    format!("row {line}, column {} ('{}'): '{cell}' is not a number", j + 1, names[j]),
                )
            })?;
            if !v.is_finite() {
                return Err(ingest(
                    path,
                    format!("row {line}, column {} ('{}'): non-finite value", j + 1, names[j]),
                ));
            }
            features.push(v);
        }
    }
    let n = body.len();
    let feature_names: Vec<String> = names
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != target)
        .map(|(_, s)| s.clone())
        .collect();
    let x = Tensor::matrix(n, width - 1, features)?;

    let (targets, class_names) = match schema.task {
        TaskKind::Regression => {
            let mut y = Vec::with_capacity(n);
            for (line, cell) in &raw_targets {
                let v: f64 = cell
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| ingest(path, format!("row {line}, target column: '{cell}' is not a number")))?;
                y.push(v);
            }
            (TargetValues::Regression(Tensor::matrix(n, 1, y)?), Vec::new())
        }
        TaskKind::Classification => {
            let (labels, names) = map_labels(path, &raw_targets, schema.positive_label_map.as_ref())?;
            let num_classes = names.len();
            (TargetValues::Classification { labels, num_classes }, names)
        }
    };
    Dataset::new(x, targets, feature_names, names[target].clone(), class_names)
}

fn map_labels(
    path: &Path,
    raw: &[(usize, String)],
    map: Option<&BTreeMap<String, usize>>,
) -> Result<(Vec<usize>, Vec<String>)> {
    let table: BTreeMap<String, usize> = match map {
        Some(m) => {
            let mut idx: Vec<usize> = m.values().copied().collect();
            idx.sort_unstable();
            if idx.iter().enumerate().any(|(i, v)| i != *v) {
                return Err(ingest(path, "label map must number classes 0..C-1 without gaps"));
            }
            m.clone()
        }
        None => {
            let mut uniq: Vec<&String> = raw.iter().map(|(_, s)| s).collect();
            let numeric = uniq.iter().all(|s| s.parse::<f64>().is_ok());
            if numeric {
                uniq.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
            } else {
                uniq.sort();
            }
            uniq.dedup();
            uniq.into_iter().enumerate().map(|(i, s)| (s.clone(), i)).collect()
        }
    };
    let mut names = vec![String::new(); table.len()];
    for (k, v) in &table {
        names[*v] = k.clone();
    }
    let labels = raw
        .iter()
        .map(|(line, s)| {
            table
                .get(s)
                .copied()
                .ok_or_else(|| ingest(path, format!("row {line}: label '{s}' missing from the label map")))
        })
        .collect::<Result<Vec<_>>>()?;
    if names.len() < 2 {
        return Err(ingest(path, "classification needs at least two classes"));
    }
    Ok((labels, names))
}

/// Conventional location of the schema for `data.csv`: `data.schema.toml`.
pub fn schema_path_for(csv: &Path) -> PathBuf {
    csv.with_extension("schema.toml")
}

/// z-scoring with statistics from one (training) dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    /// Indices of retained (non-constant) feature columns.
    pub kept: Vec<usize>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
}

fn column_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, c) = (t.rows(), t.cols());
    let mut mean = vec![0.0; c];
    for i in 0..n {
        mean.iter_mut().zip(t.row(i)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; c];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(t.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|s| (s / n as f64).sqrt()).collect();
    (mean, std)
}

fn is_constant(std: f64, mean: f64) -> bool {
    !(std > 1e-12 * mean.abs().max(1.0))
}

impl Standardizer {
    /// Fits on `train`. Constant feature columns are dropped with a warning;
    /// a constant regression target is an error.
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Split("cannot standardize an empty dataset".into()));
        }
        let (mean, std) = column_stats(&train.features);
        let mut kept = Vec::new();
        for (j, (m, s)) in mean.iter().zip(&std).enumerate() {
            if is_constant(*s, *m) {
                log::warn!("dropping constant feature column '{}'", train.feature_names[j]);
            } else {
                kept.push(j);
            }
        }
        if kept.is_empty() {
            return Err(Error::Split("every feature column is constant on the training split".into()));
        }
        let (target_mean, target_std) = match &train.targets {
            TargetValues::Regression(y) => {
                let (m, s) = column_stats(y);
                if m.iter().zip(&s).any(|(m, s)| is_constant(*s, *m)) {
                    return Err(Error::Split("regression target is constant on the training split".into()));
                }
                (m, s)
            }
            TargetValues::Classification { .. } => (Vec::new(), Vec::new()),
        };
        Ok(Self {
            feature_mean: kept.iter().map(|&j| mean[j]).collect(),
            feature_std: kept.iter().map(|&j| std[j]).collect(),
            kept,
            target_mean,
            target_std,
        })
    }

    pub fn transform(&self, ds: &Dataset) -> Result<Dataset> {
        let n = ds.len();
        let width = self.kept.iter().max().map_or(0, |m| m + 1);
        if ds.dim() < width {
            return Err(Error::Usage(format!("dataset has {} columns, standardizer expects {width}", ds.dim())));
        }
        let mut x = Vec::with_capacity(n * self.kept.len());
        for i in 0..n {
            let row = ds.features.row(i);
            for ((&j, m), s) in self.kept.iter().zip(&self.feature_mean).zip(&self.feature_std) {
                x.push((row[j] - m) / s);
            }
        }
        let targets = match &ds.targets {
            TargetValues::Regression(y) => TargetValues::Regression(self.scale_targets(y)),
            other => other.clone(),
        };
        Dataset::new(
            Tensor::matrix(n, self.kept.len(), x)?,
            targets,
            self.kept.iter().map(|&j| ds.feature_names[j].clone()).collect(),
            ds.target_name.clone(),
            ds.class_names.clone(),
        )
    }

    fn scale_targets(&self, y: &Tensor) -> Tensor {
        let c = y.cols();
        let mut out = y.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - self.target_mean[k % c]) / self.target_std[k % c];
        }
        out
    }

    /// Maps standardized targets back to the original scale.
    pub fn inverse_targets(&self, y: &Tensor) -> Tensor {
        let c = y.cols();
        let mut out = y.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * self.target_std[k % c] + self.target_mean[k % c];
        }
        out
    }

    /// Maps standardized features back to the original scale of the kept
    /// columns.
    pub fn inverse_features(&self, x: &Tensor) -> Tensor {
        let c = x.cols();
        let mut out = x.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * self.feature_std[k % c] + self.feature_mean[k % c];
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub repeats: usize,
    pub base_seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.9,
            repeats: 20,
            base_seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            v.push(format!("train_fraction = {} must lie in (0, 1)", self.train_fraction));
        }
        if self.repeats == 0 {
            v.push("repeats must be at least 1".into());
        }
        v
    }
}

/// Index sets of one split and their fingerprint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub hash: String,
}

fn train_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Deterministic split for `repeat_index`: a seeded permutation with the
/// first ⌈fraction·N⌉ rows used for training; class-stratified for
/// classification.
pub fn split_indices(ds: &Dataset, spec: &SplitSpec, repeat_index: usize) -> Result<SplitIndices> {
    let errs = spec.validate();
    if !errs.is_empty() {
        return Err(Error::Split(errs.join("; ")));
    }
    if repeat_index >= spec.repeats {
        return Err(Error::Split(format!("repeat {repeat_index} out of range for {} repeats", spec.repeats)));
    }
    let n = ds.len();
    let mut rng = RngStream::new(spec.base_seed).split(repeat_index as u64);
    let perm = rng.permutation(n);
    let total_train = train_count(spec.train_fraction, n);
    let (train, test) = match &ds.targets {
        TargetValues::Regression(_) => (perm[..total_train].to_vec(), perm[total_train..].to_vec()),
        TargetValues::Classification { labels, num_classes } => {
            let mut members: Vec<Vec<usize>> = vec![Vec::new(); *num_classes];
            for &i in &perm {
                members[labels[i]].push(i);
            }
            let exact: Vec<f64> = members.iter().map(|m| spec.train_fraction * m.len() as f64).collect();
            let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
            let mut rest = total_train.saturating_sub(quota.iter().sum());
            let mut order: Vec<usize> = (0..*num_classes).collect();
            order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(members[a].len().cmp(&members[b].len())).then(a.cmp(&b)));
            for c in order.iter().cycle().take(2 * num_classes) {
                if rest == 0 {
                    break;
                }
                if quota[*c] < members[*c].len() {
                    quota[*c] += 1;
                    rest -= 1;
                }
            }
            if let Some(c) = (0..*num_classes).find(|&c| quota[c] == 0) {
                return Err(Error::Split(format!(
                    "class {c} ('{}') has no training examples",
                    ds.class_names.get(c).map_or("", String::as_str)
                )));
            }
            let mut train = Vec::with_capacity(total_train);
            let mut test = Vec::with_capacity(n - total_train);
            for (m, q) in members.iter().zip(&quota) {
                train.extend_from_slice(&m[..*q]);
                test.extend_from_slice(&m[*q..]);
            }
            (train, test)
        }
    };
    if train.is_empty() || test.is_empty() {
        return Err(Error::Split(format!(
            "degenerate split of {n} rows: {} train, {} test",
            train.len(),
            test.len()
        )));
    }
    let hash = split_hash(&train, &test);
    Ok(SplitIndices { train, test, hash })
}

/// [`split_indices`] materialized as datasets.
pub fn split(ds: &Dataset, spec: &SplitSpec, repeat_index: usize) -> Result<(Dataset, Dataset)> {
    let s = split_indices(ds, spec, repeat_index)?;
    Ok((ds.select(&s.train), ds.select(&s.test)))
}

/// 64-bit FNV-1a over both index lists, as 16 hex digits.
pub fn split_hash(train: &[usize], test: &[usize]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |v: u64| {
        for b in v.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    train.iter().for_each(|&i| feed(i as u64));
    feed(u64::MAX);
    test.iter().for_each(|&i| feed(i as u64));
    format!("{h:016x}")
}

/// √(mean squared error over examples and output dimensions).
pub fn rmse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::Usage(format!(
            "rmse: prediction shape {:?} differs from truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    if pred.numel() == 0 {
        return Err(Error::Usage("rmse of an empty set".into()));
    }
    let sq: f64 = pred.data().iter().zip(truth.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sq / pred.numel() as f64).sqrt())
}

pub fn misclassification_rate(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Usage(format!(
            "misclassification_rate: {} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Usage("misclassification rate of an empty set".into()));
    }
    let wrong = pred.iter().zip(truth).filter(|(a, b)| a != b).count();
    Ok(wrong as f64 / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let p = dir.path().join(name);
        fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    fn reg_schema(target: &str) -> Schema {
        Schema {
            target_column: target.into(),
            task: TaskKind::Regression,
            positive_label_map: None,
        }
    }

    fn toy_classes(n: usize, pos: usize) -> Dataset {
        let x = Tensor::matrix(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
        let labels = (0..n).map(|i| usize::from(i < pos)).collect();
        Dataset::new(
            x,
            TargetValues::Classification { labels, num_classes: 2 },
            vec!["a".into()],
            "y".into(),
            vec!["0".into(), "1".into()],
        )
        .unwrap()
    }

    #[test]
    fn toy_file_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "t.csv", "a,b,y\n1,2,3\n4,5,6\n7,8,9\n");
        let ds = load_csv(&p, &reg_schema("y")).unwrap();
        assert_eq!((ds.len(), ds.dim()), (3, 2));
        assert_eq!(ds.feature_names, vec!["a", "b"]);
        assert_eq!(ds.features.row(2), &[7.0, 8.0]);
    }

    #[test]
    fn headerless_file_uses_index() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "t.csv", "1,2,3\n4,5,6\n");
        let ds = load_csv(&p, &reg_schema("0")).unwrap();
        assert_eq!(ds.features.row(1), &[5.0, 6.0]);
        assert!(load_csv(&p, &reg_schema("7")).is_err());
    }

    #[test]
    fn errors_name_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "t.csv", "a,y\n1,1\n2,2\n3,3\n4,4\n5,5\nabc,6\n7,7\n");
        let e = load_csv(&p, &reg_schema("y")).unwrap_err().to_string();
        assert!(e.contains("row 7"), "{e}");
        let p = write(&dir, "r.csv", "a,b,y\n1,2,3\n1,2\n");
        let e = load_csv(&p, &reg_schema("y")).unwrap_err().to_string();
        assert!(e.contains("row 3") && e.contains("2 fields"), "{e}");
        let e = load_csv(&p, &reg_schema("nope")).unwrap_err().to_string();
        assert!(e.contains("unknown target column"), "{e}");
        assert!(matches!(
            load_csv(&dir.path().join("missing.csv"), &reg_schema("y")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn labels_mapped() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "c.csv", "x,label\n1,yes\n2,no\n3,yes\n");
        let mut schema = Schema {
            target_column: "label".into(),
            task: TaskKind::Classification,
            positive_label_map: None,
        };
        let ds = load_csv(&p, &schema).unwrap();
        assert_eq!(ds.class_names, vec!["no", "yes"]);
        assert_eq!(ds.targets(), Targets::Classification(&[1, 0, 1]));
        schema.positive_label_map = Some([("yes".to_string(), 0), ("no".to_string(), 1)].into());
        let ds = load_csv(&p, &schema).unwrap();
        assert_eq!(ds.targets(), Targets::Classification(&[0, 1, 0]));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let x = Tensor::matrix(10, 1, (0..10).map(f64::from).collect()).unwrap();
        let y = x.clone();
        let ds = Dataset::new(x, TargetValues::Regression(y), vec!["a".into()], "y".into(), vec![]).unwrap();
        let spec = SplitSpec { base_seed: 3, ..Default::default() };
        let a = split_indices(&ds, &spec, 4).unwrap();
        assert_eq!((a.train.len(), a.test.len()), (9, 1));
        assert_eq!(a, split_indices(&ds, &spec, 4).unwrap());
        assert_ne!(a.hash, split_indices(&ds, &spec, 5).unwrap().hash);
        assert!(split_indices(&ds, &spec, 20).is_err());
    }

    #[test]
    fn stratified_ratio() {
        let ds = toy_classes(100, 37);
        let spec = SplitSpec::default();
        for r in 0..20 {
            let s = split_indices(&ds, &spec, r).unwrap();
            assert_eq!(s.train.len(), 90);
            let pos = s.train.iter().filter(|&&i| i < 37).count() as f64;
            assert!((pos - 0.37 * 90.0).abs() <= 1.0, "{pos}");
        }
    }

    #[test]
    fn degenerate_splits_rejected() {
        let ds = toy_classes(10, 1);
        let spec = SplitSpec { train_fraction: 0.5, ..Default::default() };
        // One positive: floor(0.5) = 0; on tied remainders the smaller class wins.
        let s = split_indices(&ds, &spec, 0).unwrap();
        assert!(s.train.contains(&0));
        let tiny = toy_classes(1, 1).head(1);
        assert!(split_indices(&tiny, &SplitSpec::default(), 0).is_err());
    }

    #[test]
    fn standardizer_roundtrip_and_train_only() {
        let mut rng = RngStream::new(1);
        let n = 50;
        let x = Tensor::matrix(n, 3, (0..n * 3).map(|i| if i % 3 == 1 { 4.0 } else { 10.0 * rng.std_normal() + 3.0 }).collect())
            .unwrap();
        let y = Tensor::matrix(n, 1, (0..n).map(|_| rng.std_normal() * 7.0 - 2.0).collect()).unwrap();
        let names = vec!["a".into(), "const".into(), "c".into()];
        let ds = Dataset::new(x, TargetValues::Regression(y.clone()), names, "y".into(), vec![]).unwrap();
        let st = Standardizer::fit(&ds).unwrap();
        assert_eq!(st.kept, vec![0, 2]);
        let z = st.transform(&ds).unwrap();
        let TargetValues::Regression(zy) = &z.targets else { panic!() };
        let back = st.inverse_targets(zy);
        for (a, b) in back.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let bx = st.inverse_features(&z.features);
        for i in 0..n {
            assert!((bx.get2(i, 0) - ds.features.get2(i, 0)).abs() < 1e-12);
            assert!((bx.get2(i, 1) - ds.features.get2(i, 2)).abs() < 1e-12);
        }
        // A shifted test set leaves the fitted parameters untouched.
        let mut shifted = ds.clone();
        shifted.features.data_mut().iter_mut().for_each(|v| *v += 100.0);
        let before = st.clone();
        let zt = st.transform(&shifted).unwrap();
        assert_eq!(st, before);
        assert!((zt.features.get2(0, 0) - z.features.get2(0, 0) - 100.0 / st.feature_std[0]).abs() < 1e-9);
    }

    #[test]
    fn metric_examples() {
        let t = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(rmse(&t, &t).unwrap(), 0.0);
        assert!((rmse(&t.map(|v| v + 2.0), &t).unwrap() - 2.0).abs() < 1e-15);
        let p = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let q = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        assert!((rmse(&p, &q).unwrap() - 3.535_533_905_932_737_6).abs() < 1e-12);
        assert!(rmse(&p, &t).is_err());
        assert_eq!(misclassification_rate(&[1, 2], &[1, 2]).unwrap(), 0.0);
        assert_eq!(misclassification_rate(&[0, 0], &[1, 1]).unwrap(), 1.0);
        assert_eq!(misclassification_rate(&[0, 0, 0, 0, 0, 0, 0, 1], &[0; 8]).unwrap(), 0.125);
        assert!(misclassification_rate(&[0], &[0, 1]).is_err());
    }

    proptest! {
        #[test]
        fn metrics_ignore_order(v in proptest::collection::vec((-5.0..5.0f64, -5.0..5.0f64, 0usize..3, 0usize..3), 1..30), seed in 0u64..100) {
            let perm = RngStream::new(seed).permutation(v.len());
            let p: Vec<f64> = v.iter().map(|t| t.0).collect();
            let q: Vec<f64> = v.iter().map(|t| t.1).collect();
            let pt = Tensor::matrix(v.len(), 1, p.clone()).unwrap();
            let qt = Tensor::matrix(v.len(), 1, q.clone()).unwrap();
            let a = rmse(&pt, &qt).unwrap();
            let b = rmse(&pt.select_rows(&perm), &qt.select_rows(&perm)).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            let l1: Vec<usize> = v.iter().map(|t| t.2).collect();
            let l2: Vec<usize> = v.iter().map(|t| t.3).collect();
            let c = misclassification_rate(&l1, &l2).unwrap();
            let l1p: Vec<usize> = perm.iter().map(|&i| l1[i]).collect();
            let l2p: Vec<usize> = perm.iter().map(|&i| l2[i]).collect();
            prop_assert_eq!(c, misclassification_rate(&l1p, &l2p).unwrap());
        }
    }
}
