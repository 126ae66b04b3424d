//! The repeated-split protocol behind `train`, `predict`, `benchmark` and
//! `ablate`.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Mode};
use super::report::{RepeatFailure, ResultRow};
use crate::data::{load_csv, misclassification_rate, rmse, split_indices, Dataset, Schema, Standardizer, TargetValues};
use crate::error::{Error, Result};
use crate::model::{forward_predict, Network, Prediction, Structure};
use crate::numerics::{RngStream, Tensor};
use crate::par::Execution;
use crate::training::{fit, FitConfig, TrainReport};

pub const MODEL_FORMAT: &str = "dtbks-model";
pub const MODEL_VERSION: u32 = 1;

/// Loads the configured CSV, truncated to `dataset.subsample` rows.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let schema = Schema::load(&cfg.schema_path())?;
    let ds = load_csv(&cfg.dataset.path, &schema)?;
    Ok(match cfg.dataset.subsample {
        Some(n) if n < ds.len() => ds.head(n),
        _ => ds,
    })
}

/// Training seed of a repeat.
pub fn fit_seed(base: u64, repeat: usize) -> u64 {
    base.wrapping_add(repeat as u64)
}

fn prediction_stream(seed: u64) -> RngStream {
    RngStream::new(seed).split(4)
}

/// Standardized-scale metric of a prediction and its name.
pub fn score(pred: &Prediction, truth: &Dataset) -> Result<(&'static str, f64)> {
    match (pred, &truth.targets) {
        (Prediction::Regression { mean }, TargetValues::Regression(y)) => Ok(("rmse", rmse(mean, y)?)),
        (Prediction::Classification { labels, .. }, TargetValues::Classification { labels: t, .. }) => {
            Ok(("misclassification", misclassification_rate(labels, t)?))
        }
        _ => Err(Error::Usage("prediction kind does not match the dataset task".into())),
    }
}

pub fn metric_name(ds: &Dataset) -> &'static str {
    match ds.targets {
        TargetValues::Regression(_) => "rmse",
        TargetValues::Classification { .. } => "misclassification",
    }
}

/// Metric of the trivial predictor fitted on `train`: the training mean for
/// regression, the majority class for classification.
pub fn baseline_metric(train: &Dataset, test: &Dataset) -> Result<f64> {
    match (&train.targets, &test.targets) {
        (TargetValues::Regression(a), TargetValues::Regression(b)) => {
            let c = a.cols();
            let mut mean = vec![0.0; c];
            for i in 0..a.rows() {
                mean.iter_mut().zip(a.row(i)).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= a.rows() as f64);
            let pred = Tensor::matrix(b.rows(), c, (0..b.rows()).flat_map(|_| mean.iter().copied()).collect())?;
            rmse(&pred, b)
        }
        (TargetValues::Classification { .. }, TargetValues::Classification { labels, .. }) => {
            let counts = train.class_counts().unwrap_or_default();
            let majority = (0..counts.len()).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap_or(0);
            misclassification_rate(&vec![majority; labels.len()], labels)
        }
        _ => Err(Error::Usage("train and test tasks differ".into())),
    }
}

/// Everything recorded for one successful repeat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatOutcome {
    pub metric: f64,
    pub baseline: f64,
    pub split_hash: String,
    pub fit_seed: u64,
    pub epochs_run: usize,
    pub seconds: f64,
}

/// Split → standardize → fit → predict on the test side → metric.
pub fn run_repeat(
    ds: &Dataset,
    cfg: &ExperimentConfig,
    structure: Structure,
    mode: Mode,
    repeat: usize,
) -> Result<RepeatOutcome> {
    let started = Instant::now();
    let idx = split_indices(ds, &cfg.split, repeat)?;
    let (train_raw, test_raw) = (ds.select(&idx.train), ds.select(&idx.test));
    let scaler = Standardizer::fit(&train_raw)?;
    let train = scaler.transform(&train_raw)?;
    let test = scaler.transform(&test_raw)?;
    let seed = fit_seed(cfg.fit.seed, repeat);
    let fit_cfg = FitConfig { seed, ..cfg.fit.clone() };
    let (net, report) = fit(&train, &fit_cfg, structure, mode.omega_source(cfg.resample_prior_bank))?;
    let pred = forward_predict(
        &test.features,
        &net,
        &prediction_stream(seed),
        fit_cfg.mc_rounds,
        fit_cfg.k_eval,
        Execution::Sequential,
    )?;
    let (_, metric) = score(&pred, &test)?;
    Ok(RepeatOutcome {
        metric,
        baseline: baseline_metric(&train, &test)?,
        split_hash: idx.hash,
        fit_seed: seed,
        epochs_run: report.epochs_run,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// All repeats of one (L, η, mode) cell; failures are recorded, not raised.
pub fn benchmark_row(ds: &Dataset, cfg: &ExperimentConfig, layers: usize, eta: usize, mode: Mode, exec: Execution) -> ResultRow {
    let started = Instant::now();
    let structure = Structure { layers, eta, bank_size: cfg.fit.bank_size };
    let outcomes = exec.map_indexed(cfg.split.repeats, |r| run_repeat(ds, cfg, structure, mode, r));
    let mut row = ResultRow {
        dataset: cfg.dataset_name(),
        mode: mode.name().into(),
        layers,
        eta,
        metric: metric_name(ds).into(),
        values: Vec::new(),
        mean: None,
        std: None,
        baseline_values: Vec::new(),
        baseline_mean: None,
        paired_t: None,
        beats_baseline: false,
        split_hashes: Vec::new(),
        fit_seeds: Vec::new(),
        epochs_run: Vec::new(),
        failures: Vec::new(),
        wall_seconds: 0.0,
    };
    for (r, outcome) in outcomes.into_iter().enumerate() {
        row.fit_seeds.push(fit_seed(cfg.fit.seed, r));
        match outcome {
            Ok(o) => {
                row.values.push(Some(o.metric));
                row.baseline_values.push(Some(o.baseline));
                row.split_hashes.push(o.split_hash);
                row.epochs_run.push(Some(o.epochs_run));
            }
            Err(e) => {
                log::error!("{} repeat {r}: {e}", row.dataset);
                row.values.push(None);
                row.baseline_values.push(None);
                row.split_hashes.push(split_indices(ds, &cfg.split, r).map_or_else(|_| String::new(), |s| s.hash));
                row.epochs_run.push(None);
                row.failures.push(RepeatFailure { repeat: r, error: e.to_string() });
            }
        }
    }
    row.wall_seconds = started.elapsed().as_secs_f64();
    row.summarize();
    row
}

/// One row for the configured structure, or one per grid cell.
pub fn benchmark(cfg: &ExperimentConfig, exec: Execution) -> Result<Vec<ResultRow>> {
    let ds = load_dataset(cfg)?;
    let cells = if cfg.grid.enabled {
        cfg.grid.cells(ds.dim())
    } else {
        vec![(cfg.structure.layers, cfg.structure.eta)]
    };
    Ok(cells
        .into_iter()
        .map(|(l, e)| benchmark_row(&ds, cfg, l, e, cfg.mode, exec))
        .collect())
}

/// dtbks and rks-prior rows on identical splits and seeds.
pub fn ablate(cfg: &ExperimentConfig, exec: Execution) -> Result<Vec<ResultRow>> {
    let ds = load_dataset(cfg)?;
    let (l, e) = (cfg.structure.layers, cfg.structure.eta);
    Ok([Mode::Dtbks, Mode::RksPrior]
        .into_iter()
        .map(|m| benchmark_row(&ds, cfg, l, e, m, exec))
        .collect())
}

/// Trained posterior plus what is needed to apply it to raw data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format: String,
    pub version: u32,
    pub dataset: String,
    pub mode: Mode,
    pub structure: Structure,
    pub fit: FitConfig,
    pub standardizer: Standardizer,
    pub feature_names: Vec<String>,
    pub class_names: Vec<String>,
    pub network: Network,
}

impl ModelArtifact {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let a: Self = serde_json::from_str(&text)?;
        if a.format != MODEL_FORMAT || a.version != MODEL_VERSION {
            return Err(Error::Usage(format!(
                "{}: unsupported model format {} v{}",
                path.display(),
                a.format,
                a.version
            )));
        }
        Ok(a)
    }
}

/// Report written next to a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub format: String,
    pub version: u32,
    pub split_hash: String,
    pub metric: String,
    pub test_metric: f64,
    pub baseline: f64,
    pub report: TrainReport,
}

/// Fits on the training side of split 0 and scores the test side.
pub fn train(cfg: &ExperimentConfig) -> Result<(ModelArtifact, TrainSummary)> {
    let ds = load_dataset(cfg)?;
    let idx = split_indices(&ds, &cfg.split, 0)?;
    let (train_raw, test_raw) = (ds.select(&idx.train), ds.select(&idx.test));
    let scaler = Standardizer::fit(&train_raw)?;
    let train_ds = scaler.transform(&train_raw)?;
    let test_ds = scaler.transform(&test_raw)?;
    let structure = cfg.structure();
    let (network, report) = fit(&train_ds, &cfg.fit, structure, cfg.mode.omega_source(cfg.resample_prior_bank))?;
    let pred = forward_predict(
        &test_ds.features,
        &network,
        &prediction_stream(cfg.fit.seed),
        cfg.fit.mc_rounds,
        cfg.fit.k_eval,
        Execution::default(),
    )?;
    let (metric, test_metric) = score(&pred, &test_ds)?;
    let artifact = ModelArtifact {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        dataset: cfg.dataset_name(),
        mode: cfg.mode,
        structure,
        fit: cfg.fit.clone(),
        standardizer: scaler,
        feature_names: train_ds.feature_names.clone(),
        class_names: ds.class_names.clone(),
        network,
    };
    let summary = TrainSummary {
        format: "dtbks-train-report".into(),
        version: MODEL_VERSION,
        split_hash: idx.hash,
        metric: metric.into(),
        test_metric,
        baseline: baseline_metric(&train_ds, &test_ds)?,
        report,
    };
    Ok((artifact, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub format: String,
    pub version: u32,
    pub dataset: String,
    /// Regression means on the original target scale.
    pub means: Option<Vec<Vec<f64>>>,
    /// Class names of the predicted labels.
    pub labels: Option<Vec<String>>,
    pub metric: String,
    /// Standardized-scale metric against the file's targets.
    pub value: f64,
}

/// Applies a saved model to every row of the configured dataset.
pub fn predict(cfg: &ExperimentConfig, artifact: &ModelArtifact, exec: Execution) -> Result<PredictionFile> {
    let ds = load_dataset(cfg)?;
    let scaled = artifact.standardizer.transform(&ds)?;
    let pred = forward_predict(
        &scaled.features,
        &artifact.network,
        &prediction_stream(cfg.fit.seed),
        artifact.fit.mc_rounds,
        artifact.fit.k_eval,
        exec,
    )?;
    let (metric, value) = score(&pred, &scaled)?;
    let (means, labels) = match &pred {
        Prediction::Regression { mean } => {
            let raw = artifact.standardizer.inverse_targets(mean);
            (Some((0..raw.rows()).map(|i| raw.row(i).to_vec()).collect()), None)
        }
        Prediction::Classification { labels, .. } => (
            None,
            Some(
                labels
                    .iter()
                    .map(|&c| artifact.class_names.get(c).cloned().unwrap_or_else(|| c.to_string()))
                    .collect(),
            ),
        ),
    };
    Ok(PredictionFile {
        format: "dtbks-predictions".into(),
        version: MODEL_VERSION,
        dataset: cfg.dataset_name(),
        means,
        labels,
        metric: metric.into(),
        value,
    })
}
