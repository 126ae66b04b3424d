//! Result rows, the versioned results file, the console table and the paired
//! test against the trivial baseline.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::quadrature::integrate;
use crate::numerics::special::ln_gamma;

pub const RESULTS_FORMAT: &str = "dtbks-results";
pub const RESULTS_VERSION: u32 = 1;

/// One-sided confidence used for the baseline comparison.
pub const BASELINE_CONFIDENCE: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatFailure {
    pub repeat: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub mode: String,
    #[serde(rename = "L")]
    pub layers: usize,
    pub eta: usize,
    /// "rmse" (standardized targets) or "misclassification".
    pub metric: String,
    /// One entry per repeat; `None` where the repeat failed.
    pub values: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Predicted-mean (regression) or majority-class (classification) metric.
    pub baseline_values: Vec<Option<f64>>,
    pub baseline_mean: Option<f64>,
    /// Paired one-sided t statistic of baseline minus model.
    pub paired_t: Option<f64>,
    pub beats_baseline: bool,
    pub split_hashes: Vec<String>,
    pub fit_seeds: Vec<u64>,
    pub epochs_run: Vec<Option<usize>>,
    pub failures: Vec<RepeatFailure>,
    /// Excluded from reproducibility comparisons.
    pub wall_seconds: f64,
}

/// Mean and sample standard deviation (n − 1); the std of one value is 0.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Some((mean, (ss / (n - 1.0)).sqrt()))
}

fn t_pdf(x: f64, df: f64) -> f64 {
    let c = ln_gamma((df + 1.0) / 2.0).unwrap_or(f64::NAN)
        - ln_gamma(df / 2.0).unwrap_or(f64::NAN)
        - 0.5 * (df * std::f64::consts::PI).ln();
    (c - (df + 1.0) / 2.0 * (x * x / df).ln_1p()).exp()
}

/// P(T ≤ x) for T ~ Student-t(df), x ≥ 0.
pub fn student_t_cdf(x: f64, df: f64) -> Result<f64> {
    if !(df > 0.0) || !(x >= 0.0) || !x.is_finite() {
        return Err(Error::domain("student_t_cdf", format!("x={x}, df={df}")));
    }
    if x == 0.0 {
        return Ok(0.5);
    }
    let breaks: Vec<f64> = if x > 1.0 { vec![0.0, 1.0, x] } else { vec![0.0, x] };
    let q = integrate(|t| t_pdf(t, df), &breaks, 1e-13)?;
    Ok(0.5 + q.value)
}

/// Upper quantile: the x with P(T ≤ x) = p, for p in [0.5, 1).
pub fn student_t_quantile(p: f64, df: f64) -> Result<f64> {
    if !(0.5..1.0).contains(&p) {
        return Err(Error::domain("student_t_quantile", format!("p={p} outside [0.5, 1)")));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while student_t_cdf(hi, df)? < p {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::domain("student_t_quantile", format!("no bracket for p={p}, df={df}")));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if student_t_cdf(mid, df)? < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Paired one-sided test that `model` is lower than `baseline`. Returns the
/// t statistic and whether it clears the `confidence` quantile.
pub fn paired_improvement(model: &[f64], baseline: &[f64], confidence: f64) -> Result<(f64, bool)> {
    if model.len() != baseline.len() || model.len() < 2 {
        return Err(Error::Usage(format!(
            "paired test needs at least two matched pairs, got {} and {}",
            model.len(),
            baseline.len()
        )));
    }
    let diffs: Vec<f64> = baseline.iter().zip(model).map(|(b, m)| b - m).collect();
    let (mean, sd) = mean_std(&diffs).expect("nonempty");
    let n = diffs.len() as f64;
    let t = if sd == 0.0 {
        if mean > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    } else {
        mean / (sd / n.sqrt())
    };
    let crit = student_t_quantile(confidence, n - 1.0)?;
    Ok((t, t > crit))
}

impl ResultRow {
    /// Fills the summary fields from the per-repeat vectors.
    pub fn summarize(&mut self) {
        let ok: Vec<f64> = self.values.iter().flatten().copied().collect();
        let (mean, std) = mean_std(&ok).map_or((None, None), |(m, s)| (Some(m), Some(s)));
        self.mean = mean;
        self.std = std;
        let base: Vec<f64> = self.baseline_values.iter().flatten().copied().collect();
        self.baseline_mean = mean_std(&base).map(|(m, _)| m);
        let (model, baseline): (Vec<f64>, Vec<f64>) = self
            .values
            .iter()
            .zip(&self.baseline_values)
            .filter_map(|(m, b)| Some(((*m)?, (*b)?)))
            .unzip();
        match paired_improvement(&model, &baseline, BASELINE_CONFIDENCE) {
            Ok((t, pass)) => {
                self.paired_t = t.is_finite().then_some(t);
                self.beats_baseline = pass;
            }
            Err(_) => {
                self.paired_t = None;
                self.beats_baseline = false;
            }
        }
    }

    pub fn failed(&self) -> bool {
        !self.failures.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub format: String,
    pub version: u32,
    pub command: String,
    pub config: super::config::ExperimentConfig,
    pub rows: Vec<ResultRow>,
}

impl ResultsFile {
    pub fn new(command: &str, config: super::config::ExperimentConfig, rows: Vec<ResultRow>) -> Self {
        Self {
            format: RESULTS_FORMAT.into(),
            version: RESULTS_VERSION,
            command: command.into(),
            config,
            rows,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Self = serde_json::from_str(&text)?;
        if file.format != RESULTS_FORMAT || file.version != RESULTS_VERSION {
            return Err(Error::Usage(format!(
                "{}: unsupported results format {} v{}",
                path.display(),
                file.format,
                file.version
            )));
        }
        Ok(file)
    }
}

/// Numbers printed exactly as the results file stores them.
fn num(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| serde_json::to_string(&x).unwrap_or_else(|_| "nan".into()))
}

/// Console table built from the same values as the results file.
pub fn render_table(rows: &[ResultRow]) -> String {
    let header = ["dataset", "mode", "L", "eta", "metric", "mean", "std", "baseline", "beats", "ok", "seconds"];
    let body: Vec<[String; 11]> = rows
        .iter()
        .map(|r| {
            [
                r.dataset.clone(),
                r.mode.clone(),
                r.layers.to_string(),
                r.eta.to_string(),
                r.metric.clone(),
                num(r.mean),
                num(r.std),
                num(r.baseline_mean),
                if r.beats_baseline { "yes" } else { "no" }.into(),
                format!("{}/{}", r.values.iter().flatten().count(), r.values.len()),
                format!("{:.1}", r.wall_seconds),
            ]
        })
        .collect();
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &body {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &mut dyn Iterator<Item = &str>| {
        let parts: Vec<String> = cells.zip(&width).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut header.iter().copied());
    for row in &body {
        line(&mut row.iter().map(String::as_str));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_sample() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), Some((7.0, 0.0)));
        assert_eq!(mean_std(&[]), None);
    }

    #[test]
    fn t_quantiles_match_tables() {
        // Standard two-decimal-plus table values.
        for (p, df, want) in [(0.99, 19.0, 2.539_483), (0.975, 10.0, 2.228_139), (0.99, 1.0, 31.820_516), (0.95, 4.0, 2.131_847)] {
            let got = student_t_quantile(p, df).unwrap();
            assert!((got - want).abs() < 1e-5, "p={p} df={df}: {got}");
        }
        assert!((student_t_cdf(0.0, 3.0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn paired_test_direction() {
        let base = [1.0, 1.02, 0.98, 1.01, 0.99];
        let good = [0.5, 0.52, 0.49, 0.51, 0.5];
        assert!(paired_improvement(&good, &base, 0.99).unwrap().1);
        assert!(!paired_improvement(&base, &good, 0.99).unwrap().1);
        assert!(paired_improvement(&[0.5], &[1.0], 0.99).is_err());
    }

    fn row() -> ResultRow {
        ResultRow {
            dataset: "toy".into(),
            mode: "dtbks".into(),
            layers: 2,
            eta: 3,
            metric: "rmse".into(),
            values: vec![Some(0.5), None, Some(0.7)],
            mean: None,
            std: None,
            baseline_values: vec![Some(1.0), Some(1.0), Some(1.1)],
            baseline_mean: None,
            paired_t: None,
            beats_baseline: false,
            split_hashes: vec!["a".into(); 3],
            fit_seeds: vec![0, 1, 2],
            epochs_run: vec![Some(3), None, Some(3)],
            failures: vec![RepeatFailure { repeat: 1, error: "boom".into() }],
            wall_seconds: 1.25,
        }
    }

    #[test]
    fn summary_skips_failures() {
        let mut r = row();
        r.summarize();
        assert!((r.mean.unwrap() - 0.6).abs() < 1e-15);
        assert!((r.baseline_mean.unwrap() - 1.0333333333333334).abs() < 1e-12);
        assert!(r.failed());
    }

    #[test]
    fn table_uses_file_numbers() {
        let mut r = row();
        r.summarize();
        let table = render_table(std::slice::from_ref(&r));
        let json = serde_json::to_value(&r).unwrap();
        assert!(table.contains(&json["mean"].to_string()));
        assert!(table.contains(&json["std"].to_string()));
        assert!(table.contains("2/3"));
    }
}
