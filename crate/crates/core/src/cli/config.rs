//! Experiment configuration files.
//!
//! ```toml
//! mode = "dtbks"            # or "rks-prior"
//! output = "results/boston"
//!
//! [dataset]
//! path = "data/boston.csv"  # relative paths resolve against this file
//!
//! [structure]
//! L = 2
//! eta = 3
//!
//! [fit]
//! epochs = 500
//!
//! [split]
//! repeats = 20
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{schema_path_for, SplitSpec};
use crate::error::{Error, Result};
use crate::model::{OmegaSource, Structure};
use crate::training::FitConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Dtbks,
    RksPrior,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Dtbks => "dtbks",
            Mode::RksPrior => "rks-prior",
        }
    }

    pub fn omega_source(self, resample: bool) -> OmegaSource {
        match (self, resample) {
            (Mode::Dtbks, _) => OmegaSource::Inferred,
            (Mode::RksPrior, false) => OmegaSource::FrozenPrior,
            (Mode::RksPrior, true) => OmegaSource::ResampledPrior,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    /// Defaults to the file next to the CSV with extension `.schema.toml`.
    #[serde(default)]
    pub schema: Option<PathBuf>,
    /// Defaults to the CSV file stem.
    #[serde(default)]
    pub name: Option<String>,
    /// Use only the first `subsample` rows.
    #[serde(default)]
    pub subsample: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureConfig {
    #[serde(rename = "L")]
    pub layers: usize,
    pub eta: usize,
}

/// Model-selection grid over (L, η). Empty lists use L ∈ {2, 3, 4, 5} and
/// η ∈ {⌈δ/4⌉, ⌈δ/2⌉, ⌈3δ/4⌉, δ}.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub enabled: bool,
    #[serde(rename = "L")]
    pub layers: Vec<usize>,
    pub eta: Vec<usize>,
}

impl GridConfig {
    pub fn cells(&self, input_dim: usize) -> Vec<(usize, usize)> {
        let layers = if self.layers.is_empty() { vec![2, 3, 4, 5] } else { self.layers.clone() };
        let etas = if self.eta.is_empty() {
            let mut v: Vec<usize> = [1, 2, 3, 4].iter().map(|q| (q * input_dim).div_ceil(4).max(1)).collect();
            v.dedup();
            v
        } else {
            self.eta.clone()
        };
        layers.iter().flat_map(|&l| etas.iter().map(move |&e| (l, e))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub structure: StructureConfig,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub mode: Mode,
    /// Redraw prior banks every iteration in rks-prior mode.
    #[serde(default)]
    pub resample_prior_bank: bool,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

impl ExperimentConfig {
    /// Parses TOML; relative dataset paths resolve against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.dataset.path = base_dir.join(&cfg.dataset.path);
        cfg.dataset.schema = cfg.dataset.schema.map(|s| base_dir.join(s));
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn schema_path(&self) -> PathBuf {
        self.dataset.schema.clone().unwrap_or_else(|| schema_path_for(&self.dataset.path))
    }

    pub fn dataset_name(&self) -> String {
        self.dataset.name.clone().unwrap_or_else(|| {
            self.dataset
                .path
                .file_stem()
                .map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
        })
    }

    pub fn structure(&self) -> Structure {
        Structure {
            layers: self.structure.layers,
            eta: self.structure.eta,
            bank_size: self.fit.bank_size,
        }
    }

    /// Every violated field; empty when the configuration is usable.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.structure.layers == 0 {
            v.push("structure.L must be at least 1".into());
        }
        if self.structure.eta == 0 {
            v.push("structure.eta must be at least 1".into());
        }
        v.extend(self.fit.validate().into_iter().map(|m| format!("fit.{m}")));
        v.extend(self.split.validate().into_iter().map(|m| format!("split.{m}")));
        if !self.dataset.path.is_file() {
            v.push(format!("dataset.path: {} does not exist", self.dataset.path.display()));
        }
        let schema = self.schema_path();
        if !schema.is_file() {
            v.push(format!("dataset.schema: {} does not exist", schema.display()));
        }
        if self.dataset.subsample == Some(0) {
            v.push("dataset.subsample must be at least 1".into());
        }
        if self.grid.layers.contains(&0) || self.grid.eta.contains(&0) {
            v.push("grid entries must be at least 1".into());
        }
        if self.resample_prior_bank && self.mode == Mode::Dtbks {
            v.push("resample_prior_bank applies only to mode = \"rks-prior\"".into());
        }
        v
    }

    pub fn validated(self) -> Result<Self> {
        let v = self.validate();
        if v.is_empty() {
            Ok(self)
        } else {
            Err(Error::Config(v))
        }
    }
}
