//! Run configuration: sections `data`, `model`, `train`, `eval`.
//!
//! Defaults are desk scale so that a bare config trains in seconds. The
//! full-scale MNIST settings are noted on each key that has one and
//! collected in [`Config::mnist`].

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::calibration::DEFAULT_BINS;
use crate::data::{load_csv, load_idx, split, synth_blobs, LabeledDataset, Splits};
use crate::error::{Error, Result};
use crate::fvib::{BalancePolicy, DEFAULT_CONFIDENCE};
use crate::net::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Gaussian blobs centred on the simplex class targets.
    Synth {
        classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
        seed: u64,
    },
    Csv { path: PathBuf, label_column: String },
    /// IDX image and label files (the MNIST format).
    Idx { images: PathBuf, labels: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth {
            classes: 3,
            per_class: 200,
            dim: 4,
            spread: 0.6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Train / validation / test fractions, stratified by class.
    pub fractions: [f64; 3],
    pub split_seed: u64,
    pub balance: BalancePolicy,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::default(),
            fractions: [0.6, 0.2, 0.2],
            split_seed: 0,
            balance: BalancePolicy::Strict,
        }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<LabeledDataset> {
        match &self.source {
            DataSource::Synth {
                classes,
                per_class,
                dim,
                spread,
                seed,
            } => synth_blobs(*classes, *per_class, *dim, *spread, *seed),
            DataSource::Csv { path, label_column } => load_csv(path, label_column),
            DataSource::Idx { images, labels } => load_idx(images, labels),
        }
    }

    pub fn load_splits(&self) -> Result<Splits> {
        split(&self.load()?, self.fractions, self.split_seed)
    }

    /// Resolves relative file paths against `base`.
    pub fn resolve_paths(&mut self, base: &std::path::Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.source {
            DataSource::Synth { .. } => {}
            DataSource::Csv { path, .. } => fix(path),
            DataSource::Idx { images, labels } => {
                fix(images);
                fix(labels);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Fvib,
    Vib,
    Taylor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub method: Method,
    /// Hidden widths; MNIST scale is `[1024, 1024]`.
    pub hidden: Vec<usize>,
    /// Required for `vib` and `taylor`; FVIB takes `β` at evaluation time.
    pub beta: Option<f64>,
    /// Latent size of the baselines; defaults to `d - 1`, MNIST scale is 256.
    pub kappa: Option<usize>,
    pub confidence_tuning: bool,
    pub confidence: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            method: Method::Fvib,
            hidden: vec![128, 128],
            beta: None,
            kappa: None,
            confidence_tuning: true,
            confidence: DEFAULT_CONFIDENCE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMethod {
    /// The FVIB model at `β = 0`.
    Beta0,
    /// Grid `β` chosen by validation ECE among candidates above 50% accuracy.
    Discrete,
    /// `β` optimized for validation NLL.
    Continuous,
    /// Cross-entropy baseline with a fitted temperature.
    TemperatureScaling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Samples per prediction for calibration and sweeps.
    pub samples: usize,
    /// Samples per prediction for accuracy runs.
    pub accuracy_samples: usize,
    pub seed: u64,
    pub bins: usize,
    pub beta_grid: Vec<f64>,
    pub methods: Vec<CalibrationMethod>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples: 30,
            accuracy_samples: 1,
            seed: 0,
            bins: DEFAULT_BINS,
            beta_grid: crate::sweep::default_beta_grid(),
            methods: vec![
                CalibrationMethod::Beta0,
                CalibrationMethod::Discrete,
                CalibrationMethod::Continuous,
            ],
        }
    }
}

impl Config {
    /// MNIST scale: `[1024, 1024]` hidden units, `κ = 256` for the
    /// baselines and the schedule of [`TrainConfig::mnist`].
    pub fn mnist() -> Self {
        Config {
            model: ModelConfig {
                hidden: vec![1024, 1024],
                kappa: Some(256),
                ..ModelConfig::default()
            },
            train: TrainConfig::mnist(),
            ..Config::default()
        }
    }

    /// Every offending key, not only the first.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if let Err(Error::Config(mut errs)) = self.train.validate() {
            bad.append(&mut errs);
        }
        let data = &self.data;
        if data.fractions.iter().any(|f| f.is_nan() || *f <= 0.0) || (data.fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            bad.push(format!(
                "data.fractions must be three positive numbers summing to 1, got {:?}",
                data.fractions
            ));
        }
        match &data.source {
            DataSource::Synth {
                classes,
                per_class,
                dim,
                spread,
                ..
            } => {
                if *classes < 2 {
                    bad.push("data.source.classes must be >= 2".into());
                }
                if *per_class < 1 {
                    bad.push("data.source.per_class must be >= 1".into());
                }
                if *classes >= 2 && *dim < classes - 1 {
                    bad.push("data.source.dim must be >= classes - 1".into());
                }
                if !(*spread >= 0.0 && spread.is_finite()) {
                    bad.push("data.source.spread must be >= 0".into());
                }
            }
            DataSource::Csv { label_column, .. } => {
                if label_column.is_empty() {
                    bad.push("data.source.label_column must not be empty".into());
                }
            }
            DataSource::Idx { .. } => {}
        }
        let model = &self.model;
        if model.hidden.contains(&0) {
            bad.push("model.hidden widths must be positive".into());
        }
        match (model.method, model.beta) {
            (Method::Vib | Method::Taylor, None) => bad.push(format!(
                "model.beta is required when model.method = {}",
                if model.method == Method::Vib { "vib" } else { "taylor" }
            )),
            (_, Some(b)) if !(0.0..=1.0).contains(&b) => {
                bad.push(format!("model.beta must lie in [0, 1], got {b}"))
            }
            _ => {}
        }
        if model.kappa == Some(0) {
            bad.push("model.kappa must be >= 1".into());
        }
        if !(model.confidence > 0.0 && model.confidence < 1.0) {
            bad.push(format!("model.confidence must lie in (0, 1), got {}", model.confidence));
        }
        let eval = &self.eval;
        if eval.samples < 1 {
            bad.push("eval.samples must be >= 1".into());
        }
        if eval.accuracy_samples < 1 {
            bad.push("eval.accuracy_samples must be >= 1".into());
        }
        if eval.bins < 1 {
            bad.push("eval.bins must be >= 1".into());
        }
        if eval.beta_grid.is_empty() {
            bad.push("eval.beta_grid must not be empty".into());
        }
        if eval.beta_grid.iter().any(|b| !(0.0..=1.0).contains(b)) {
            bad.push("eval.beta_grid values must lie in [0, 1]".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}
