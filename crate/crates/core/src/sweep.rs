//! Evaluation-only β sweeps over one trained network, calibration
//! comparisons, and accuracy tables.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{
    csv_error, ece, nll, optimize_beta, optimize_temperature, tempered_probs, CalibrationReport,
};
use crate::config::CalibrationMethod;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::fvib::{instantiate, ConfidenceTuning, NoiseBank};
use crate::net::DenseNet;
use crate::objectives::ib_bounds;
use crate::simplex::TargetMatrix;

pub const CSV_VERSION_LINE: &str = "# fvib-sweep v1";

/// `{1e-6, …, 1e-2, 0.1, 0.2, …, 1.0}`: 15 values.
pub fn default_beta_grid() -> Vec<f64> {
    let mut grid: Vec<f64> = (-6..=-2).map(|e| 10f64.powi(e)).collect();
    grid.extend((1..=10).map(|k| k as f64 / 10.0));
    grid
}

/// Parses a comma-separated list such as `"0,1e-3,0.5,1"`.
pub fn parse_beta_grid(text: &str) -> Result<Vec<f64>> {
    let grid = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::InvalidParameter(format!("not a number in beta grid: {s:?}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    if grid.is_empty() {
        return Err(Error::InvalidParameter("beta grid is empty".into()));
    }
    Ok(grid)
}

fn sorted_grid(grid: &[f64]) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(Error::EmptyInput("beta grid"));
    }
    if let Some(b) = grid.iter().find(|b| !(0.0..=1.0).contains(*b)) {
        return Err(Error::Domain(format!("beta grid value {b} outside [0, 1]")));
    }
    let mut g = grid.to_vec();
    g.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    g.dedup();
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub prediction_bound_train: f64,
    pub compression_bound_train: f64,
    pub prediction_bound_test: f64,
    pub compression_bound_test: f64,
    pub accuracy_test: f64,
    pub nll_test: f64,
    pub ece_test: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMeta {
    pub model_id: String,
    pub samples: usize,
    pub seed: u64,
    pub ct: ConfidenceTuning,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub meta: SweepMeta,
    /// Sorted by `β` ascending.
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// A version line, a metadata comment, then the header and rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::new();
        writeln!(out, "{CSV_VERSION_LINE}").expect("string write");
        writeln!(
            out,
            "# model_id={} samples={} seed={} ct={} c={}",
            self.meta.model_id,
            self.meta.samples,
            self.meta.seed,
            if self.meta.ct.enabled { "on" } else { "off" },
            self.meta.ct.confidence
        )
        .expect("string write");
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(csv_error)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        out.push_str(std::str::from_utf8(&bytes).expect("csv output is utf-8"));
        Ok(out)
    }

    pub fn from_csv(text: &str) -> Result<Vec<SweepRow>> {
        let body: String = text
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(|l| format!("{l}\n"))
            .collect();
        let mut r = csv::Reader::from_reader(body.as_bytes());
        r.deserialize().map(|row| row.map_err(csv_error)).collect()
    }
}

/// What a sweep evaluates: one trained `h` and its data.
pub struct SweepSetup<'a> {
    pub net: &'a DenseNet,
    pub targets: &'a TargetMatrix,
    pub ct: ConfidenceTuning,
    pub train: &'a LabeledDataset,
    pub test: &'a LabeledDataset,
    pub samples: usize,
    pub seed: u64,
    pub bins: usize,
    pub model_id: String,
}

/// Instantiates the model at each `β` and evaluates both bounds on train
/// and test plus accuracy, NLL and ECE on test. Nothing is trained.
/// `parallel` fans the grid out over the thread pool; rows are identical
/// either way.
pub fn run_sweep(setup: &SweepSetup<'_>, grid: &[f64], parallel: bool) -> Result<SweepResult> {
    let grid = sorted_grid(grid)?;
    if setup.train.is_empty() || setup.test.is_empty() {
        return Err(Error::EmptyInput("sweep split"));
    }
    let h_train = setup.net.forward_batch(setup.train.features())?;
    let h_test = setup.net.forward_batch(setup.test.features())?;
    let noise = NoiseBank::draw(h_test.nrows(), setup.samples, h_test.ncols(), setup.seed);
    let eval = |beta: f64| -> Result<SweepRow> {
        let model = instantiate(setup.net, setup.targets, beta, setup.ct, setup.samples)?;
        let c = model.classifier();
        let enc_train = model.encodings_from_h(&h_train, setup.train.labels())?;
        let enc_test = model.encodings_from_h(&h_test, setup.test.labels())?;
        let b_train = ib_bounds(&enc_train, &c, setup.samples, setup.seed)?;
        let b_test = ib_bounds(&enc_test, &c, setup.samples, setup.seed)?;
        let probs = model.predict_batch_with_noise(&h_test, &noise);
        let labels = setup.test.labels();
        Ok(SweepRow {
            beta,
            prediction_bound_train: b_train.prediction,
            compression_bound_train: b_train.compression,
            prediction_bound_test: b_test.prediction,
            compression_bound_test: b_test.compression,
            accuracy_test: crate::calibration::accuracy(&probs, labels)?,
            nll_test: nll(&probs, labels)?,
            ece_test: ece(&probs, labels, setup.bins)?,
        })
    };
    let rows = if parallel {
        grid.par_iter().map(|&b| eval(b)).collect::<Result<Vec<_>>>()?
    } else {
        grid.iter().map(|&b| eval(b)).collect::<Result<Vec<_>>>()?
    };
    Ok(SweepResult {
        meta: SweepMeta {
            model_id: setup.model_id.clone(),
            samples: setup.samples,
            seed: setup.seed,
            ct: setup.ct,
        },
        rows,
    })
}

/// Inputs to a calibration comparison.
pub struct CalibrationSetup<'a> {
    pub net: &'a DenseNet,
    pub targets: &'a TargetMatrix,
    pub ct: ConfidenceTuning,
    pub val: &'a LabeledDataset,
    pub test: &'a LabeledDataset,
    pub grid: &'a [f64],
    pub samples: usize,
    pub seed: u64,
    pub bins: usize,
    /// Cross-entropy network producing logits; needed for temperature scaling.
    pub baseline: Option<&'a DenseNet>,
}

/// Grid `β` minimizing validation ECE among candidates with validation
/// accuracy above 50%; all candidates are eligible if none qualifies.
/// Ties go to the smaller `β`.
pub fn select_discrete_beta(candidates: &[(f64, CalibrationReport)]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput("beta candidates"));
    }
    let eligible: Vec<&(f64, CalibrationReport)> = candidates.iter().filter(|(_, r)| r.accuracy > 0.5).collect();
    let pool: Vec<&(f64, CalibrationReport)> = if eligible.is_empty() {
        log::warn!("no beta candidate exceeds 50% validation accuracy; selecting among all");
        candidates.iter().collect()
    } else {
        eligible
    };
    let mut best = pool[0];
    for c in &pool[1..] {
        if c.1.ece < best.1.ece || (c.1.ece == best.1.ece && c.0 < best.0) {
            best = c;
        }
    }
    Ok(best.0)
}

/// One test-set report per requested method, in request order.
pub fn run_calibration(setup: &CalibrationSetup<'_>, methods: &[CalibrationMethod]) -> Result<Vec<CalibrationReport>> {
    if methods.is_empty() {
        return Err(Error::Config(vec!["eval.methods must list at least one method".into()]));
    }
    if setup.val.is_empty() {
        return Err(Error::EmptyInput("validation split"));
    }
    let test_report = |beta: f64, method: &str| -> Result<CalibrationReport> {
        let model = instantiate(setup.net, setup.targets, beta, setup.ct, setup.samples)?;
        let probs = model.predict_batch(setup.test.features(), setup.seed)?;
        Ok(CalibrationReport::from_probs(method, &probs, setup.test.labels(), setup.bins)?.with_beta(beta))
    };
    methods
        .iter()
        .map(|m| match m {
            CalibrationMethod::Beta0 => test_report(0.0, "fvib_beta0"),
            CalibrationMethod::Discrete => {
                let grid = sorted_grid(setup.grid)?;
                let candidates = grid
                    .par_iter()
                    .map(|&b| {
                        let model = instantiate(setup.net, setup.targets, b, setup.ct, setup.samples)?;
                        let probs = model.predict_batch(setup.val.features(), setup.seed)?;
                        Ok((b, CalibrationReport::from_probs("val", &probs, setup.val.labels(), setup.bins)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                test_report(select_discrete_beta(&candidates)?, "fvib_discrete")
            }
            CalibrationMethod::Continuous => {
                let fit = optimize_beta(
                    setup.net,
                    setup.targets,
                    setup.ct,
                    setup.val,
                    setup.samples,
                    setup.seed,
                    setup.bins,
                )?;
                test_report(fit.beta, "fvib_continuous")
            }
            CalibrationMethod::TemperatureScaling => {
                let baseline = setup.baseline.ok_or_else(|| {
                    Error::InvalidParameter("temperature scaling needs a cross-entropy baseline".into())
                })?;
                let fit = optimize_temperature(&baseline.forward_batch(setup.val.features())?, setup.val.labels())?;
                let probs = tempered_probs(&baseline.forward_batch(setup.test.features())?, fit.temperature);
                Ok(
                    CalibrationReport::from_probs("temperature_scaling", &probs, setup.test.labels(), setup.bins)?
                        .with_temperature(fit.temperature),
                )
            }
        })
        .collect()
}

/// Columns `method, beta, temperature, ece, nll, accuracy`; unset fields
/// are left empty.
pub fn comparison_csv(reports: &[CalibrationReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "beta", "temperature", "ece", "nll", "accuracy"])
        .map_err(csv_error)?;
    for r in reports {
        w.serialize((&r.method, r.beta, r.temperature, r.ece, r.nll, r.accuracy))
            .map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub beta: f64,
    pub accuracy: f64,
    pub nll: f64,
    pub ece: f64,
}

fn eval_row(beta: f64, probs: &DMatrix<f64>, labels: &[usize], bins: usize) -> Result<EvalRow> {
    Ok(EvalRow {
        beta,
        accuracy: crate::calibration::accuracy(probs, labels)?,
        nll: nll(probs, labels)?,
        ece: ece(probs, labels, bins)?,
    })
}

/// Test accuracy, NLL and ECE of the FVIB model at each `β`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_fvib(
    net: &DenseNet,
    targets: &TargetMatrix,
    ct: ConfidenceTuning,
    test: &LabeledDataset,
    grid: &[f64],
    samples: usize,
    seed: u64,
    bins: usize,
) -> Result<Vec<EvalRow>> {
    sorted_grid(grid)?
        .into_iter()
        .map(|b| {
            let model = instantiate(net, targets, b, ct, samples)?;
            eval_row(b, &model.predict_batch(test.features(), seed)?, test.labels(), bins)
        })
        .collect()
}

/// The same figures for a per-β baseline at its trained `β`.
pub fn evaluate_baseline(
    enc: &crate::vib::VibEncoder,
    test: &LabeledDataset,
    samples: usize,
    seed: u64,
    bins: usize,
) -> Result<EvalRow> {
    eval_row(enc.beta(), &enc.predict_batch(test.features(), samples, seed)?, test.labels(), bins)
}

pub fn eval_csv(rows: &[EvalRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
