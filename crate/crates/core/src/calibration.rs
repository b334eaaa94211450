//! Expected calibration error, temperature scaling, and continuous
//! post-hoc selection of `β` for a trained FVIB network.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::fvib::{instantiate, ConfidenceTuning, NoiseBank};
use crate::net::DenseNet;
use crate::numeric::{argmax, log_sum_exp, pairwise_mean, softmax_into};
use crate::simplex::TargetMatrix;

pub const DEFAULT_BINS: usize = 15;

/// Upper end of the `β` search interval.
pub const BETA_MAX: f64 = 1.0 - 1e-6;

const GRID_POINTS: usize = 41;
const BETA_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub low: f64,
    pub high: f64,
    pub count: usize,
    /// Mean max-probability in the bin, 0 when empty.
    pub confidence: f64,
    pub accuracy: f64,
}

fn check_probs(probs: &DMatrix<f64>, labels: &[usize]) -> Result<()> {
    if probs.nrows() == 0 {
        return Err(Error::EmptyInput("predictions"));
    }
    if probs.nrows() != labels.len() {
        return Err(Error::shape("prediction labels", probs.nrows(), labels.len()));
    }
    for (i, row) in probs.row_iter().enumerate() {
        if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::data(format!("row {i} has a negative or non-finite probability")));
        }
        let total = row.sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::data(format!("row {i} sums to {total}, not 1")));
        }
        if labels[i] >= probs.ncols() {
            return Err(Error::data(format!("label {} out of range for {} classes", labels[i], probs.ncols())));
        }
    }
    Ok(())
}

/// Per-bin statistics over `bins` equal-width confidence bins on `(0, 1]`.
pub fn bin_stats(probs: &DMatrix<f64>, labels: &[usize], bins: usize) -> Result<Vec<BinStat>> {
    if bins < 1 {
        return Err(Error::InvalidParameter("bin count must be at least 1".into()));
    }
    check_probs(probs, labels)?;
    let mut conf = vec![Vec::new(); bins];
    let mut hits = vec![0usize; bins];
    for (i, row) in probs.row_iter().enumerate() {
        let row: Vec<f64> = row.iter().copied().collect();
        let k = argmax(&row);
        let c = row[k];
        // bin b covers (b/B, (b+1)/B]
        let b = ((c * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        conf[b].push(c);
        if k == labels[i] {
            hits[b] += 1;
        }
    }
    Ok((0..bins)
        .map(|b| {
            let count = conf[b].len();
            let (confidence, accuracy) = if count == 0 {
                (0.0, 0.0)
            } else {
                (pairwise_mean(&conf[b]), hits[b] as f64 / count as f64)
            };
            BinStat {
                low: b as f64 / bins as f64,
                high: (b + 1) as f64 / bins as f64,
                count,
                confidence,
                accuracy,
            }
        })
        .collect())
}

fn ece_from_bins(stats: &[BinStat]) -> f64 {
    let n: usize = stats.iter().map(|s| s.count).sum();
    stats
        .iter()
        .map(|s| s.count as f64 / n as f64 * (s.accuracy - s.confidence).abs())
        .sum()
}

/// `Σ_b (|B_b| / N) |acc(B_b) - conf(B_b)|`.
pub fn ece(probs: &DMatrix<f64>, labels: &[usize], bins: usize) -> Result<f64> {
    Ok(ece_from_bins(&bin_stats(probs, labels, bins)?))
}

/// Mean `-ln p_y`, with `p_y` clamped to the smallest positive normal float.
pub fn nll(probs: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    check_probs(probs, labels)?;
    Ok(mean_nll(probs, labels))
}

fn mean_nll(probs: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let terms: Vec<f64> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[(i, y)].max(f64::MIN_POSITIVE).ln())
        .collect();
    pairwise_mean(&terms)
}

pub fn accuracy(probs: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    check_probs(probs, labels)?;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(probs.row(*i).transpose().as_slice()) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub method: String,
    pub ece: f64,
    pub nll: f64,
    pub accuracy: f64,
    pub bins: Vec<BinStat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

impl CalibrationReport {
    pub fn from_probs(method: impl Into<String>, probs: &DMatrix<f64>, labels: &[usize], bins: usize) -> Result<Self> {
        let stats = bin_stats(probs, labels, bins)?;
        Ok(CalibrationReport {
            method: method.into(),
            ece: ece_from_bins(&stats),
            nll: mean_nll(probs, labels),
            accuracy: accuracy(probs, labels)?,
            bins: stats,
            beta: None,
            temperature: None,
        })
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = Some(beta);
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = Some(temperature);
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Columns `bin_low, bin_high, count, confidence, accuracy`.
    pub fn write_bins_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::fs::File::create(path)?;
        out.write_all(self.bins_csv()?.as_bytes())?;
        Ok(())
    }

    pub fn bins_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["bin_low", "bin_high", "count", "confidence", "accuracy"])
            .map_err(csv_error)?;
        for b in &self.bins {
            w.serialize((b.low, b.high, b.count, b.confidence, b.accuracy))
                .map_err(csv_error)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    Error::data(e.to_string())
}

/// Result of fitting a single temperature on validation scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    pub iterations: usize,
    /// Scores carried no signal (every row identical, or constant rows);
    /// the temperature is left at 1.
    pub degenerate: bool,
}

/// Mean NLL of `softmax(a · scores)` and its first two derivatives in `a`.
fn scaled_nll(scores: &DMatrix<f64>, labels: &[usize], a: f64) -> (f64, f64, f64) {
    let d = scores.ncols();
    let mut row = vec![0.0; d];
    let mut p = vec![0.0; d];
    let mut values = Vec::with_capacity(labels.len());
    let mut grads = Vec::with_capacity(labels.len());
    let mut curvs = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        for k in 0..d {
            row[k] = a * scores[(i, k)];
        }
        values.push(log_sum_exp(&row) - row[y]);
        softmax_into(&row, &mut p);
        let mean: f64 = (0..d).map(|k| p[k] * scores[(i, k)]).sum();
        let second: f64 = (0..d).map(|k| p[k] * scores[(i, k)].powi(2)).sum();
        grads.push(mean - scores[(i, y)]);
        curvs.push((second - mean * mean).max(0.0));
    }
    (pairwise_mean(&values), pairwise_mean(&grads), pairwise_mean(&curvs))
}

/// Mean NLL of `softmax(scores / T)`.
pub fn temperature_nll(scores: &DMatrix<f64>, labels: &[usize], temperature: f64) -> f64 {
    scaled_nll(scores, labels, 1.0 / temperature).0
}

/// Minimizes validation NLL over `T > 0` by safeguarded Newton steps on
/// `a = 1/T`, where the objective is convex; stops at `|∇| ≤ 1e-8` or after
/// 100 iterations.
pub fn optimize_temperature(scores: &DMatrix<f64>, labels: &[usize]) -> Result<TemperatureFit> {
    if scores.nrows() == 0 {
        return Err(Error::EmptyInput("validation scores"));
    }
    if scores.nrows() != labels.len() {
        return Err(Error::shape("score labels", scores.nrows(), labels.len()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= scores.ncols()) {
        return Err(Error::data(format!("label {y} out of range for {} classes", scores.ncols())));
    }
    let first = scores.row(0);
    let identical = scores.row_iter().all(|r| r == first);
    let flat_rows = scores.row_iter().all(|r| r.max() == r.min());
    if identical || flat_rows {
        log::warn!("temperature scaling skipped: scores are degenerate");
        return Ok(TemperatureFit {
            temperature: 1.0,
            iterations: 0,
            degenerate: true,
        });
    }
    const A_MIN: f64 = 1e-6;
    const A_MAX: f64 = 1e6;
    let mut a = 1.0;
    let (mut f, mut g, mut h) = scaled_nll(scores, labels, a);
    let mut iterations = 0;
    while iterations < 100 && g.abs() > 1e-8 {
        iterations += 1;
        let mut step = if h > 0.0 { -g / h } else { -g.signum() * a };
        // keep a positive and never let it more than double or halve per step
        step = step.clamp(-0.5 * a, a);
        let mut accepted = false;
        for _ in 0..60 {
            let next = (a + step).clamp(A_MIN, A_MAX);
            let (fn_, gn, hn) = scaled_nll(scores, labels, next);
            if fn_ <= f {
                a = next;
                f = fn_;
                g = gn;
                h = hn;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted || a == A_MIN || a == A_MAX {
            break;
        }
    }
    Ok(TemperatureFit {
        temperature: 1.0 / a,
        iterations,
        degenerate: false,
    })
}

/// `softmax(scores / T)` row by row.
pub fn tempered_probs(scores: &DMatrix<f64>, temperature: f64) -> DMatrix<f64> {
    let d = scores.ncols();
    let mut out = DMatrix::zeros(scores.nrows(), d);
    let mut row = vec![0.0; d];
    let mut p = vec![0.0; d];
    for i in 0..scores.nrows() {
        for k in 0..d {
            row[k] = scores[(i, k)] / temperature;
        }
        softmax_into(&row, &mut p);
        for k in 0..d {
            out[(i, k)] = p[k];
        }
    }
    out
}

/// Validation NLL as a deterministic function of `β`: `h(x)` and the noise
/// `ε_{i,s}` are computed once and shared by every candidate. The noise is
/// drawn in antithetic pairs so the curve has no `√β` kink at zero.
pub struct BetaObjective<'a> {
    net: &'a DenseNet,
    targets: &'a TargetMatrix,
    ct: ConfidenceTuning,
    samples: usize,
    h: DMatrix<f64>,
    labels: &'a [usize],
    noise: NoiseBank,
}

impl<'a> BetaObjective<'a> {
    pub fn new(
        net: &'a DenseNet,
        targets: &'a TargetMatrix,
        ct: ConfidenceTuning,
        val: &'a LabeledDataset,
        samples: usize,
        seed: u64,
    ) -> Result<Self> {
        if val.is_empty() {
            return Err(Error::EmptyInput("validation set"));
        }
        if samples < 1 {
            return Err(Error::InvalidParameter("sample count must be at least 1".into()));
        }
        // validates head size and confidence settings
        instantiate(net, targets, 0.0, ct, samples)?;
        let h = net.forward_batch(val.features())?;
        let noise = NoiseBank::draw_antithetic(h.nrows(), samples, h.ncols(), seed);
        Ok(BetaObjective {
            net,
            targets,
            ct,
            samples,
            h,
            labels: val.labels(),
            noise,
        })
    }

    pub fn probs(&self, beta: f64) -> Result<DMatrix<f64>> {
        let model = instantiate(self.net, self.targets, beta, self.ct, self.samples)?;
        Ok(model.predict_batch_with_noise(&self.h, &self.noise))
    }

    pub fn nll(&self, beta: f64) -> Result<f64> {
        Ok(mean_nll(&self.probs(beta)?, self.labels))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaFit {
    pub beta: f64,
    pub nll: f64,
    pub evaluations: usize,
    /// Validation report at the chosen `β`.
    pub report: CalibrationReport,
}

/// Minimizes validation NLL over `β ∈ [0, 1 - 1e-6]` with common random
/// numbers: a 41-point grid, then golden-section search on the bracket
/// around the best grid point down to width `1e-5`. The returned `β` is the
/// best of every point evaluated.
pub fn optimize_beta(
    net: &DenseNet,
    targets: &TargetMatrix,
    ct: ConfidenceTuning,
    val: &LabeledDataset,
    samples: usize,
    seed: u64,
    bins: usize,
) -> Result<BetaFit> {
    let objective = BetaObjective::new(net, targets, ct, val, samples, seed)?;
    let grid: Vec<f64> = (0..GRID_POINTS)
        .map(|i| BETA_MAX * i as f64 / (GRID_POINTS - 1) as f64)
        .collect();
    let values = grid
        .par_iter()
        .map(|&b| objective.nll(b))
        .collect::<Result<Vec<f64>>>()?;
    let mut evaluated: Vec<(f64, f64)> = grid.iter().copied().zip(values).collect();
    let best = best_index(&evaluated);
    let lo = grid[best.saturating_sub(1)];
    let hi = grid[(best + 1).min(GRID_POINTS - 1)];
    golden_section(|b| objective.nll(b), lo, hi, BETA_TOLERANCE, &mut evaluated)?;
    let (beta, value) = evaluated[best_index(&evaluated)];
    let report = CalibrationReport::from_probs("fvib_continuous", &objective.probs(beta)?, val.labels(), bins)?
        .with_beta(beta);
    Ok(BetaFit {
        beta,
        nll: value,
        evaluations: evaluated.len(),
        report,
    })
}

/// Lowest value; ties go to the smaller argument.
fn best_index(points: &[(f64, f64)]) -> usize {
    let mut best = 0;
    for (i, &(x, v)) in points.iter().enumerate() {
        let (bx, bv) = points[best];
        if v < bv || (v == bv && x < bx) {
            best = i;
        }
    }
    best
}

/// Golden-section minimization on `[lo, hi]`, recording every evaluation.
fn golden_section<F>(f: F, mut lo: f64, mut hi: f64, tol: f64, record: &mut Vec<(f64, f64)>) -> Result<()>
where
    F: Fn(f64) -> Result<f64>,
{
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1)?;
    let mut f2 = f(x2)?;
    record.push((x1, f1));
    record.push((x2, f2));
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1)?;
            record.push((x1, f1));
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2)?;
            record.push((x2, f2));
        }
    }
    Ok(())
}
