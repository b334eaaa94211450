//! Beta-free training of the feature extractor `h` and evaluation-time
//! instantiation of a model for any `β ∈ [0, 1]`.
//!
//! Training regresses `h(x_i)` onto the simplex target `t_{y_i}`; the score
//! `J = -(1/N) Σ ‖h(x_i) - t_{y_i}‖²` does not involve `β`. For a chosen `β`
//! the model uses
//!
//! ```text
//! μ(x) = √(1-β) h(x),   Σ = β I,   W = √(1-β) Lᵀ
//! ```
//!
//! and optionally divides logits by the confidence-tuning temperature
//! `T = d / ln((d-1) c / (1-c))`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{balance_classes, LabeledDataset};
use crate::error::{Error, Result};
use crate::net::{gather_rows, minibatches, shuffle_rng, AdamState, DenseNet, NetGrads, TrainConfig};
use crate::numeric::{example_rng, softmax_into, standard_normals};
use crate::objectives::{Classifier, GaussianEncoding};
use crate::simplex::TargetMatrix;

pub const DEFAULT_CONFIDENCE: f64 = 0.997;

/// Rows of `targets` for each label: an `N x (d-1)` matrix.
pub fn target_rows(targets: &TargetMatrix, labels: &[usize]) -> Result<DMatrix<f64>> {
    let t = targets.targets();
    let m = targets.latent_dim();
    for &y in labels {
        if y >= targets.classes() {
            return Err(Error::data(format!(
                "label {y} out of range for {} classes",
                targets.classes()
            )));
        }
    }
    Ok(DMatrix::from_fn(labels.len(), m, |i, j| t[(j, labels[i])]))
}

/// Mean squared distance to the class targets over a batch, with gradients.
pub fn fvib_loss(
    net: &DenseNet,
    batch: &DMatrix<f64>,
    labels: &[usize],
    targets: &TargetMatrix,
) -> Result<(f64, NetGrads)> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    if batch.nrows() != labels.len() {
        return Err(Error::shape("batch labels", batch.nrows(), labels.len()));
    }
    let t = target_rows(targets, labels)?;
    let (out, tape) = net.forward_recorded(batch)?;
    if out.ncols() != targets.latent_dim() {
        return Err(Error::shape("network head", targets.latent_dim(), out.ncols()));
    }
    let resid = out - t;
    let b = labels.len() as f64;
    let loss = resid.norm_squared() / b;
    let grads = net.backward(&tape, &(resid * (2.0 / b)))?;
    Ok((loss, grads))
}

/// `J = -(1/N) Σ ‖h(x_i) - t_{y_i}‖²`, at most zero.
pub fn j_fvib(net: &DenseNet, ds: &LabeledDataset, targets: &TargetMatrix) -> Result<f64> {
    let out = net.forward_batch(ds.features())?;
    let t = target_rows(targets, ds.labels())?;
    let per_example: Vec<f64> = (0..ds.len())
        .map(|i| (out.row(i) - t.row(i)).norm_squared())
        .collect();
    Ok(-crate::numeric::pairwise_mean(&per_example))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BalancePolicy {
    /// Reject imbalanced training data.
    #[default]
    Strict,
    /// Undersample to the smallest class with a warning.
    Permissive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean minibatch loss during the epoch.
    pub loss: f64,
    /// `J` on the full training split after the epoch.
    pub j_fvib: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedFvib {
    pub net: DenseNet,
    pub targets: TargetMatrix,
    pub history: Vec<EpochRecord>,
}

pub(crate) fn prepare_training_set(
    ds: &LabeledDataset,
    balance: BalancePolicy,
    seed: u64,
) -> Result<LabeledDataset> {
    if ds.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    if ds.is_balanced() {
        return Ok(ds.clone());
    }
    match balance {
        BalancePolicy::Strict => Err(Error::data(format!(
            "training data is not class balanced (counts {:?})",
            ds.class_counts()
        ))),
        BalancePolicy::Permissive => {
            log::warn!(
                "training data is imbalanced (counts {:?}); undersampling",
                ds.class_counts()
            );
            balance_classes(ds, seed)
        }
    }
}

/// Trains `h` with layer sizes `[p, hidden.., d-1]`.
pub fn train(
    ds: &LabeledDataset,
    hidden: &[usize],
    config: &TrainConfig,
    balance: BalancePolicy,
) -> Result<TrainedFvib> {
    train_with_observer(ds, hidden, config, balance, |_, _| {})
}

/// As [`train`], calling `observe(epoch, &net)` after each epoch.
pub fn train_with_observer<F>(
    ds: &LabeledDataset,
    hidden: &[usize],
    config: &TrainConfig,
    balance: BalancePolicy,
    mut observe: F,
) -> Result<TrainedFvib>
where
    F: FnMut(usize, &DenseNet),
{
    config.validate()?;
    let ds = prepare_training_set(ds, balance, config.seed)?;
    let targets = TargetMatrix::new(ds.classes())?;
    let mut dims = vec![ds.feature_dim()];
    dims.extend_from_slice(hidden);
    dims.push(targets.latent_dim());
    let mut net = DenseNet::new(&dims, config.seed)?;
    let mut adam = AdamState::new(&net, config.learning_rate);
    let mut rng = shuffle_rng(config.seed);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        adam.learning_rate = config.lr_schedule.rate(config.learning_rate, epoch);
        let mut total = 0.0;
        let batches = minibatches(ds.len(), config.batch_size, &mut rng);
        for idx in &batches {
            let x = gather_rows(ds.features(), idx);
            let labels: Vec<usize> = idx.iter().map(|&i| ds.labels()[i]).collect();
            let (loss, grads) = fvib_loss(&net, &x, &labels, &targets)?;
            adam.step(&mut net, &grads)?;
            total += loss * idx.len() as f64;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: total / ds.len() as f64,
            j_fvib: j_fvib(&net, &ds, &targets)?,
        };
        log::debug!("epoch {} loss {:.6e} J {:.6e}", record.epoch, record.loss, record.j_fvib);
        history.push(record);
        observe(epoch + 1, &net);
    }
    Ok(TrainedFvib {
        net,
        targets,
        history,
    })
}

/// `T = d / ln((d-1) c / (1-c))`; requires `1/d < c < 1`.
pub fn ct_temperature(d: usize, c: f64) -> Result<f64> {
    if d < 2 {
        return Err(Error::InvalidClassCount(d));
    }
    let lower = 1.0 / d as f64;
    if !(c > lower && c < 1.0) {
        return Err(Error::Domain(format!(
            "confidence must lie in ({lower}, 1), got {c}"
        )));
    }
    let arg = (d as f64 - 1.0) * c / (1.0 - c);
    if arg <= 1.0 {
        return Err(Error::Domain(format!(
            "confidence {c} too close to 1/{d} for a finite temperature"
        )));
    }
    Ok(d as f64 / arg.ln())
}

/// Confidence of the maximizer of the second-order log-likelihood expansion:
/// `e^d / (e^d + d - 1)`.
pub fn taylor_optimal_confidence(d: usize) -> f64 {
    let df = d as f64;
    // divide through by e^d to stay finite for large d
    1.0 / (1.0 + (df - 1.0) * (-df).exp())
}

/// Confidence tuning settings; `None` disables it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceTuning {
    pub enabled: bool,
    pub confidence: f64,
}

impl Default for ConfidenceTuning {
    fn default() -> Self {
        ConfidenceTuning {
            enabled: true,
            confidence: DEFAULT_CONFIDENCE,
        }
    }
}

impl ConfidenceTuning {
    pub fn off() -> Self {
        ConfidenceTuning {
            enabled: false,
            confidence: DEFAULT_CONFIDENCE,
        }
    }

    pub fn temperature(&self, d: usize) -> Result<f64> {
        if self.enabled {
            ct_temperature(d, self.confidence)
        } else {
            Ok(1.0)
        }
    }
}

/// A trained `h` wired up for one `β`. Nothing here is learned.
#[derive(Debug, Clone)]
pub struct FvibModel<'a> {
    net: &'a DenseNet,
    targets: &'a TargetMatrix,
    beta: f64,
    ct: ConfidenceTuning,
    temperature: f64,
    samples: usize,
}

pub fn instantiate<'a>(
    net: &'a DenseNet,
    targets: &'a TargetMatrix,
    beta: f64,
    ct: ConfidenceTuning,
    samples: usize,
) -> Result<FvibModel<'a>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Domain(format!("beta must lie in [0, 1], got {beta}")));
    }
    if samples < 1 {
        return Err(Error::InvalidParameter("sample count must be at least 1".into()));
    }
    if net.output_dim() != targets.latent_dim() {
        return Err(Error::shape("network head", targets.latent_dim(), net.output_dim()));
    }
    let temperature = ct.temperature(targets.classes())?;
    Ok(FvibModel {
        net,
        targets,
        beta,
        ct,
        temperature,
        samples,
    })
}

impl<'a> FvibModel<'a> {
    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn confidence_tuning(&self) -> ConfidenceTuning {
        self.ct
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn classes(&self) -> usize {
        self.targets.classes()
    }

    pub fn net(&self) -> &DenseNet {
        self.net
    }

    fn scale(&self) -> f64 {
        (1.0 - self.beta).sqrt()
    }

    /// `Σ = β I`.
    pub fn variance(&self) -> f64 {
        self.beta
    }

    /// `√(1-β) Lᵀ`, `d x (d-1)`.
    pub fn classifier_weights(&self) -> DMatrix<f64> {
        self.targets.l_matrix().transpose() * self.scale()
    }

    /// Classifier with the confidence-tuning temperature applied.
    pub fn classifier(&self) -> Classifier {
        Classifier::new(self.classifier_weights())
            .and_then(|c| c.with_temperature(self.temperature))
            .expect("d >= 2 and positive temperature")
    }

    /// Classifier at `T = 1`, the form the second-order objective uses.
    pub fn untempered_classifier(&self) -> Classifier {
        Classifier::new(self.classifier_weights()).expect("d >= 2")
    }

    /// `h(x)` for every row of `features`.
    pub fn features_to_h(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.net.forward_batch(features)
    }

    /// `μ(x) = √(1-β) h(x)`.
    pub fn mean(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.net.forward(x)? * self.scale())
    }

    /// Posterior encodings paired with labels.
    pub fn encodings(&self, ds: &LabeledDataset) -> Result<Vec<(GaussianEncoding, usize)>> {
        let h = self.features_to_h(ds.features())?;
        self.encodings_from_h(&h, ds.labels())
    }

    pub fn encodings_from_h(
        &self,
        h: &DMatrix<f64>,
        labels: &[usize],
    ) -> Result<Vec<(GaussianEncoding, usize)>> {
        let s = self.scale();
        (0..h.nrows())
            .map(|i| {
                let mu = h.row(i).transpose() * s;
                Ok((GaussianEncoding::isotropic(mu, self.beta)?, labels[i]))
            })
            .collect()
    }

    /// Class probabilities for one input with `S` samples drawn from `seed`.
    pub fn predict(&self, x: &DVector<f64>, seed: u64) -> Result<Vec<f64>> {
        let h = self.net.forward(x)?;
        let mut rng = example_rng(seed, 0);
        let noise: Vec<Vec<f64>> = if self.sampling_bypassed() {
            Vec::new()
        } else {
            (0..self.samples)
                .map(|_| standard_normals(&mut rng, h.len()))
                .collect()
        };
        Ok(self.predict_from_h(h.as_slice(), &noise))
    }

    /// Row `i` uses the random stream of example `i`.
    pub fn predict_batch(&self, features: &DMatrix<f64>, seed: u64) -> Result<DMatrix<f64>> {
        let h = self.features_to_h(features)?;
        let noise = NoiseBank::draw(h.nrows(), self.samples, h.ncols(), seed);
        Ok(self.predict_batch_with_noise(&h, &noise))
    }

    /// Common-random-numbers prediction: the same `ε` for every `β`.
    pub fn predict_batch_with_noise(&self, h: &DMatrix<f64>, noise: &NoiseBank) -> DMatrix<f64> {
        let d = self.classes();
        let mut out = DMatrix::zeros(h.nrows(), d);
        let mut hrow = vec![0.0; h.ncols()];
        for i in 0..h.nrows() {
            for (j, v) in hrow.iter_mut().enumerate() {
                *v = h[(i, j)];
            }
            let p = self.predict_from_h(&hrow, noise.example(i));
            for k in 0..d {
                out[(i, k)] = p[k];
            }
        }
        out
    }

    fn sampling_bypassed(&self) -> bool {
        self.beta == 0.0 || self.beta == 1.0
    }

    /// `(1/S) Σ_s softmax(W z_s / T)` with `z_s = √(1-β) h + √β ε_s`.
    pub fn predict_from_h(&self, h: &[f64], noise: &[Vec<f64>]) -> Vec<f64> {
        let d = self.classes();
        if self.beta == 1.0 {
            return vec![1.0 / d as f64; d];
        }
        let w = self.classifier_weights();
        let s = self.scale();
        let sd = self.beta.sqrt();
        let m = h.len();
        let mut z = DVector::zeros(m);
        let mut probs = vec![0.0; d];
        let mut logits = vec![0.0; d];
        let mut mean = vec![0.0; d];
        let draws: Vec<Option<&[f64]>> = if self.beta == 0.0 {
            vec![None]
        } else {
            noise.iter().take(self.samples).map(|e| Some(e.as_slice())).collect()
        };
        for eps in &draws {
            for j in 0..m {
                z[j] = s * h[j] + eps.map_or(0.0, |e| sd * e[j]);
            }
            let l = &w * &z;
            for k in 0..d {
                logits[k] = l[k] / self.temperature;
            }
            softmax_into(&logits, &mut probs);
            for k in 0..d {
                mean[k] += probs[k];
            }
        }
        let n = draws.len() as f64;
        mean.iter_mut().for_each(|p| *p /= n);
        mean
    }
}

/// Fixed standard-normal draws `ε_{i,s}` per example and sample.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBank {
    draws: Vec<Vec<Vec<f64>>>,
}

impl NoiseBank {
    pub fn draw(examples: usize, samples: usize, dim: usize, seed: u64) -> Self {
        NoiseBank {
            draws: (0..examples)
                .map(|i| {
                    let mut rng = example_rng(seed, i);
                    (0..samples).map(|_| standard_normals(&mut rng, dim)).collect()
                })
                .collect(),
        }
    }

    /// Draws in antithetic pairs `(ε, -ε)`; with odd `samples` the last draw
    /// is unpaired. The pairing cancels the `√β` term that a finite set of
    /// draws otherwise adds to averaged predictions near `β = 0`.
    pub fn draw_antithetic(examples: usize, samples: usize, dim: usize, seed: u64) -> Self {
        NoiseBank {
            draws: (0..examples)
                .map(|i| {
                    let mut rng = example_rng(seed, i);
                    let mut out = Vec::with_capacity(samples);
                    while out.len() + 1 < samples {
                        let e = standard_normals(&mut rng, dim);
                        out.push(e.iter().map(|v| -v).collect());
                        out.push(e);
                    }
                    if out.len() < samples {
                        out.push(standard_normals(&mut rng, dim));
                    }
                    out
                })
                .collect(),
        }
    }

    pub fn example(&self, i: usize) -> &[Vec<f64>] {
        &self.draws[i]
    }
}
