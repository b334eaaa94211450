//! Per-β baselines trained directly: the sampled VIB objective with the
//! reparameterization trick, the second-order objective with its closed-form
//! Gaussian expectation, and a plain cross-entropy classifier used as the
//! temperature-scaling baseline.
//!
//! The encoder head has `2κ` outputs: the first `κ` are the mean, the rest
//! the log-variances `s`, so `Σ = diag(exp s)`. The classifier is a bias-free
//! `d x κ` matrix.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::net::{
    gather_rows, layer_blocks, layer_blocks_mut, minibatches, shuffle_rng, AdamState, DenseNet,
    NetGrads, Parameters, TrainConfig,
};
use crate::numeric::{example_rng, log_sum_exp, pairwise_mean, softmax_into, standard_normals};
use crate::objectives::{mc_vib_objective, taylor_vib_objective, Classifier, GaussianEncoding};

/// Which objective a baseline encoder was trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VibMethod {
    /// Monte-Carlo VIB objective, one reparameterized sample per step.
    #[serde(rename = "vib")]
    Sampled,
    /// Second-order objective with the expectation in closed form.
    Taylor,
}

/// Gaussian encoder plus learned classifier for one fixed `β`.
#[derive(Debug, Clone, PartialEq)]
pub struct VibEncoder {
    net: DenseNet,
    classifier: DMatrix<f64>,
    kappa: usize,
    beta: f64,
    method: VibMethod,
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Domain(format!("beta must lie in [0, 1], got {beta}")));
    }
    Ok(())
}

impl VibEncoder {
    /// Encoder `[p, hidden.., 2κ]` with the log-variance half of the head
    /// zeroed, so every example starts at unit variance.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        kappa: usize,
        classes: usize,
        beta: f64,
        method: VibMethod,
        seed: u64,
    ) -> Result<Self> {
        check_beta(beta)?;
        if classes < 2 {
            return Err(Error::InvalidClassCount(classes));
        }
        if kappa < 1 {
            return Err(Error::InvalidParameter("kappa must be at least 1".into()));
        }
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(2 * kappa);
        let mut net = DenseNet::new(&dims, seed)?;
        let head = net.layers_mut().last_mut().expect("at least one layer");
        for r in kappa..2 * kappa {
            head.weight.row_mut(r).fill(0.0);
            head.bias[r] = 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        let bound = 1.0 / (kappa as f64).sqrt();
        let classifier = DMatrix::from_fn(classes, kappa, |_, _| rng.random_range(-bound..bound));
        Ok(VibEncoder {
            net,
            classifier,
            kappa,
            beta,
            method,
        })
    }

    pub fn from_parts(
        net: DenseNet,
        classifier: DMatrix<f64>,
        beta: f64,
        method: VibMethod,
    ) -> Result<Self> {
        check_beta(beta)?;
        let kappa = classifier.ncols();
        if net.output_dim() != 2 * kappa {
            return Err(Error::shape("encoder head", 2 * kappa, net.output_dim()));
        }
        if classifier.nrows() < 2 {
            return Err(Error::InvalidClassCount(classifier.nrows()));
        }
        Ok(VibEncoder {
            net,
            classifier,
            kappa,
            beta,
            method,
        })
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn kappa(&self) -> usize {
        self.kappa
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn method(&self) -> VibMethod {
        self.method
    }

    pub fn classes(&self) -> usize {
        self.classifier.nrows()
    }

    pub fn classifier_weights(&self) -> &DMatrix<f64> {
        &self.classifier
    }

    pub fn classifier(&self) -> Classifier {
        Classifier::new(self.classifier.clone()).expect("validated at construction")
    }

    /// Means and log-variances, each `B x κ`.
    pub fn encode(&self, features: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let out = self.net.forward_batch(features)?;
        Ok(split_head(&out, self.kappa))
    }

    pub fn encodings(&self, ds: &LabeledDataset) -> Result<Vec<(GaussianEncoding, usize)>> {
        let (mu, s) = self.encode(ds.features())?;
        (0..ds.len())
            .map(|i| {
                let mean = mu.row(i).transpose();
                let var = s.row(i).transpose().map(f64::exp);
                Ok((GaussianEncoding::diagonal(mean, var)?, ds.labels()[i]))
            })
            .collect()
    }

    /// `(1/S) Σ_s softmax(W z_s)`, row `i` drawing from the stream of example `i`.
    pub fn predict_batch(&self, features: &DMatrix<f64>, samples: usize, seed: u64) -> Result<DMatrix<f64>> {
        if samples < 1 {
            return Err(Error::InvalidParameter("sample count must be at least 1".into()));
        }
        let (mu, s) = self.encode(features)?;
        let d = self.classes();
        let mut out = DMatrix::zeros(mu.nrows(), d);
        let mut z = DVector::zeros(self.kappa);
        let mut probs = vec![0.0; d];
        for i in 0..mu.nrows() {
            let mut rng = example_rng(seed, i);
            for _ in 0..samples {
                let eps = standard_normals(&mut rng, self.kappa);
                for j in 0..self.kappa {
                    z[j] = mu[(i, j)] + (0.5 * s[(i, j)]).exp() * eps[j];
                }
                let logits = &self.classifier * &z;
                softmax_into(logits.as_slice(), &mut probs);
                for k in 0..d {
                    out[(i, k)] += probs[k] / samples as f64;
                }
            }
        }
        Ok(out)
    }
}

fn split_head(out: &DMatrix<f64>, kappa: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    (
        out.columns(0, kappa).into_owned(),
        out.columns(kappa, kappa).into_owned(),
    )
}

impl Parameters for VibEncoder {
    fn blocks(&self) -> Vec<&[f64]> {
        let mut b = layer_blocks(self.net.layers());
        b.push(self.classifier.as_slice());
        b
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut b = layer_blocks_mut(self.net.layers_mut());
        b.push(self.classifier.as_mut_slice());
        b
    }
}

/// Gradients for the encoder network and the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct VibGrads {
    pub net: NetGrads,
    pub classifier: DMatrix<f64>,
}

impl Parameters for VibGrads {
    fn blocks(&self) -> Vec<&[f64]> {
        let mut b = self.net.blocks();
        b.push(self.classifier.as_slice());
        b
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut b = self.net.blocks_mut();
        b.push(self.classifier.as_mut_slice());
        b
    }
}

fn check_batch(x: &DMatrix<f64>, labels: &[usize], classes: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    if x.nrows() != labels.len() {
        return Err(Error::shape("batch labels", x.nrows(), labels.len()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::data(format!("label {y} out of range for {classes} classes")));
    }
    Ok(())
}

/// `½ Σ_j (v_j - s_j + μ_j² - 1)` for one row.
fn diag_kl(mu: &DMatrix<f64>, s: &DMatrix<f64>, i: usize) -> f64 {
    let mut acc = 0.0;
    for j in 0..mu.ncols() {
        acc += s[(i, j)].exp() - s[(i, j)] + mu[(i, j)].powi(2) - 1.0;
    }
    0.5 * acc
}

/// Negated VIB objective on a batch for fixed noise `eps` (`B x κ`):
/// `(1/B) Σ_i [-log q(y_i | μ_i + σ_i ⊙ ε_i) + β KL_i]`.
pub fn sampled_vib_loss(
    enc: &VibEncoder,
    x: &DMatrix<f64>,
    labels: &[usize],
    eps: &DMatrix<f64>,
) -> Result<(f64, VibGrads)> {
    check_batch(x, labels, enc.classes())?;
    let kappa = enc.kappa;
    if eps.shape() != (labels.len(), kappa) {
        return Err(Error::shape(
            "noise",
            format!("{}x{}", labels.len(), kappa),
            format!("{}x{}", eps.nrows(), eps.ncols()),
        ));
    }
    let beta = enc.beta;
    let bsz = labels.len() as f64;
    let (out, tape) = enc.net.forward_recorded(x)?;
    let (mu, s) = split_head(&out, kappa);
    let sigma = s.map(|v| (0.5 * v).exp());
    let z = &mu + sigma.component_mul(eps);
    let logits = &z * enc.classifier.transpose();
    let d = enc.classes();
    let mut g_logits = DMatrix::zeros(labels.len(), d);
    let mut per_example = Vec::with_capacity(labels.len());
    let mut p = vec![0.0; d];
    let mut row = vec![0.0; d];
    for (i, &y) in labels.iter().enumerate() {
        for k in 0..d {
            row[k] = logits[(i, k)];
        }
        let ll = row[y] - log_sum_exp(&row);
        softmax_into(&row, &mut p);
        for k in 0..d {
            g_logits[(i, k)] = (p[k] - if k == y { 1.0 } else { 0.0 }) / bsz;
        }
        let kl = if beta == 0.0 { 0.0 } else { beta * diag_kl(&mu, &s, i) };
        per_example.push(-ll + kl);
    }
    let g_classifier = g_logits.transpose() * &z;
    let g_z = &g_logits * &enc.classifier;
    let mut g_out = DMatrix::zeros(labels.len(), 2 * kappa);
    for i in 0..labels.len() {
        for j in 0..kappa {
            let v = s[(i, j)].exp();
            g_out[(i, j)] = g_z[(i, j)] + beta * mu[(i, j)] / bsz;
            g_out[(i, kappa + j)] =
                0.5 * g_z[(i, j)] * eps[(i, j)] * sigma[(i, j)] + 0.5 * beta * (v - 1.0) / bsz;
        }
    }
    let net = enc.net.backward(&tape, &g_out)?;
    Ok((
        pairwise_mean(&per_example),
        VibGrads {
            net,
            classifier: g_classifier,
        },
    ))
}

/// Negated second-order objective on a batch, with the Gaussian expectation
/// in closed form and `Σ_i = diag(exp s_i)`.
pub fn taylor_vib_loss(enc: &VibEncoder, x: &DMatrix<f64>, labels: &[usize]) -> Result<(f64, VibGrads)> {
    check_batch(x, labels, enc.classes())?;
    let kappa = enc.kappa;
    let beta = enc.beta;
    let n = labels.len();
    let bsz = n as f64;
    let d = enc.classes();
    let df = d as f64;
    let (out, tape) = enc.net.forward_recorded(x)?;
    let (mu, s) = split_head(&out, kappa);
    let v = s.map(f64::exp);

    let w = &enc.classifier;
    let mean_row = w.row_mean();
    let mut centered = w.clone();
    for mut r in centered.row_iter_mut() {
        r -= &mean_row;
    }
    let m = centered.transpose() * &centered / df;
    let m_mu = &mu * &m; // rows are (M μ_i)ᵀ since M is symmetric

    let mut per_example = Vec::with_capacity(n);
    let mut g_out = DMatrix::zeros(n, 2 * kappa);
    for (i, &y) in labels.iter().enumerate() {
        let mut lin = 0.0;
        let mut quad = 0.0;
        let mut trace = 0.0;
        for j in 0..kappa {
            lin += centered[(y, j)] * mu[(i, j)];
            quad += mu[(i, j)] * m_mu[(i, j)];
            trace += m[(j, j)] * v[(i, j)];
        }
        let kl = if beta == 0.0 { 0.0 } else { beta * diag_kl(&mu, &s, i) };
        per_example.push(-(-df.ln() + lin - 0.5 * trace - 0.5 * quad - kl));
        for j in 0..kappa {
            let d_mu = centered[(y, j)] - m_mu[(i, j)] - beta * mu[(i, j)];
            let d_s = -0.5 * m[(j, j)] * v[(i, j)] - 0.5 * beta * (v[(i, j)] - 1.0);
            g_out[(i, j)] = -d_mu / bsz;
            g_out[(i, kappa + j)] = -d_s / bsz;
        }
    }

    // ∂/∂W of the objective: (Y - 1/d)ᵀ μ - C (Σ_i diag v_i + μᵀμ) / d
    let mut centered_labels = DMatrix::from_element(n, d, -1.0 / df);
    for (i, &y) in labels.iter().enumerate() {
        centered_labels[(i, y)] += 1.0;
    }
    let mut second = mu.transpose() * &mu;
    for j in 0..kappa {
        second[(j, j)] += v.column(j).sum();
    }
    let d_w = centered_labels.transpose() * &mu - &centered * second / df;
    let net = enc.net.backward(&tape, &g_out)?;
    Ok((
        pairwise_mean(&per_example),
        VibGrads {
            net,
            classifier: -d_w / bsz,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VibEpochRecord {
    pub epoch: usize,
    /// Mean minibatch loss during the epoch.
    pub loss: f64,
    /// The method's own objective on the full training split after the epoch
    /// (closed form for `Taylor`, one-sample estimate for `Sampled`).
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedVib {
    pub encoder: VibEncoder,
    pub history: Vec<VibEpochRecord>,
}

/// Seed of the fixed noise used for the per-epoch objective of sampled runs.
const EVAL_SEED_OFFSET: u64 = 0x5eed;

/// Maximizes the sampled VIB objective, one `z` draw per example per step.
pub fn vib_train(
    ds: &LabeledDataset,
    beta: f64,
    hidden: &[usize],
    kappa: Option<usize>,
    config: &TrainConfig,
) -> Result<TrainedVib> {
    train_encoder(ds, beta, hidden, kappa, config, VibMethod::Sampled)
}

/// Maximizes the second-order objective with its closed-form expectation.
pub fn taylor_train(
    ds: &LabeledDataset,
    beta: f64,
    hidden: &[usize],
    kappa: Option<usize>,
    config: &TrainConfig,
) -> Result<TrainedVib> {
    train_encoder(ds, beta, hidden, kappa, config, VibMethod::Taylor)
}

/// Full-split objective of `enc` under its own training method.
pub fn encoder_objective(enc: &VibEncoder, ds: &LabeledDataset, seed: u64) -> Result<f64> {
    let encodings = enc.encodings(ds)?;
    let c = enc.classifier();
    match enc.method {
        VibMethod::Taylor => taylor_vib_objective(&encodings, &c, enc.beta),
        VibMethod::Sampled => mc_vib_objective(&encodings, &c, enc.beta, 1, seed),
    }
}

fn train_encoder(
    ds: &LabeledDataset,
    beta: f64,
    hidden: &[usize],
    kappa: Option<usize>,
    config: &TrainConfig,
    method: VibMethod,
) -> Result<TrainedVib> {
    check_beta(beta)?;
    config.validate()?;
    if ds.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let kappa = kappa.unwrap_or(ds.classes() - 1);
    let mut enc = VibEncoder::new(ds.feature_dim(), hidden, kappa, ds.classes(), beta, method, config.seed)?;
    let mut adam = AdamState::new(&enc, config.learning_rate);
    let mut order_rng = shuffle_rng(config.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
    noise_rng.set_stream(2);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        adam.learning_rate = config.lr_schedule.rate(config.learning_rate, epoch);
        let mut total = 0.0;
        for idx in minibatches(ds.len(), config.batch_size, &mut order_rng) {
            let x = gather_rows(ds.features(), &idx);
            let labels: Vec<usize> = idx.iter().map(|&i| ds.labels()[i]).collect();
            let (loss, grads) = match method {
                VibMethod::Taylor => taylor_vib_loss(&enc, &x, &labels)?,
                VibMethod::Sampled => {
                    let eps = DMatrix::from_fn(idx.len(), kappa, |_, _| {
                        noise_rng.sample::<f64, _>(rand_distr::StandardNormal)
                    });
                    sampled_vib_loss(&enc, &x, &labels, &eps)?
                }
            };
            adam.step(&mut enc, &grads)?;
            total += loss * idx.len() as f64;
        }
        let record = VibEpochRecord {
            epoch: epoch + 1,
            loss: total / ds.len() as f64,
            objective: encoder_objective(&enc, ds, config.seed ^ EVAL_SEED_OFFSET)?,
        };
        log::debug!(
            "{method:?} beta {beta} epoch {} loss {:.6e} objective {:.6e}",
            record.epoch,
            record.loss,
            record.objective
        );
        history.push(record);
    }
    Ok(TrainedVib {
        encoder: enc,
        history,
    })
}

/// Mean cross-entropy of `softmax(net(x))` with gradients.
pub fn cross_entropy_loss(net: &DenseNet, x: &DMatrix<f64>, labels: &[usize]) -> Result<(f64, NetGrads)> {
    check_batch(x, labels, net.output_dim())?;
    let (logits, tape) = net.forward_recorded(x)?;
    let d = logits.ncols();
    let bsz = labels.len() as f64;
    let mut grad = DMatrix::zeros(labels.len(), d);
    let mut per_example = Vec::with_capacity(labels.len());
    let mut row = vec![0.0; d];
    let mut p = vec![0.0; d];
    for (i, &y) in labels.iter().enumerate() {
        for k in 0..d {
            row[k] = logits[(i, k)];
        }
        per_example.push(log_sum_exp(&row) - row[y]);
        softmax_into(&row, &mut p);
        for k in 0..d {
            grad[(i, k)] = (p[k] - if k == y { 1.0 } else { 0.0 }) / bsz;
        }
    }
    let grads = net.backward(&tape, &grad)?;
    Ok((pairwise_mean(&per_example), grads))
}

/// Plain softmax classifier `[p, hidden.., d]` trained on cross-entropy.
pub fn train_cross_entropy(ds: &LabeledDataset, hidden: &[usize], config: &TrainConfig) -> Result<DenseNet> {
    config.validate()?;
    if ds.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let mut dims = vec![ds.feature_dim()];
    dims.extend_from_slice(hidden);
    dims.push(ds.classes());
    let mut net = DenseNet::new(&dims, config.seed)?;
    let mut adam = AdamState::new(&net, config.learning_rate);
    let mut rng = shuffle_rng(config.seed);
    for epoch in 0..config.epochs {
        adam.learning_rate = config.lr_schedule.rate(config.learning_rate, epoch);
        for idx in minibatches(ds.len(), config.batch_size, &mut rng) {
            let x = gather_rows(ds.features(), &idx);
            let labels: Vec<usize> = idx.iter().map(|&i| ds.labels()[i]).collect();
            let (_, grads) = cross_entropy_loss(&net, &x, &labels)?;
            adam.step(&mut net, &grads)?;
        }
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::net::LrSchedule;
    use crate::objectives::{ib_bounds, kl_to_standard_normal};

    fn randomize_biases(enc: &mut VibEncoder, rng: &mut ChaCha8Rng) {
        for layer in enc.net.layers_mut() {
            layer.bias.apply(|b| *b = rng.random_range(-0.5..0.5));
        }
        let head = enc.net.layers_mut().last_mut().unwrap();
        head.weight.apply(|w| *w += rng.random_range(-0.3..0.3));
    }

    type LossFn = dyn Fn(&VibEncoder) -> (f64, VibGrads);

    /// Worst relative error of analytic vs central-difference gradients,
    /// measured against `max(|fd|, |analytic|, 1)`.
    fn worst_gradient_error(enc: &VibEncoder, loss: &LossFn) -> f64 {
        let (_, grads) = loss(enc);
        let analytic: Vec<f64> = grads.blocks().concat();
        let sizes: Vec<usize> = enc.blocks().iter().map(|b| b.len()).collect();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut flat = 0;
        for (b, &len) in sizes.iter().enumerate() {
            for j in 0..len {
                let mut plus = enc.clone();
                plus.blocks_mut()[b][j] += h;
                let mut minus = enc.clone();
                minus.blocks_mut()[b][j] -= h;
                let fd = (loss(&plus).0 - loss(&minus).0) / (2.0 * h);
                let an = analytic[flat];
                let scale = fd.abs().max(an.abs()).max(1.0);
                worst = worst.max((fd - an).abs() / scale);
                flat += 1;
            }
        }
        worst
    }

    fn toy_batch(rng: &mut ChaCha8Rng, n: usize, p: usize, d: usize) -> (DMatrix<f64>, Vec<usize>) {
        let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        let labels = (0..n).map(|i| i % d).collect();
        (x, labels)
    }

    #[test]
    fn new_encoder_starts_at_unit_variance() {
        let enc = VibEncoder::new(4, &[8], 2, 3, 0.1, VibMethod::Sampled, 5).unwrap();
        let x = DMatrix::from_fn(6, 4, |i, j| (i * 4 + j) as f64 * 0.1);
        let (_, s) = enc.encode(&x).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
        assert_eq!(enc.net().output_dim(), 4);
        assert_eq!(enc.classifier_weights().shape(), (3, 2));
    }

    #[test]
    fn invalid_beta_rejected() {
        assert!(matches!(
            VibEncoder::new(2, &[], 1, 2, 1.5, VibMethod::Taylor, 0),
            Err(Error::Domain(_))
        ));
        let ds = synth_blobs(2, 5, 2, 0.1, 0).unwrap();
        assert!(matches!(
            vib_train(&ds, -0.1, &[4], None, &TrainConfig::default()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn sampled_loss_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (trial, beta) in [0.0, 0.1, 0.7].into_iter().enumerate() {
            let mut enc = VibEncoder::new(3, &[5], 2, 3, beta, VibMethod::Sampled, trial as u64).unwrap();
            randomize_biases(&mut enc, &mut rng);
            let (x, labels) = toy_batch(&mut rng, 6, 3, 3);
            let eps = DMatrix::from_fn(6, 2, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let loss = move |e: &VibEncoder| sampled_vib_loss(e, &x, &labels, &eps).unwrap();
            let worst = worst_gradient_error(&enc, &loss);
            assert!(worst <= 1e-4, "beta {beta}: worst relative error {worst}");
        }
    }

    #[test]
    fn taylor_loss_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (trial, beta) in [0.0, 0.3, 0.9].into_iter().enumerate() {
            let mut enc = VibEncoder::new(3, &[4], 3, 4, beta, VibMethod::Taylor, 10 + trial as u64).unwrap();
            randomize_biases(&mut enc, &mut rng);
            let (x, labels) = toy_batch(&mut rng, 8, 3, 4);
            let loss = move |e: &VibEncoder| taylor_vib_loss(e, &x, &labels).unwrap();
            let worst = worst_gradient_error(&enc, &loss);
            assert!(worst <= 1e-4, "beta {beta}: worst relative error {worst}");
        }
    }

    #[test]
    fn taylor_loss_is_negated_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut enc = VibEncoder::new(2, &[6], 2, 3, 0.4, VibMethod::Taylor, 1).unwrap();
        randomize_biases(&mut enc, &mut rng);
        let ds = synth_blobs(3, 4, 2, 0.5, 9).unwrap();
        let (loss, _) = taylor_vib_loss(&enc, ds.features(), ds.labels()).unwrap();
        let obj = taylor_vib_objective(&enc.encodings(&ds).unwrap(), &enc.classifier(), 0.4).unwrap();
        assert!((loss + obj).abs() < 1e-12, "{loss} vs {obj}");
    }

    #[test]
    fn sampled_loss_with_zero_noise_is_deterministic_cross_entropy() {
        let enc = VibEncoder::new(2, &[4], 2, 2, 0.0, VibMethod::Sampled, 2).unwrap();
        let ds = synth_blobs(2, 3, 2, 0.2, 1).unwrap();
        let eps = DMatrix::zeros(ds.len(), 2);
        let (loss, _) = sampled_vib_loss(&enc, ds.features(), ds.labels(), &eps).unwrap();
        let (mu, _) = enc.encode(ds.features()).unwrap();
        let c = enc.classifier();
        let want: f64 = (0..ds.len())
            .map(|i| -crate::objectives::log_likelihood(&c, &mu.row(i).transpose(), ds.labels()[i]).unwrap())
            .sum::<f64>()
            / ds.len() as f64;
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn noise_shape_mismatch_is_an_error() {
        let enc = VibEncoder::new(2, &[], 2, 2, 0.5, VibMethod::Sampled, 0).unwrap();
        let x = DMatrix::zeros(3, 2);
        let eps = DMatrix::zeros(3, 1);
        assert!(matches!(
            sampled_vib_loss(&enc, &x, &[0, 1, 0], &eps),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            taylor_vib_loss(&enc, &x, &[0, 2, 0]),
            Err(Error::Data { .. })
        ));
    }

    fn quick_config(epochs: usize, lr: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 32,
            learning_rate: lr,
            lr_schedule: LrSchedule::Constant,
            seed,
        }
    }

    #[test]
    fn beta_one_collapses_to_the_prior() {
        let ds = synth_blobs(3, 30, 4, 0.3, 4).unwrap();
        let trained = vib_train(&ds, 1.0, &[16], None, &quick_config(150, 1e-2, 4)).unwrap();
        let enc = &trained.encoder;
        let bounds = ib_bounds(&enc.encodings(&ds).unwrap(), &enc.classifier(), 1, 0).unwrap();
        assert!(bounds.compression <= 0.05, "compression {}", bounds.compression);
    }

    #[test]
    fn beta_zero_fits_separable_data() {
        let ds = synth_blobs(3, 20, 4, 0.1, 8).unwrap();
        let trained = vib_train(&ds, 0.0, &[16], None, &quick_config(100, 1e-2, 8)).unwrap();
        let probs = trained.encoder.predict_batch(ds.features(), 1, 0).unwrap();
        let correct = (0..ds.len())
            .filter(|&i| crate::numeric::argmax(probs.row(i).transpose().as_slice()) == ds.labels()[i])
            .count();
        assert_eq!(correct, ds.len());
    }

    #[test]
    fn same_seed_same_trajectory() {
        let ds = synth_blobs(2, 10, 3, 0.4, 2).unwrap();
        let a = vib_train(&ds, 0.2, &[8], None, &quick_config(5, 1e-2, 6)).unwrap();
        let b = vib_train(&ds, 0.2, &[8], None, &quick_config(5, 1e-2, 6)).unwrap();
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn taylor_beta_one_value_at_the_prior() {
        // μ = 0, Σ = I gives -log d - ½ tr M for any fixed W
        let enc = VibEncoder::new(2, &[], 2, 3, 1.0, VibMethod::Taylor, 0).unwrap();
        let mut zeroed = enc.clone();
        for layer in zeroed.net.layers_mut() {
            layer.weight.fill(0.0);
            layer.bias.fill(0.0);
        }
        let ds = synth_blobs(3, 2, 2, 0.1, 0).unwrap();
        let obj = encoder_objective(&zeroed, &ds, 0).unwrap();
        let m = crate::objectives::TaylorExpansion::new(zeroed.classifier_weights());
        let want = -(3f64).ln() - 0.5 * m.curvature().trace();
        assert!((obj - want).abs() < 1e-12);
        for (g, _) in zeroed.encodings(&ds).unwrap() {
            assert_eq!(kl_to_standard_normal(&g).unwrap(), 0.0);
        }
    }

    #[test]
    fn taylor_training_improves_convex_single_layer() {
        // linear encoder: the objective is concave in μ and s for fixed W
        let ds = synth_blobs(3, 10, 2, 0.2, 3).unwrap();
        let config = TrainConfig {
            batch_size: ds.len(),
            ..quick_config(40, 1e-3, 3)
        };
        let trained = taylor_train(&ds, 0.5, &[], None, &config).unwrap();
        for pair in trained.history.windows(2) {
            assert!(pair[1].objective >= pair[0].objective - 1e-12, "{pair:?}");
        }
    }

    #[test]
    fn cross_entropy_gradients_and_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut net = DenseNet::new(&[3, 5, 3], 1).unwrap();
        for layer in net.layers_mut() {
            layer.bias.apply(|b| *b = rng.random_range(-0.5..0.5));
        }
        let (x, labels) = toy_batch(&mut rng, 6, 3, 3);
        let (_, grads) = cross_entropy_loss(&net, &x, &labels).unwrap();
        let analytic = grads.blocks().concat();
        let mut flat = 0;
        let h = 1e-5;
        let sizes: Vec<usize> = net.blocks().iter().map(|b| b.len()).collect();
        for (b, &len) in sizes.iter().enumerate() {
            for j in 0..len {
                let mut plus = net.clone();
                plus.blocks_mut()[b][j] += h;
                let mut minus = net.clone();
                minus.blocks_mut()[b][j] -= h;
                let fd = (cross_entropy_loss(&plus, &x, &labels).unwrap().0
                    - cross_entropy_loss(&minus, &x, &labels).unwrap().0)
                    / (2.0 * h);
                assert!((fd - analytic[flat]).abs() <= 1e-4 * fd.abs().max(1.0));
                flat += 1;
            }
        }
        let ds = synth_blobs(3, 20, 2, 0.1, 5).unwrap();
        let net = train_cross_entropy(&ds, &[8], &quick_config(80, 1e-2, 5)).unwrap();
        let logits = net.forward_batch(ds.features()).unwrap();
        let correct = (0..ds.len())
            .filter(|&i| crate::numeric::argmax(logits.row(i).transpose().as_slice()) == ds.labels()[i])
            .count();
        assert_eq!(correct, ds.len());
    }
}
