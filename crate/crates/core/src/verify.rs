//! Numeric identity checks run by `fvib verify`.
//!
//! Every check reports a measured error next to its tolerance. The suites
//! use fixed seeds, so a report is reproducible bit for bit.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::synth_blobs;
use crate::error::Result;
use crate::fvib::{instantiate, j_fvib, target_rows, taylor_optimal_confidence, ConfidenceTuning};
use crate::net::{DenseNet, Parameters};
use crate::numeric::{example_rng, standard_normals};
use crate::objectives::{expected_taylor, taylor_vib_objective, Classifier, GaussianEncoding, TaylorExpansion};
use crate::simplex::TargetMatrix;
use crate::vib::{sampled_vib_loss, VibEncoder, VibMethod};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    /// Passes when `measured <= tolerance`.
    fn at_most(suite: &'static str, name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Check {
            suite,
            name: name.into(),
            measured,
            tolerance,
            passed: measured <= tolerance,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:<10} {:<48} measured {:.3e}  tolerance {:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.measured,
            self.tolerance
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let failed = self.failures().count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VerifyOptions {
    /// Perturb one entry of every target matrix before the simplex suite,
    /// to demonstrate that the suite notices.
    pub corrupt_target_matrix: bool,
}

pub fn run_all(options: VerifyOptions) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    let build = |d: usize| -> Result<TargetMatrix> {
        let mut tm = TargetMatrix::new(d)?;
        if options.corrupt_target_matrix {
            tm.corrupt_for_testing();
        }
        Ok(tm)
    };
    checks.extend(simplex_suite(&[2, 3, 5, 10, 100], build)?);
    checks.extend(stationarity_suite(&[0.1, 0.5, 0.9])?);
    checks.extend(slope_suite(&[0.0, 0.25, 0.5, 0.9])?);
    checks.extend(gap_suite(21)?);
    checks.extend(confidence_suite()?);
    checks.extend(expectation_suite(50, 100_000)?);
    checks.extend(gradient_suite()?);
    Ok(VerifyReport { checks })
}

/// Factorization, simplex norms and inner products, centering.
pub fn simplex_suite<F>(classes: &[usize], build: F) -> Result<Vec<Check>>
where
    F: Fn(usize) -> Result<TargetMatrix>,
{
    let mut out = Vec::new();
    for &d in classes {
        let tm = build(d)?;
        let ktk = tm.k_factor().transpose() * tm.k_factor();
        let reference = crate::simplex::build_gamma_inv(d)?;
        out.push(Check::at_most("simplex", format!("d={d} max|KᵀK - Γ⁻¹|"), (ktk - reference).abs().max(), 1e-8));
        let t = tm.targets();
        let gram = t.transpose() * &t;
        let mut norm_err: f64 = 0.0;
        let mut inner_err: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i == j {
                    norm_err = norm_err.max((gram[(i, j)] - (d - 1) as f64).abs());
                } else {
                    inner_err = inner_err.max((gram[(i, j)] + 1.0).abs());
                }
            }
        }
        out.push(Check::at_most("simplex", format!("d={d} max|‖t_k‖² - (d-1)|"), norm_err, 1e-8));
        out.push(Check::at_most("simplex", format!("d={d} max|t_iᵀt_j + 1|"), inner_err, 1e-8));
        out.push(Check::at_most("simplex", format!("d={d} max|Σ t_k|"), t.column_sum().amax(), 1e-10));
    }
    Ok(out)
}

/// Free parameters of the second-order objective with isotropic
/// covariances: `N x κ` means, `N` variances, and `W` (`d x κ`).
#[derive(Debug, Clone)]
struct FreeParams {
    means: DMatrix<f64>,
    variances: DVector<f64>,
    weights: DMatrix<f64>,
}

impl FreeParams {
    fn len(&self) -> usize {
        self.means.len() + self.variances.len() + self.weights.len()
    }

    fn get_mut(&mut self, k: usize) -> &mut f64 {
        let a = self.means.len();
        let b = a + self.variances.len();
        if k < a {
            &mut self.means.as_mut_slice()[k]
        } else if k < b {
            &mut self.variances.as_mut_slice()[k - a]
        } else {
            &mut self.weights.as_mut_slice()[k - b]
        }
    }

    fn objective(&self, labels: &[usize], beta: f64) -> Result<f64> {
        let encodings = (0..labels.len())
            .map(|i| {
                Ok((
                    GaussianEncoding::isotropic(self.means.row(i).transpose(), self.variances[i])?,
                    labels[i],
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        taylor_vib_objective(&encodings, &Classifier::new(self.weights.clone())?, beta)
    }
}

/// The optimum of the second-order objective for balanced labels:
/// `μ_i = √(1-β) t_{y_i}`, `Σ_i = β I`, `W = √(1-β) Lᵀ`.
fn optimum_point(tm: &TargetMatrix, labels: &[usize], beta: f64) -> Result<FreeParams> {
    let s = (1.0 - beta).sqrt();
    Ok(FreeParams {
        means: target_rows(tm, labels)? * s,
        variances: DVector::from_element(labels.len(), beta),
        weights: tm.l_matrix().transpose() * s,
    })
}

/// Toy set: 12 examples, 3 balanced classes.
fn toy_labels() -> Vec<usize> {
    (0..12).map(|i| i % 3).collect()
}

/// Central differences vanish at the optimum, and random steps of norm
/// `1e-2` never improve it.
pub fn stationarity_suite(betas: &[f64]) -> Result<Vec<Check>> {
    let tm = TargetMatrix::new(3)?;
    let labels = toy_labels();
    let mut out = Vec::new();
    for &beta in betas {
        let p0 = optimum_point(&tm, &labels, beta)?;
        let f0 = p0.objective(&labels, beta)?;
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for k in 0..p0.len() {
            let mut plus = p0.clone();
            *plus.get_mut(k) += h;
            let mut minus = p0.clone();
            *minus.get_mut(k) -= h;
            let g = (plus.objective(&labels, beta)? - minus.objective(&labels, beta)?) / (2.0 * h);
            worst = worst.max(g.abs());
        }
        out.push(Check::at_most("stationarity", format!("β={beta} max |∂ objective| at optimum"), worst, 1e-4));
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + (beta * 1000.0) as u64);
        let mut best_gain = f64::NEG_INFINITY;
        for _ in 0..100 {
            let dir: Vec<f64> = (0..p0.len()).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut p = p0.clone();
            for (k, v) in dir.iter().enumerate() {
                *p.get_mut(k) += 1e-2 * v / norm;
            }
            best_gain = best_gain.max(p.objective(&labels, beta)? - f0);
        }
        out.push(Check::at_most("stationarity", format!("β={beta} max gain over 100 perturbations"), best_gain, 1e-10));
    }
    Ok(out)
}

/// Two random networks with their instantiated objectives and `J`.
fn two_networks() -> Result<(Vec<DenseNet>, crate::data::LabeledDataset, TargetMatrix)> {
    let ds = synth_blobs(3, 4, 3, 1.0, 17)?;
    let tm = TargetMatrix::new(3)?;
    let nets = vec![DenseNet::new(&[3, 8, 2], 101)?, DenseNet::new(&[3, 8, 2], 202)?];
    Ok((nets, ds, tm))
}

fn instantiated_objective(
    net: &DenseNet,
    tm: &TargetMatrix,
    h: &DMatrix<f64>,
    labels: &[usize],
    beta: f64,
) -> Result<f64> {
    let model = instantiate(net, tm, beta, ConfidenceTuning::off(), 1)?;
    taylor_vib_objective(&model.encodings_from_h(h, labels)?, &model.untempered_classifier(), beta)
}

/// `(L̂₁ - L̂₂) / (J₁ - J₂) = (1-β)/2`.
pub fn slope_suite(betas: &[f64]) -> Result<Vec<Check>> {
    let (nets, ds, tm) = two_networks()?;
    let js: Vec<f64> = nets.iter().map(|n| j_fvib(n, &ds, &tm)).collect::<Result<_>>()?;
    let hs: Vec<DMatrix<f64>> = nets.iter().map(|n| n.forward_batch(ds.features())).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for &beta in betas {
        let l1 = instantiated_objective(&nets[0], &tm, &hs[0], ds.labels(), beta)?;
        let l2 = instantiated_objective(&nets[1], &tm, &hs[1], ds.labels(), beta)?;
        let slope = (l1 - l2) / (js[0] - js[1]);
        let want = (1.0 - beta) / 2.0;
        out.push(Check::at_most(
            "slope",
            format!("β={beta} slope {slope:.9} vs (1-β)/2 (rel. err)"),
            (slope - want).abs() / want,
            1e-6,
        ));
    }
    Ok(out)
}

/// `optimum - instantiated = -(1-β)/2 · J` on a `points`-point grid over
/// `[0, 1]`, with the largest gap at `β = 0` equal to `-J/2`.
pub fn gap_suite(points: usize) -> Result<Vec<Check>> {
    let (nets, ds, tm) = two_networks()?;
    let net = &nets[0];
    let j = j_fvib(net, &ds, &tm)?;
    let h = net.forward_batch(ds.features())?;
    let t = target_rows(&tm, ds.labels())?;
    let mut worst: f64 = 0.0;
    let mut gaps = Vec::with_capacity(points);
    for i in 0..points {
        let beta = i as f64 / (points - 1) as f64;
        let opt = instantiated_objective(net, &tm, &t, ds.labels(), beta)?;
        let inst = instantiated_objective(net, &tm, &h, ds.labels(), beta)?;
        let gap = opt - inst;
        worst = worst.max((gap + (1.0 - beta) / 2.0 * j).abs());
        gaps.push(gap);
    }
    let sup = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let argmax_is_zero = gaps[0] == sup;
    Ok(vec![
        Check::at_most("gap", format!("{points}-point grid max|gap + (1-β)J/2|"), worst, 1e-6),
        Check::at_most("gap", "|sup gap - (-J/2)|", (sup + j / 2.0).abs(), 1e-6),
        Check::at_most(
            "gap",
            "sup attained at β=0 (0 = yes)",
            if argmax_is_zero { 0.0 } else { 1.0 },
            0.0,
        ),
    ])
}

/// Confidence cap of the second-order optimum, confidence tuning, and the
/// tuning temperature.
pub fn confidence_suite() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (d, reference) in [(2usize, 0.880797), (10, 0.999591)] {
        let df = d as f64;
        let formula = df.exp() / (df.exp() + df - 1.0);
        out.push(Check::at_most(
            "confidence",
            format!("d={d} closed-form cap vs e^d/(e^d+d-1)"),
            (taylor_optimal_confidence(d) - formula).abs(),
            1e-9,
        ));
        // the references are printed to six decimals, truncated
        out.push(Check::at_most("confidence", format!("d={d} cap vs {reference}"), (formula - reference).abs(), 1e-6));
    }
    for d in [2usize, 3, 10] {
        let tm = TargetMatrix::new(d)?;
        let net = target_identity_net(&tm)?;
        let x = DVector::from_fn(d, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let df = d as f64;
        let off = instantiate(&net, &tm, 0.0, ConfidenceTuning::off(), 1)?.predict(&x, 0)?;
        out.push(Check::at_most(
            "confidence",
            format!("d={d} β=0 confidence at a target, CT off"),
            (off[0] - df.exp() / (df.exp() + df - 1.0)).abs(),
            1e-9,
        ));
        let on = instantiate(&net, &tm, 0.0, ConfidenceTuning::default(), 1)?.predict(&x, 0)?;
        out.push(Check::at_most(
            "tuning",
            format!("d={d} β=0 confidence at a target, c=0.997"),
            (on[0] - 0.997).abs(),
            1e-9,
        ));
    }
    let t = crate::fvib::ct_temperature(10, 0.997)?;
    out.push(Check::at_most("tuning", format!("T(10, 0.997) = {t:.6} vs 1.2495"), (t - 1.2495).abs(), 1e-3));
    Ok(out)
}

/// A linear layer with `x = e_k ↦ t_k`.
fn target_identity_net(tm: &TargetMatrix) -> Result<DenseNet> {
    DenseNet::from_layers(
        vec![crate::net::Layer {
            weight: tm.targets(),
            bias: DVector::zeros(tm.latent_dim()),
        }],
        0,
    )
}

/// Closed-form `E[T_y(Z)]` against the Monte-Carlo mean of `T_y` within
/// three standard errors on random configurations. The measured value is
/// the worst error in units of standard errors.
pub fn expectation_suite(configs: usize, samples: usize) -> Result<Vec<Check>> {
    let worst = (0..configs)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(7000 + i as u64);
            let d = rng.random_range(2..=6usize);
            let kappa = rng.random_range(1..=5usize);
            let w = DMatrix::from_fn(d, kappa, |_, _| rng.random_range(-1.5..1.5));
            let mean = DVector::from_fn(kappa, |_, _| rng.random_range(-1.0..1.0));
            let g = if i % 2 == 0 {
                GaussianEncoding::isotropic(mean, rng.random_range(0.05..2.0))?
            } else {
                GaussianEncoding::diagonal(mean, DVector::from_fn(kappa, |_, _| rng.random_range(0.05..2.0)))?
            };
            let y = rng.random_range(0..d);
            let c = Classifier::new(w.clone())?;
            let exact = expected_taylor(&c, &g, y)?;
            let expansion = TaylorExpansion::new(&w);
            let mut srng = example_rng(9000, i);
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..samples {
                let z = g.reparameterize(&standard_normals(&mut srng, kappa));
                let v = expansion.value(&z, y);
                sum += v;
                sum_sq += v * v;
            }
            let n = samples as f64;
            let mc = sum / n;
            let var = (sum_sq - n * mc * mc) / (n - 1.0);
            Ok((exact - mc).abs() / (var / n).sqrt())
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(vec![Check::at_most(
        "expectation",
        format!("{configs} configs, {samples} samples: worst |Δ| in std errors"),
        worst,
        3.0,
    )])
}

/// Worst relative error between analytic gradients and central differences
/// with step `1e-5`, relative to `max(|fd|, |analytic|, 1)`.
pub fn worst_gradient_error<P, F>(params: &P, analytic: &[f64], loss: F) -> f64
where
    P: Parameters + Clone,
    F: Fn(&P) -> f64,
{
    let sizes: Vec<usize> = params.blocks().iter().map(|b| b.len()).collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut flat = 0;
    for (b, &len) in sizes.iter().enumerate() {
        for j in 0..len {
            let mut plus = params.clone();
            plus.blocks_mut()[b][j] += h;
            let mut minus = params.clone();
            minus.blocks_mut()[b][j] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = analytic[flat];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1.0));
            flat += 1;
        }
    }
    worst
}

/// Network backprop over 20 random nets and the reparameterized VIB loss
/// with frozen noise.
pub fn gradient_suite() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut net_worst: f64 = 0.0;
    for trial in 0..20u64 {
        let dims = [
            rng.random_range(1..=5),
            rng.random_range(2..=7),
            rng.random_range(2..=6),
            rng.random_range(1..=4),
        ];
        let mut net = DenseNet::new(&dims, trial)?;
        // nonzero biases keep pre-activations off the ReLU kink
        for layer in net.layers_mut() {
            layer.bias.apply(|b| *b = rng.random_range(-0.5..0.5));
        }
        let x = DMatrix::from_fn(4, dims[0], |_, _| rng.random_range(-1.0..1.0));
        let weights = DMatrix::from_fn(4, dims[3], |_, _| rng.random_range(-1.0..1.0));
        let loss = |n: &DenseNet| n.forward_batch(&x).expect("shapes fixed").component_mul(&weights).sum();
        let (_, tape) = net.forward_recorded(&x)?;
        let grads = net.backward(&tape, &weights)?;
        net_worst = net_worst.max(worst_gradient_error(&net, &grads.blocks().concat(), loss));
    }
    let mut vib_worst: f64 = 0.0;
    for (trial, beta) in [0.0, 0.2, 0.8].into_iter().enumerate() {
        let mut enc = VibEncoder::new(3, &[6], 2, 3, beta, VibMethod::Sampled, 50 + trial as u64)?;
        let biased: Vec<f64> = (0..enc.blocks().len()).map(|_| rng.random_range(-0.3..0.3)).collect();
        for (block, shift) in enc.blocks_mut().into_iter().zip(biased) {
            for v in block.iter_mut() {
                *v += shift;
            }
        }
        let x = DMatrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..5).map(|i| i % 3).collect();
        let eps = DMatrix::from_fn(5, 2, |_, _| rng.sample(rand_distr::StandardNormal));
        let (_, grads) = sampled_vib_loss(&enc, &x, &labels, &eps)?;
        let loss = |e: &VibEncoder| sampled_vib_loss(e, &x, &labels, &eps).expect("shapes fixed").0;
        vib_worst = vib_worst.max(worst_gradient_error(&enc, &grads.blocks().concat(), loss));
    }
    Ok(vec![
        Check::at_most("gradient", "dense net, 20 random nets (rel. err)", net_worst, 1e-4),
        Check::at_most("gradient", "reparameterized VIB loss (rel. err)", vib_worst, 1e-4),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_build_passes_every_check() {
        let report = run_all(VerifyOptions::default()).unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.checks.iter().any(|c| c.suite == "slope" && c.name.contains("(1-β)/2")));
    }

    #[test]
    fn corrupted_target_matrix_fails_simplex_suite() {
        let checks = simplex_suite(&[3, 5], |d| {
            let mut tm = TargetMatrix::new(d)?;
            tm.corrupt_for_testing();
            Ok(tm)
        })
        .unwrap();
        assert!(checks.iter().any(|c| !c.passed));
        let clean = simplex_suite(&[3, 5], TargetMatrix::new).unwrap();
        assert!(clean.iter().all(|c| c.passed));
    }

    #[test]
    fn display_lists_measured_and_tolerance() {
        let c = Check::at_most("s", "n", 2.0, 1.0);
        let line = c.to_string();
        assert!(line.starts_with("[FAIL]"));
        assert!(line.contains("measured 2.000e0"));
        assert!(line.contains("tolerance 1.0e0"));
    }
}
