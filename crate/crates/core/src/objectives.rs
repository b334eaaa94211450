//! Objectives and bounds for a Gaussian encoder `N(μ(x), Σ(x))` followed by a
//! bias-free softmax classifier `q(y|z) = softmax(W z / T)_y`.
//!
//! The second-order expansion of `f_y(z) = log q(y|z)` at `z = 0` is
//!
//! ```text
//! T_y(z) = -log d + g_yᵀ z - ½ zᵀ M z
//! g_y    = Wᵀ (e_y - 1/d)
//! M      = Wᵀ (diag(1/d) - 1 1ᵀ / d²) W
//! ```
//!
//! so its expectation under a Gaussian is available in closed form. All
//! logarithms are natural.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numeric::{
    example_rng, label_entropy, log_sum_exp, pairwise_mean, standard_normals,
};

/// Variance used in place of an exact zero when a compression bound is
/// explicitly requested for a deterministic encoding.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    /// `Σ = σ² I`. `σ² = 0` is the deterministic encoding of `β = 0`.
    Isotropic(f64),
    /// `Σ = diag(v)` with every `v_j > 0`.
    Diagonal(DVector<f64>),
}

/// Posterior `N(μ(x), Σ(x))` for a single example.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEncoding {
    mean: DVector<f64>,
    covariance: Covariance,
}

impl GaussianEncoding {
    pub fn isotropic(mean: DVector<f64>, variance: f64) -> Result<Self> {
        if !(variance >= 0.0 && variance.is_finite()) {
            return Err(Error::Domain(format!(
                "isotropic variance must be finite and non-negative, got {variance}"
            )));
        }
        Ok(GaussianEncoding {
            mean,
            covariance: Covariance::Isotropic(variance),
        })
    }

    pub fn diagonal(mean: DVector<f64>, variances: DVector<f64>) -> Result<Self> {
        if variances.len() != mean.len() {
            return Err(Error::shape(
                "diagonal covariance",
                mean.len(),
                variances.len(),
            ));
        }
        if let Some(v) = variances.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::Domain(format!(
                "diagonal variances must be positive, got {v}"
            )));
        }
        Ok(GaussianEncoding {
            mean,
            covariance: Covariance::Diagonal(variances),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &Covariance {
        &self.covariance
    }

    /// True for the zero-variance encoding, which is sampled at its mean.
    pub fn is_deterministic(&self) -> bool {
        matches!(self.covariance, Covariance::Isotropic(v) if v == 0.0)
    }

    pub fn variances(&self) -> DVector<f64> {
        match &self.covariance {
            Covariance::Isotropic(v) => DVector::from_element(self.dim(), *v),
            Covariance::Diagonal(v) => v.clone(),
        }
    }

    /// `z = μ + Σ^{1/2} ε` for a standard normal draw `ε`.
    pub fn reparameterize(&self, eps: &[f64]) -> DVector<f64> {
        match &self.covariance {
            Covariance::Isotropic(v) => {
                let sd = v.sqrt();
                DVector::from_fn(self.dim(), |j, _| self.mean[j] + sd * eps[j])
            }
            Covariance::Diagonal(v) => {
                DVector::from_fn(self.dim(), |j, _| self.mean[j] + v[j].sqrt() * eps[j])
            }
        }
    }
}

/// Bias-free linear softmax classifier with an optional logit temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    weights: DMatrix<f64>,
    temperature: f64,
}

impl Classifier {
    /// `weights` is `d x κ`.
    pub fn new(weights: DMatrix<f64>) -> Result<Self> {
        if weights.nrows() < 2 {
            return Err(Error::InvalidClassCount(weights.nrows()));
        }
        Ok(Classifier {
            weights,
            temperature: 1.0,
        })
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Domain(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        self.temperature = temperature;
        Ok(self)
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.weights.ncols()
    }

    /// `W z / T`.
    pub fn logits(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_latent(z.len())?;
        Ok(&self.weights * z / self.temperature)
    }

    fn check_latent(&self, len: usize) -> Result<()> {
        if len != self.latent_dim() {
            return Err(Error::shape("latent vector", self.latent_dim(), len));
        }
        Ok(())
    }

    fn check_class(&self, y: usize) -> Result<()> {
        if y >= self.classes() {
            return Err(Error::IndexOutOfRange {
                what: "class index",
                index: y,
                len: self.classes(),
            });
        }
        Ok(())
    }

    pub fn taylor_expansion(&self) -> TaylorExpansion {
        TaylorExpansion::new(&self.weights)
    }
}

/// Gradients and Hessian of `log q(y|z)` at `z = 0` for `T = 1`.
#[derive(Debug, Clone)]
pub struct TaylorExpansion {
    /// Row `y` holds `g_yᵀ = (w_y - w̄)ᵀ`.
    centered: DMatrix<f64>,
    /// `M`, the negated Hessian; identical for every class.
    curvature: DMatrix<f64>,
    log_d: f64,
}

impl TaylorExpansion {
    pub fn new(weights: &DMatrix<f64>) -> Self {
        let d = weights.nrows();
        let mean_row = weights.row_mean();
        let mut centered = weights.clone();
        for mut row in centered.row_iter_mut() {
            row -= &mean_row;
        }
        let curvature = centered.transpose() * &centered / d as f64;
        TaylorExpansion {
            centered,
            curvature,
            log_d: (d as f64).ln(),
        }
    }

    pub fn gradient(&self, y: usize) -> DVector<f64> {
        self.centered.row(y).transpose()
    }

    /// `M = -∇² f_y(0)`.
    pub fn curvature(&self) -> &DMatrix<f64> {
        &self.curvature
    }

    pub fn value(&self, z: &DVector<f64>, y: usize) -> f64 {
        let lin = self.centered.row(y).transpose().dot(z);
        let quad = z.dot(&(&self.curvature * z));
        -self.log_d + lin - 0.5 * quad
    }

    /// `E[T_y(Z)]` for `Z ~ N(μ, Σ)`.
    pub fn expectation(&self, g: &GaussianEncoding, y: usize) -> f64 {
        let mu = g.mean();
        let lin = self.centered.row(y).transpose().dot(mu);
        let trace_term = match g.covariance() {
            Covariance::Isotropic(v) => v * self.curvature.trace(),
            Covariance::Diagonal(v) => self
                .curvature
                .diagonal()
                .iter()
                .zip(v.iter())
                .map(|(m, s)| m * s)
                .sum(),
        };
        let quad = mu.dot(&(&self.curvature * mu));
        -self.log_d + lin - 0.5 * trace_term - 0.5 * quad
    }
}

/// `log softmax(W z / T)_y`.
pub fn log_likelihood(c: &Classifier, z: &DVector<f64>, y: usize) -> Result<f64> {
    c.check_class(y)?;
    let logits = c.logits(z)?;
    Ok(logits[y] - log_sum_exp(logits.as_slice()))
}

/// Second-order expansion of `log q(y|z)` at `z = 0`. Ignores the temperature.
pub fn taylor_log_likelihood(c: &Classifier, z: &DVector<f64>, y: usize) -> Result<f64> {
    c.check_class(y)?;
    c.check_latent(z.len())?;
    Ok(c.taylor_expansion().value(z, y))
}

/// `KL(N(μ, Σ) ‖ N(0, I)) = ½ (tr Σ - log|Σ| + ‖μ‖² - κ)`.
pub fn kl_to_standard_normal(g: &GaussianEncoding) -> Result<f64> {
    let k = g.dim() as f64;
    let (trace, log_det) = match g.covariance() {
        Covariance::Isotropic(v) => {
            if *v <= 0.0 {
                return Err(Error::Domain(
                    "KL divergence requires positive variance".into(),
                ));
            }
            (k * v, k * v.ln())
        }
        Covariance::Diagonal(v) => (v.sum(), v.iter().map(|x| x.ln()).sum()),
    };
    Ok(0.5 * (trace - log_det + g.mean().norm_squared() - k))
}

/// KL with zero variances replaced by [`VARIANCE_FLOOR`].
pub fn kl_with_floor(g: &GaussianEncoding) -> f64 {
    let k = g.dim() as f64;
    let (trace, log_det) = match g.covariance() {
        Covariance::Isotropic(v) => {
            let v = v.max(VARIANCE_FLOOR);
            (k * v, k * v.ln())
        }
        Covariance::Diagonal(v) => (v.sum(), v.iter().map(|x| x.ln()).sum()),
    };
    0.5 * (trace - log_det + g.mean().norm_squared() - k)
}

/// Closed-form `E_{z ~ g}[T_y(z)]`.
pub fn expected_taylor(c: &Classifier, g: &GaussianEncoding, y: usize) -> Result<f64> {
    c.check_class(y)?;
    c.check_latent(g.dim())?;
    Ok(c.taylor_expansion().expectation(g, y))
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Domain(format!("beta must lie in [0, 1], got {beta}")));
    }
    Ok(())
}

fn check_encodings(encodings: &[(GaussianEncoding, usize)], c: &Classifier) -> Result<()> {
    if encodings.is_empty() {
        return Err(Error::EmptyInput("encodings"));
    }
    for (g, y) in encodings {
        c.check_class(*y)?;
        c.check_latent(g.dim())?;
    }
    Ok(())
}

/// `β · KL`, taken as zero at `β = 0` so deterministic encodings are allowed.
fn weighted_kl(g: &GaussianEncoding, beta: f64) -> Result<f64> {
    if beta == 0.0 {
        Ok(0.0)
    } else {
        Ok(beta * kl_to_standard_normal(g)?)
    }
}

/// `(1/N) Σ_i [E T_{y_i}(Z) - β KL_i]` with the expectation in closed form.
pub fn taylor_vib_objective(
    encodings: &[(GaussianEncoding, usize)],
    c: &Classifier,
    beta: f64,
) -> Result<f64> {
    check_beta(beta)?;
    check_encodings(encodings, c)?;
    let expansion = c.taylor_expansion();
    let terms = encodings
        .par_iter()
        .map(|(g, y)| Ok(expansion.expectation(g, *y) - weighted_kl(g, beta)?))
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_mean(&terms))
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Per-example mean and sample variance of `log q(y|z^s)`, `z^s ~ g`.
fn sampled_log_likelihood(
    c: &Classifier,
    g: &GaussianEncoding,
    y: usize,
    samples: usize,
    seed: u64,
    index: usize,
) -> Result<(f64, f64)> {
    if g.is_deterministic() {
        return Ok((log_likelihood(c, g.mean(), y)?, 0.0));
    }
    let mut rng = example_rng(seed, index);
    let mut values = Vec::with_capacity(samples);
    for _ in 0..samples {
        let eps = standard_normals(&mut rng, g.dim());
        values.push(log_likelihood(c, &g.reparameterize(&eps), y)?);
    }
    let mean = values.iter().sum::<f64>() / samples as f64;
    let var = if samples > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (samples - 1) as f64
    } else {
        0.0
    };
    Ok((mean, var))
}

fn check_samples(samples: usize) -> Result<()> {
    if samples < 1 {
        return Err(Error::InvalidParameter(
            "sample count must be at least 1".into(),
        ));
    }
    Ok(())
}

pub fn mc_vib_estimate(
    encodings: &[(GaussianEncoding, usize)],
    c: &Classifier,
    beta: f64,
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    check_samples(samples)?;
    check_beta(beta)?;
    check_encodings(encodings, c)?;
    let terms = encodings
        .par_iter()
        .enumerate()
        .map(|(i, (g, y))| {
            let (ll, var) = sampled_log_likelihood(c, g, *y, samples, seed, i)?;
            Ok((ll - weighted_kl(g, beta)?, var / samples as f64))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let values: Vec<f64> = terms.iter().map(|t| t.0).collect();
    let vars: Vec<f64> = terms.iter().map(|t| t.1).collect();
    let n = encodings.len() as f64;
    Ok(McEstimate {
        value: pairwise_mean(&values),
        std_error: (pairwise_mean(&vars) / n).sqrt(),
    })
}

/// `(1/N) Σ_i [(1/S) Σ_s log q(y_i|z_i^s) - β KL_i]`.
pub fn mc_vib_objective(
    encodings: &[(GaussianEncoding, usize)],
    c: &Classifier,
    beta: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    Ok(mc_vib_estimate(encodings, c, beta, samples, seed)?.value)
}

/// Variational bounds on `I(Z, Y)` (below) and `I(X, Z)` (above), in nats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IbBounds {
    pub prediction: f64,
    pub compression: f64,
}

/// The prediction bound includes the empirical label entropy `H(Y)`.
/// Deterministic encodings enter the compression bound at [`VARIANCE_FLOOR`].
pub fn ib_bounds(
    encodings: &[(GaussianEncoding, usize)],
    c: &Classifier,
    samples: usize,
    seed: u64,
) -> Result<IbBounds> {
    check_samples(samples)?;
    check_encodings(encodings, c)?;
    let terms = encodings
        .par_iter()
        .enumerate()
        .map(|(i, (g, y))| {
            let (ll, _) = sampled_log_likelihood(c, g, *y, samples, seed, i)?;
            Ok((ll, kl_with_floor(g)))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let ll: Vec<f64> = terms.iter().map(|t| t.0).collect();
    let kl: Vec<f64> = terms.iter().map(|t| t.1).collect();
    let labels: Vec<usize> = encodings.iter().map(|(_, y)| *y).collect();
    Ok(IbBounds {
        prediction: pairwise_mean(&ll) + label_entropy(&labels, c.classes()),
        compression: pairwise_mean(&kl),
    })
}
