//! Constant class-target geometry.
//!
//! For `d` classes the negative Hessian of log-softmax at zero logits, taken
//! over the first `d - 1` logits, is `Γ = (d I - 1 1ᵀ) / d²` with inverse
//! `Γ⁻¹ = d (I + 1 1ᵀ)`. The factor `K` with `KᵀK = Γ⁻¹` gives the target
//! matrix `L = [K | 0]`, and the centered one-hot labels mapped through `L`
//! are the vertices of a regular simplex: squared norm `d - 1`, pairwise
//! inner product `-1`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `Γ⁻¹ = d (I + 1 1ᵀ)`, size `(d-1) x (d-1)`.
pub fn build_gamma_inv(d: usize) -> Result<DMatrix<f64>> {
    check_classes(d)?;
    let m = d - 1;
    let df = d as f64;
    Ok(DMatrix::from_fn(m, m, |i, j| if i == j { 2.0 * df } else { df }))
}

/// `Γ = (d I - 1 1ᵀ) / d²`, size `(d-1) x (d-1)`.
pub fn build_gamma(d: usize) -> Result<DMatrix<f64>> {
    check_classes(d)?;
    let m = d - 1;
    let df = d as f64;
    let d2 = df * df;
    Ok(DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            (df - 1.0) / d2
        } else {
            -1.0 / d2
        }
    }))
}

fn check_classes(d: usize) -> Result<()> {
    if d < 2 {
        return Err(Error::InvalidClassCount(d));
    }
    Ok(())
}

/// Orthonormal eigenbasis of `Γ⁻¹` with eigenvalues in descending order.
///
/// `Γ⁻¹` has eigenvalue `d²` on `1/√(d-1)` and eigenvalue `d` on its
/// orthogonal complement. The complement is spanned by Helmert contrasts
/// `(1, …, 1, -k, 0, …) / √(k(k+1))`, whose first component is positive.
fn gamma_inv_eigen(d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let m = d - 1;
    let df = d as f64;
    let mut values = DVector::from_element(m, df);
    values[0] = df * df;
    let mut vectors = DMatrix::zeros(m, m);
    let lead = 1.0 / (m as f64).sqrt();
    for i in 0..m {
        vectors[(i, 0)] = lead;
    }
    for k in 1..m {
        let kf = k as f64;
        let norm = (kf * (kf + 1.0)).sqrt();
        for i in 0..k {
            vectors[(i, k)] = 1.0 / norm;
        }
        vectors[(k, k)] = -kf / norm;
    }
    (values, vectors)
}

/// The class-target matrix `L = [K | 0]` and the matrices it is built from.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMatrix {
    d: usize,
    gamma: DMatrix<f64>,
    gamma_inv: DMatrix<f64>,
    k_factor: DMatrix<f64>,
    l_matrix: DMatrix<f64>,
}

/// Builds `L` for `d` classes with `K = (V √D)ᵀ`.
pub fn build_target_matrix(d: usize) -> Result<TargetMatrix> {
    let gamma_inv = build_gamma_inv(d)?;
    let gamma = build_gamma(d)?;
    let m = d - 1;
    let (values, vectors) = gamma_inv_eigen(d);
    let mut k_factor = DMatrix::zeros(m, m);
    for r in 0..m {
        let scale = values[r].sqrt();
        for c in 0..m {
            k_factor[(r, c)] = scale * vectors[(c, r)];
        }
    }
    let mut l_matrix = DMatrix::zeros(m, d);
    l_matrix.view_mut((0, 0), (m, m)).copy_from(&k_factor);
    Ok(TargetMatrix {
        d,
        gamma,
        gamma_inv,
        k_factor,
        l_matrix,
    })
}

impl TargetMatrix {
    pub fn new(d: usize) -> Result<Self> {
        build_target_matrix(d)
    }

    pub fn classes(&self) -> usize {
        self.d
    }

    /// Latent dimension `d - 1`.
    pub fn latent_dim(&self) -> usize {
        self.d - 1
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn gamma_inv(&self) -> &DMatrix<f64> {
        &self.gamma_inv
    }

    pub fn k_factor(&self) -> &DMatrix<f64> {
        &self.k_factor
    }

    pub fn l_matrix(&self) -> &DMatrix<f64> {
        &self.l_matrix
    }

    /// `t_k = L (e_k - 1/d)`.
    pub fn class_target(&self, k: usize) -> Result<DVector<f64>> {
        if k >= self.d {
            return Err(Error::IndexOutOfRange {
                what: "class index",
                index: k,
                len: self.d,
            });
        }
        let inv_d = 1.0 / self.d as f64;
        let centered = DVector::from_fn(self.d, |i, _| if i == k { 1.0 - inv_d } else { -inv_d });
        Ok(&self.l_matrix * centered)
    }

    /// All class targets as columns of a `(d-1) x d` matrix.
    pub fn targets(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.d - 1, self.d);
        for k in 0..self.d {
            let t = self.class_target(k).expect("k < d");
            out.set_column(k, &t);
        }
        out
    }

    /// Perturbs one entry of `L` so that verification suites can be shown to
    /// fail on a bad target matrix.
    #[doc(hidden)]
    pub fn corrupt_for_testing(&mut self) {
        self.l_matrix[(0, 0)] += 1.0;
        self.k_factor[(0, 0)] += 1.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).abs().max()
    }

    #[test]
    fn gamma_inv_small_cases() {
        assert_eq!(build_gamma_inv(2).unwrap(), DMatrix::from_row_slice(1, 1, &[4.0]));
        assert_eq!(
            build_gamma_inv(3).unwrap(),
            DMatrix::from_row_slice(2, 2, &[6.0, 3.0, 3.0, 6.0])
        );
        let g10 = build_gamma_inv(10).unwrap();
        assert_eq!(g10.shape(), (9, 9));
        for i in 0..9 {
            for j in 0..9 {
                assert_eq!(g10[(i, j)], if i == j { 20.0 } else { 10.0 });
            }
        }
    }

    #[test]
    fn rejects_fewer_than_two_classes() {
        assert!(matches!(build_gamma_inv(1), Err(Error::InvalidClassCount(1))));
        assert!(matches!(build_target_matrix(0), Err(Error::InvalidClassCount(0))));
    }

    #[test]
    fn two_class_targets_are_plus_minus_one() {
        let tm = build_target_matrix(2).unwrap();
        assert_eq!(tm.k_factor()[(0, 0)], 2.0);
        assert_eq!(tm.l_matrix().as_slice(), &[2.0, 0.0]);
        assert_eq!(tm.class_target(0).unwrap()[0], 1.0);
        assert_eq!(tm.class_target(1).unwrap()[0], -1.0);
    }

    #[test]
    fn three_class_factor_and_third_target() {
        let tm = build_target_matrix(3).unwrap();
        let ktk = tm.k_factor().transpose() * tm.k_factor();
        assert!(max_abs_diff(&ktk, &DMatrix::from_row_slice(2, 2, &[6.0, 3.0, 3.0, 6.0])) < 1e-12);
        let t2 = tm.class_target(2).unwrap();
        assert!((t2.norm_squared() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn gamma_times_inverse_is_identity() {
        for d in [2, 3, 7, 20] {
            let prod = build_gamma(d).unwrap() * build_gamma_inv(d).unwrap();
            assert!(max_abs_diff(&prod, &DMatrix::identity(d - 1, d - 1)) < 1e-8);
        }
    }

    #[test]
    fn last_column_of_l_is_zero() {
        let tm = build_target_matrix(6).unwrap();
        assert!(tm.l_matrix().column(5).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn class_index_out_of_range() {
        let tm = build_target_matrix(4).unwrap();
        assert!(matches!(tm.class_target(4), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn deterministic_construction() {
        let a = build_target_matrix(17).unwrap();
        let b = build_target_matrix(17).unwrap();
        assert_eq!(a.l_matrix().as_slice(), b.l_matrix().as_slice());
    }

    /// Cyclic Jacobi sweeps on a symmetric matrix; an independent route to
    /// the eigenvalues of `Γ⁻¹`.
    fn jacobi_eigenvalues(mut a: DMatrix<f64>) -> Vec<f64> {
        let n = a.nrows();
        for _sweep in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[(i, j)] * a[(i, j)])
                .sum();
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
        ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
        ev
    }

    #[test]
    fn analytic_spectrum_agrees_with_jacobi() {
        for d in [2, 3, 5, 12] {
            let (values, vectors) = gamma_inv_eigen(d);
            let jac = jacobi_eigenvalues(build_gamma_inv(d).unwrap());
            for (a, b) in values.iter().zip(&jac) {
                assert!((a - b).abs() < 1e-9, "d={d}: {a} vs {b}");
            }
            let vtv = vectors.transpose() * &vectors;
            assert!(max_abs_diff(&vtv, &DMatrix::identity(d - 1, d - 1)) < 1e-12);
            for c in 0..d - 1 {
                let first = vectors.column(c).iter().copied().find(|v| *v != 0.0).unwrap();
                assert!(first > 0.0);
            }
        }
    }

    #[test]
    fn regular_simplex_geometry() {
        for d in 2..=64 {
            let tm = build_target_matrix(d).unwrap();
            let t = tm.targets();
            let gram = t.transpose() * &t;
            for i in 0..d {
                for j in 0..d {
                    let want = if i == j { (d - 1) as f64 } else { -1.0 };
                    assert!((gram[(i, j)] - want).abs() < 1e-8, "d={d} ({i},{j})");
                }
            }
            let centroid = t.column_sum();
            assert!(centroid.amax() < 1e-10, "d={d}");
            let ktk = tm.k_factor().transpose() * tm.k_factor();
            assert!(max_abs_diff(&ktk, tm.gamma_inv()) < 1e-8);
        }
    }
}
