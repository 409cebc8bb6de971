//! Dense spectral kernels.
//!
//! The SVD is one-sided (Hestenes) Jacobi and the symmetric eigensolver is
//! cyclic two-sided Jacobi. Both are slow for large matrices but accurate to
//! a few ulps relative to the largest singular value / eigenvalue, which
//! keeps lemma-margin checks insensitive to solver error. They share no code
//! so one can be used to cross-check the other.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::moe::InputDistribution;
use crate::rng::SeedStream;

/// Largest accepted dimension for the dense kernels.
pub const MAX_DIM: usize = 4096;

const MAX_SWEEPS: usize = 80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumKind {
    Singular,
    Eigen,
}

/// Sorted (nonincreasing) singular values or eigenvalues of a matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumResult {
    pub kind: SpectrumKind,
    pub values: Vec<f64>,
    /// `‖A‖_F²` computed from the entries.
    pub frobenius_sq: f64,
    pub source_shape: (usize, usize),
}

impl SpectrumResult {
    /// `Σ_{i > κ} v_i²`: for singular values, the squared Frobenius error of
    /// the best rank-`κ` approximation.
    pub fn tail_sq(&self, kappa: usize) -> f64 {
        self.values.iter().skip(kappa).map(|v| v * v).sum()
    }

    /// `Σ_{i > j} v_i` (eigenvalue tail).
    pub fn tail_sum(&self, j: usize) -> f64 {
        self.values.iter().skip(j).sum()
    }

    /// 1-based accessor: `value(1)` is the largest.
    pub fn value(&self, i: usize) -> f64 {
        self.values[i - 1]
    }

    /// Number of values above `tol * largest`.
    pub fn numerical_rank(&self, tol: f64) -> usize {
        let top = self.values.first().copied().unwrap_or(0.0).abs();
        self.values.iter().filter(|v| v.abs() > tol * top && v.abs() > 0.0).count()
    }
}

/// Full SVD `A = U diag(σ) V^T` with `U: rows × r`, `V: cols × r`, `r = min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdFactors {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (c, s) in self.sigma.iter().enumerate() {
                us[(r, c)] *= s;
            }
        }
        us.matmul_t(&self.v)
    }
}

fn check_input(a: &Matrix) -> Result<()> {
    if !a.is_finite() {
        return Err(Error::NonFinite("spectral input"));
    }
    if a.rows() > MAX_DIM || a.cols() > MAX_DIM {
        return Err(Error::InvalidConfig(alloc::format!(
            "matrix {}x{} exceeds the dense kernel limit {MAX_DIM}",
            a.rows(),
            a.cols()
        )));
    }
    Ok(())
}

/// One-sided Jacobi on the columns of a `rows × cols` matrix given as column
/// vectors, with `cols <= rows`. Returns orthogonalized columns and, when
/// requested, the accumulated right rotation (column vectors).
fn hestenes(mut cols: Vec<Vec<f64>>, want_v: bool) -> (Vec<Vec<f64>>, Option<Vec<Vec<f64>>>) {
    let n = cols.len();
    let mut v = want_v.then(|| {
        (0..n)
            .map(|i| {
                let mut e = vec![0.0; n];
                e[i] = 1.0;
                e
            })
            .collect::<Vec<_>>()
    });
    let eps = f64::EPSILON;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                if let Some(v) = v.as_mut() {
                    let (lo, hi) = v.split_at_mut(q);
                    rotate(&mut lo[p], &mut hi[0], c, s);
                }
            }
        }
        if !rotated {
            break;
        }
    }
    (cols, v)
}

#[inline]
fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (xi, yi) in x.iter_mut().zip(y.iter_mut()) {
        let (a, b) = (*xi, *yi);
        *xi = c * a - s * b;
        *yi = s * a + c * b;
    }
}

/// Column vectors of `a`, or of `a^T` when `a` is wide, plus whether we transposed.
fn oriented_columns(a: &Matrix) -> (Vec<Vec<f64>>, bool) {
    if a.cols() <= a.rows() {
        ((0..a.cols()).map(|c| a.column(c)).collect(), false)
    } else {
        ((0..a.rows()).map(|r| a.row(r).to_vec()).collect(), true)
    }
}

/// Singular values of `a`, nonincreasing.
pub fn svd(a: &Matrix) -> Result<SpectrumResult> {
    check_input(a)?;
    let (cols, _) = oriented_columns(a);
    let (cols, _) = hestenes(cols, false);
    let mut values: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    values.sort_by(|x, y| y.partial_cmp(x).unwrap());
    Ok(SpectrumResult {
        kind: SpectrumKind::Singular,
        values,
        frobenius_sq: a.frobenius_sq(),
        source_shape: a.shape(),
    })
}

/// SVD with factors, values sorted nonincreasing.
pub fn svd_factors(a: &Matrix) -> Result<SvdFactors> {
    check_input(a)?;
    let (cols, transposed) = oriented_columns(a);
    let n = cols.len();
    let len = cols.first().map_or(0, Vec::len);
    let (cols, v) = hestenes(cols, true);
    let v = v.unwrap();
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());
    // Left vectors live in R^len, right vectors in R^n (for the oriented matrix).
    let mut left = Matrix::zeros(len, n);
    let mut right = Matrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    for (new_c, &old) in order.iter().enumerate() {
        let s = norms[old];
        sigma.push(s);
        for r in 0..len {
            left[(r, new_c)] = if s > 0.0 { cols[old][r] / s } else { 0.0 };
        }
        for r in 0..n {
            right[(r, new_c)] = v[old][r];
        }
    }
    Ok(if transposed {
        SvdFactors { u: right, sigma, v: left }
    } else {
        SvdFactors { u: left, sigma, v: right }
    })
}

/// `Σ_{i > κ} σ_i(a)²`, the squared Frobenius distance from `a` to the
/// nearest matrix of rank at most `κ`.
pub fn svd_tail(a: &Matrix, kappa: usize) -> Result<f64> {
    Ok(svd(a)?.tail_sq(kappa))
}

/// Eigenvalues of a symmetric matrix, nonincreasing.
pub fn sym_eig(a: &Matrix) -> Result<SpectrumResult> {
    check_input(a)?;
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::DimensionMismatch { expected: n, got: a.cols() });
    }
    let scale = a.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let asym = a.max_asymmetry();
    if asym > 1e-8 * scale.max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    let mut m = Matrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    for _sweep in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        let diag: f64 = (0..n).map(|i| m[(i, i)] * m[(i, i)]).sum();
        if off <= f64::EPSILON * f64::EPSILON * diag.max(f64::MIN_POSITIVE) || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.is_infinite() {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // M <- J^T M J with J the (p, q) rotation.
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
            }
        }
    }
    let mut values: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    values.sort_by(|x, y| y.partial_cmp(x).unwrap());
    Ok(SpectrumResult {
        kind: SpectrumKind::Eigen,
        values,
        frobenius_sq: a.frobenius_sq(),
        source_shape: a.shape(),
    })
}

/// `d × p` matrix with orthonormal columns spanning a uniformly random
/// `p`-dimensional subspace (Gram-Schmidt on Gaussian columns).
pub fn random_orthonormal<R: rand::Rng + ?Sized>(rng: &mut R, d: usize, p: usize) -> Matrix {
    assert!(p <= d, "subspace dimension exceeds ambient dimension");
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(p);
    while cols.len() < p {
        let mut v = vec![0.0; d];
        crate::moe::fill_normal(rng, &mut v, 1.0);
        // Two passes of modified Gram-Schmidt for stability.
        for _ in 0..2 {
            for q in &cols {
                let c = dot(q, &v);
                crate::linalg::axpy(-c, q, &mut v);
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            cols.push(v);
        }
    }
    Matrix::from_fn(d, p, |r, c| cols[c][r])
}

/// `M (I - Q Q^T)` for `Q` with orthonormal columns.
pub fn project_out_columns(m: &Matrix, q: &Matrix) -> Matrix {
    let mq = m.matmul(q);
    let mut out = m.clone();
    out.sub_assign(&mq.matmul_t(q));
    out
}

/// Mean and covariance of `μ` conditioned on a set `U`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceEstimate {
    pub mean: Vec<f64>,
    pub covariance: Matrix,
    pub n_accepted: usize,
    pub n_drawn: usize,
    /// Estimate of `μ(U)`.
    pub acceptance_rate: f64,
}

impl CovarianceEstimate {
    pub fn spectrum(&self) -> Result<SpectrumResult> {
        sym_eig(&self.covariance)
    }
}

/// Rejection-samples `μ|_U` and returns the sample mean and (unbiased)
/// sample covariance of the accepted points.
pub fn conditioned_covariance<F>(
    dist: &InputDistribution,
    indicator: F,
    n_samples: usize,
    seed: SeedStream,
) -> Result<CovarianceEstimate>
where
    F: Fn(&[f64]) -> bool,
{
    let d = dist.d;
    let mut rng = seed.rng();
    let mut x = vec![0.0; d];
    let mut delta = vec![0.0; d];
    let mut mean = vec![0.0; d];
    // Upper triangle of the co-moment matrix, row-major.
    let mut comoment = Matrix::zeros(d, d);
    let mut accepted = 0usize;
    for _ in 0..n_samples {
        dist.sample_into(&mut rng, &mut x);
        if !indicator(&x) {
            continue;
        }
        accepted += 1;
        let inv = 1.0 / accepted as f64;
        for i in 0..d {
            delta[i] = x[i] - mean[i];
            mean[i] += delta[i] * inv;
        }
        // C += delta (x - mean_new)^T; symmetric, so only i <= j.
        for i in 0..d {
            let di = delta[i];
            let row = comoment.row_mut(i);
            for j in i..d {
                row[j] += di * (x[j] - mean[j]);
            }
        }
    }
    if accepted < 2 {
        return Err(Error::LowMass { accepted, drawn: n_samples });
    }
    let denom = (accepted - 1) as f64;
    let covariance = Matrix::from_fn(d, d, |i, j| {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        comoment[(a, b)] / denom
    });
    Ok(CovarianceEstimate {
        mean,
        covariance,
        n_accepted: accepted,
        n_drawn: n_samples,
        acceptance_rate: accepted as f64 / n_samples as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::fill_normal;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        fill_normal(&mut SeedStream::new(seed).rng(), m.as_mut_slice(), 1.0);
        m
    }

    fn assert_close(a: &[f64], b: &[f64], rel: f64) {
        assert_eq!(a.len(), b.len());
        let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= rel * scale, "{x} vs {y}");
        }
    }

    #[test]
    fn diagonal_singular_values() {
        let s = svd(&Matrix::diag(&[1.0, 3.0, 2.0])).unwrap();
        assert_close(&s.values, &[3.0, 2.0, 1.0], 1e-15);
        assert!((svd_tail(&Matrix::diag(&[3.0, 2.0, 1.0]), 1).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(svd_tail(&Matrix::diag(&[3.0, 2.0, 1.0]), 3).unwrap(), 0.0);
        assert_eq!(svd_tail(&Matrix::diag(&[3.0, 2.0, 1.0]), 7).unwrap(), 0.0);
    }

    #[test]
    fn rank_one_outer_product() {
        let a = [1.0, -2.0, 2.0];
        let b = [3.0, 4.0];
        let m = Matrix::from_fn(3, 2, |r, c| a[r] * b[c]);
        let s = svd(&m).unwrap();
        assert!((s.values[0] - 15.0).abs() < 1e-12);
        assert!(s.values[1].abs() < 1e-12);
    }

    #[test]
    fn svd_matches_gram_eigenvalues() {
        let a = random(50, 30, 1);
        let s = svd(&a).unwrap();
        let e = sym_eig(&a.gram()).unwrap();
        let sq: Vec<f64> = s.values.iter().map(|v| v * v).collect();
        assert_close(&sq, &e.values, 1e-10);
        // wide orientation
        let wide = a.transpose();
        assert_close(&svd(&wide).unwrap().values, &s.values, 1e-12);
    }

    #[test]
    fn factors_reconstruct() {
        for (r, c, seed) in [(12, 7, 3), (7, 12, 4), (9, 9, 5)] {
            let a = random(r, c, seed);
            let f = svd_factors(&a).unwrap();
            let mut diff = f.reconstruct();
            diff.sub_assign(&a);
            assert!(diff.frobenius_sq().sqrt() / a.frobenius_sq().sqrt() < 1e-12);
            let utu = f.u.gram();
            let mut eye = Matrix::identity(utu.rows());
            eye.sub_assign(&utu);
            assert!(eye.frobenius_sq().sqrt() < 1e-10);
        }
    }

    #[test]
    fn frobenius_consistency() {
        let a = random(20, 15, 8);
        let s = svd(&a).unwrap();
        let total: f64 = s.values.iter().map(|v| v * v).sum();
        assert!((total - s.frobenius_sq).abs() <= 1e-10 * s.frobenius_sq);
        assert!((svd_tail(&a, 0).unwrap() - a.frobenius_sq()).abs() <= 1e-10 * a.frobenius_sq());
        let tails: Vec<f64> = (0..17).map(|k| s.tail_sq(k)).collect();
        assert!(tails.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn orthonormal_projection() {
        let mut rng = SeedStream::new(6).rng();
        let q = random_orthonormal(&mut rng, 10, 4);
        let mut g = q.gram();
        g.sub_assign(&Matrix::identity(4));
        assert!(g.frobenius_sq() < 1e-24);
        let a = random(7, 10, 9);
        let p = project_out_columns(&a, &q);
        assert!(p.matmul(&q).frobenius_sq() < 1e-20);
        // rank drops by at most p
        let full = svd(&a).unwrap();
        let proj = svd(&p).unwrap();
        assert!(proj.numerical_rank(1e-10) + 4 >= full.numerical_rank(1e-10));
    }

    #[test]
    fn eigen_examples() {
        assert_eq!(sym_eig(&Matrix::identity(4)).unwrap().values, [1.0; 4]);
        let ind = Matrix::diag(&[0.0, 1.0, 1.0, 0.0, 1.0]);
        assert_eq!(sym_eig(&ind).unwrap().values, [1.0, 1.0, 1.0, 0.0, 0.0]);
        let mut asym = Matrix::identity(3);
        asym[(0, 2)] = 0.5;
        assert!(matches!(sym_eig(&asym), Err(Error::NotSymmetric(_))));
        let mut bad = Matrix::identity(2);
        bad[(0, 0)] = f64::NAN;
        assert!(matches!(svd(&bad), Err(Error::NonFinite(_))));
    }

    #[test]
    fn eigen_of_indefinite_matrix() {
        // [[2, 1], [1, -2]] has eigenvalues ±√5.
        let m = Matrix::from_vec(2, 2, vec![2.0, 1.0, 1.0, -2.0]);
        assert_close(&sym_eig(&m).unwrap().values, &[5f64.sqrt(), -(5f64.sqrt())], 1e-14);
    }

    #[test]
    fn unconditioned_covariance_is_isotropic() {
        let d = 8;
        let est = conditioned_covariance(&InputDistribution::gaussian(d), |_| true, 200_000, SeedStream::new(1)).unwrap();
        assert_eq!(est.n_accepted, 200_000);
        let spec = est.spectrum().unwrap();
        // Diagonal entries of a sample covariance have relative std-err sqrt(2/n).
        let tol = 1.0 / d as f64 * 5.0 * (2.0 / 200_000f64).sqrt() * 4.0;
        for v in &spec.values {
            assert!((v - 1.0 / d as f64).abs() < tol, "{v}");
        }
    }

    #[test]
    fn halfspace_covariance_matches_truncated_normal() {
        // Var of a half-normal N(0, 1/d) truncated to x > 0: (1 - 2/π) / d.
        let d = 6;
        let n = 400_000;
        let est = conditioned_covariance(&InputDistribution::gaussian(d), |x| x[0] > 0.0, n, SeedStream::new(2)).unwrap();
        let expect_e1 = (1.0 - 2.0 / core::f64::consts::PI) / d as f64;
        let se = |v: f64| v * (2.0 / est.n_accepted as f64).sqrt();
        assert!((est.covariance[(0, 0)] - expect_e1).abs() < 4.0 * se(expect_e1));
        for i in 1..d {
            assert!((est.covariance[(i, i)] - 1.0 / d as f64).abs() < 4.0 * se(1.0 / d as f64));
        }
        assert!((est.acceptance_rate - 0.5).abs() < 4.0 * (0.25 / n as f64).sqrt());
        let spec = est.spectrum().unwrap();
        assert!((spec.values[d - 1] - expect_e1).abs() < 4.0 * se(expect_e1));
    }

    #[test]
    fn empty_set_is_low_mass() {
        let r = conditioned_covariance(&InputDistribution::gaussian(4), |x| x[0] > 100.0, 1000, SeedStream::new(3));
        assert!(matches!(r, Err(Error::LowMass { accepted: 0, .. })));
    }
}
