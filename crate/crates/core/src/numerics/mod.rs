//! Dense linear algebra, seeded randomness and the finite-difference gradient
//! harness used by every differentiable piece of the crate.

mod matrix;
mod rng;
pub mod special;

pub use matrix::{axpy, covariance, dot, norm2, Matrix};
pub use rng::{splitmix64, RngState};

use crate::error::{Error, Result};

/// Largest diagonal jitter tried before a matrix is declared not PSD.
pub const JITTER_CAP: f64 = 1e-2;
const JITTER_FLOOR: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-10;

/// Lower-triangular `L` with `L Lᵀ = m + jitter·I`.
///
/// The jitter starts at `jitter` and grows ×10 on every failed attempt (from
/// 1e-12 when the caller passed zero) until it would exceed [`JITTER_CAP`].
pub fn cholesky_psd(m: &Matrix, jitter: f64) -> Result<Matrix> {
    check_symmetric(m)?;
    let mut j = jitter.max(0.0);
    loop {
        if let Some(l) = try_cholesky(m, j) {
            return Ok(l);
        }
        j = if j == 0.0 { JITTER_FLOOR } else { j * 10.0 };
        if j > JITTER_CAP * (1.0 + 1e-12) {
            return Err(Error::NotPsd { cap: JITTER_CAP });
        }
    }
}

/// Forward substitution `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    for i in 0..n {
        let row = l.row(i);
        let s: f64 = (0..i).map(|k| row[k] * x[k]).sum();
        x[i] = (b[i] - s) / row[i];
    }
    x
}

/// Back substitution `Lᵀ x = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[(k, i)] * x[k]).sum();
        x[i] = (b[i] - s) / l[(i, i)];
    }
    x
}

fn check_symmetric(m: &Matrix) -> Result<()> {
    if !m.is_square() {
        return Err(Error::dim(format!(
            "expected a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let asym = m.max_asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::dim(format!("matrix asymmetric by {asym:e}")));
    }
    Ok(())
}

fn try_cholesky(m: &Matrix, jitter: f64) -> Option<Matrix> {
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = m[(i, j)];
            if i == j {
                sum += jitter;
            }
            for k in 0..j {
                sum -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return None;
                }
                l[(i, i)] = sum.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    Some(l)
}

/// Cholesky that tolerates exactly-singular PSD input by zeroing columns whose
/// pivot vanishes (relative to the largest diagonal entry).
fn semidefinite_factor(m: &Matrix) -> Option<Matrix> {
    let n = m.rows();
    let scale = (0..n).map(|i| m[(i, i)].abs()).fold(0.0, f64::max);
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -tol {
            return None;
        }
        if d <= tol {
            for i in (j + 1)..n {
                let mut s = m[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                if s.abs() > 1e-8 * scale.max(1.0) {
                    return None;
                }
            }
            continue;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Some(l)
}

/// Factor used for Gaussian sampling: exact for singular PSD input, jittered
/// Cholesky otherwise.
pub fn sampling_factor(cov: &Matrix) -> Result<Matrix> {
    check_symmetric(cov)?;
    match semidefinite_factor(cov) {
        Some(l) => Ok(l),
        None => cholesky_psd(cov, JITTER_FLOOR),
    }
}

/// Draw `n` samples from `N(mean, cov)`.
pub fn sample_mvn(
    mean: &[f64],
    cov: &Matrix,
    n: usize,
    rng: &mut RngState,
) -> Result<Vec<Vec<f64>>> {
    if cov.rows() != mean.len() || cov.cols() != mean.len() {
        return Err(Error::dim(format!(
            "mean of length {} with {}x{} covariance",
            mean.len(),
            cov.rows(),
            cov.cols()
        )));
    }
    let l = sampling_factor(cov)?;
    Ok((0..n).map(|_| sample_with_factor(mean, &l, rng)).collect())
}

pub(crate) fn sample_with_factor(mean: &[f64], l: &Matrix, rng: &mut RngState) -> Vec<f64> {
    let z = rng.normal_vec(mean.len());
    let mut x = mean.to_vec();
    for i in 0..mean.len() {
        let row = l.row(i);
        x[i] += dot(&row[..=i], &z[..=i]);
    }
    x
}

/// Max over coordinates of `|analytic − central difference| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &[f64], analytic_grad: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Parameter(format!(
            "eps {eps:e} outside [1e-7, 1e-3]"
        )));
    }
    if x.len() != analytic_grad.len() {
        return Err(Error::dim("gradient length differs from parameter length"));
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for k in 0..x.len() {
        probe[k] = x[k] + eps;
        let fp = f(&probe);
        probe[k] = x[k] - eps;
        let fm = f(&probe);
        probe[k] = x[k];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite value probing coordinate {k}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let rel = (analytic_grad[k] - numeric).abs() / analytic_grad[k].abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}
