//! Small dense linear-algebra helpers shared by the filters and the
//! information recursions.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Relative covariance regularization: `REG_REL * trace(P)/n` is added to the
/// diagonal before any factorization-sensitive use.
pub const REG_REL: f64 = 1e-9;
/// Absolute floor used when the trace is zero (e.g. a single-particle cloud).
pub const REG_ABS: f64 = 1e-12;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Add the standard regularization to a covariance in place.
pub fn regularize_in_place(cov: &mut DMatrix<f64>) {
    let n = cov.nrows();
    let tr = cov.trace();
    let bump = if tr > 0.0 { REG_REL * tr / n as f64 } else { REG_ABS };
    for i in 0..n {
        cov[(i, i)] += bump;
    }
}

fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    Cholesky::new(symmetrize(m))
}

/// Inverse of a symmetric positive-definite matrix, retrying once with the
/// regularization floor before giving up.
pub fn spd_inverse(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    if let Some(ch) = cholesky(m) {
        return Ok(ch.inverse());
    }
    let mut fixed = symmetrize(m);
    regularize_in_place(&mut fixed);
    match Cholesky::new(fixed) {
        Some(ch) => Ok(ch.inverse()),
        None => Err(Error::not_pd(context.to_string())),
    }
}

/// Solve `M x = b` for symmetric positive-definite `M` with the same retry.
pub fn spd_solve(m: &DMatrix<f64>, b: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    if let Some(ch) = cholesky(m) {
        return Ok(ch.solve(b));
    }
    let mut fixed = symmetrize(m);
    regularize_in_place(&mut fixed);
    match Cholesky::new(fixed) {
        Some(ch) => Ok(ch.solve(b)),
        None => Err(Error::not_pd(context.to_string())),
    }
}

/// Project a symmetric matrix onto the positive-definite cone by flooring its
/// eigenvalues at `rel_floor * max|lambda|`. Returns the projected matrix and
/// whether any eigenvalue was clipped. Fails when the matrix is numerically
/// zero (nothing to floor against).
pub fn pd_project(m: &DMatrix<f64>, rel_floor: f64) -> Result<(DMatrix<f64>, bool)> {
    let sym = symmetrize(m);
    let eig = sym.symmetric_eigen();
    let max_abs = eig.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l.abs()));
    if !(max_abs > 0.0) || !max_abs.is_finite() {
        return Err(Error::not_pd("pd_project: zero or non-finite spectrum"));
    }
    let floor = rel_floor * max_abs;
    let mut clipped = false;
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < floor {
            *v = floor;
            clipped = true;
        }
    }
    let q = &eig.eigenvectors;
    let rebuilt = q * DMatrix::from_diagonal(&vals) * q.transpose();
    Ok((symmetrize(&rebuilt), clipped))
}

/// log(sum(exp(xs))) with max-subtraction. Returns -inf for an empty slice or
/// when every entry is -inf.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

const LN_2PI: f64 = 1.8378770664093453;

/// A multivariate normal with a cached Cholesky factor, for repeated density
/// evaluation and sampling.
#[derive(Debug, Clone)]
pub struct GaussianDensity {
    mean: DVector<f64>,
    lower: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianDensity {
    /// Build from mean and covariance; the covariance is regularized once if
    /// the first factorization fails.
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>, context: &str) -> Result<Self> {
        let n = mean.len();
        if covariance.nrows() != n || covariance.ncols() != n {
            return Err(Error::shape(format!(
                "{context}: mean dim {n} vs covariance {}x{}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        let ch = match cholesky(&covariance) {
            Some(ch) => ch,
            None => {
                let mut fixed = symmetrize(&covariance);
                regularize_in_place(&mut fixed);
                Cholesky::new(fixed).ok_or_else(|| Error::not_pd(context.to_string()))?
            }
        };
        let lower = ch.l();
        let log_det: f64 = 2.0 * lower.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(GaussianDensity {
            mean,
            lower,
            log_norm: -0.5 * (n as f64 * LN_2PI + log_det),
        })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Log density at `x`.
    pub fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        let diff = x - &self.mean;
        // forward substitution: lower * y = diff
        let y = self
            .lower
            .clone()
            .solve_lower_triangular(&diff)
            .expect("cholesky factor is nonsingular");
        self.log_norm - 0.5 * y.norm_squared()
    }

    /// One draw `mean + L z` with `z` standard normal.
    pub fn sample(&self, rng: &mut ChaCha12Rng) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
        &self.mean + &self.lower * z
    }
}

/// Scalar normal log density.
pub fn log_normal_pdf(x: f64, mean: f64, variance: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + variance.ln() + d * d / variance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    #[test]
    fn gaussian_log_pdf_matches_scalar_formula() {
        let g = GaussianDensity::new(
            DVector::from_vec(vec![1.0]),
            DMatrix::from_vec(1, 1, vec![4.0]),
            "test",
        )
        .unwrap();
        let x = DVector::from_vec(vec![2.5]);
        assert_relative_eq!(g.log_pdf(&x), log_normal_pdf(2.5, 1.0, 4.0), epsilon = 1e-14);
    }

    #[test]
    fn gaussian_sample_moments() {
        let mean = DVector::from_vec(vec![1.0, -2.0]);
        let cov = DMatrix::from_vec(2, 2, vec![2.0, 0.5, 0.5, 1.0]);
        let g = GaussianDensity::new(mean.clone(), cov.clone(), "test").unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let n = 200_000;
        let mut m = DVector::zeros(2);
        let mut s = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let x = g.sample(&mut rng);
            m += &x;
            s += &x * x.transpose();
        }
        m /= n as f64;
        s = s / n as f64 - &m * m.transpose();
        assert_relative_eq!(m[0], 1.0, epsilon = 0.02);
        assert_relative_eq!(m[1], -2.0, epsilon = 0.02);
        assert_relative_eq!(s[(0, 1)], 0.5, epsilon = 0.03);
    }

    #[test]
    fn pd_project_floors_negative_eigenvalues() {
        let m = DMatrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, -0.5]);
        let (p, clipped) = pd_project(&m, 1e-9).unwrap();
        assert!(clipped);
        let eig = p.symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&l| l > 0.0));
    }

    #[test]
    fn spd_inverse_regularizes_singular_input() {
        let m = DMatrix::zeros(2, 2);
        // trace zero: absolute floor applies, inverse is huge but finite
        let inv = spd_inverse(&m, "zeros").unwrap();
        assert!(inv[(0, 0)].is_finite());
    }

    #[test]
    fn logsumexp_handles_spread() {
        let v = vec![-1000.0, -1000.0];
        assert_relative_eq!(logsumexp(&v), -1000.0 + 2f64.ln(), epsilon = 1e-12);
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
    }
}
