//! Linear-Gaussian test model with per-node linear observations.
//!
//! The exact posterior of this model is computable by a Kalman/information
//! filter; the particle filters, fusion filters, and information recursions
//! are all validated against it.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Measurement, Model, State};
use crate::error::{Error, Result};
use crate::linalg::GaussianDensity;

#[derive(Debug, Clone)]
pub struct LinearGaussianModel {
    f: DMatrix<f64>,
    q: DMatrix<f64>,
    q_lower: DMatrix<f64>,
    q_log_norm: f64,
    h: Vec<DMatrix<f64>>,
    r: Vec<DMatrix<f64>>,
    r_density: Vec<GaussianDensity>,
    dim: usize,
}

const LN_2PI: f64 = 1.8378770664093453;

impl LinearGaussianModel {
    /// Build the model, rejecting non-positive-definite noise covariances and
    /// mismatched dimensions.
    pub fn new(
        f: DMatrix<f64>,
        q: DMatrix<f64>,
        h_per_node: Vec<DMatrix<f64>>,
        r_per_node: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let dim = f.nrows();
        if f.ncols() != dim {
            return Err(Error::shape("state matrix must be square"));
        }
        if q.nrows() != dim || q.ncols() != dim {
            return Err(Error::shape("process covariance must match state dim"));
        }
        if h_per_node.is_empty() || h_per_node.len() != r_per_node.len() {
            return Err(Error::shape(
                "one observation matrix and one noise covariance per node",
            ));
        }
        let q_chol =
            Cholesky::new(q.clone()).ok_or_else(|| Error::not_pd("process covariance Q"))?;
        let q_lower = q_chol.l();
        let q_log_det: f64 = 2.0 * q_lower.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let q_log_norm = -0.5 * (dim as f64 * LN_2PI + q_log_det);

        let mut r_density = Vec::with_capacity(r_per_node.len());
        for (l, (h, r)) in h_per_node.iter().zip(&r_per_node).enumerate() {
            if h.ncols() != dim {
                return Err(Error::shape(format!("H at node {l} must have {dim} columns")));
            }
            if r.nrows() != h.nrows() || r.ncols() != h.nrows() {
                return Err(Error::shape(format!("R at node {l} must match H rows")));
            }
            let zero = DVector::zeros(h.nrows());
            r_density.push(
                GaussianDensity::new(zero, r.clone(), &format!("observation covariance at node {l}"))
                    .map_err(|_| Error::not_pd(format!("observation covariance at node {l}")))?,
            );
            Cholesky::new(r.clone())
                .ok_or_else(|| Error::not_pd(format!("observation covariance at node {l}")))?;
        }
        Ok(LinearGaussianModel {
            f,
            q,
            q_lower,
            q_log_norm,
            h: h_per_node,
            r: r_per_node,
            r_density,
            dim,
        })
    }

    /// Scalar convenience constructor: one state dimension, `n` identical
    /// scalar observation channels.
    pub fn scalar(f: f64, q: f64, n_nodes: usize, h: f64, r: f64) -> Result<Self> {
        Self::new(
            DMatrix::from_vec(1, 1, vec![f]),
            DMatrix::from_vec(1, 1, vec![q]),
            vec![DMatrix::from_vec(1, 1, vec![h]); n_nodes],
            vec![DMatrix::from_vec(1, 1, vec![r]); n_nodes],
        )
    }

    pub fn state_matrix(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn process_cov(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn observation_matrix(&self, node: usize) -> &DMatrix<f64> {
        &self.h[node]
    }

    pub fn observation_cov(&self, node: usize) -> &DMatrix<f64> {
        &self.r[node]
    }
}

impl Model for LinearGaussianModel {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn num_nodes(&self) -> usize {
        self.h.len()
    }

    fn transition_mean(&self, x: &State) -> Result<State> {
        Ok(&self.f * x)
    }

    fn sample_transition(&self, x: &State, rng: &mut ChaCha12Rng) -> Result<State> {
        let z = DVector::from_fn(self.dim, |_, _| StandardNormal.sample(rng));
        Ok(&self.f * x + &self.q_lower * z)
    }

    fn transition_log_density(&self, next: &State, prev: &State) -> Result<f64> {
        let diff = next - &self.f * prev;
        let y = self
            .q_lower
            .clone()
            .solve_lower_triangular(&diff)
            .expect("cholesky factor is nonsingular");
        Ok(self.q_log_norm - 0.5 * y.norm_squared())
    }

    fn observation_mean(&self, node: usize, x: &State) -> Result<DVector<f64>> {
        Ok(&self.h[node] * x)
    }

    fn sample_observation(
        &self,
        node: usize,
        x: &State,
        time_index: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Measurement> {
        let noise = self.r_density[node].sample(rng);
        Ok(Measurement {
            node_id: node,
            value: &self.h[node] * x + noise,
            time_index,
        })
    }

    fn log_likelihood(&self, z: &Measurement, x: &State) -> Result<f64> {
        let residual = &z.value - &self.h[z.node_id] * x;
        Ok(self.r_density[z.node_id].log_pdf(&residual))
    }

    fn process_noise_cov(&self) -> Option<DMatrix<f64>> {
        Some(self.q.clone())
    }

    fn obs_noise_cov(&self, node: usize, _x: &State) -> Option<DMatrix<f64>> {
        Some(self.r[node].clone())
    }

    fn transition_jacobian(&self, _x: &State) -> Result<DMatrix<f64>> {
        Ok(self.f.clone())
    }

    fn observation_jacobian(&self, node: usize, _x: &State) -> Result<DMatrix<f64>> {
        Ok(self.h[node].clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    #[test]
    fn rejects_singular_process_covariance() {
        let err = LinearGaussianModel::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            vec![DMatrix::identity(2, 2)],
            vec![DMatrix::identity(2, 2)],
        );
        assert!(matches!(err, Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn rejects_singular_observation_covariance() {
        let err = LinearGaussianModel::scalar(1.0, 1.0, 1, 1.0, 0.0);
        assert!(err.is_err());
    }

    #[test]
    fn transition_density_matches_scalar_normal() {
        let m = LinearGaussianModel::scalar(0.9, 2.0, 1, 1.0, 1.0).unwrap();
        let prev = DVector::from_vec(vec![1.5]);
        let next = DVector::from_vec(vec![2.0]);
        let lp = m.transition_log_density(&next, &prev).unwrap();
        assert_relative_eq!(
            lp,
            crate::linalg::log_normal_pdf(2.0, 0.9 * 1.5, 2.0),
            epsilon = 1e-13
        );
    }

    #[test]
    fn sampling_is_reproducible() {
        let m = LinearGaussianModel::scalar(1.0, 1.0, 2, 1.0, 0.5).unwrap();
        let x = DVector::from_vec(vec![0.3]);
        let mut a = ChaCha12Rng::seed_from_u64(1);
        let mut b = ChaCha12Rng::seed_from_u64(1);
        assert_eq!(
            m.sample_transition(&x, &mut a).unwrap(),
            m.sample_transition(&x, &mut b).unwrap()
        );
        assert_eq!(
            m.sample_observation(1, &x, 0, &mut a).unwrap().value,
            m.sample_observation(1, &x, 0, &mut b).unwrap().value
        );
    }
}
