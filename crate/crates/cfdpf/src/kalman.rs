//! Kalman and information filters for linear-Gaussian models.
//!
//! These are the exact baselines the particle and fusion filters are checked
//! against; they share no code with the Monte-Carlo paths.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::linalg::{spd_inverse, symmetrize};
use crate::ssm::{LinearGaussianModel, Measurement, Model};

#[derive(Debug, Clone)]
pub struct KalmanState {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// One predict + multi-node update cycle. Nodes are applied sequentially; the
/// order does not matter for the posterior.
pub fn kalman_step(
    model: &LinearGaussianModel,
    state: &KalmanState,
    measurements: &[Measurement],
) -> Result<KalmanState> {
    let f = model.state_matrix();
    let mut mean = f * &state.mean;
    let mut cov = f * &state.covariance * f.transpose() + model.process_cov();
    for z in measurements {
        let h = model.observation_matrix(z.node_id);
        let r = model.observation_cov(z.node_id);
        let s = h * &cov * h.transpose() + r;
        let s_inv = spd_inverse(&s, "innovation covariance")?;
        let gain = &cov * h.transpose() * s_inv;
        let innovation = &z.value - h * &mean;
        mean += &gain * innovation;
        let eye = DMatrix::identity(cov.nrows(), cov.ncols());
        cov = symmetrize(&((eye - &gain * h) * &cov));
    }
    Ok(KalmanState {
        mean,
        covariance: cov,
    })
}

/// Information-filter form of the one-step information matrix update:
/// `J' = (F J^{-1} F^T + Q)^{-1} + sum_l H_l^T R_l^{-1} H_l`.
pub fn information_step(model: &LinearGaussianModel, j: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let f = model.state_matrix();
    let p = spd_inverse(j, "information matrix")?;
    let predicted = f * p * f.transpose() + model.process_cov();
    let mut next = spd_inverse(&predicted, "predicted covariance")?;
    for node in 0..model.num_nodes() {
        let h = model.observation_matrix(node);
        let r_inv = spd_inverse(model.observation_cov(node), "observation covariance")?;
        next += h.transpose() * r_inv * h;
    }
    Ok(symmetrize(&next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn scalar_posterior_matches_hand_formulas() {
        let model = LinearGaussianModel::scalar(1.0, 1.0, 1, 1.0, 1.0).unwrap();
        let state = KalmanState {
            mean: DVector::from_vec(vec![0.0]),
            covariance: DMatrix::from_vec(1, 1, vec![1.0]),
        };
        let z = Measurement {
            node_id: 0,
            value: DVector::from_vec(vec![1.0]),
            time_index: 1,
        };
        let next = kalman_step(&model, &state, &[z]).unwrap();
        // predict: mean 0, var 2; update with r = 1: gain 2/3
        assert_relative_eq!(next.mean[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(next.covariance[(0, 0)], 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn covariance_matches_information_recursion() {
        let model = LinearGaussianModel::scalar(0.9, 0.4, 2, 1.0, 0.8).unwrap();
        let mut state = KalmanState {
            mean: DVector::from_vec(vec![0.3]),
            covariance: DMatrix::from_vec(1, 1, vec![2.0]),
        };
        let mut j = DMatrix::from_vec(1, 1, vec![0.5]);
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let mut x = DVector::from_vec(vec![0.0]);
        for k in 1..=12 {
            x = model.sample_transition(&x, &mut rng).unwrap();
            let zs: Vec<Measurement> = (0..2)
                .map(|l| model.sample_observation(l, &x, k, &mut rng).unwrap())
                .collect();
            state = kalman_step(&model, &state, &zs).unwrap();
            j = information_step(&model, &j).unwrap();
            assert_relative_eq!(
                state.covariance[(0, 0)],
                1.0 / j[(0, 0)],
                epsilon = 1e-10
            );
        }
    }
}
