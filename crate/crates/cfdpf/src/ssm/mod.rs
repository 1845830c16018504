//! State-space models.
//!
//! A [`Model`] couples a Markov state transition with per-node observation
//! channels. Transitions and observations are deterministic functions of
//! (state, noise draw): every sample call threads an explicit ChaCha stream,
//! so model procedures are pure given a seed and replay bit-identically.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

mod bot;
mod linear;
mod unicycle;

pub use bot::{
    bearing, ct_transition, ct_transition_matrix, glint_log_density, glint_log_likelihood,
    BotModel, CoordinatedTurnParams, GlintNoiseParams,
};
pub use linear::LinearGaussianModel;
pub use unicycle::{unicycle_transition, UnicycleDraw, UnicycleModel, UnicycleParams};

/// State vector; length is the model's `state_dim`.
pub type State = DVector<f64>;

/// One measurement taken by one node at one time index.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub node_id: usize,
    pub value: DVector<f64>,
    pub time_index: usize,
}

/// Wrap an angle to the half-open interval (-pi, pi].
pub fn wrap_angle(x: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let w = x.rem_euclid(two_pi);
    if w > std::f64::consts::PI {
        w - two_pi
    } else {
        w
    }
}

/// A state-space model with per-node observation channels.
pub trait Model: Send + Sync {
    fn state_dim(&self) -> usize;
    fn num_nodes(&self) -> usize;

    /// Mean of the next state given the current one (noise at its mean).
    fn transition_mean(&self, x: &State) -> Result<State>;

    /// Draw the next state from the transition distribution.
    fn sample_transition(&self, x: &State, rng: &mut ChaCha12Rng) -> Result<State>;

    /// Log transition density `log p(next | prev)`.
    fn transition_log_density(&self, next: &State, prev: &State) -> Result<f64>;

    /// Noise-free observation at `node`.
    fn observation_mean(&self, node: usize, x: &State) -> Result<DVector<f64>>;

    /// Draw one noisy measurement at `node`.
    fn sample_observation(
        &self,
        node: usize,
        x: &State,
        time_index: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Measurement>;

    /// Log likelihood of a measurement given the state.
    fn log_likelihood(&self, z: &Measurement, x: &State) -> Result<f64>;

    /// Process-noise covariance when the transition noise is additive
    /// Gaussian; `None` otherwise (the information recursions require it).
    fn process_noise_cov(&self) -> Option<DMatrix<f64>>;

    /// Observation-noise covariance at `node`, possibly state dependent;
    /// `None` when the channel is not treated as additive Gaussian.
    fn obs_noise_cov(&self, node: usize, x: &State) -> Option<DMatrix<f64>>;

    /// Jacobian of the transition mean. Default: central finite differences.
    fn transition_jacobian(&self, x: &State) -> Result<DMatrix<f64>> {
        numeric_jacobian(x, |s| self.transition_mean(s))
    }

    /// Jacobian of the observation mean at `node`. Default: central finite
    /// differences.
    fn observation_jacobian(&self, node: usize, x: &State) -> Result<DMatrix<f64>> {
        numeric_jacobian(x, |s| self.observation_mean(node, s))
    }
}

/// Central finite-difference Jacobian with step `1e-6 * (1 + |x_i|)`.
pub fn numeric_jacobian<F>(x: &State, f: F) -> Result<DMatrix<f64>>
where
    F: Fn(&State) -> Result<DVector<f64>>,
{
    let n = x.len();
    let f0 = f(x)?;
    let m = f0.len();
    let mut jac = DMatrix::zeros(m, n);
    for j in 0..n {
        let h = 1e-6 * (1.0 + x[j].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let fp = f(&xp)?;
        let fm = f(&xm)?;
        for i in 0..m {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

pub(crate) fn check_finite(v: &DVector<f64>, what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn wrap_angle_range_and_period() {
        for &x in &[0.0, 3.0, -3.0, 10.0, -10.0, std::f64::consts::PI, 100.0] {
            let w = wrap_angle(x);
            assert!(w > -std::f64::consts::PI && w <= std::f64::consts::PI, "{x} -> {w}");
            assert_relative_eq!(
                wrap_angle(w + std::f64::consts::TAU),
                w,
                epsilon = 1e-12
            );
        }
        assert_relative_eq!(wrap_angle(std::f64::consts::PI), std::f64::consts::PI);
    }
}
