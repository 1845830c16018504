//! Bearing-only tracking with a clockwise coordinated-turn target and glint
//! observation noise.
//!
//! State is `[X, Y, Xdot, Ydot]`. The turn rate is speed dependent,
//! `omega = a_m / speed`, so the transition matrix is itself a function of the
//! state. Bearings are measured clockwise-positive from the +Y axis, and the
//! observation noise is a two-component zero-mean Gaussian mixture whose base
//! variance grows with the sensor-target range.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check_finite, wrap_angle, Measurement, Model, State};
use crate::error::{Error, Result};
use crate::linalg::{log_normal_pdf, logsumexp};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordinatedTurnParams {
    /// Manoeuvre acceleration, units/s^2.
    pub maneuver_accel: f64,
    /// Sampling interval, s.
    pub dt: f64,
    /// Process noise standard deviation (applied to all four components).
    pub sigma_v: f64,
}

impl Default for CoordinatedTurnParams {
    fn default() -> Self {
        CoordinatedTurnParams {
            maneuver_accel: 1.08e-5,
            dt: 1.0,
            sigma_v: 1.6e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlintNoiseParams {
    /// Probability of the wide (outlier) mixture component.
    pub epsilon: f64,
    /// Coefficients `(a2, a1, a0)` of the range law `sigma^2(r) = a2 r^2 + a1 r + a0`.
    pub variance_coeffs: (f64, f64, f64),
    /// Variance ratio of the outlier component.
    pub inflation: f64,
}

impl Default for GlintNoiseParams {
    fn default() -> Self {
        GlintNoiseParams {
            epsilon: 0.09,
            variance_coeffs: (0.08, 0.1150, 0.7405),
            inflation: 1e4,
        }
    }
}

impl GlintNoiseParams {
    /// Base bearing-noise variance at range `r`.
    pub fn sigma2(&self, r: f64) -> f64 {
        let (a2, a1, a0) = self.variance_coeffs;
        a2 * r * r + a1 * r + a0
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!(
                "glint epsilon {} outside [0, 1]",
                self.epsilon
            )));
        }
        let (a2, a1, a0) = self.variance_coeffs;
        if a0 <= 0.0 || a1 < 0.0 || a2 < 0.0 {
            return Err(Error::Config(
                "glint variance law must be positive for all r >= 0".into(),
            ));
        }
        if self.inflation < 1.0 {
            return Err(Error::Config("glint inflation must be >= 1".into()));
        }
        Ok(())
    }
}

/// Coordinated-turn transition matrix evaluated at the input state's speed.
///
/// The `(1 - cos)/omega` entries use `2 sin^2(u/2)/omega`, which stays
/// accurate for the tiny turn angles this model produces.
pub fn ct_transition_matrix(state: &State, params: &CoordinatedTurnParams) -> Result<DMatrix<f64>> {
    if state.len() != 4 {
        return Err(Error::shape(format!(
            "coordinated-turn state must have 4 components, got {}",
            state.len()
        )));
    }
    let speed = (state[2] * state[2] + state[3] * state[3]).sqrt();
    if speed <= 0.0 || !speed.is_finite() {
        return Err(Error::DegenerateTurnRate);
    }
    let omega = params.maneuver_accel / speed;
    let u = omega * params.dt;
    let (sin_u, cos_u) = (u.sin(), u.cos());
    let a = sin_u / omega;
    let half = 0.5 * u;
    let b = 2.0 * half.sin() * half.sin() / omega;
    let mut f = DMatrix::identity(4, 4);
    f[(0, 2)] = a;
    f[(0, 3)] = -b;
    f[(1, 2)] = b;
    f[(1, 3)] = a;
    f[(2, 2)] = cos_u;
    f[(2, 3)] = -sin_u;
    f[(3, 2)] = sin_u;
    f[(3, 3)] = cos_u;
    Ok(f)
}

/// One coordinated-turn step: `F(state) * state + noise_draw`.
pub fn ct_transition(
    state: &State,
    params: &CoordinatedTurnParams,
    noise_draw: &DVector<f64>,
) -> Result<State> {
    check_finite(state, "ct_transition state")?;
    check_finite(noise_draw, "ct_transition noise")?;
    let f = ct_transition_matrix(state, params)?;
    Ok(f * state + noise_draw)
}

/// Bearing of the target seen from `sensor_position`, clockwise positive from
/// the +Y axis. Four-quadrant by default; `single_quadrant` reproduces the
/// plain arctangent of the coordinate ratio, which folds opposite quadrants
/// together.
pub fn bearing(state: &State, sensor_position: (f64, f64), single_quadrant: bool) -> Result<f64> {
    let dx = state[0] - sensor_position.0;
    let dy = state[1] - sensor_position.1;
    if dx == 0.0 && dy == 0.0 {
        return Err(Error::UndefinedBearing { node: usize::MAX });
    }
    if single_quadrant {
        Ok((dx / dy).atan())
    } else {
        Ok(dx.atan2(dy))
    }
}

/// Log density of the glint mixture at residual `delta` with base variance
/// `sigma2`.
pub fn glint_log_density(delta: f64, sigma2: f64, params: &GlintNoiseParams) -> f64 {
    let narrow = log_normal_pdf(delta, 0.0, sigma2);
    let wide = log_normal_pdf(delta, 0.0, params.inflation * sigma2);
    logsumexp(&[(1.0 - params.epsilon).ln() + narrow, params.epsilon.ln() + wide])
}

/// Log likelihood of a measured bearing `z` given the predicted bearing and
/// the sensor-target range. The angular residual is wrapped to (-pi, pi]
/// before evaluation.
pub fn glint_log_likelihood(
    z: f64,
    predicted_bearing: f64,
    range: f64,
    params: &GlintNoiseParams,
) -> Result<f64> {
    if !z.is_finite() || !predicted_bearing.is_finite() || !range.is_finite() || range < 0.0 {
        return Err(Error::NonFinite("glint_log_likelihood"));
    }
    let delta = wrap_angle(z - predicted_bearing);
    Ok(glint_log_density(delta, params.sigma2(range), params))
}

/// The full bearing-only tracking model over a set of sensors.
#[derive(Debug, Clone)]
pub struct BotModel {
    pub params: CoordinatedTurnParams,
    pub glint: GlintNoiseParams,
    pub sensors: Vec<(f64, f64)>,
    pub single_quadrant_bearing: bool,
}

impl BotModel {
    pub fn new(
        params: CoordinatedTurnParams,
        glint: GlintNoiseParams,
        sensors: Vec<(f64, f64)>,
        single_quadrant_bearing: bool,
    ) -> Result<Self> {
        glint.validate()?;
        if params.maneuver_accel <= 0.0 || params.dt <= 0.0 {
            return Err(Error::Config(
                "coordinated-turn parameters must be positive".into(),
            ));
        }
        if sensors.is_empty() {
            return Err(Error::Config("at least one sensor required".into()));
        }
        Ok(BotModel {
            params,
            glint,
            sensors,
            single_quadrant_bearing,
        })
    }

    pub fn range(&self, node: usize, x: &State) -> f64 {
        let (sx, sy) = self.sensors[node];
        ((x[0] - sx).powi(2) + (x[1] - sy).powi(2)).sqrt()
    }
}

impl Model for BotModel {
    fn state_dim(&self) -> usize {
        4
    }

    fn num_nodes(&self) -> usize {
        self.sensors.len()
    }

    fn transition_mean(&self, x: &State) -> Result<State> {
        let f = ct_transition_matrix(x, &self.params)?;
        Ok(f * x)
    }

    fn sample_transition(&self, x: &State, rng: &mut ChaCha12Rng) -> Result<State> {
        let noise = DVector::from_fn(4, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            self.params.sigma_v * z
        });
        ct_transition(x, &self.params, &noise)
    }

    fn transition_log_density(&self, next: &State, prev: &State) -> Result<f64> {
        if self.params.sigma_v <= 0.0 {
            return Err(Error::Config(
                "transition density undefined for sigma_v = 0".into(),
            ));
        }
        let mean = self.transition_mean(prev)?;
        let var = self.params.sigma_v * self.params.sigma_v;
        let mut lp = 0.0;
        for i in 0..4 {
            lp += log_normal_pdf(next[i], mean[i], var);
        }
        Ok(lp)
    }

    fn observation_mean(&self, node: usize, x: &State) -> Result<DVector<f64>> {
        let b = bearing(x, self.sensors[node], self.single_quadrant_bearing)
            .map_err(|_| Error::UndefinedBearing { node })?;
        Ok(DVector::from_vec(vec![b]))
    }

    fn sample_observation(
        &self,
        node: usize,
        x: &State,
        time_index: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Measurement> {
        let mean = self.observation_mean(node, x)?[0];
        let sigma2 = self.glint.sigma2(self.range(node, x));
        let u: f64 = rng.random();
        let std = if u < self.glint.epsilon {
            (self.glint.inflation * sigma2).sqrt()
        } else {
            sigma2.sqrt()
        };
        let z: f64 = StandardNormal.sample(rng);
        Ok(Measurement {
            node_id: node,
            value: DVector::from_vec(vec![wrap_angle(mean + std * z)]),
            time_index,
        })
    }

    fn log_likelihood(&self, z: &Measurement, x: &State) -> Result<f64> {
        let predicted = self.observation_mean(z.node_id, x)?[0];
        glint_log_likelihood(z.value[0], predicted, self.range(z.node_id, x), &self.glint)
    }

    fn process_noise_cov(&self) -> Option<DMatrix<f64>> {
        let v = self.params.sigma_v * self.params.sigma_v;
        Some(DMatrix::identity(4, 4) * v)
    }

    fn obs_noise_cov(&self, node: usize, x: &State) -> Option<DMatrix<f64>> {
        // Gaussian-mode surrogate: the narrow component's range-law variance.
        let s2 = self.glint.sigma2(self.range(node, x));
        Some(DMatrix::from_vec(1, 1, vec![s2]))
    }

    fn transition_jacobian(&self, x: &State) -> Result<DMatrix<f64>> {
        // d/dx [F(omega(x)) x]: the matrix itself plus the chain term through
        // the speed-dependent turn rate.
        let speed2 = x[2] * x[2] + x[3] * x[3];
        let speed = speed2.sqrt();
        if speed <= 0.0 {
            return Err(Error::DegenerateTurnRate);
        }
        let dt = self.params.dt;
        let omega = self.params.maneuver_accel / speed;
        let u = omega * dt;
        let (sin_u, cos_u) = (u.sin(), u.cos());
        let a = sin_u / omega;
        let b = 2.0 * (0.5 * u).sin().powi(2) / omega;
        // derivatives of the matrix entries with respect to omega; series
        // forms below 1e-4 to avoid cancellation
        let (da, db) = if u.abs() < 1e-4 {
            (
                dt * dt * (-u / 3.0) * (1.0 - u * u / 10.0),
                dt * dt * (0.5 - u * u / 8.0),
            )
        } else {
            ((dt * cos_u - a) / omega, (dt * sin_u - b) / omega)
        };
        let dc = -dt * sin_u;
        let dd = dt * cos_u;
        let domega_dvx = -self.params.maneuver_accel * x[2] / (speed2 * speed);
        let domega_dvy = -self.params.maneuver_accel * x[3] / (speed2 * speed);

        let mut jac = ct_transition_matrix(x, &self.params)?;
        // chain contributions: d(entry)/domega * (entries' velocity factors)
        let g = [
            da * x[2] - db * x[3], // row 0: a*vx - b*vy
            db * x[2] + da * x[3], // row 1
            dc * x[2] - dd * x[3], // row 2
            dd * x[2] + dc * x[3], // row 3
        ];
        for (row, gi) in g.iter().enumerate() {
            jac[(row, 2)] += gi * domega_dvx;
            jac[(row, 3)] += gi * domega_dvy;
        }
        Ok(jac)
    }

    fn observation_jacobian(&self, node: usize, x: &State) -> Result<DMatrix<f64>> {
        let (sx, sy) = self.sensors[node];
        let dx = x[0] - sx;
        let dy = x[1] - sy;
        let r2 = dx * dx + dy * dy;
        if r2 == 0.0 {
            return Err(Error::UndefinedBearing { node });
        }
        let mut jac = DMatrix::zeros(1, 4);
        jac[(0, 0)] = dy / r2;
        jac[(0, 1)] = -dx / r2;
        Ok(jac)
    }
}
