//! Particle-set primitives shared by the local, centralized, and fusion
//! filters.
//!
//! Weights live in log space throughout; normalization subtracts the running
//! log-sum. The glint mixture spreads likelihoods over several orders of
//! magnitude, so linear-domain weights would underflow routinely.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{logsumexp, symmetrize, GaussianDensity, REG_ABS, REG_REL};
use crate::ssm::{Measurement, Model, State};

/// Fraction of the particle count below which the effective sample size
/// triggers resampling.
pub const DEFAULT_ESS_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SetKind {
    Filtering,
    Prediction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SummaryKind {
    Filtering,
    Prediction,
}

/// Mean/covariance summary of a particle cloud, exchanged between nodes.
#[derive(Debug, Clone)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub kind: SummaryKind,
    pub node_id: usize,
    pub time_index: usize,
}

/// Weighted particle cloud representing a filtering or prediction density.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    pub particles: Vec<State>,
    pub log_weights: Vec<f64>,
    pub time_index: usize,
    pub kind: SetKind,
}

impl ParticleSet {
    /// Uniformly weighted cloud.
    pub fn uniform(particles: Vec<State>, time_index: usize, kind: SetKind) -> Self {
        let n = particles.len();
        ParticleSet {
            particles,
            log_weights: vec![-(n as f64).ln(); n],
            time_index,
            kind,
        }
    }

    /// Draw an initial cloud from a Gaussian prior.
    pub fn from_prior(
        prior: &GaussianDensity,
        n: usize,
        time_index: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let particles = (0..n).map(|_| prior.sample(rng)).collect();
        ParticleSet::uniform(particles, time_index, SetKind::Filtering)
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Normalize the log weights in place. Fails when every weight has
    /// underflowed (total weight zero).
    pub fn normalize(&mut self) -> Result<()> {
        let lse = logsumexp(&self.log_weights);
        if !lse.is_finite() {
            return Err(Error::FilterDivergence {
                node: None,
                step: self.time_index,
            });
        }
        for lw in &mut self.log_weights {
            *lw -= lse;
        }
        Ok(())
    }

    /// Linear-domain weights.
    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|lw| lw.exp()).collect()
    }

    /// Effective sample size `1 / sum(w_i^2)` of normalized weights.
    pub fn ess(&self) -> f64 {
        let s: f64 = self.log_weights.iter().map(|lw| (2.0 * lw).exp()).sum();
        1.0 / s
    }

    pub fn weighted_mean(&self) -> DVector<f64> {
        let dim = self.particles[0].len();
        let mut mean = DVector::zeros(dim);
        for (x, lw) in self.particles.iter().zip(&self.log_weights) {
            mean += x * lw.exp();
        }
        mean
    }

    /// Weighted mean and covariance of the cloud, symmetrized and lifted by
    /// the standard regularization (`REG_REL * trace/n`, or `REG_ABS` on a
    /// zero-trace cloud) so downstream information-form inversions stay
    /// well posed.
    pub fn summarize(&self, node_id: usize) -> GaussianSummary {
        let dim = self.particles[0].len();
        let mean = self.weighted_mean();
        let mut cov = DMatrix::zeros(dim, dim);
        for (x, lw) in self.particles.iter().zip(&self.log_weights) {
            let d = x - &mean;
            cov += (&d * d.transpose()) * lw.exp();
        }
        cov = symmetrize(&cov);
        let tr = cov.trace();
        let bump = if tr > 0.0 { REG_REL * tr / dim as f64 } else { REG_ABS };
        for i in 0..dim {
            cov[(i, i)] += bump;
        }
        GaussianSummary {
            mean,
            covariance: cov,
            kind: match self.kind {
                SetKind::Filtering => SummaryKind::Filtering,
                SetKind::Prediction => SummaryKind::Prediction,
            },
            node_id,
            time_index: self.time_index,
        }
    }
}

/// Effective sample size of a normalized set.
pub fn ess(set: &ParticleSet) -> f64 {
    set.ess()
}

/// Systematic resampling: one uniform draw, evenly spaced selection points.
/// Output weights are uniform; the multiplicity of particle `i` is within one
/// of `n * w_i`.
pub fn resample(set: &ParticleSet, rng: &mut ChaCha12Rng) -> ParticleSet {
    let n = set.len();
    let u: f64 = rng.random();
    let weights = set.weights();
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut j = 0usize;
    for i in 0..n {
        let point = (i as f64 + u) / n as f64;
        while point >= cum && j + 1 < n {
            j += 1;
            cum += weights[j];
        }
        out.push(set.particles[j].clone());
    }
    ParticleSet::uniform(out, set.time_index, set.kind)
}

/// Propagate every particle one step through the transition model, keeping
/// its weight. The result approximates the prediction density at `k+1`.
pub fn sample_prediction(
    set: &ParticleSet,
    model: &dyn Model,
    rng: &mut ChaCha12Rng,
) -> Result<ParticleSet> {
    let mut particles = Vec::with_capacity(set.len());
    for x in &set.particles {
        particles.push(model.sample_transition(x, rng)?);
    }
    Ok(ParticleSet {
        particles,
        log_weights: set.log_weights.clone(),
        time_index: set.time_index + 1,
        kind: SetKind::Prediction,
    })
}

/// Multiply a prediction cloud's weights by the measurement likelihoods and
/// normalize. Fails with a divergence error when the total weight underflows.
pub fn measurement_update(
    mut set: ParticleSet,
    measurements: &[Measurement],
    model: &dyn Model,
) -> Result<ParticleSet> {
    for (x, lw) in set.particles.iter().zip(set.log_weights.iter_mut()) {
        for z in measurements {
            *lw += model.log_likelihood(z, x)?;
        }
    }
    set.kind = SetKind::Filtering;
    set.normalize().map_err(|_| Error::FilterDivergence {
        node: if measurements.len() == 1 {
            Some(measurements[0].node_id)
        } else {
            None
        },
        step: set.time_index,
    })?;
    Ok(set)
}

/// One sampling-importance-resampling step: transition-prior proposal,
/// likelihood weighting, normalization, and resampling when the effective
/// sample size drops below `ess_fraction * n`.
pub fn sir_step(
    set: &ParticleSet,
    measurements: &[Measurement],
    model: &dyn Model,
    rng: &mut ChaCha12Rng,
    ess_fraction: f64,
) -> Result<ParticleSet> {
    let predicted = sample_prediction(set, model, rng)?;
    let updated = measurement_update(predicted, measurements, model)?;
    if updated.ess() < ess_fraction * updated.len() as f64 {
        Ok(resample(&updated, rng))
    } else {
        Ok(updated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::LinearGaussianModel;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn vec1(x: f64) -> State {
        DVector::from_vec(vec![x])
    }

    fn set_with_weights(values: &[f64], weights: &[f64]) -> ParticleSet {
        ParticleSet {
            particles: values.iter().map(|&v| vec1(v)).collect(),
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            time_index: 0,
            kind: SetKind::Filtering,
        }
    }

    #[test]
    fn ess_uniform_degenerate_and_half() {
        let n = 8;
        let s = ParticleSet::uniform(vec![vec1(0.0); n], 0, SetKind::Filtering);
        assert_relative_eq!(s.ess(), n as f64, epsilon = 1e-10);

        let mut d = set_with_weights(&[0.0, 1.0], &[1.0, 0.0]);
        d.log_weights = vec![0.0, f64::NEG_INFINITY];
        assert_relative_eq!(d.ess(), 1.0, epsilon = 1e-12);

        let mut h = set_with_weights(&[0.0, 1.0, 2.0, 3.0], &[0.5, 0.5, 1.0, 1.0]);
        h.log_weights = vec![0.5f64.ln(), 0.5f64.ln(), f64::NEG_INFINITY, f64::NEG_INFINITY];
        assert_relative_eq!(h.ess(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_likelihood_leaves_weights_unchanged() {
        // huge observation variance: likelihood is flat across the cloud
        let model = LinearGaussianModel::scalar(1.0, 1.0, 1, 0.0, 1.0).unwrap();
        let set = set_with_weights(&[0.0, 1.0, 2.0], &[0.2, 0.5, 0.3]);
        let z = Measurement {
            node_id: 0,
            value: vec1(0.0),
            time_index: 1,
        };
        let mut pred = set.clone();
        pred.kind = SetKind::Prediction;
        let updated = measurement_update(pred, &[z], &model).unwrap();
        for (lw, w) in updated.log_weights.iter().zip([0.2, 0.5, 0.3]) {
            assert_relative_eq!(lw.exp(), w, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_surviving_particle_takes_all_weight() {
        let model = LinearGaussianModel::scalar(1.0, 1.0, 1, 1.0, 1e-6).unwrap();
        // particle at 0 matches the measurement; the others are hundreds of
        // sigmas away
        let set = set_with_weights(&[0.0, 50.0, -50.0], &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        let z = Measurement {
            node_id: 0,
            value: vec1(0.0),
            time_index: 1,
        };
        let mut pred = set.clone();
        pred.kind = SetKind::Prediction;
        let updated = measurement_update(pred, &[z], &model).unwrap();
        assert_relative_eq!(updated.log_weights[0].exp(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn weights_match_direct_gaussian_evaluation() {
        let model = LinearGaussianModel::scalar(1.0, 1.0, 1, 1.0, 0.7).unwrap();
        let values = [0.3, -0.4, 1.1];
        let prior = [0.5, 0.25, 0.25];
        let set = set_with_weights(&values, &prior);
        let z = Measurement {
            node_id: 0,
            value: vec1(0.25),
            time_index: 1,
        };
        let mut pred = set.clone();
        pred.kind = SetKind::Prediction;
        let updated = measurement_update(pred, &[z], &model).unwrap();

        // direct evaluation oracle
        let mut expected: Vec<f64> = values
            .iter()
            .zip(prior)
            .map(|(&v, p)| p * crate::linalg::log_normal_pdf(0.25, v, 0.7).exp())
            .collect();
        let total: f64 = expected.iter().sum();
        for e in &mut expected {
            *e /= total;
        }
        for (lw, e) in updated.log_weights.iter().zip(expected) {
            assert_abs_diff_eq!(lw.exp(), e, epsilon = 1e-12);
        }
    }

    #[test]
    fn total_underflow_is_a_divergence_error() {
        let model = LinearGaussianModel::scalar(1.0, 1.0, 1, 1.0, 1.0).unwrap();
        let mut set = set_with_weights(&[0.0, 1.0], &[0.5, 0.5]);
        set.kind = SetKind::Prediction;
        set.log_weights = vec![f64::NEG_INFINITY; 2];
        let z = Measurement {
            node_id: 0,
            value: vec1(0.0),
            time_index: 4,
        };
        match measurement_update(set, &[z], &model) {
            Err(Error::FilterDivergence { node, step }) => {
                assert_eq!(node, Some(0));
                assert_eq!(step, 4);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn prediction_keeps_weights_and_applies_transition() {
        // zero process noise via sigma_v = 0 coordinated-turn model
        use crate::ssm::{BotModel, CoordinatedTurnParams, GlintNoiseParams};
        let model = BotModel::new(
            CoordinatedTurnParams {
                sigma_v: 0.0,
                ..CoordinatedTurnParams::default()
            },
            GlintNoiseParams::default(),
            vec![(0.0, 0.0)],
            false,
        )
        .unwrap();
        let particles = vec![
            DVector::from_vec(vec![3.0, 6.0, -0.3, -0.37]),
            DVector::from_vec(vec![2.0, 5.0, 0.4, 0.2]),
        ];
        let mut set = ParticleSet::uniform(particles.clone(), 0, SetKind::Filtering);
        set.log_weights = vec![0.7f64.ln(), 0.3f64.ln()];
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let pred = sample_prediction(&set, &model, &mut rng).unwrap();
        assert_eq!(pred.kind, SetKind::Prediction);
        assert_eq!(pred.time_index, 1);
        assert_eq!(pred.log_weights, set.log_weights);
        for (p, x) in pred.particles.iter().zip(&particles) {
            let expected = model.transition_mean(x).unwrap();
            assert_relative_eq!((p - expected).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn predicted_mean_matches_analytic_moment() {
        let model = LinearGaussianModel::scalar(0.8, 0.5, 1, 1.0, 1.0).unwrap();
        let n = 10_000;
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let prior = GaussianDensity::new(vec1(2.0), DMatrix::from_vec(1, 1, vec![1.0]), "prior")
            .unwrap();
        let set = ParticleSet::from_prior(&prior, n, 0, &mut rng);
        let pred = sample_prediction(&set, &model, &mut rng).unwrap();
        // E[x'] = 0.8 * E[x]; MC standard error of the mean over n draws
        let var = 0.8 * 0.8 * 1.0 + 0.5;
        let se = (var / n as f64).sqrt();
        assert_abs_diff_eq!(pred.weighted_mean()[0], 0.8 * 2.0, epsilon = 3.0 * se);
    }

    #[test]
    fn summarize_single_particle_hits_absolute_floor() {
        let set = ParticleSet::uniform(vec![vec1(5.0)], 0, SetKind::Filtering);
        let s = set.summarize(3);
        assert_eq!(s.node_id, 3);
        assert_relative_eq!(s.mean[0], 5.0);
        assert_relative_eq!(s.covariance[(0, 0)], REG_ABS, epsilon = 1e-18);
    }

    #[test]
    fn summarize_two_point_symmetric() {
        let set = ParticleSet::uniform(vec![vec1(-1.0), vec1(1.0)], 0, SetKind::Filtering);
        let s = set.summarize(0);
        assert_abs_diff_eq!(s.mean[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(s.covariance[(0, 0)], 1.0, epsilon = 1e-8);
    }

    #[test]
    fn summarize_matches_weighted_moment_oracle() {
        let values = [0.2, -1.3, 4.0, 2.2, -0.7];
        let weights = [0.1, 0.3, 0.25, 0.15, 0.2];
        let set = set_with_weights(&values, &weights);
        let s = set.summarize(0);

        // brute-force weighted moments plus the documented regularization
        let mean: f64 = values.iter().zip(weights).map(|(v, w)| v * w).sum();
        let var: f64 = values
            .iter()
            .zip(weights)
            .map(|(v, w)| w * (v - mean) * (v - mean))
            .sum();
        let expected = var + REG_REL * var;
        assert_abs_diff_eq!(s.mean[0], mean, epsilon = 1e-12);
        assert_abs_diff_eq!(s.covariance[(0, 0)], expected, epsilon = 1e-12);
    }

    #[test]
    fn systematic_resample_counts() {
        // hand trace: weights (0.5, 0.3, 0.2) over 10 selection points give
        // counts (5, 3, 2) for any value of the single uniform. Build a
        // 10-particle cloud whose first three particles carry all the weight.
        let mut values = vec![10.0, 20.0, 30.0];
        values.extend(std::iter::repeat(99.0).take(7));
        let mut log_weights = vec![0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()];
        log_weights.extend(std::iter::repeat(f64::NEG_INFINITY).take(7));
        let set = ParticleSet {
            particles: values.iter().map(|&v| vec1(v)).collect(),
            log_weights,
            time_index: 0,
            kind: SetKind::Filtering,
        };
        for seed in 0..20 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let out = resample(&set, &mut rng);
            let count = |v: f64| out.particles.iter().filter(|p| p[0] == v).count();
            assert_eq!((count(10.0), count(20.0), count(30.0)), (5, 3, 2));
            assert_eq!(count(99.0), 0);
        }
    }

    #[test]
    fn resample_multiplicity_within_one_of_expected() {
        let set = set_with_weights(&[1.0, 2.0, 3.0, 4.0], &[0.42, 0.13, 0.27, 0.18]);
        for seed in 0..50 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let out = resample(&set, &mut rng);
            for (p, w) in set.particles.iter().zip(set.weights()) {
                let c = out.particles.iter().filter(|q| q[0] == p[0]).count() as f64;
                let expected = set.len() as f64 * w;
                assert!(
                    (c - expected).abs() <= 1.0 + 1e-12,
                    "count {c} vs expected {expected}"
                );
            }
        }
    }

    #[test]
    fn resample_degenerate_weight_copies_one_particle() {
        let mut set = set_with_weights(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]);
        set.log_weights = vec![0.0, f64::NEG_INFINITY, f64::NEG_INFINITY];
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let r = resample(&set, &mut rng);
        assert!(r.particles.iter().all(|p| p[0] == 1.0));
        assert_relative_eq!(r.ess(), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn resample_uniform_weights_preserves_multiset() {
        let set = ParticleSet::uniform(
            vec![vec1(1.0), vec1(2.0), vec1(3.0), vec1(4.0)],
            0,
            SetKind::Filtering,
        );
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let r = resample(&set, &mut rng);
        let mut got: Vec<f64> = r.particles.iter().map(|p| p[0]).collect();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn resample_preserves_weighted_mean_within_mc_error() {
        let set = set_with_weights(&[0.0, 1.0, 2.0, 5.0, -3.0], &[0.4, 0.2, 0.2, 0.1, 0.1]);
        let mean = set.weighted_mean()[0];
        let var: f64 = set
            .particles
            .iter()
            .zip(set.weights())
            .map(|(p, w)| w * (p[0] - mean) * (p[0] - mean))
            .sum();
        let n_seeds = 200;
        let mut grand = 0.0;
        for seed in 0..n_seeds {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            grand += resample(&set, &mut rng).weighted_mean()[0];
        }
        grand /= n_seeds as f64;
        let tol = 3.0 * (var / set.len() as f64).sqrt() / (n_seeds as f64).sqrt();
        assert_abs_diff_eq!(grand, mean, epsilon = tol.max(1e-3));
    }

    #[test]
    fn sir_step_is_deterministic_under_seed() {
        let model = LinearGaussianModel::scalar(1.0, 0.3, 1, 1.0, 0.5).unwrap();
        let prior =
            GaussianDensity::new(vec1(0.0), DMatrix::from_vec(1, 1, vec![1.0]), "prior").unwrap();
        let mut init_rng = ChaCha12Rng::seed_from_u64(8);
        let set = ParticleSet::from_prior(&prior, 256, 0, &mut init_rng);
        let z = Measurement {
            node_id: 0,
            value: vec1(0.4),
            time_index: 1,
        };
        let a = sir_step(
            &set,
            std::slice::from_ref(&z),
            &model,
            &mut ChaCha12Rng::seed_from_u64(9),
            DEFAULT_ESS_FRACTION,
        )
        .unwrap();
        let b = sir_step(
            &set,
            std::slice::from_ref(&z),
            &model,
            &mut ChaCha12Rng::seed_from_u64(9),
            DEFAULT_ESS_FRACTION,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn normalization_invariant(raw in proptest::collection::vec(-30.0f64..5.0, 2..40)) {
            let particles = vec![vec1(0.0); raw.len()];
            let mut set = ParticleSet {
                particles,
                log_weights: raw,
                time_index: 0,
                kind: SetKind::Filtering,
            };
            set.normalize().unwrap();
            let total: f64 = set.weights().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-10);
        }
    }
}
