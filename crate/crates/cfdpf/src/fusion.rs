//! Consensus-based fusion of local filtering densities into the global
//! posterior.
//!
//! Every node runs a fusion filter targeting the network-wide posterior. The
//! target density factors into the product of all nodes' local *filtering*
//! densities divided by the product of their local *prediction* densities,
//! times the global transition term. Both products are computed without
//! central coordination: each node pushes its Gaussian summary into four
//! average-consensus states (filtering information, information-weighted
//! mean, and the prediction pair) and reconstructs the fused product from the
//! converged averages.
//!
//! Three proposal distributions are supported for the fusion filter's
//! particle draw, each paired with its matching weight update; the pairing is
//! carried inside [`ProposalSample`] so a mismatched update is
//! unrepresentable.
//!
//! The *modified* step fuses several buffered local steps in one update:
//! per-node products over the buffered steps feed one consensus exchange,
//! particles are propagated through the intervening transitions, and the
//! weight update divides the accumulated transition density by the fused
//! prediction product. With a buffer of one step it reduces exactly (bit for
//! bit under a shared stream) to the conventional step with the product
//! proposal.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::{run_consensus, ConsensusMatrix, ConsensusState};
use crate::error::{Error, Result};
use crate::linalg::{pd_project, spd_inverse, spd_solve, symmetrize, GaussianDensity};
use crate::par;
use crate::pf::{resample, GaussianSummary, ParticleSet, SetKind, SummaryKind};
use crate::ssm::{Model, State};

/// Eigenvalue floor (relative to the spectral radius) used when projecting an
/// indefinite proposal information matrix back to the PD cone.
pub const PD_PROJECTION_FLOOR: f64 = 1e-9;

/// Information-form product of Gaussian summaries:
/// `P = (sum P_l^{-1})^{-1}`, `mu = P sum P_l^{-1} mu_l`.
///
/// A single input is returned unchanged (no inversion round trip), which the
/// multi-step fusion relies on for exact single-step reduction.
pub fn gaussian_product(summaries: &[GaussianSummary]) -> Result<GaussianSummary> {
    let first = summaries
        .first()
        .ok_or_else(|| Error::shape("gaussian_product of empty list"))?;
    if summaries.len() == 1 {
        return Ok(first.clone());
    }
    let dim = first.mean.len();
    let mut info = DMatrix::zeros(dim, dim);
    let mut info_mean = DVector::zeros(dim);
    for s in summaries {
        if s.mean.len() != dim {
            return Err(Error::shape("gaussian_product dimension mismatch"));
        }
        let p_inv = spd_inverse(
            &s.covariance,
            &format!("gaussian_product input at node {}", s.node_id),
        )?;
        info_mean += &p_inv * &s.mean;
        info += p_inv;
    }
    let covariance = symmetrize(&spd_inverse(&info, "gaussian_product fused information")?);
    let mean = spd_solve(&info, &info_mean, "gaussian_product fused information")?;
    Ok(GaussianSummary {
        mean,
        covariance,
        kind: first.kind,
        node_id: first.node_id,
        time_index: summaries.iter().map(|s| s.time_index).max().unwrap(),
    })
}

/// Per-node result of the consensus computation of the two Gaussian products.
#[derive(Debug, Clone)]
pub struct FusedSummaries {
    /// Fused filtering product (mu, P).
    pub filtering: GaussianSummary,
    /// Fused prediction product (upsilon, R).
    pub prediction: GaussianSummary,
    /// Estimated `sum_l P_l^{-1}` (network size times the converged average).
    pub info_sum_filtering: DMatrix<f64>,
    /// Estimated `sum_l P_l^{-1} mu_l`.
    pub info_mean_filtering: DVector<f64>,
    /// Estimated `sum_l R_l^{-1}`.
    pub info_sum_prediction: DMatrix<f64>,
    /// Estimated `sum_l R_l^{-1} upsilon_l`.
    pub info_mean_prediction: DVector<f64>,
    pub node_id: usize,
    pub iterations_used: usize,
}

/// Consensus product run: per-node reconstructions plus the max-disagreement
/// trace of the filtering-information state.
#[derive(Debug, Clone)]
pub struct ConsensusProductRun {
    pub per_node: Vec<FusedSummaries>,
    pub disagreement: Vec<f64>,
}

/// Run the four average-consensus states (filtering information, weighted
/// mean, prediction information, weighted mean) for `budget` iterations and
/// reconstruct each node's fused filtering and prediction products.
pub fn consensus_product(
    local: &[(GaussianSummary, GaussianSummary)],
    u: &ConsensusMatrix,
    budget: usize,
) -> Result<ConsensusProductRun> {
    let n = local.len();
    if n == 0 || n != u.n_nodes() {
        return Err(Error::shape(format!(
            "{} summary pairs for a {}-node weight matrix",
            n,
            u.n_nodes()
        )));
    }
    let dim = local[0].0.mean.len();
    let mut c1 = Vec::with_capacity(n);
    let mut c2 = Vec::with_capacity(n);
    let mut c3 = Vec::with_capacity(n);
    let mut c4 = Vec::with_capacity(n);
    for (l, (filt, pred)) in local.iter().enumerate() {
        if filt.kind != SummaryKind::Filtering || pred.kind != SummaryKind::Prediction {
            return Err(Error::shape(format!(
                "node {l}: expected (filtering, prediction) summary pair"
            )));
        }
        let p_inv = spd_inverse(&filt.covariance, &format!("filtering covariance at node {l}"))?;
        let r_inv = spd_inverse(&pred.covariance, &format!("prediction covariance at node {l}"))?;
        c2.push(DMatrix::from_column_slice(
            dim,
            1,
            (&p_inv * &filt.mean).as_slice(),
        ));
        c4.push(DMatrix::from_column_slice(
            dim,
            1,
            (&r_inv * &pred.mean).as_slice(),
        ));
        c1.push(p_inv);
        c3.push(r_inv);
    }
    let run1 = run_consensus(&ConsensusState::new(c1)?, u, budget)?;
    let run2 = run_consensus(&ConsensusState::new(c2)?, u, budget)?;
    let run3 = run_consensus(&ConsensusState::new(c3)?, u, budget)?;
    let run4 = run_consensus(&ConsensusState::new(c4)?, u, budget)?;

    let nf = n as f64;
    let mut per_node = Vec::with_capacity(n);
    for l in 0..n {
        let avg1 = &run1.state.values[l];
        let avg3 = &run3.state.values[l];
        let x2 = DVector::from_column_slice(run2.state.values[l].as_slice());
        let x4 = DVector::from_column_slice(run4.state.values[l].as_slice());

        let p = symmetrize(&spd_inverse(avg1, &format!("fused filtering information at node {l}"))?)
            / nf;
        let mu = spd_solve(avg1, &x2, &format!("fused filtering information at node {l}"))?;
        let r = symmetrize(&spd_inverse(avg3, &format!("fused prediction information at node {l}"))?)
            / nf;
        let upsilon = spd_solve(avg3, &x4, &format!("fused prediction information at node {l}"))?;

        per_node.push(FusedSummaries {
            filtering: GaussianSummary {
                mean: mu,
                covariance: p,
                kind: SummaryKind::Filtering,
                node_id: l,
                time_index: local[l].0.time_index,
            },
            prediction: GaussianSummary {
                mean: upsilon,
                covariance: r,
                kind: SummaryKind::Prediction,
                node_id: l,
                time_index: local[l].1.time_index,
            },
            info_sum_filtering: avg1 * nf,
            info_mean_filtering: x2 * nf,
            info_sum_prediction: avg3 * nf,
            info_mean_prediction: x4 * nf,
            node_id: l,
            iterations_used: budget,
        })
    }
    Ok(ConsensusProductRun {
        per_node,
        disagreement: run1.disagreement,
    })
}

/// Which proposal distribution the fusion filter samples from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalKind {
    /// Transition prior: propagate the previous fusion particles.
    Sir,
    /// Fused filtering product `N(mu, P)`.
    Product,
    /// Per-node Gaussian approximation of the optimal proposal.
    OptimalGaussian,
}

/// Parameters of the proposal actually used for a draw. Produced by
/// [`propose`] and consumed by [`ff_weight_update`]; carrying the parameters
/// with the draw keeps proposal and weight update paired by construction.
#[derive(Debug, Clone)]
enum ProposalParams {
    Sir,
    Product,
    OptimalGaussian { density: GaussianDensity },
}

/// Particles drawn from a proposal plus what the weight update needs.
#[derive(Debug, Clone)]
pub struct ProposalSample {
    pub particles: Vec<State>,
    params: ProposalParams,
    /// Set when the optimal-Gaussian information matrix stayed unusable after
    /// PD projection and the draw fell back to the product proposal.
    pub fell_back: bool,
}

/// Per-node fusion filter state.
#[derive(Debug, Clone)]
pub struct FusionFilterState {
    /// Current particle approximation of the global posterior. During a step
    /// this is the one retained step of history: the transition densities in
    /// the weight update pair new particles with these by index.
    pub particles: ParticleSet,
    pub node_id: usize,
    /// Time index of the posterior the particles represent. May lag the
    /// local filters under constrained consensus schedules.
    pub fusion_time_index: usize,
}

impl FusionFilterState {
    pub fn init(
        prior: &GaussianDensity,
        n_particles: usize,
        node_id: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        FusionFilterState {
            particles: ParticleSet::from_prior(prior, n_particles, 0, rng),
            node_id,
            fusion_time_index: 0,
        }
    }

    pub fn estimate(&self) -> DVector<f64> {
        self.particles.weighted_mean()
    }
}

/// Draw fusion particles from the selected proposal.
pub fn propose(
    kind: ProposalKind,
    state: &FusionFilterState,
    fused: &FusedSummaries,
    local_pred: &GaussianSummary,
    model: &dyn Model,
    rng: &mut ChaCha12Rng,
) -> Result<ProposalSample> {
    let n = state.particles.len();
    match kind {
        ProposalKind::Sir => {
            let mut particles = Vec::with_capacity(n);
            for x in &state.particles.particles {
                particles.push(model.sample_transition(x, rng)?);
            }
            Ok(ProposalSample {
                particles,
                params: ProposalParams::Sir,
                fell_back: false,
            })
        }
        ProposalKind::Product => {
            let density = GaussianDensity::new(
                fused.filtering.mean.clone(),
                fused.filtering.covariance.clone(),
                "fused filtering product",
            )?;
            Ok(ProposalSample {
                particles: (0..n).map(|_| density.sample(rng)).collect(),
                params: ProposalParams::Product,
                fell_back: false,
            })
        }
        ProposalKind::OptimalGaussian => {
            match optimal_gaussian_density(fused, local_pred) {
                Ok(density) => Ok(ProposalSample {
                    particles: (0..n).map(|_| density.sample(rng)).collect(),
                    params: ProposalParams::OptimalGaussian { density },
                    fell_back: false,
                }),
                Err(_) => {
                    // indefinite beyond repair: fall back to the product
                    // proposal and record it
                    let density = GaussianDensity::new(
                        fused.filtering.mean.clone(),
                        fused.filtering.covariance.clone(),
                        "fused filtering product (fallback)",
                    )?;
                    Ok(ProposalSample {
                        particles: (0..n).map(|_| density.sample(rng)).collect(),
                        params: ProposalParams::Product,
                        fell_back: true,
                    })
                }
            }
        }
    }
}

/// Gaussian approximation of the optimal proposal at one node: information
/// `R_l^{-1} + sum_j P_j^{-1} - sum_j R_j^{-1}` (PD-projected when indefinite)
/// with the matching information-form mean.
fn optimal_gaussian_density(
    fused: &FusedSummaries,
    local_pred: &GaussianSummary,
) -> Result<GaussianDensity> {
    let l = fused.node_id;
    let r_inv = spd_inverse(
        &local_pred.covariance,
        &format!("local prediction covariance at node {l}"),
    )?;
    let lambda = symmetrize(&(&r_inv + &fused.info_sum_filtering - &fused.info_sum_prediction));
    let (lambda_pd, _clipped) = pd_project(&lambda, PD_PROJECTION_FLOOR)?;
    let cov = symmetrize(&spd_inverse(
        &lambda_pd,
        &format!("optimal proposal information at node {l}"),
    )?);
    let info_mean =
        &r_inv * &local_pred.mean + &fused.info_mean_filtering - &fused.info_mean_prediction;
    let mean = &cov * info_mean;
    GaussianDensity::new(mean, cov, &format!("optimal proposal at node {l}"))
}

/// Importance-weight update matching the proposal that produced `sample`.
///
/// Increments per particle (log domain):
/// - transition prior: `log N(x; mu, P) - log N(x; upsilon, R)`
/// - product:          `log p(x | x_prev) - log N(x; upsilon, R)`
/// - optimal Gaussian: `log N(x; mu, P) + log p(x | x_prev)
///    - log N(x; upsilon, R) - log q(x)`
///
/// Returns normalized log weights.
pub fn ff_weight_update(
    sample: &ProposalSample,
    prev: &ParticleSet,
    fused: &FusedSummaries,
    model: &dyn Model,
) -> Result<Vec<f64>> {
    let filt = GaussianDensity::new(
        fused.filtering.mean.clone(),
        fused.filtering.covariance.clone(),
        "fused filtering product",
    )?;
    let pred = GaussianDensity::new(
        fused.prediction.mean.clone(),
        fused.prediction.covariance.clone(),
        "fused prediction product",
    )?;
    let mut logw = Vec::with_capacity(sample.particles.len());
    for (i, x) in sample.particles.iter().enumerate() {
        let inc = match &sample.params {
            ProposalParams::Sir => filt.log_pdf(x) - pred.log_pdf(x),
            ProposalParams::Product => {
                model.transition_log_density(x, &prev.particles[i])? - pred.log_pdf(x)
            }
            ProposalParams::OptimalGaussian { density } => {
                filt.log_pdf(x) + model.transition_log_density(x, &prev.particles[i])?
                    - pred.log_pdf(x)
                    - density.log_pdf(x)
            }
        };
        logw.push(prev.log_weights[i] + inc);
    }
    normalize_or_diverge(logw, fused.node_id, prev.time_index + 1)
}

fn normalize_or_diverge(mut logw: Vec<f64>, node: usize, step: usize) -> Result<Vec<f64>> {
    let lse = crate::linalg::logsumexp(&logw);
    if !lse.is_finite() {
        return Err(Error::FusionDivergence { node, step });
    }
    for lw in &mut logw {
        *lw -= lse;
    }
    Ok(logw)
}

/// Per-node diagnostics of one fusion step.
#[derive(Debug, Clone)]
pub struct FusionStepDiagnostics {
    pub node_id: usize,
    pub ess_before_resample: f64,
    pub resampled: bool,
    pub proposal_fell_back: bool,
}

/// Outcome of advancing every node's fusion filter by one (or `m`) steps.
#[derive(Debug, Clone)]
pub struct FusionStepReport {
    pub fused: Vec<FusedSummaries>,
    pub consensus_disagreement: Vec<f64>,
    pub nodes: Vec<FusionStepDiagnostics>,
}

/// Advance every node's fusion filter by one step: consensus on the local
/// summary products, proposal draw, weight update, and resampling when the
/// effective sample size drops below `ess_fraction * n`.
///
/// All nodes consume a clone of `step_rng`: with fully converged consensus
/// their fused inputs coincide and so do their posteriors.
pub fn fusion_filter_step(
    states: &mut [FusionFilterState],
    local: &[(GaussianSummary, GaussianSummary)],
    u: &ConsensusMatrix,
    budget: usize,
    kind: ProposalKind,
    model: &dyn Model,
    step_rng: &ChaCha12Rng,
    ess_fraction: f64,
) -> Result<FusionStepReport> {
    let run = consensus_product(local, u, budget)?;
    let results = par::map_indexed(states.len(), |i| -> Result<_> {
        let mut rng = step_rng.clone();
        let fused = &run.per_node[i];
        let sample = propose(kind, &states[i], fused, &local[i].1, model, &mut rng)?;
        let logw = ff_weight_update(&sample, &states[i].particles, fused, model)?;
        let target_k = states[i].fusion_time_index + 1;
        Ok(finalize_node(
            sample,
            logw,
            target_k,
            states[i].node_id,
            ess_fraction,
            &mut rng,
        ))
    });
    apply_node_results(states, results, run, 1)
}

/// Advance every node's fusion filter by `m = history.len()` steps at once.
///
/// `history` holds, oldest first, the per-node (filtering, prediction)
/// summary pairs of the local steps being fused. Each node multiplies its own
/// summaries across the buffered steps, one consensus exchange fuses the
/// products across nodes, particles are propagated through the intervening
/// transitions, the final particle is drawn from the fused filtering product,
/// and the weight update applies the accumulated transition densities over
/// the fused prediction product.
pub fn modified_fusion_filter_step(
    states: &mut [FusionFilterState],
    history: &[Vec<(GaussianSummary, GaussianSummary)>],
    u: &ConsensusMatrix,
    budget: usize,
    max_lag: usize,
    model: &dyn Model,
    step_rng: &ChaCha12Rng,
    ess_fraction: f64,
) -> Result<FusionStepReport> {
    let m = history.len();
    if m == 0 {
        return Err(Error::InsufficientHistory { step: 0 });
    }
    if m > max_lag {
        return Err(Error::Config(format!(
            "fusing {m} steps exceeds the configured lag cap {max_lag}"
        )));
    }
    let n_nodes = states.len();
    for (offset, step_summaries) in history.iter().enumerate() {
        if step_summaries.len() != n_nodes {
            return Err(Error::InsufficientHistory {
                step: states.first().map_or(0, |s| s.fusion_time_index) + offset + 1,
            });
        }
    }
    // per-node product over the buffered steps
    let mut products = Vec::with_capacity(n_nodes);
    for l in 0..n_nodes {
        let filts: Vec<GaussianSummary> = history.iter().map(|h| h[l].0.clone()).collect();
        let preds: Vec<GaussianSummary> = history.iter().map(|h| h[l].1.clone()).collect();
        products.push((gaussian_product(&filts)?, gaussian_product(&preds)?));
    }
    let run = consensus_product(&products, u, budget)?;

    let results = par::map_indexed(n_nodes, |i| -> Result<_> {
        let mut rng = step_rng.clone();
        let fused = &run.per_node[i];
        let prev = &states[i].particles;
        let n = prev.len();

        // propagate through the intervening transitions, accumulating the
        // transition log densities
        let mut anchors = Vec::with_capacity(n);
        for x0 in &prev.particles {
            let mut x = x0.clone();
            let mut acc = 0.0;
            for _ in 0..m.saturating_sub(1) {
                let nx = model.sample_transition(&x, &mut rng)?;
                acc += model.transition_log_density(&nx, &x)?;
                x = nx;
            }
            anchors.push((x, acc));
        }
        // final draw from the fused filtering product
        let density = GaussianDensity::new(
            fused.filtering.mean.clone(),
            fused.filtering.covariance.clone(),
            "fused filtering product",
        )?;
        let particles: Vec<State> = (0..n).map(|_| density.sample(&mut rng)).collect();
        let pred_density = GaussianDensity::new(
            fused.prediction.mean.clone(),
            fused.prediction.covariance.clone(),
            "fused prediction product",
        )?;
        let target_k = states[i].fusion_time_index + m;
        let mut logw = Vec::with_capacity(n);
        for (idx, x) in particles.iter().enumerate() {
            let (anchor, acc) = &anchors[idx];
            let inc = (acc + model.transition_log_density(x, anchor)?) - pred_density.log_pdf(x);
            logw.push(prev.log_weights[idx] + inc);
        }
        let logw = normalize_or_diverge(logw, states[i].node_id, target_k)?;
        let sample = ProposalSample {
            particles,
            params: ProposalParams::Product,
            fell_back: false,
        };
        Ok(finalize_node(
            sample,
            logw,
            target_k,
            states[i].node_id,
            ess_fraction,
            &mut rng,
        ))
    });
    apply_node_results(states, results, run, m)
}

fn finalize_node(
    sample: ProposalSample,
    logw: Vec<f64>,
    target_k: usize,
    node_id: usize,
    ess_fraction: f64,
    rng: &mut ChaCha12Rng,
) -> (ParticleSet, FusionStepDiagnostics) {
    let mut set = ParticleSet {
        particles: sample.particles,
        log_weights: logw,
        time_index: target_k,
        kind: SetKind::Filtering,
    };
    let ess = set.ess();
    let resampled = ess < ess_fraction * set.len() as f64;
    if resampled {
        set = resample(&set, rng);
    }
    (
        set,
        FusionStepDiagnostics {
            node_id,
            ess_before_resample: ess,
            resampled,
            proposal_fell_back: sample.fell_back,
        },
    )
}

fn apply_node_results(
    states: &mut [FusionFilterState],
    results: Vec<Result<(ParticleSet, FusionStepDiagnostics)>>,
    run: ConsensusProductRun,
    m: usize,
) -> Result<FusionStepReport> {
    let mut nodes = Vec::with_capacity(states.len());
    for (state, result) in states.iter_mut().zip(results) {
        let (set, diag) = result?;
        state.particles = set;
        state.fusion_time_index += m;
        nodes.push(diag);
    }
    Ok(FusionStepReport {
        fused: run.per_node,
        consensus_disagreement: run.disagreement,
        nodes,
    })
}
