//! Scenario execution: one seeded run simulates the truth and measurements
//! once, then drives the centralized filter, the per-node local filters, the
//! fusion filters under the multi-rate schedule, and the stand-alone
//! single-node baseline over the identical measurement realization.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::config::{ScenarioConfig, ScenarioKind};
use super::schedule::{schedule_multirate, FusionMode, FusionUpdate, ScheduleTrace};
use crate::consensus::{metropolis_weights, ConsensusMatrix};
use crate::error::{Error, Result};
use crate::fusion::{
    fusion_filter_step, modified_fusion_filter_step, FusionFilterState, FusionStepReport,
};
use crate::kalman::{kalman_step, KalmanState};
use crate::linalg::GaussianDensity;
use crate::par;
use crate::pf::{
    measurement_update, resample, sample_prediction, sir_step, GaussianSummary, ParticleSet,
};
use crate::rng::{derive, stream};
use crate::ssm::{LinearGaussianModel, Measurement, Model, State};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct DivergenceRecord {
    pub method: String,
    pub node: Option<usize>,
    pub step: usize,
}

/// Everything one seeded run produced, serializable as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLog {
    pub run_index: usize,
    pub n_steps: usize,
    pub state_dim: usize,
    /// True states, k = 0..=n_steps.
    pub truth: Vec<Vec<f64>>,
    /// Centralized filter means, k = 1..=n_steps.
    pub centralized: Vec<Vec<f64>>,
    /// Stand-alone single-node filter means, k = 1..=n_steps.
    pub standalone: Vec<Vec<f64>>,
    /// Exact Kalman means on the linear scenario, k = 1..=n_steps.
    pub kalman: Option<Vec<Vec<f64>>>,
    /// Local filter means, `[k-1][node]`.
    pub local_estimates: Vec<Vec<Vec<f64>>>,
    /// Fused means per node where an update produced step k, `[k-1][node]`.
    pub fused_estimates: Vec<Vec<Option<Vec<f64>>>>,
    /// Node-averaged fused mean per step.
    pub fused_mean: Vec<Option<Vec<f64>>>,
    /// Node-averaged per-coordinate Monte-Carlo standard error of the fused
    /// mean (posterior spread over the effective sample size).
    pub fused_se: Vec<Option<Vec<f64>>>,
    /// Staleness after each tick.
    pub lag_per_tick: Vec<usize>,
    /// Backlog snapshots at burst starts.
    pub burst_lags: Vec<usize>,
    /// Step counts of completed fusion updates, completion order.
    pub update_sizes: Vec<usize>,
    /// Final consensus disagreement of each completed update.
    pub consensus_final_disagreement: Vec<f64>,
    /// Per-node SNR in dB per step (angle scenarios only), `[k-1][node]`.
    pub snr_db: Vec<Vec<f64>>,
    pub measurement_hash: String,
    pub divergences: Vec<DivergenceRecord>,
    pub proposal_fallbacks: usize,
}

impl RunLog {
    pub fn max_update_size(&self) -> usize {
        self.update_sizes.iter().copied().max().unwrap_or(0)
    }
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn hash_measurements(measurements: &[Vec<Measurement>]) -> String {
    let mut bytes = Vec::new();
    for step in measurements {
        for z in step {
            bytes.extend_from_slice(&(z.time_index as u64).to_le_bytes());
            bytes.extend_from_slice(&(z.node_id as u64).to_le_bytes());
            for v in z.value.iter() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
    }
    format!("{:016x}", fnv1a(bytes))
}

fn to_vec(x: &DVector<f64>) -> Vec<f64> {
    x.iter().copied().collect()
}

/// One filter plus its divergence bookkeeping.
struct TrackedFilter {
    set: ParticleSet,
    diverged_at: Option<usize>,
}

impl TrackedFilter {
    fn new(set: ParticleSet) -> Self {
        TrackedFilter {
            set,
            diverged_at: None,
        }
    }
}

/// Run the configured scenario once with run index 0.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunLog> {
    cfg.validate()?;
    let graph = cfg.build_graph()?;
    let u = metropolis_weights(&graph);
    let (model, x0) = cfg.build_model(&graph)?;
    run_one(cfg, model.as_ref(), &x0, &u, 0)
}

/// Run one seeded realization. All random streams derive from
/// `(cfg.seed, run_index)`, so runs are independent and reproducible.
pub fn run_one(
    cfg: &ScenarioConfig,
    model: &dyn Model,
    x0: &State,
    u: &ConsensusMatrix,
    run_index: usize,
) -> Result<RunLog> {
    let n = cfg.n_steps;
    let n_nodes = cfg.n_nodes;
    let dim = model.state_dim();
    let run = run_index as u64;
    let mut divergences: Vec<DivergenceRecord> = Vec::new();

    // --- truth and the single measurement realization ------------------
    let mut truth: Vec<State> = Vec::with_capacity(n + 1);
    truth.push(x0.clone());
    {
        let mut rng = derive(cfg.seed, &[stream::TRUTH, run]);
        for _ in 1..=n {
            let next = model.sample_transition(truth.last().unwrap(), &mut rng)?;
            truth.push(next);
        }
    }
    let mut measurements: Vec<Vec<Measurement>> = Vec::with_capacity(n);
    {
        let mut rng = derive(cfg.seed, &[stream::MEASUREMENT, run]);
        for k in 1..=n {
            let mut step = Vec::with_capacity(n_nodes);
            for l in 0..n_nodes {
                step.push(model.sample_observation(l, &truth[k], k, &mut rng)?);
            }
            measurements.push(step);
        }
    }
    let measurement_hash = hash_measurements(&measurements);

    // --- filter initialization around the true initial state ------------
    let prior_cov = DMatrix::from_diagonal(&DVector::from_vec(cfg.init_cov_diag.clone()));
    let prior = GaussianDensity::new(x0.clone(), prior_cov, "initialization prior")?;

    let mut central = TrackedFilter::new(ParticleSet::from_prior(
        &prior,
        cfg.n_particles_central,
        0,
        &mut derive(cfg.seed, &[stream::INIT_CENTRAL, run]),
    ));
    let mut standalone = TrackedFilter::new(ParticleSet::from_prior(
        &prior,
        cfg.n_particles_central,
        0,
        &mut derive(cfg.seed, &[stream::INIT_STANDALONE, run]),
    ));
    let mut locals: Vec<TrackedFilter> = (0..n_nodes)
        .map(|l| {
            TrackedFilter::new(ParticleSet::from_prior(
                &prior,
                cfg.n_particles_local,
                0,
                &mut derive(cfg.seed, &[stream::INIT_LOCAL, run, l as u64]),
            ))
        })
        .collect();
    // fusion filters share one seed: identical fused inputs give identical
    // posteriors across nodes
    let mut fusion_states: Vec<FusionFilterState> = (0..n_nodes)
        .map(|l| {
            FusionFilterState::init(
                &prior,
                cfg.n_particles_fusion,
                l,
                &mut derive(cfg.seed, &[stream::INIT_FUSION, run]),
            )
        })
        .collect();
    let mut fusion_dead = false;

    // Kalman baseline on the linear scenario
    let linear_model: Option<LinearGaussianModel> = match cfg.scenario {
        ScenarioKind::LinearTest => {
            let graphless = cfg.linear.as_ref().expect("validated");
            let d = graphless.initial_state.len();
            Some(LinearGaussianModel::new(
                DMatrix::from_row_iterator(d, d, graphless.f.iter().flatten().copied()),
                DMatrix::from_row_iterator(d, d, graphless.q.iter().flatten().copied()),
                graphless
                    .h_per_node
                    .iter()
                    .map(|h| DMatrix::from_row_iterator(h.len(), d, h.iter().flatten().copied()))
                    .collect(),
                graphless
                    .r_per_node
                    .iter()
                    .map(|r| DMatrix::from_row_iterator(r.len(), r.len(), r.iter().flatten().copied()))
                    .collect(),
            )?)
        }
        _ => None,
    };
    let mut kalman_state = linear_model.as_ref().map(|_| KalmanState {
        mean: x0.clone(),
        covariance: DMatrix::from_diagonal(&DVector::from_vec(cfg.init_cov_diag.clone())),
    });

    // --- schedule ------------------------------------------------------
    let trace: ScheduleTrace = schedule_multirate(&cfg.schedule, n);
    let mut updates_by_tick: BTreeMap<usize, Vec<FusionUpdate>> = BTreeMap::new();
    for upd in &trace.updates {
        updates_by_tick.entry(upd.complete_tick).or_default().push(*upd);
    }

    // --- logs ----------------------------------------------------------
    let mut centralized_log = Vec::with_capacity(n);
    let mut standalone_log = Vec::with_capacity(n);
    let mut kalman_log = linear_model.as_ref().map(|_| Vec::with_capacity(n));
    let mut local_log: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n);
    let mut fused_estimates: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; n_nodes]; n];
    let mut fused_mean: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut fused_se: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut update_sizes = Vec::new();
    let mut consensus_final_disagreement = Vec::new();
    let mut snr_db: Vec<Vec<f64>> = Vec::new();
    let mut proposal_fallbacks = 0usize;

    // per-step local summaries, `[k-1][node] -> (filtering, prediction)`
    let mut summaries: Vec<Vec<(GaussianSummary, GaussianSummary)>> = Vec::with_capacity(n);

    let mut execute_update = |upd: &FusionUpdate,
                              fusion_states: &mut Vec<FusionFilterState>,
                              summaries: &[Vec<(GaussianSummary, GaussianSummary)>],
                              divergences: &mut Vec<DivergenceRecord>,
                              fusion_dead: &mut bool|
     -> Result<()> {
        if *fusion_dead {
            return Ok(());
        }
        let target = upd.from_k + upd.m;
        let step_rng = derive(cfg.seed, &[stream::FUSION_STEP, run, target as u64]);
        let history: Vec<Vec<(GaussianSummary, GaussianSummary)>> = (upd.from_k + 1..=target)
            .map(|kk| summaries[kk - 1].clone())
            .collect();
        let outcome: Result<FusionStepReport> = match cfg.schedule.mode {
            FusionMode::Conventional => fusion_filter_step(
                fusion_states,
                &history[0],
                u,
                cfg.schedule.consensus_budget,
                cfg.proposal,
                model,
                &step_rng,
                cfg.ess_fraction,
            ),
            FusionMode::Modified => modified_fusion_filter_step(
                fusion_states,
                &history,
                u,
                cfg.schedule.consensus_budget,
                cfg.schedule.max_lag,
                model,
                &step_rng,
                cfg.ess_fraction,
            ),
        };
        match outcome {
            Ok(report) => {
                let mut mean_acc: DVector<f64> = DVector::zeros(dim);
                let mut se_acc: DVector<f64> = DVector::zeros(dim);
                for (l, state) in fusion_states.iter().enumerate() {
                    let est = state.estimate();
                    fused_estimates[target - 1][l] = Some(to_vec(&est));
                    let ess = state.particles.ess();
                    let mut var: DVector<f64> = DVector::zeros(dim);
                    for (x, lw) in state
                        .particles
                        .particles
                        .iter()
                        .zip(&state.particles.log_weights)
                    {
                        let d = x - &est;
                        for i in 0..dim {
                            var[i] += lw.exp() * d[i] * d[i];
                        }
                    }
                    for i in 0..dim {
                        se_acc[i] += (var[i] / ess).sqrt();
                    }
                    mean_acc += est;
                }
                fused_mean[target - 1] = Some(to_vec(&(&mean_acc / n_nodes as f64)));
                fused_se[target - 1] = Some(to_vec(&(&se_acc / n_nodes as f64)));
                update_sizes.push(upd.m);
                consensus_final_disagreement
                    .push(report.consensus_disagreement.last().copied().unwrap_or(0.0));
                proposal_fallbacks += report
                    .nodes
                    .iter()
                    .filter(|d| d.proposal_fell_back)
                    .count();
                Ok(())
            }
            Err(Error::FusionDivergence { node, step }) => {
                divergences.push(DivergenceRecord {
                    method: "fusion".into(),
                    node: Some(node),
                    step,
                });
                *fusion_dead = true;
                Ok(())
            }
            Err(e) => Err(e),
        }
    };

    // --- main loop over observation ticks --------------------------------
    for k in 1..=n {
        let step_measurements = &measurements[k - 1];

        // centralized filter on all nodes' measurements
        if central.diverged_at.is_none() {
            let mut rng = derive(cfg.seed, &[stream::CENTRAL_STEP, run, k as u64]);
            match sir_step(&central.set, step_measurements, model, &mut rng, cfg.ess_fraction) {
                Ok(set) => central.set = set,
                Err(Error::FilterDivergence { .. }) => {
                    central.diverged_at = Some(k);
                    divergences.push(DivergenceRecord {
                        method: "centralized".into(),
                        node: None,
                        step: k,
                    });
                }
                Err(e) => return Err(e),
            }
        }
        centralized_log.push(to_vec(&central.set.weighted_mean()));

        // stand-alone single-node baseline
        if standalone.diverged_at.is_none() {
            let mut rng = derive(cfg.seed, &[stream::STANDALONE_STEP, run, k as u64]);
            let z = std::slice::from_ref(&step_measurements[cfg.standalone_node]);
            match sir_step(&standalone.set, z, model, &mut rng, cfg.ess_fraction) {
                Ok(set) => standalone.set = set,
                Err(Error::FilterDivergence { .. }) => {
                    standalone.diverged_at = Some(k);
                    divergences.push(DivergenceRecord {
                        method: "standalone".into(),
                        node: Some(cfg.standalone_node),
                        step: k,
                    });
                }
                Err(e) => return Err(e),
            }
        }
        standalone_log.push(to_vec(&standalone.set.weighted_mean()));

        // exact Kalman baseline (linear scenario)
        if let (Some(lm), Some(ks)) = (linear_model.as_ref(), kalman_state.as_mut()) {
            *ks = kalman_step(lm, ks, step_measurements)?;
            kalman_log.as_mut().unwrap().push(to_vec(&ks.mean));
        }

        // local filters: prediction summary, measurement update, filtering
        // summary; a diverged update degrades to the unweighted prediction
        let local_results = par::map_indexed(n_nodes, |l| -> Result<_> {
            let mut rng = derive(cfg.seed, &[stream::LOCAL_STEP, run, l as u64, k as u64]);
            let prev = &locals[l].set;
            let predicted = sample_prediction(prev, model, &mut rng)?;
            let pred_summary = predicted.summarize(l);
            let z = std::slice::from_ref(&step_measurements[l]);
            match measurement_update(predicted.clone(), z, model) {
                Ok(mut updated) => {
                    if updated.ess() < cfg.ess_fraction * updated.len() as f64 {
                        updated = resample(&updated, &mut rng);
                    }
                    let filt_summary = updated.summarize(l);
                    Ok((updated, filt_summary, pred_summary, false))
                }
                Err(Error::FilterDivergence { .. }) => {
                    let mut fallback = predicted;
                    let count = fallback.len() as f64;
                    fallback.log_weights = vec![-count.ln(); fallback.len()];
                    fallback.kind = crate::pf::SetKind::Filtering;
                    let filt_summary = fallback.summarize(l);
                    Ok((fallback, filt_summary, pred_summary, true))
                }
                Err(e) => Err(e),
            }
        });
        let mut step_summaries = Vec::with_capacity(n_nodes);
        let mut step_locals = Vec::with_capacity(n_nodes);
        for (l, res) in local_results.into_iter().enumerate() {
            let (set, filt_summary, pred_summary, diverged) = res?;
            if diverged && locals[l].diverged_at.is_none() {
                locals[l].diverged_at = Some(k);
                divergences.push(DivergenceRecord {
                    method: "local".into(),
                    node: Some(l),
                    step: k,
                });
            }
            step_locals.push(to_vec(&set.weighted_mean()));
            locals[l].set = set;
            step_summaries.push((filt_summary, pred_summary));
        }
        local_log.push(step_locals);
        summaries.push(step_summaries);

        // SNR diagnostics for the angle scenarios
        if matches!(cfg.scenario, ScenarioKind::Bot | ScenarioKind::Unicycle) {
            let signal = std::f64::consts::PI.powi(2) / 3.0;
            snr_db.push(
                (0..n_nodes)
                    .map(|l| {
                        let s2 = model.obs_noise_cov(l, &truth[k]).expect("angle models")[(0, 0)];
                        10.0 * (signal / s2).log10()
                    })
                    .collect(),
            );
        }

        // fusion updates whose budget filled before this tick
        if let Some(upds) = updates_by_tick.remove(&k) {
            for upd in upds {
                execute_update(
                    &upd,
                    &mut fusion_states,
                    &summaries,
                    &mut divergences,
                    &mut fusion_dead,
                )?;
            }
        }
    }

    // drain updates completing after the last observation tick
    for (_tick, upds) in updates_by_tick {
        for upd in upds {
            execute_update(
                &upd,
                &mut fusion_states,
                &summaries,
                &mut divergences,
                &mut fusion_dead,
            )?;
        }
    }

    Ok(RunLog {
        run_index,
        n_steps: n,
        state_dim: dim,
        truth: truth.iter().map(to_vec).collect(),
        centralized: centralized_log,
        standalone: standalone_log,
        kalman: kalman_log,
        local_estimates: local_log,
        fused_estimates,
        fused_mean,
        fused_se,
        lag_per_tick: trace.lag_per_tick,
        burst_lags: trace.burst_lags,
        update_sizes,
        consensus_final_disagreement,
        snr_db,
        measurement_hash,
        divergences,
        proposal_fallbacks,
    })
}

/// Monte-Carlo batch: independent seeded runs over one shared network,
/// aggregated into the metric report. Runs execute in parallel under the
/// `parallel` feature; results are identical either way.
pub fn monte_carlo(cfg: &ScenarioConfig, runs: usize) -> Result<super::metrics::MetricReport> {
    if runs < 1 {
        return Err(Error::Config("need at least one run".into()));
    }
    cfg.validate()?;
    let graph = cfg.build_graph()?;
    let u = metropolis_weights(&graph);
    let (model, x0) = cfg.build_model(&graph)?;
    let results = par::map_indexed(runs, |r| run_one(cfg, model.as_ref(), &x0, &u, r));
    let mut logs = Vec::with_capacity(runs);
    let mut excluded = 0usize;
    for res in results {
        match res {
            Ok(log) if log.divergences.is_empty() => logs.push(log),
            Ok(_) => excluded += 1,
            Err(_) => excluded += 1,
        }
    }
    if logs.is_empty() {
        return Err(Error::Config(
            "every Monte-Carlo run diverged; nothing to aggregate".into(),
        ));
    }
    Ok(super::metrics::aggregate(cfg, &logs, runs, excluded))
}

/// Compute the configured bound variants for this scenario: simulate the
/// expectation trajectories from the initialization prior and run all
/// recursions over shared blocks.
pub fn pcrlb_bounds(
    cfg: &ScenarioConfig,
    variants: &[crate::pcrlb::BoundVariant],
) -> Result<crate::pcrlb::BoundLog> {
    cfg.validate()?;
    let graph = cfg.build_graph()?;
    let (model, x0) = cfg.build_model(&graph)?;
    let j0 = crate::pcrlb::prior_information(&cfg.init_cov_diag)?;
    let prior_cov = DMatrix::from_diagonal(&DVector::from_vec(cfg.init_cov_diag.clone()));
    let prior = GaussianDensity::new(x0.clone(), prior_cov, "initialization prior")?;

    let trajectories: Vec<Vec<State>> = match cfg.pcrlb.mode {
        crate::pcrlb::ExpectationMode::ClosedFormGaussian => {
            // constant Jacobians: the mean path is exact
            let mut path = Vec::with_capacity(cfg.n_steps + 1);
            path.push(x0.clone());
            for k in 0..cfg.n_steps {
                let next = model.transition_mean(&path[k])?;
                path.push(next);
            }
            vec![path]
        }
        crate::pcrlb::ExpectationMode::MonteCarlo => {
            let results = par::map_indexed(cfg.pcrlb.n_trajectories, |t| -> Result<Vec<State>> {
                let mut rng = derive(cfg.seed, &[stream::PCRLB_TRAJECTORY, t as u64]);
                let mut path = Vec::with_capacity(cfg.n_steps + 1);
                path.push(prior.sample(&mut rng));
                for k in 0..cfg.n_steps {
                    let next = model.sample_transition(&path[k], &mut rng)?;
                    path.push(next);
                }
                Ok(path)
            });
            results.into_iter().collect::<Result<Vec<_>>>()?
        }
    };

    crate::pcrlb::compute_bounds(
        model.as_ref(),
        &j0,
        &trajectories,
        cfg.n_steps,
        variants,
        cfg.pcrlb.anchor_node,
        &cfg.position_indices,
    )
}
