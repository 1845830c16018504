//! Posterior Cramér-Rao lower bound recursions.
//!
//! All variants share one Riccati-type core per step,
//! `core(J) = B22 - D21 (J + D11)^{-1} D12`, and differ only in the
//! measurement-information term added on top:
//!
//! - centralized:       `core(J) + sum_l I_l`
//! - per-node local:    `core(J_l) + I_l`
//! - local prediction:  `core(J_l)`
//! - exact distributed: `core(J) + sum_l (J_l(k+1) - J_l(k+1|k))`
//! - node-anchored approximation: `core(J_l) + sum_j (J_j(k+1) - J_j(k+1|k))`
//! - sum approximation: `sum_l (J_l(k+1) - J_l(k+1|k))` alone
//!
//! where `I_l` is node l's expected measurement information. Adding the
//! observation term after the core subtraction keeps the big process-noise
//! scale out of the small-information entries, so the distributed and
//! centralized routes agree to machine precision, not merely to the rounding
//! of their largest intermediate.
//!
//! Expectation blocks are either exact (linear models) or Monte-Carlo
//! averages of Jacobian products over sampled state trajectories.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{spd_inverse, symmetrize};
use crate::ssm::{Model, State};

/// Expectation blocks of the information recursions for additive-Gaussian
/// models. `D21 = D12^T` is implicit; `D22 = B22 + sum(obs_info)`.
#[derive(Debug, Clone)]
pub struct DBlocks {
    pub d11: DMatrix<f64>,
    pub d12: DMatrix<f64>,
    pub b22: DMatrix<f64>,
    /// Expected measurement information per node.
    pub obs_info: Vec<DMatrix<f64>>,
}

impl DBlocks {
    pub fn d21(&self) -> DMatrix<f64> {
        self.d12.transpose()
    }

    pub fn d22(&self) -> DMatrix<f64> {
        &self.b22 + self.total_obs_info()
    }

    pub fn total_obs_info(&self) -> DMatrix<f64> {
        let mut acc = DMatrix::zeros(self.b22.nrows(), self.b22.ncols());
        for info in &self.obs_info {
            acc += info;
        }
        acc
    }

    pub fn n_nodes(&self) -> usize {
        self.obs_info.len()
    }
}

/// How the expectation blocks are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectationMode {
    /// Constant Jacobians (linear models): any single sample is exact.
    ClosedFormGaussian,
    /// Average Jacobian products over sampled state trajectories.
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ExpectationConfig {
    pub n_trajectories: usize,
    pub seed: u64,
    pub mode: ExpectationMode,
}

impl Default for ExpectationConfig {
    fn default() -> Self {
        ExpectationConfig {
            n_trajectories: 200,
            seed: 0,
            mode: ExpectationMode::MonteCarlo,
        }
    }
}

/// Expectation blocks for additive-Gaussian noise:
/// `D11 = E[F^T Q^{-1} F]`, `D12 = -E[F^T] Q^{-1}`, `B22 = Q^{-1}`, and per
/// node `I_l = E[G_l^T R_l^{-1} G_l]`, with `F`/`G_l` the transition and
/// observation Jacobians. `samples_now` feeds the transition terms,
/// `samples_next` the measurement terms.
pub fn d_blocks_gaussian(
    model: &dyn Model,
    samples_now: &[State],
    samples_next: &[State],
) -> Result<DBlocks> {
    let q = model
        .process_noise_cov()
        .ok_or_else(|| Error::Config("model has no additive-Gaussian process noise".into()))?;
    let q_inv = spd_inverse(&q, "process noise covariance")?;
    let dim = q.nrows();
    if samples_now.is_empty() || samples_next.is_empty() {
        return Err(Error::Config("need at least one state sample".into()));
    }

    let mut d11 = DMatrix::zeros(dim, dim);
    let mut f_mean = DMatrix::zeros(dim, dim);
    for x in samples_now {
        let f = model.transition_jacobian(x)?;
        d11 += f.transpose() * &q_inv * &f;
        f_mean += f;
    }
    let n_now = samples_now.len() as f64;
    d11 = symmetrize(&(d11 / n_now));
    f_mean /= n_now;
    let d12 = -(f_mean.transpose() * &q_inv);

    let mut obs_info = vec![DMatrix::zeros(dim, dim); model.num_nodes()];
    for x in samples_next {
        for (node, slot) in obs_info.iter_mut().enumerate() {
            let g = model.observation_jacobian(node, x)?;
            let r = model
                .obs_noise_cov(node, x)
                .ok_or_else(|| Error::Config("model has no Gaussian observation noise".into()))?;
            let r_inv = spd_inverse(&r, "observation noise covariance")?;
            *slot += g.transpose() * r_inv * g;
        }
    }
    let n_next = samples_next.len() as f64;
    for slot in &mut obs_info {
        *slot = symmetrize(&(slot.clone() / n_next));
    }

    Ok(DBlocks {
        d11,
        d12,
        b22: q_inv,
        obs_info,
    })
}

/// Shared Riccati core: `B22 - D21 (J + D11)^{-1} D12`, symmetrized.
pub fn riccati_core(j: &DMatrix<f64>, blocks: &DBlocks) -> Result<DMatrix<f64>> {
    let m = j + &blocks.d11;
    let inv = spd_inverse(&m, "J + D11")?;
    Ok(symmetrize(&(&blocks.b22 - blocks.d21() * inv * &blocks.d12)))
}

/// Centralized information recursion: the fusion-center bound.
pub fn centralized_fim_step(j: &DMatrix<f64>, blocks: &DBlocks) -> Result<DMatrix<f64>> {
    Ok(symmetrize(&(riccati_core(j, blocks)? + blocks.total_obs_info())))
}

/// Local information recursion at one node: only that node's measurement
/// information enters.
pub fn local_fim_step(j_l: &DMatrix<f64>, blocks: &DBlocks, node: usize) -> Result<DMatrix<f64>> {
    Ok(symmetrize(&(riccati_core(j_l, blocks)? + &blocks.obs_info[node])))
}

/// Local prediction information recursion: the same core with no measurement
/// term.
pub fn local_prediction_fim_step(j_l: &DMatrix<f64>, blocks: &DBlocks) -> Result<DMatrix<f64>> {
    riccati_core(j_l, blocks)
}

/// Sum of per-node (filtering - prediction) information differences.
fn local_info_differences(
    local_fims_next: &[DMatrix<f64>],
    local_pred_fims_next: &[DMatrix<f64>],
) -> Result<DMatrix<f64>> {
    if local_fims_next.is_empty() || local_fims_next.len() != local_pred_fims_next.len() {
        return Err(Error::shape(
            "need matching per-node filtering and prediction information lists",
        ));
    }
    let dim = local_fims_next[0].nrows();
    let mut acc = DMatrix::zeros(dim, dim);
    for (f, p) in local_fims_next.iter().zip(local_pred_fims_next) {
        acc += f - p;
    }
    Ok(acc)
}

/// Distributed-architecture replacement for the centralized measurement term:
/// `C22 = sum_l (J_l(k+1) - J_l(k+1|k)) + B22`.
pub fn c22(
    local_fims_next: &[DMatrix<f64>],
    local_pred_fims_next: &[DMatrix<f64>],
    blocks: &DBlocks,
) -> Result<DMatrix<f64>> {
    Ok(local_info_differences(local_fims_next, local_pred_fims_next)? + &blocks.b22)
}

/// Exact distributed information recursion: the global bound rebuilt from the
/// per-node local and prediction information chains.
pub fn distributed_fim_step(
    j: &DMatrix<f64>,
    local_fims_next: &[DMatrix<f64>],
    local_pred_fims_next: &[DMatrix<f64>],
    blocks: &DBlocks,
) -> Result<DMatrix<f64>> {
    let diffs = local_info_differences(local_fims_next, local_pred_fims_next)?;
    Ok(symmetrize(&(riccati_core(j, blocks)? + diffs)))
}

/// Node-anchored approximate recursion: like the exact one but propagating
/// the chosen node's previous local information instead of the global one.
/// Node dependent by construction; kept for comparison plots.
pub fn approx_fim_tharmarasa(
    j_l_prev: &DMatrix<f64>,
    local_fims_next: &[DMatrix<f64>],
    local_pred_fims_next: &[DMatrix<f64>],
    blocks: &DBlocks,
) -> Result<DMatrix<f64>> {
    let diffs = local_info_differences(local_fims_next, local_pred_fims_next)?;
    Ok(symmetrize(&(riccati_core(j_l_prev, blocks)? + diffs)))
}

/// Sum approximation: drops both the process term and the propagated global
/// information, keeping only the per-node information differences.
pub fn approx_fim_sum(
    local_fims_next: &[DMatrix<f64>],
    local_pred_fims_next: &[DMatrix<f64>],
) -> Result<DMatrix<f64>> {
    Ok(symmetrize(&local_info_differences(
        local_fims_next,
        local_pred_fims_next,
    )?))
}

/// RMS position bound: `sqrt(trace of J^{-1} restricted to position_indices)`.
pub fn pcrlb_position_bound(j: &DMatrix<f64>, position_indices: &[usize]) -> Result<f64> {
    let cov = spd_inverse(j, "information matrix")?;
    let mut acc = 0.0;
    for &i in position_indices {
        if i >= cov.nrows() {
            return Err(Error::shape(format!("position index {i} out of range")));
        }
        acc += cov[(i, i)];
    }
    Ok(acc.sqrt())
}

/// Bound variants the runner can emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundVariant {
    /// Centralized recursion.
    Central,
    /// Exact distributed recursion.
    Exact,
    /// Node-anchored approximation.
    Tharmarasa,
    /// Information-difference sum approximation.
    Sum,
}

impl BoundVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            BoundVariant::Central => "central",
            BoundVariant::Exact => "exact",
            BoundVariant::Tharmarasa => "tharmarasa",
            BoundVariant::Sum => "sum",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "central" => Ok(BoundVariant::Central),
            "exact" => Ok(BoundVariant::Exact),
            "tharmarasa" => Ok(BoundVariant::Tharmarasa),
            "sum" => Ok(BoundVariant::Sum),
            other => Err(Error::Config(format!("unknown bound variant '{other}'"))),
        }
    }
}

/// One bound variant's trajectory over time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundSeries {
    pub variant: BoundVariant,
    /// RMS position bound per step, k = 1..=n_steps.
    pub position_bound: Vec<f64>,
    /// Full information matrix per step, row-major.
    pub fim: Vec<Vec<f64>>,
}

/// All requested bound series computed in one pass over shared blocks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundLog {
    pub n_steps: usize,
    pub state_dim: usize,
    pub series: Vec<BoundSeries>,
}

/// Run every requested recursion over the supplied state trajectories.
///
/// `trajectories[t][k]` is trajectory `t` at step `k` (including k = 0), so
/// step `k`'s blocks average the transition Jacobians at `k` and the
/// measurement Jacobians at `k+1`. All variants share the same blocks, so
/// their comparison carries no sampling noise.
pub fn compute_bounds(
    model: &dyn Model,
    j0: &DMatrix<f64>,
    trajectories: &[Vec<State>],
    n_steps: usize,
    variants: &[BoundVariant],
    anchor_node: usize,
    position_indices: &[usize],
) -> Result<BoundLog> {
    if trajectories.is_empty() {
        return Err(Error::Config("need at least one trajectory".into()));
    }
    if trajectories.iter().any(|t| t.len() < n_steps + 1) {
        return Err(Error::Config("trajectories shorter than n_steps".into()));
    }
    let n_nodes = model.num_nodes();
    if anchor_node >= n_nodes {
        return Err(Error::Config(format!(
            "anchor node {anchor_node} out of range for {n_nodes} nodes"
        )));
    }
    let dim = model.state_dim();

    let mut j_central = j0.clone();
    let mut j_exact = j0.clone();
    let mut j_locals = vec![j0.clone(); n_nodes];

    let mut series: Vec<BoundSeries> = variants
        .iter()
        .map(|&variant| BoundSeries {
            variant,
            position_bound: Vec::with_capacity(n_steps),
            fim: Vec::with_capacity(n_steps),
        })
        .collect();

    let mut samples_now: Vec<State> = Vec::with_capacity(trajectories.len());
    let mut samples_next: Vec<State> = Vec::with_capacity(trajectories.len());
    for k in 0..n_steps {
        samples_now.clear();
        samples_next.clear();
        for t in trajectories {
            samples_now.push(t[k].clone());
            samples_next.push(t[k + 1].clone());
        }
        let blocks = d_blocks_gaussian(model, &samples_now, &samples_next)?;

        // advance the per-node chains; filtering and prediction share the core
        let mut locals_next = Vec::with_capacity(n_nodes);
        let mut preds_next = Vec::with_capacity(n_nodes);
        for (l, j_l) in j_locals.iter().enumerate() {
            let core = riccati_core(j_l, &blocks)?;
            locals_next.push(symmetrize(&(&core + &blocks.obs_info[l])));
            preds_next.push(core);
        }
        let anchor_prev = j_locals[anchor_node].clone();

        let central_next = centralized_fim_step(&j_central, &blocks)?;
        let exact_next = distributed_fim_step(&j_exact, &locals_next, &preds_next, &blocks)?;

        for s in series.iter_mut() {
            let j = match s.variant {
                BoundVariant::Central => central_next.clone(),
                BoundVariant::Exact => exact_next.clone(),
                BoundVariant::Tharmarasa => {
                    approx_fim_tharmarasa(&anchor_prev, &locals_next, &preds_next, &blocks)?
                }
                BoundVariant::Sum => approx_fim_sum(&locals_next, &preds_next)?,
            };
            s.position_bound
                .push(pcrlb_position_bound(&j, position_indices)?);
            s.fim.push(j.as_slice().to_vec());
        }

        j_central = central_next;
        j_exact = exact_next;
        j_locals = locals_next;
    }

    Ok(BoundLog {
        n_steps,
        state_dim: dim,
        series,
    })
}

/// Prior information matrix from a diagonal covariance.
pub fn prior_information(init_cov_diag: &[f64]) -> Result<DMatrix<f64>> {
    if init_cov_diag.iter().any(|&v| v <= 0.0) {
        return Err(Error::Config("initial covariance must be positive".into()));
    }
    Ok(DMatrix::from_diagonal(&DVector::from_iterator(
        init_cov_diag.len(),
        init_cov_diag.iter().map(|v| 1.0 / v),
    )))
}
