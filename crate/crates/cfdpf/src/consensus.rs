//! Network topology and average consensus.
//!
//! Nodes are placed uniformly in a square region and linked when within the
//! connectivity radius; regeneration repeats until the graph is connected.
//! Consensus runs synchronous rounds `X_l <- U_ll X_l + sum_j U_lj X_j` under
//! a doubly stochastic Metropolis weight matrix, whose second-largest
//! eigenvalue magnitude sets the asymptotic convergence time.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Undirected geometric network over a square region.
#[derive(Debug, Clone)]
pub struct NetworkGraph {
    n_nodes: usize,
    adjacency: Vec<Vec<bool>>,
    positions: Vec<(f64, f64)>,
    connectivity_radius: f64,
}

impl NetworkGraph {
    pub fn from_parts(
        positions: Vec<(f64, f64)>,
        adjacency: Vec<Vec<bool>>,
        connectivity_radius: f64,
    ) -> Result<Self> {
        let n = positions.len();
        if adjacency.len() != n || adjacency.iter().any(|row| row.len() != n) {
            return Err(Error::shape("adjacency must be n x n"));
        }
        for i in 0..n {
            if adjacency[i][i] {
                return Err(Error::Config("self-loops are not allowed".into()));
            }
            for j in 0..n {
                if adjacency[i][j] != adjacency[j][i] {
                    return Err(Error::Config("adjacency must be symmetric".into()));
                }
            }
        }
        let graph = NetworkGraph {
            n_nodes: n,
            adjacency,
            positions,
            connectivity_radius,
        };
        if !graph.is_connected() {
            return Err(Error::DisconnectedGraph { attempts: 0 });
        }
        Ok(graph)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn positions(&self) -> &[(f64, f64)] {
        &self.positions
    }

    pub fn connectivity_radius(&self) -> f64 {
        self.connectivity_radius
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i][j]
    }

    pub fn neighbors(&self, l: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency[l]
            .iter()
            .enumerate()
            .filter_map(|(j, &e)| e.then_some(j))
    }

    pub fn degree(&self, l: usize) -> usize {
        self.adjacency[l].iter().filter(|&&e| e).count()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n_nodes {
            for j in (i + 1)..self.n_nodes {
                if self.adjacency[i][j] {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        if self.n_nodes == 0 {
            return false;
        }
        let mut seen = vec![false; self.n_nodes];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for u in self.neighbors(v) {
                if !seen[u] {
                    seen[u] = true;
                    count += 1;
                    stack.push(u);
                }
            }
        }
        count == self.n_nodes
    }

    /// Complete graph on `n` nodes (positions on a circle, radius moot).
    pub fn complete(n: usize) -> Self {
        let positions = (0..n)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / n as f64;
                (a.cos(), a.sin())
            })
            .collect();
        let adjacency = (0..n)
            .map(|i| (0..n).map(|j| i != j).collect())
            .collect();
        NetworkGraph {
            n_nodes: n,
            adjacency,
            positions,
            connectivity_radius: f64::INFINITY,
        }
    }

    /// Path graph 0 - 1 - ... - (n-1); handy in tests.
    pub fn path(n: usize) -> Self {
        let positions = (0..n).map(|i| (i as f64, 0.0)).collect();
        let adjacency = (0..n)
            .map(|i| (0..n).map(|j| i.abs_diff(j) == 1).collect())
            .collect();
        NetworkGraph {
            n_nodes: n,
            adjacency,
            positions,
            connectivity_radius: 1.5,
        }
    }
}

/// Default connectivity radius `sqrt(2 ln(n) / n)` scaled to the region side.
pub fn default_connectivity_radius(n: usize, region_side: f64) -> f64 {
    (2.0 * (n as f64).ln() / n as f64).sqrt() * region_side
}

const GRAPH_RETRY_BUDGET: usize = 1000;

/// Uniform node placement in the `region_side` square with edges inside
/// `radius`; redraws positions until the graph is connected.
pub fn random_geometric_graph(
    n: usize,
    radius: f64,
    region_side: f64,
    rng: &mut ChaCha12Rng,
) -> Result<NetworkGraph> {
    if n < 2 {
        return Err(Error::Config("need at least 2 nodes".into()));
    }
    for _ in 0..GRAPH_RETRY_BUDGET {
        let positions: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random::<f64>() * region_side, rng.random::<f64>() * region_side))
            .collect();
        let adjacency: Vec<Vec<bool>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        if i == j {
                            return false;
                        }
                        let dx = positions[i].0 - positions[j].0;
                        let dy = positions[i].1 - positions[j].1;
                        (dx * dx + dy * dy).sqrt() <= radius
                    })
                    .collect()
            })
            .collect();
        let graph = NetworkGraph {
            n_nodes: n,
            adjacency,
            positions,
            connectivity_radius: radius,
        };
        if graph.is_connected() {
            return Ok(graph);
        }
    }
    Err(Error::DisconnectedGraph {
        attempts: GRAPH_RETRY_BUDGET,
    })
}

/// Doubly stochastic consensus weight matrix with spectral metadata.
#[derive(Debug, Clone)]
pub struct ConsensusMatrix {
    u: DMatrix<f64>,
    /// Eigenvalue magnitudes sorted descending (leading entry is 1).
    eigenvalue_moduli: Vec<f64>,
    convergence_time: f64,
}

impl ConsensusMatrix {
    pub fn from_matrix(u: DMatrix<f64>) -> Self {
        let eig = u.clone().symmetric_eigen();
        let mut moduli: Vec<f64> = eig.eigenvalues.iter().map(|l| l.abs()).collect();
        moduli.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let convergence_time = convergence_time_from_moduli(&moduli);
        ConsensusMatrix {
            u,
            eigenvalue_moduli: moduli,
            convergence_time,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn n_nodes(&self) -> usize {
        self.u.nrows()
    }

    pub fn eigenvalue_moduli(&self) -> &[f64] {
        &self.eigenvalue_moduli
    }

    /// Second-largest eigenvalue magnitude.
    pub fn lambda2(&self) -> f64 {
        self.eigenvalue_moduli.get(1).copied().unwrap_or(0.0)
    }

    /// Asymptotic number of iterations for the consensus error to shrink by
    /// 1/e; infinite when the spectral gap is closed.
    pub fn convergence_time(&self) -> f64 {
        self.convergence_time
    }
}

fn convergence_time_from_moduli(moduli: &[f64]) -> f64 {
    match moduli.get(1) {
        None => 0.0,
        Some(&l2) if l2 <= 0.0 => 0.0,
        Some(&l2) if l2 >= 1.0 => f64::INFINITY,
        Some(&l2) => -1.0 / l2.ln(),
    }
}

/// `-1 / log(max_{i >= 2} |lambda_i(U)|)`.
pub fn convergence_time(u: &ConsensusMatrix) -> f64 {
    u.convergence_time()
}

/// Metropolis weights: `U_lj = 1 / (1 + max(deg_l, deg_j))` on edges, with
/// the diagonal absorbing the remainder. Symmetric and doubly stochastic on
/// any undirected graph.
pub fn metropolis_weights(graph: &NetworkGraph) -> ConsensusMatrix {
    let n = graph.n_nodes();
    let mut u = DMatrix::zeros(n, n);
    for l in 0..n {
        let deg_l = graph.degree(l);
        let mut off_sum = 0.0;
        for j in graph.neighbors(l) {
            let w = 1.0 / (1.0 + deg_l.max(graph.degree(j)) as f64);
            u[(l, j)] = w;
            off_sum += w;
        }
        u[(l, l)] = 1.0 - off_sum;
    }
    ConsensusMatrix::from_matrix(u)
}

/// Per-node consensus values of one shared shape (scalars are 1x1 matrices,
/// vectors are n x 1).
#[derive(Debug, Clone)]
pub struct ConsensusState {
    pub values: Vec<DMatrix<f64>>,
}

impl ConsensusState {
    pub fn new(values: Vec<DMatrix<f64>>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::shape("consensus state needs at least one node"));
        }
        let (r, c) = (values[0].nrows(), values[0].ncols());
        if values.iter().any(|v| v.nrows() != r || v.ncols() != c) {
            return Err(Error::shape("all node values must share one shape"));
        }
        if values.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("consensus state"));
        }
        Ok(ConsensusState { values })
    }

    pub fn from_scalars(xs: &[f64]) -> Result<Self> {
        Self::new(xs.iter().map(|&x| DMatrix::from_vec(1, 1, vec![x])).collect())
    }

    pub fn mean(&self) -> DMatrix<f64> {
        let mut acc = DMatrix::zeros(self.values[0].nrows(), self.values[0].ncols());
        for v in &self.values {
            acc += v;
        }
        acc / self.values.len() as f64
    }

    /// Largest per-node Frobenius distance from the current network mean.
    pub fn max_disagreement(&self) -> f64 {
        let mean = self.mean();
        self.values
            .iter()
            .map(|v| (v - &mean).norm())
            .fold(0.0, f64::max)
    }
}

/// Outcome of a consensus run: the final state and the per-iteration
/// max-disagreement trace (entry 0 is the disagreement before any step).
#[derive(Debug, Clone)]
pub struct ConsensusRun {
    pub state: ConsensusState,
    pub disagreement: Vec<f64>,
}

/// Apply `iterations` synchronous consensus rounds. Node `l` only reads
/// values of itself and its neighbors (zero-weight entries contribute
/// nothing).
pub fn run_consensus(
    state: &ConsensusState,
    u: &ConsensusMatrix,
    iterations: usize,
) -> Result<ConsensusRun> {
    let n = u.n_nodes();
    if state.values.len() != n {
        return Err(Error::shape(format!(
            "state has {} nodes, weight matrix has {n}",
            state.values.len()
        )));
    }
    let mut current = state.values.clone();
    let mut trace = Vec::with_capacity(iterations + 1);
    trace.push(ConsensusState { values: current.clone() }.max_disagreement());
    let (r, c) = (current[0].nrows(), current[0].ncols());
    for _ in 0..iterations {
        let mut next = vec![DMatrix::zeros(r, c); n];
        for (l, slot) in next.iter_mut().enumerate() {
            let mut acc = &current[l] * u.matrix()[(l, l)];
            for j in 0..n {
                if j != l {
                    let w = u.matrix()[(l, j)];
                    if w != 0.0 {
                        acc += &current[j] * w;
                    }
                }
            }
            *slot = acc;
        }
        current = next;
        trace.push(ConsensusState { values: current.clone() }.max_disagreement());
    }
    Ok(ConsensusRun {
        state: ConsensusState { values: current },
        disagreement: trace,
    })
}

/// Serializable graph document (positions, edges, consensus weights) for
/// regression fixtures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphDocument {
    pub n_nodes: usize,
    pub connectivity_radius: f64,
    pub positions: Vec<(f64, f64)>,
    pub edges: Vec<(usize, usize)>,
    /// Nonzero weight entries `(l, j, u_lj)` including diagonals.
    pub weights: Vec<(usize, usize, f64)>,
}

impl GraphDocument {
    pub fn from_graph(graph: &NetworkGraph, u: &ConsensusMatrix) -> Self {
        let mut weights = Vec::new();
        for l in 0..graph.n_nodes() {
            for j in 0..graph.n_nodes() {
                let w = u.matrix()[(l, j)];
                if w != 0.0 {
                    weights.push((l, j, w));
                }
            }
        }
        GraphDocument {
            n_nodes: graph.n_nodes(),
            connectivity_radius: graph.connectivity_radius(),
            positions: graph.positions().to_vec(),
            edges: graph.edges(),
            weights,
        }
    }

    pub fn to_graph(&self) -> Result<NetworkGraph> {
        let n = self.n_nodes;
        let mut adjacency = vec![vec![false; n]; n];
        for &(i, j) in &self.edges {
            if i >= n || j >= n {
                return Err(Error::Config(format!("edge ({i}, {j}) out of range")));
            }
            adjacency[i][j] = true;
            adjacency[j][i] = true;
        }
        NetworkGraph::from_parts(self.positions.clone(), adjacency, self.connectivity_radius)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::SeedableRng;

    #[test]
    fn default_radius_formula() {
        let r = default_connectivity_radius(20, 16.0);
        assert_relative_eq!(r, (2.0 * 20f64.ln() / 20.0).sqrt() * 16.0, epsilon = 1e-12);
    }

    #[test]
    fn huge_radius_gives_complete_graph() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let side = 16.0;
        let g = random_geometric_graph(6, side * 2f64.sqrt(), side, &mut rng).unwrap();
        for i in 0..6 {
            assert_eq!(g.degree(i), 5);
        }
    }

    #[test]
    fn seeded_graph_is_reproducible() {
        let mk = || {
            let mut rng = ChaCha12Rng::seed_from_u64(77);
            random_geometric_graph(12, 6.0, 16.0, &mut rng).unwrap()
        };
        let a = mk();
        let b = mk();
        assert_eq!(a.edges(), b.edges());
        assert_eq!(a.positions(), b.positions());
        // regression snapshot of the seeded edge count
        assert_eq!(a.edges().len(), 24);
    }

    #[test]
    fn metropolis_on_complete_graph_is_uniform() {
        let g = NetworkGraph::complete(5);
        let u = metropolis_weights(&g);
        for i in 0..5 {
            for j in 0..5 {
                assert_relative_eq!(u.matrix()[(i, j)], 0.2, epsilon = 1e-15);
            }
        }
        assert_eq!(u.convergence_time(), 0.0);
    }

    #[test]
    fn metropolis_on_two_nodes() {
        let g = NetworkGraph::path(2);
        let u = metropolis_weights(&g);
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(u.matrix()[(i, j)], 0.5, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn metropolis_on_path_of_three_matches_hand_computation() {
        let g = NetworkGraph::path(3);
        let u = metropolis_weights(&g);
        let expected = DMatrix::from_row_slice(
            3,
            3,
            &[
                2.0 / 3.0, 1.0 / 3.0, 0.0, //
                1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, //
                0.0, 1.0 / 3.0, 2.0 / 3.0,
            ],
        );
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(u.matrix()[(i, j)], expected[(i, j)], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn metropolis_is_doubly_stochastic_and_local() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let g = random_geometric_graph(15, 7.0, 16.0, &mut rng).unwrap();
        let u = metropolis_weights(&g);
        for l in 0..15 {
            let row: f64 = (0..15).map(|j| u.matrix()[(l, j)]).sum();
            let col: f64 = (0..15).map(|j| u.matrix()[(j, l)]).sum();
            assert_abs_diff_eq!(row, 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(col, 1.0, epsilon = 1e-12);
            for j in 0..15 {
                if l != j && u.matrix()[(l, j)] != 0.0 {
                    assert!(g.has_edge(l, j));
                }
            }
        }
        assert!(u.eigenvalue_moduli().iter().all(|&m| m <= 1.0 + 1e-12));
    }

    #[test]
    fn complete_graph_averages_in_one_iteration() {
        let g = NetworkGraph::complete(4);
        let u = metropolis_weights(&g);
        let state = ConsensusState::from_scalars(&[1.0, 2.0, 3.0, 6.0]).unwrap();
        let run = run_consensus(&state, &u, 1).unwrap();
        for v in &run.state.values {
            assert_relative_eq!(v[(0, 0)], 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn equal_values_are_a_fixed_point() {
        let g = NetworkGraph::path(5);
        let u = metropolis_weights(&g);
        let state = ConsensusState::from_scalars(&[2.5; 5]).unwrap();
        let run = run_consensus(&state, &u, 13).unwrap();
        for v in &run.state.values {
            assert_relative_eq!(v[(0, 0)], 2.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn path_three_single_step_matches_matrix_product() {
        let g = NetworkGraph::path(3);
        let u = metropolis_weights(&g);
        let state = ConsensusState::from_scalars(&[0.0, 3.0, 6.0]).unwrap();
        let run = run_consensus(&state, &u, 1).unwrap();
        // hand product: U * (0, 3, 6)
        let expected = [1.0, 3.0, 5.0];
        for (v, e) in run.state.values.iter().zip(expected) {
            assert_relative_eq!(v[(0, 0)], e, epsilon = 1e-12);
        }
    }

    #[test]
    fn consensus_preserves_network_sum_and_converges() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let g = random_geometric_graph(10, 7.0, 16.0, &mut rng).unwrap();
        let u = metropolis_weights(&g);
        let init: Vec<f64> = (0..10).map(|i| (i as f64) * 1.7 - 3.0).collect();
        let sum0: f64 = init.iter().sum();
        let state = ConsensusState::from_scalars(&init).unwrap();
        let run = run_consensus(&state, &u, 400).unwrap();
        let sum1: f64 = run.state.values.iter().map(|v| v[(0, 0)]).sum();
        assert_relative_eq!(sum1, sum0, epsilon = 1e-10 * sum0.abs());
        let mean = sum0 / 10.0;
        for v in &run.state.values {
            assert_abs_diff_eq!(v[(0, 0)], mean, epsilon = 1e-8);
        }
        // trace is monotone enough to certify decay end-to-end
        assert!(run.disagreement.last().unwrap() < &1e-8);
    }

    #[test]
    fn two_node_convergence_time_closed_form() {
        for a in [0.1, 0.3, 0.45] {
            let u = ConsensusMatrix::from_matrix(DMatrix::from_row_slice(
                2,
                2,
                &[1.0 - a, a, a, 1.0 - a],
            ));
            assert_relative_eq!(
                u.convergence_time(),
                -1.0 / (1.0 - 2.0 * a).abs().ln(),
                epsilon = 1e-10
            );
        }
        // closed spectral gap
        let stuck = ConsensusMatrix::from_matrix(DMatrix::identity(2, 2));
        assert!(stuck.convergence_time().is_infinite());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let g = NetworkGraph::path(3);
        let u = metropolis_weights(&g);
        let state = ConsensusState::from_scalars(&[1.0, 2.0]).unwrap();
        assert!(run_consensus(&state, &u, 1).is_err());
        assert!(ConsensusState::new(vec![
            DMatrix::zeros(2, 2),
            DMatrix::zeros(1, 1),
        ])
        .is_err());
    }

    #[test]
    fn graph_document_round_trip() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let g = random_geometric_graph(8, 8.0, 16.0, &mut rng).unwrap();
        let u = metropolis_weights(&g);
        let doc = GraphDocument::from_graph(&g, &u);
        let json = serde_json::to_string(&doc).unwrap();
        let back: GraphDocument = serde_json::from_str(&json).unwrap();
        let g2 = back.to_graph().unwrap();
        assert_eq!(g.edges(), g2.edges());
        assert_eq!(g.positions(), g2.positions());
    }
}
