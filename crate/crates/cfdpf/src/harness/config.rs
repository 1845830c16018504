//! Scenario configuration: one JSON document describes the model, the
//! network, particle counts, the multi-rate schedule, and the bound settings.
//! Parsing is strict (unknown fields rejected) and `validate` enforces the
//! cross-field invariants; `schema/scenario.schema.json` in the repository
//! documents the format.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::schedule::MultiRateSchedule;
use crate::consensus::{default_connectivity_radius, random_geometric_graph, NetworkGraph};
use crate::error::{Error, Result};
use crate::fusion::ProposalKind;
use crate::pcrlb::ExpectationMode;
use crate::rng::{derive, stream};
use crate::ssm::{
    BotModel, CoordinatedTurnParams, GlintNoiseParams, LinearGaussianModel, Model, State,
    UnicycleModel, UnicycleParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Bot,
    Unicycle,
    LinearTest,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BotScenario {
    pub start: (f64, f64),
    /// Initial course in degrees, clockwise positive from the +Y axis.
    pub course_deg: f64,
    pub speed: f64,
    pub ct: CoordinatedTurnParams,
    pub glint: GlintNoiseParams,
    #[serde(default)]
    pub single_quadrant_bearing: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct UnicycleScenario {
    pub start: (f64, f64),
    pub theta0: f64,
    pub params: UnicycleParams,
    pub glint: GlintNoiseParams,
    #[serde(default)]
    pub single_quadrant_bearing: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LinearScenario {
    pub initial_state: Vec<f64>,
    /// State matrix, row major.
    pub f: Vec<Vec<f64>>,
    /// Process covariance, row major.
    pub q: Vec<Vec<f64>>,
    /// One observation matrix per node, row major.
    pub h_per_node: Vec<Vec<Vec<f64>>>,
    /// One observation covariance per node, row major.
    pub r_per_node: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct CdfProbe {
    pub coordinate: usize,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PcrlbConfig {
    pub n_trajectories: usize,
    pub mode: ExpectationMode,
    /// Node whose local information anchors the node-dependent approximation.
    pub anchor_node: usize,
}

impl Default for PcrlbConfig {
    fn default() -> Self {
        PcrlbConfig {
            n_trajectories: 200,
            mode: ExpectationMode::MonteCarlo,
            anchor_node: 0,
        }
    }
}

fn default_ess_fraction() -> f64 {
    crate::pf::DEFAULT_ESS_FRACTION
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioKind,
    /// Master seed; every random stream in a run derives from it.
    pub seed: u64,
    pub n_nodes: usize,
    pub region_side: f64,
    /// Defaults to `sqrt(2 ln n / n) * region_side` when absent.
    #[serde(default)]
    pub connectivity_radius: Option<f64>,
    pub n_steps: usize,
    pub n_particles_central: usize,
    pub n_particles_local: usize,
    pub n_particles_fusion: usize,
    pub proposal: ProposalKind,
    pub schedule: MultiRateSchedule,
    pub mc_runs: usize,
    /// Diagonal of the Gaussian prior covariance used to initialize every
    /// filter around the true initial state.
    pub init_cov_diag: Vec<f64>,
    pub standalone_node: usize,
    pub position_indices: Vec<usize>,
    #[serde(default = "default_ess_fraction")]
    pub ess_fraction: f64,
    #[serde(default)]
    pub bot: Option<BotScenario>,
    #[serde(default)]
    pub unicycle: Option<UnicycleScenario>,
    #[serde(default)]
    pub linear: Option<LinearScenario>,
    #[serde(default)]
    pub pcrlb: PcrlbConfig,
    #[serde(default)]
    pub cdf_probes: Vec<CdfProbe>,
}

impl ScenarioConfig {
    pub fn state_dim(&self) -> usize {
        match self.scenario {
            ScenarioKind::Bot => 4,
            ScenarioKind::Unicycle => 3,
            ScenarioKind::LinearTest => self
                .linear
                .as_ref()
                .map(|l| l.initial_state.len())
                .unwrap_or(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.state_dim();
        if self.n_nodes < 1 {
            return Err(Error::Config("n_nodes must be >= 1".into()));
        }
        if self.n_steps < 1 {
            return Err(Error::Config("n_steps must be >= 1".into()));
        }
        if self.mc_runs < 1 {
            return Err(Error::Config("mc_runs must be >= 1".into()));
        }
        for (name, v) in [
            ("n_particles_central", self.n_particles_central),
            ("n_particles_local", self.n_particles_local),
            ("n_particles_fusion", self.n_particles_fusion),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.region_side <= 0.0 {
            return Err(Error::Config("region_side must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ess_fraction) {
            return Err(Error::Config("ess_fraction must lie in [0, 1]".into()));
        }
        if self.standalone_node >= self.n_nodes {
            return Err(Error::Config("standalone_node out of range".into()));
        }
        if self.pcrlb.anchor_node >= self.n_nodes {
            return Err(Error::Config("pcrlb.anchor_node out of range".into()));
        }
        if self.pcrlb.n_trajectories < 1 {
            return Err(Error::Config("pcrlb.n_trajectories must be >= 1".into()));
        }
        self.schedule.validate()?;
        match self.scenario {
            ScenarioKind::Bot => {
                let bot = self
                    .bot
                    .as_ref()
                    .ok_or_else(|| Error::Config("scenario 'bot' needs a [bot] section".into()))?;
                bot.glint.validate()?;
                if bot.speed <= 0.0 {
                    return Err(Error::Config("bot.speed must be positive".into()));
                }
            }
            ScenarioKind::Unicycle => {
                self.unicycle.as_ref().ok_or_else(|| {
                    Error::Config("scenario 'unicycle' needs a [unicycle] section".into())
                })?;
            }
            ScenarioKind::LinearTest => {
                let lin = self.linear.as_ref().ok_or_else(|| {
                    Error::Config("scenario 'linear_test' needs a [linear] section".into())
                })?;
                if lin.h_per_node.len() != self.n_nodes || lin.r_per_node.len() != self.n_nodes {
                    return Err(Error::Config(
                        "linear scenario needs one H and one R per node".into(),
                    ));
                }
            }
        }
        if dim == 0 {
            return Err(Error::Config("could not determine state dimension".into()));
        }
        if self.init_cov_diag.len() != dim {
            return Err(Error::Config(format!(
                "init_cov_diag must have {dim} entries"
            )));
        }
        if self.init_cov_diag.iter().any(|&v| v <= 0.0) {
            return Err(Error::Config("init_cov_diag entries must be positive".into()));
        }
        if self.position_indices.is_empty()
            || self.position_indices.iter().any(|&i| i >= dim)
        {
            return Err(Error::Config("position_indices out of range".into()));
        }
        for probe in &self.cdf_probes {
            if probe.coordinate >= dim || probe.k < 1 || probe.k > self.n_steps {
                return Err(Error::Config(format!(
                    "cdf probe (coordinate {}, k {}) out of range",
                    probe.coordinate, probe.k
                )));
            }
        }
        Ok(())
    }

    pub fn effective_radius(&self) -> f64 {
        self.connectivity_radius
            .unwrap_or_else(|| default_connectivity_radius(self.n_nodes, self.region_side))
    }

    /// Generate the scenario's network from the master seed.
    pub fn build_graph(&self) -> Result<NetworkGraph> {
        let mut rng = derive(self.seed, &[stream::GRAPH]);
        random_geometric_graph(self.n_nodes, self.effective_radius(), self.region_side, &mut rng)
    }

    /// Build the model plus the true initial state.
    pub fn build_model(&self, graph: &NetworkGraph) -> Result<(Box<dyn Model>, State)> {
        match self.scenario {
            ScenarioKind::Bot => {
                let bot = self.bot.as_ref().expect("validated");
                let course = bot.course_deg.to_radians();
                let initial = DVector::from_vec(vec![
                    bot.start.0,
                    bot.start.1,
                    bot.speed * course.sin(),
                    bot.speed * course.cos(),
                ]);
                let model = BotModel::new(
                    bot.ct,
                    bot.glint,
                    graph.positions().to_vec(),
                    bot.single_quadrant_bearing,
                )?;
                Ok((Box::new(model), initial))
            }
            ScenarioKind::Unicycle => {
                let uni = self.unicycle.as_ref().expect("validated");
                let initial = DVector::from_vec(vec![uni.start.0, uni.start.1, uni.theta0]);
                let model = UnicycleModel::new(
                    uni.params,
                    uni.glint,
                    graph.positions().to_vec(),
                    uni.single_quadrant_bearing,
                )?;
                Ok((Box::new(model), initial))
            }
            ScenarioKind::LinearTest => {
                let lin = self.linear.as_ref().expect("validated");
                let initial = DVector::from_vec(lin.initial_state.clone());
                let dim = lin.initial_state.len();
                let model = LinearGaussianModel::new(
                    rows_to_matrix(&lin.f, dim, dim, "linear.f")?,
                    rows_to_matrix(&lin.q, dim, dim, "linear.q")?,
                    lin.h_per_node
                        .iter()
                        .map(|h| rows_to_matrix(h, h.len(), dim, "linear.h"))
                        .collect::<Result<Vec<_>>>()?,
                    lin.r_per_node
                        .iter()
                        .map(|r| rows_to_matrix(r, r.len(), r.len(), "linear.r"))
                        .collect::<Result<Vec<_>>>()?,
                )?;
                Ok((Box::new(model), initial))
            }
        }
    }

    /// Desk-scale bearing-only tracking configuration: small network and
    /// particle counts sized so the full Monte-Carlo comparison runs in
    /// seconds.
    pub fn desk_bot() -> Self {
        ScenarioConfig {
            scenario: ScenarioKind::Bot,
            seed: 17,
            n_nodes: 8,
            region_side: 16.0,
            connectivity_radius: None,
            n_steps: 30,
            n_particles_central: 2000,
            n_particles_local: 200,
            n_particles_fusion: 200,
            proposal: ProposalKind::Product,
            schedule: MultiRateSchedule::converged_each_step(60),
            mc_runs: 25,
            init_cov_diag: vec![1.0, 1.0, 0.1, 0.1],
            standalone_node: 0,
            position_indices: vec![0, 1],
            ess_fraction: default_ess_fraction(),
            bot: Some(BotScenario::default()),
            unicycle: None,
            linear: None,
            pcrlb: PcrlbConfig::default(),
            cdf_probes: vec![
                CdfProbe { coordinate: 0, k: 5 },
                CdfProbe { coordinate: 0, k: 22 },
            ],
        }
    }

    /// Full-scale bearing-only tracking configuration (20 nodes, 10k central
    /// particles, 100 runs). Runnable but not exercised by the test suite.
    pub fn paper_bot() -> Self {
        ScenarioConfig {
            seed: 20,
            n_nodes: 20,
            n_particles_central: 10_000,
            n_particles_local: 500,
            n_particles_fusion: 500,
            mc_runs: 100,
            ..Self::desk_bot()
        }
    }

    /// Two-node linear-Gaussian configuration with asymmetric observation
    /// noise; the Kalman filter is the exact baseline.
    pub fn linear_test() -> Self {
        ScenarioConfig {
            scenario: ScenarioKind::LinearTest,
            seed: 5,
            n_nodes: 2,
            region_side: 16.0,
            connectivity_radius: Some(32.0),
            n_steps: 20,
            n_particles_central: 2000,
            n_particles_local: 2000,
            n_particles_fusion: 2000,
            proposal: ProposalKind::Product,
            schedule: MultiRateSchedule::converged_each_step(30),
            mc_runs: 25,
            init_cov_diag: vec![1.0, 1.0],
            standalone_node: 0,
            position_indices: vec![0],
            ess_fraction: default_ess_fraction(),
            bot: None,
            unicycle: None,
            linear: Some(LinearScenario {
                initial_state: vec![0.0, 0.5],
                f: vec![vec![1.0, 1.0], vec![0.0, 0.95]],
                q: vec![vec![0.05, 0.0], vec![0.0, 0.02]],
                h_per_node: vec![vec![vec![1.0, 0.0]], vec![vec![1.0, 0.0]]],
                r_per_node: vec![vec![vec![0.5]], vec![vec![1.5]]],
            }),
            pcrlb: PcrlbConfig {
                n_trajectories: 1,
                mode: ExpectationMode::ClosedFormGaussian,
                anchor_node: 0,
            },
            cdf_probes: vec![CdfProbe { coordinate: 0, k: 10 }],
        }
    }

    /// Unicycle robot configuration with the same glint bearing sensors.
    pub fn unicycle() -> Self {
        ScenarioConfig {
            scenario: ScenarioKind::Unicycle,
            seed: 23,
            n_nodes: 8,
            region_side: 16.0,
            connectivity_radius: None,
            n_steps: 30,
            n_particles_central: 2000,
            n_particles_local: 200,
            n_particles_fusion: 200,
            proposal: ProposalKind::Product,
            schedule: MultiRateSchedule::converged_each_step(60),
            mc_runs: 25,
            init_cov_diag: vec![1.0, 1.0, 0.1],
            standalone_node: 0,
            position_indices: vec![0, 1],
            ess_fraction: default_ess_fraction(),
            bot: None,
            unicycle: Some(UnicycleScenario {
                start: (3.0, 5.0),
                theta0: 0.0,
                params: UnicycleParams {
                    // region units are metres here; 30 cm/s mean forward speed
                    velocity_mean: 0.30,
                    velocity_std: 0.05,
                    ..UnicycleParams::default()
                },
                glint: GlintNoiseParams::default(),
                single_quadrant_bearing: false,
            }),
            linear: None,
            pcrlb: PcrlbConfig::default(),
            cdf_probes: vec![],
        }
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

impl Default for BotScenario {
    fn default() -> Self {
        BotScenario {
            start: (3.0, 6.0),
            course_deg: -140.0,
            speed: 0.49,
            ct: CoordinatedTurnParams::default(),
            glint: GlintNoiseParams::default(),
            single_quadrant_bearing: false,
        }
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], nr: usize, nc: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nr || rows.iter().any(|r| r.len() != nc) {
        return Err(Error::Config(format!("{what} must be {nr}x{nc}")));
    }
    Ok(DMatrix::from_row_iterator(
        nr,
        nc,
        rows.iter().flat_map(|r| r.iter().copied()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for cfg in [
            ScenarioConfig::desk_bot(),
            ScenarioConfig::paper_bot(),
            ScenarioConfig::linear_test(),
            ScenarioConfig::unicycle(),
        ] {
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn default_bot_mirrors_reference_setup() {
        let cfg = ScenarioConfig::desk_bot();
        let bot = cfg.bot.unwrap();
        assert_eq!(bot.start, (3.0, 6.0));
        assert_eq!(bot.course_deg, -140.0);
        assert_eq!(bot.ct.sigma_v, 1.6e-3);
        assert_eq!(bot.glint.epsilon, 0.09);
        assert_eq!(bot.ct.maneuver_accel, 1.08e-5);
        let paper = ScenarioConfig::paper_bot();
        assert_eq!(paper.n_nodes, 20);
        assert_eq!(paper.n_particles_central, 10_000);
        assert_eq!(paper.n_particles_local, 500);
        assert_eq!(paper.mc_runs, 100);
    }

    #[test]
    fn json_round_trip_and_unknown_field_rejection() {
        let cfg = ScenarioConfig::desk_bot();
        let json = cfg.to_json_pretty();
        let back = ScenarioConfig::from_json(&json).unwrap();
        assert_eq!(cfg, back);

        let mut doc: serde_json::Value = serde_json::from_str(&json).unwrap();
        doc["surprise"] = serde_json::json!(1);
        assert!(ScenarioConfig::from_json(&doc.to_string()).is_err());
    }

    #[test]
    fn validation_catches_bad_fields() {
        let mut cfg = ScenarioConfig::desk_bot();
        cfg.standalone_node = 99;
        assert!(cfg.validate().is_err());

        let mut cfg = ScenarioConfig::desk_bot();
        cfg.init_cov_diag = vec![1.0; 3];
        assert!(cfg.validate().is_err());

        let mut cfg = ScenarioConfig::linear_test();
        cfg.n_nodes = 3; // H/R lists still have two entries
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bot_initial_state_from_course() {
        let cfg = ScenarioConfig::desk_bot();
        let graph = cfg.build_graph().unwrap();
        let (_, x0) = cfg.build_model(&graph).unwrap();
        assert_eq!(x0[0], 3.0);
        assert_eq!(x0[1], 6.0);
        // course -140 deg: moving into the third quadrant
        assert!(x0[2] < 0.0 && x0[3] < 0.0);
        let speed = (x0[2] * x0[2] + x0[3] * x0[3]).sqrt();
        approx::assert_relative_eq!(speed, 0.49, epsilon = 1e-12);
    }
}
