//! Domain data model shared by every module: agent states, multi-agent
//! trajectories, datasets with train/val/test splits, and the scenario
//! configuration that fixes agent count, horizons, and geometry.
//!
//! All types are plain immutable data. Agent states are planar positions in
//! meters; a trajectory stores `history_len` warmup samples (times `-h..-1`)
//! followed by the task window (times `0..=T`), so its length is `h + T + 1`.

use serde::{Deserialize, Serialize};

use crate::vec2::Vec2;

/// State of a single agent: a planar position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentState {
    pub position: Vec2,
}

impl AgentState {
    pub fn new(x: f64, y: f64) -> Self {
        Self { position: [x, y] }
    }
}

/// Joint state of all agents at one time step, in fixed agent order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointState {
    pub agents: Vec<AgentState>,
}

impl JointState {
    pub fn new(agents: Vec<AgentState>) -> Self {
        Self { agents }
    }

    pub fn agent_count(&self) -> usize {
        self.agents.len()
    }

    pub fn position(&self, agent: usize) -> Vec2 {
        self.agents[agent].position
    }
}

/// One realization of the agent process: `history_len` warmup states
/// followed by states for times `0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<JointState>,
    pub history_len: usize,
}

impl Trajectory {
    /// State at task time `t` (so index `history_len + t` into storage).
    pub fn at(&self, t: usize) -> &JointState {
        &self.states[self.history_len + t]
    }

    /// Observed prefix through task time `t`: states for times `-h..=t`.
    pub fn history_through(&self, t: usize) -> &[JointState] {
        &self.states[..self.history_len + t + 1]
    }

    /// Task horizon implied by the stored length.
    pub fn task_horizon(&self) -> usize {
        self.states.len() - self.history_len - 1
    }

    pub fn agent_count(&self) -> usize {
        self.states.first().map_or(0, JointState::agent_count)
    }
}

/// Which split a trajectory belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Axis-aligned rectangle in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2 {
    pub min: Vec2,
    pub max: Vec2,
}

impl Box2 {
    pub fn contains(&self, p: Vec2) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }

    pub fn width(&self) -> f64 {
        self.max[0] - self.min[0]
    }

    pub fn height(&self) -> f64 {
        self.max[1] - self.min[1]
    }
}

/// Scenario parameters shared by generation, calibration, and planning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Number of dynamic agents per scene.
    pub agent_count: usize,
    /// Task horizon `T` in steps; trajectories run from time 0 to `T`.
    pub task_horizon: usize,
    /// Warmup samples before time 0.
    pub history_len: usize,
    /// Sampling period in seconds.
    pub dt: f64,
    /// Workspace bounds in meters.
    pub workspace: Box2,
    /// Agent walking speed range `[min, max]` in m/s.
    pub speed_range: [f64; 2],
    /// Standard deviation of the per-step isotropic Gaussian perturbation, meters.
    pub noise_scale: f64,
    /// Center of the robot goal region, meters.
    pub goal_center: Vec2,
    /// Radius of the robot goal region, meters.
    pub goal_radius: f64,
    /// Safety distance subtracted inside the collision constraint, meters.
    pub safety_distance: f64,
}

impl ScenarioConfig {
    /// Returns one message per violated parameter constraint. The float
    /// checks are written to reject NaN as well.
    pub fn validate(&self) -> Vec<String> {
        fn positive(x: f64) -> bool {
            x.partial_cmp(&0.0) == Some(std::cmp::Ordering::Greater)
        }
        fn at_least(x: f64, bound: f64) -> bool {
            matches!(
                x.partial_cmp(&bound),
                Some(std::cmp::Ordering::Greater | std::cmp::Ordering::Equal)
            )
        }
        let mut problems = Vec::new();
        if self.agent_count == 0 {
            problems.push("agent_count must be at least 1".to_string());
        }
        if self.task_horizon == 0 {
            problems.push("task_horizon must be at least 1".to_string());
        }
        if !positive(self.dt) {
            problems.push("dt must be positive".to_string());
        }
        if !positive(self.workspace.width()) || !positive(self.workspace.height()) {
            problems.push("workspace must have positive extent on both axes".to_string());
        }
        if !at_least(self.speed_range[0], 0.0) || !at_least(self.speed_range[1], self.speed_range[0])
        {
            problems.push("speed_range must be nonnegative and ordered".to_string());
        }
        if !at_least(self.noise_scale, 0.0) {
            problems.push("noise_scale must be nonnegative".to_string());
        }
        if !at_least(self.goal_radius, 0.0) {
            problems.push("goal_radius must be nonnegative".to_string());
        }
        if !at_least(self.safety_distance, 0.0) {
            problems.push("safety_distance must be nonnegative".to_string());
        }
        problems
    }
}

/// A collection of independently drawn trajectories with split labels.
///
/// `splits` runs parallel to `trajectories`: entry `i` labels trajectory `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub scenario: ScenarioConfig,
    pub trajectories: Vec<Trajectory>,
    pub splits: Vec<Split>,
}

impl Dataset {
    /// Indices of trajectories in the given split.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Trajectories in the given split, paired with their dataset indices.
    pub fn in_split(&self, split: Split) -> Vec<(usize, &Trajectory)> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| (i, &self.trajectories[i]))
            .collect()
    }

    pub fn split_size(&self, split: Split) -> usize {
        self.splits.iter().filter(|s| **s == split).count()
    }
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRecord {
    split: Split,
    states: Vec<JointState>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    seed: u64,
    scenario: ScenarioConfig,
    trajectories: Vec<TrajectoryRecord>,
}

impl Dataset {
    /// Serialize to the on-disk JSON document. Coordinates keep full
    /// precision: parsing the output reproduces every `f64` bit-exactly.
    pub fn to_json(&self) -> String {
        let file = DatasetFile {
            seed: self.seed,
            scenario: self.scenario.clone(),
            trajectories: self
                .trajectories
                .iter()
                .zip(&self.splits)
                .map(|(t, s)| TrajectoryRecord {
                    split: *s,
                    states: t.states.clone(),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("dataset serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let file: DatasetFile = serde_json::from_str(text)?;
        let history_len = file.scenario.history_len;
        Ok(Self {
            seed: file.seed,
            scenario: file.scenario,
            splits: file.trajectories.iter().map(|r| r.split).collect(),
            trajectories: file
                .trajectories
                .into_iter()
                .map(|r| Trajectory {
                    states: r.states,
                    history_len,
                })
                .collect(),
        })
    }
}

/// Check every dataset invariant; returns one message per violation, naming
/// the trajectory index and the broken rule. Empty iff the dataset is valid.
pub fn validate_dataset(d: &Dataset) -> Vec<String> {
    let mut violations = Vec::new();
    for msg in d.scenario.validate() {
        violations.push(format!("scenario: {msg}"));
    }
    if d.splits.len() != d.trajectories.len() {
        violations.push(format!(
            "splits list has {} entries for {} trajectories",
            d.splits.len(),
            d.trajectories.len()
        ));
    }
    // The train split may be empty (some predictors need no fitting);
    // calibration and evaluation cannot run without val and test data.
    for split in [Split::Val, Split::Test] {
        if d.split_size(split) == 0 {
            violations.push(format!("split {split:?} is empty"));
        }
    }
    let expected_len = d.scenario.history_len + d.scenario.task_horizon + 1;
    let expected_agents = d.scenario.agent_count;
    for (i, traj) in d.trajectories.iter().enumerate() {
        if traj.history_len != d.scenario.history_len {
            violations.push(format!(
                "trajectory {i}: history_len {} differs from scenario history_len {}",
                traj.history_len, d.scenario.history_len
            ));
        }
        if traj.states.len() != expected_len {
            violations.push(format!(
                "trajectory {i}: has {} states, expected {} (history {} + horizon {} + 1)",
                traj.states.len(),
                expected_len,
                d.scenario.history_len,
                d.scenario.task_horizon
            ));
        }
        if traj.states.len() < traj.history_len + 2 {
            violations.push(format!(
                "trajectory {i}: too short ({} states) for history {} plus one step",
                traj.states.len(),
                traj.history_len
            ));
        }
        for (k, state) in traj.states.iter().enumerate() {
            if state.agent_count() != expected_agents {
                violations.push(format!(
                    "trajectory {i}: state {k} has {} agents, expected {}",
                    state.agent_count(),
                    expected_agents
                ));
                break;
            }
        }
        for (k, state) in traj.states.iter().enumerate() {
            if let Some((j, _)) = state
                .agents
                .iter()
                .enumerate()
                .find(|(_, a)| !a.position[0].is_finite() || !a.position[1].is_finite())
            {
                violations.push(format!(
                    "trajectory {i}: non-finite coordinate at state {k}, agent {j}"
                ));
                break;
            }
        }
    }
    violations
}

/// Render one trajectory as CSV with columns `t,agent,x,y`; `t` runs from
/// `-history_len` through the task horizon.
pub fn trajectory_to_csv(traj: &Trajectory) -> String {
    let mut out = String::from("t,agent,x,y\n");
    for (idx, state) in traj.states.iter().enumerate() {
        let t = idx as i64 - traj.history_len as i64;
        for (agent, a) in state.agents.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                t, agent, a.position[0], a.position[1]
            ));
        }
    }
    out
}
