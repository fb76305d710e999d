//! Closed-loop execution against held-out trajectories and batch
//! Monte-Carlo evaluation.
//!
//! Each run replays one recorded environment trajectory (agents ignore the
//! robot), senses the robot and agent states at every step, replans, and
//! applies the first control. Infeasible steps escalate through a fixed
//! fallback: retry with slack enabled, then apply maximal braking and flag
//! the run. Flagged runs are excluded from the safety guarantee but stay in
//! the report under a separate rate.
//!
//! Every aggregate is a pure fold over [`RunLog`] values, so a report
//! recomputed from serialized logs matches the in-process result exactly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::{nonconformity_score, CalibrationTable, Region};
use crate::domain::{Dataset, JointState, Split, Trajectory};
use crate::dynamics::{bicycle_step, constraint_value, ControlInput, RobotState};
use crate::planner::{
    braking_control, mpc_step, open_loop_plan, GoalMode, PlanStatus, PlannerConfig,
};
use crate::predictor::{predict, PredictionSet, PredictorSpec};
use crate::vec2;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("run index {index} is in the validation split used for calibration")]
    SplitOverlap { index: usize },
    #[error("run index {index} out of range: dataset has {len} trajectories")]
    BadIndex { index: usize, len: usize },
    #[error("no trajectories selected for evaluation")]
    NoRuns,
    #[error("open-loop evaluation needs a table with H = T, got H = {horizon}, T = {task_horizon}")]
    OpenLoopNeedsFullHorizon { horizon: usize, task_horizon: usize },
    #[error("trajectory covers horizon {available}, evaluation needs {required}")]
    ShortEnvironment { available: usize, required: usize },
}

/// What was decided and observed at one closed-loop step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub observed: JointState,
    pub predictions: PredictionSet,
    pub regions: Vec<Region>,
    pub control: ControlInput,
    pub status: PlanStatus,
    pub max_slack: f64,
    pub braked: bool,
    /// Whether the realized next state fell inside the one-step region;
    /// absent when no one-step prediction was made.
    pub one_step_covered: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub min_constraint: f64,
    pub total_cost: f64,
    pub safe: bool,
    pub goal_reached: bool,
    pub infeasible_steps: usize,
    pub flagged: bool,
}

/// Full record of one run: robot states `x_0 ..= x_T`, the realized
/// constraint value at every time, per-step decisions, and the summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLog {
    pub states: Vec<RobotState>,
    pub constraint_values: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub summary: RunSummary,
}

impl RunLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("run log serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

fn realized_cost(states: &[RobotState], controls: &[ControlInput], cfg: &PlannerConfig) -> f64 {
    let mut cost = 0.0;
    for s in &states[1..] {
        cost += cfg.weights.speed * s.speed * s.speed;
    }
    for u in controls {
        cost += cfg.weights.effort * (u.steer * u.steer + u.accel * u.accel);
    }
    if cfg.goal.mode == GoalMode::SoftCost {
        let d = vec2::dist(states[states.len() - 1].position(), cfg.goal.center);
        cost += cfg.weights.terminal * d * d;
    }
    cost
}

fn finish_log(
    env: &Trajectory,
    cfg: &PlannerConfig,
    states: Vec<RobotState>,
    steps: Vec<StepRecord>,
    controls: &[ControlInput],
    infeasible_steps: usize,
    flagged: bool,
) -> RunLog {
    let constraint_values: Vec<f64> = states
        .iter()
        .enumerate()
        .map(|(t, s)| constraint_value(s.position(), env.at(t), &cfg.constraint))
        .collect();
    let min_constraint = constraint_values.iter().copied().fold(f64::INFINITY, f64::min);
    let terminal = states[states.len() - 1].position();
    let summary = RunSummary {
        min_constraint,
        total_cost: realized_cost(&states, controls, cfg),
        safe: min_constraint >= 0.0,
        goal_reached: vec2::dist(terminal, cfg.goal.center) <= cfg.goal.radius,
        infeasible_steps,
        flagged,
    };
    RunLog {
        states,
        constraint_values,
        steps,
        summary,
    }
}

/// Execute the receding-horizon controller for `T` steps against a recorded
/// environment trajectory. Fallback events are recorded in the log, never
/// raised.
pub fn run_closed_loop(
    env: &Trajectory,
    predictor: &PredictorSpec,
    table: &CalibrationTable,
    cfg: &PlannerConfig,
    x0: RobotState,
) -> RunLog {
    let t_horizon = table.task_horizon;
    assert!(
        env.task_horizon() >= t_horizon,
        "environment trajectory is shorter than the task horizon"
    );

    let mut states = vec![x0];
    let mut steps: Vec<StepRecord> = Vec::with_capacity(t_horizon);
    let mut controls: Vec<ControlInput> = Vec::with_capacity(t_horizon);
    let mut warm: Option<Vec<ControlInput>> = None;
    let mut flagged = false;
    let mut infeasible_steps = 0usize;

    for t in 0..t_horizon {
        let x_t = states[t];
        let history = env.history_through(t);

        let mut outcome = mpc_step(t, &x_t, history, predictor, table, cfg, warm.as_deref()).ok();
        let mut used_fallback = false;
        if !matches!(
            outcome.as_ref().map(|o| o.plan.status),
            Some(PlanStatus::Feasible) | Some(PlanStatus::FeasibleWithSlack)
        ) && !cfg.slack.enabled
        {
            // Retry the step with slack enabled before giving up.
            used_fallback = true;
            let mut relaxed = cfg.clone();
            relaxed.slack.enabled = true;
            outcome = mpc_step(t, &x_t, history, predictor, table, &relaxed, warm.as_deref()).ok();
        }

        let max_slack = outcome
            .as_ref()
            .map(|o| o.plan.slacks.iter().copied().fold(0.0f64, f64::max))
            .unwrap_or(f64::MAX);
        let usable = matches!(
            outcome.as_ref().map(|o| o.plan.status),
            Some(PlanStatus::Feasible) | Some(PlanStatus::FeasibleWithSlack)
        ) && max_slack <= cfg.slack.cap;

        let (control, status, braked) = if usable {
            let o = outcome.as_ref().expect("usable implies an outcome");
            (o.control, o.plan.status, false)
        } else {
            flagged = true;
            (braking_control(x_t.speed, &cfg.vehicle), PlanStatus::Infeasible, true)
        };
        if used_fallback || braked {
            infeasible_steps += 1;
        }

        let (predictions, regions) = match outcome.as_ref() {
            Some(o) => (o.predictions.clone(), o.regions.clone()),
            None => (
                PredictionSet {
                    made_at: t,
                    values: Vec::new(),
                },
                Vec::new(),
            ),
        };
        let one_step_covered = predictions.at_tau(t + 1).map(|hat| {
            let score = nonconformity_score(env.at(t + 1), hat, table.mode)
                .expect("agent counts agree within a dataset");
            regions[0].covers(score)
        });

        let next = bicycle_step(&x_t, &control, cfg.vehicle.dt, cfg.vehicle.length);
        states.push(next);
        controls.push(control);
        warm = match (braked, outcome) {
            (false, Some(o)) => Some(o.plan.controls[1..].to_vec()),
            _ => None,
        };
        steps.push(StepRecord {
            t,
            observed: env.at(t).clone(),
            predictions,
            regions,
            control,
            status,
            max_slack,
            braked,
            one_step_covered,
        });
    }

    finish_log(env, cfg, states, steps, &controls, infeasible_steps, flagged)
}

/// Plan once at `t = 0` and execute the whole control sequence. An
/// infeasible initial solve brakes for the entire run and flags it.
pub fn run_open_loop(
    env: &Trajectory,
    predictor: &PredictorSpec,
    table: &CalibrationTable,
    cfg: &PlannerConfig,
    x0: RobotState,
) -> RunLog {
    let t_horizon = table.task_horizon;
    assert!(
        env.task_horizon() >= t_horizon,
        "environment trajectory is shorter than the task horizon"
    );

    let predictions = predict(
        predictor,
        env.history_through(0),
        0,
        t_horizon,
        t_horizon,
    )
    .ok();
    let plan = predictions
        .as_ref()
        .and_then(|p| open_loop_plan(&x0, p, table, cfg).ok());

    let feasible = matches!(
        plan.as_ref().map(|p| p.status),
        Some(PlanStatus::Feasible) | Some(PlanStatus::FeasibleWithSlack)
    );

    let mut states = vec![x0];
    let mut controls = Vec::with_capacity(t_horizon);
    for t in 0..t_horizon {
        let x_t = states[t];
        let control = if feasible {
            plan.as_ref().expect("feasible implies a plan").controls[t]
        } else {
            braking_control(x_t.speed, &cfg.vehicle)
        };
        states.push(bicycle_step(&x_t, &control, cfg.vehicle.dt, cfg.vehicle.length));
        controls.push(control);
    }

    let status = plan.as_ref().map(|p| p.status).unwrap_or(PlanStatus::Infeasible);
    let max_slack = plan
        .as_ref()
        .map(|p| p.slacks.iter().copied().fold(0.0f64, f64::max))
        .unwrap_or(f64::MAX);
    let initial_regions: Vec<Region> = if predictions.is_some() {
        (1..=t_horizon)
            .map_while(|tau| table.region(0, tau))
            .collect()
    } else {
        Vec::new()
    };
    let steps: Vec<StepRecord> = (0..t_horizon)
        .map(|t| StepRecord {
            t,
            observed: env.at(t).clone(),
            predictions: if t == 0 {
                predictions.clone().unwrap_or(PredictionSet {
                    made_at: 0,
                    values: Vec::new(),
                })
            } else {
                PredictionSet {
                    made_at: t,
                    values: Vec::new(),
                }
            },
            regions: if t == 0 { initial_regions.clone() } else { Vec::new() },
            control: controls[t],
            status,
            max_slack,
            braked: !feasible,
            one_step_covered: None,
        })
        .collect();

    let infeasible_steps = if feasible { 0 } else { t_horizon };
    finish_log(env, cfg, states, steps, &controls, infeasible_steps, !feasible)
}

/// Long-format plot data for one run: the robot path, the observed agent
/// positions, and each step's predictions with their region radii.
/// Columns: `t,series,item,x,y,radius`.
pub fn overlay_csv(log: &RunLog) -> String {
    let mut out = String::from("t,series,item,x,y,radius\n");
    for (t, state) in log.states.iter().enumerate() {
        out.push_str(&format!("{t},robot,0,{},{},\n", state.x, state.y));
    }
    for step in &log.steps {
        for (j, agent) in step.observed.agents.iter().enumerate() {
            out.push_str(&format!(
                "{},observed,{j},{},{},\n",
                step.t, agent.position[0], agent.position[1]
            ));
        }
        for tau in step.predictions.taus() {
            let hat = step.predictions.at_tau(tau).expect("tau within window");
            let radius = match step.regions.get(tau - step.t - 1) {
                Some(Region::Bounded(c)) => c.to_string(),
                Some(Region::Unbounded) => "unbounded".to_string(),
                None => String::new(),
            };
            for (j, agent) in hat.agents.iter().enumerate() {
                out.push_str(&format!(
                    "{},predicted_t{}_agent{j},{tau},{},{},{radius}\n",
                    step.t, step.t, agent.position[0], agent.position[1]
                ));
            }
        }
    }
    out
}

/// Which controller(s) a batch evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Mpc,
    OpenLoop,
    Both,
}

/// Aggregate statistics for one controller mode, a pure fold over run logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeStats {
    pub runs: usize,
    pub flagged_runs: usize,
    /// Runs that engaged the fallback at least once (flagged or slacked).
    pub fallback_runs: usize,
    pub infeasible_steps: usize,
    pub violations_unflagged: usize,
    pub violation_rate_unflagged: f64,
    pub violations_all: usize,
    pub violation_rate_all: f64,
    pub mean_cost: f64,
    pub median_cost: f64,
    /// Fraction of one-step prediction events covered by their region;
    /// absent when the mode records no such events.
    pub one_step_coverage: Option<f64>,
    pub goal_reached_runs: usize,
}

/// Fold run logs into [`ModeStats`]. Order-independent and side-effect free.
pub fn fold_logs(logs: &[RunLog]) -> ModeStats {
    let runs = logs.len();
    let flagged_runs = logs.iter().filter(|l| l.summary.flagged).count();
    let fallback_runs = logs
        .iter()
        .filter(|l| l.summary.flagged || l.summary.infeasible_steps > 0)
        .count();
    let infeasible_steps = logs.iter().map(|l| l.summary.infeasible_steps).sum();
    let violations_all = logs.iter().filter(|l| !l.summary.safe).count();
    let unflagged: Vec<&RunLog> = logs.iter().filter(|l| !l.summary.flagged).collect();
    let violations_unflagged = unflagged.iter().filter(|l| !l.summary.safe).count();

    let mut costs: Vec<f64> = unflagged.iter().map(|l| l.summary.total_cost).collect();
    costs.sort_by(f64::total_cmp);
    let mean_cost = if costs.is_empty() {
        0.0
    } else {
        costs.iter().sum::<f64>() / costs.len() as f64
    };
    let median_cost = match costs.len() {
        0 => 0.0,
        n if n % 2 == 1 => costs[n / 2],
        n => 0.5 * (costs[n / 2 - 1] + costs[n / 2]),
    };

    let mut covered = 0usize;
    let mut events = 0usize;
    for log in logs {
        for step in &log.steps {
            if let Some(c) = step.one_step_covered {
                events += 1;
                covered += c as usize;
            }
        }
    }
    let one_step_coverage = (events > 0).then(|| covered as f64 / events as f64);

    ModeStats {
        runs,
        flagged_runs,
        fallback_runs,
        infeasible_steps,
        violations_unflagged,
        violation_rate_unflagged: if unflagged.is_empty() {
            0.0
        } else {
            violations_unflagged as f64 / unflagged.len() as f64
        },
        violations_all,
        violation_rate_all: if runs == 0 {
            0.0
        } else {
            violations_all as f64 / runs as f64
        },
        mean_cost,
        median_cost,
        one_step_coverage,
        goal_reached_runs: logs.iter().filter(|l| l.summary.goal_reached).count(),
    }
}

/// Cost of the two controllers on the same trajectory; present only for
/// trajectories unflagged under both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostPair {
    pub trajectory: usize,
    pub open_loop_cost: f64,
    pub mpc_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub mode: EvalMode,
    pub delta: f64,
    #[serde(rename = "T")]
    pub task_horizon: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
    pub dataset_seed: u64,
    pub solver_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mpc: Option<ModeStats>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub open_loop: Option<ModeStats>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub cost_pairs: Vec<CostPair>,
}

/// Everything a batch evaluation produces: the report plus the per-run logs
/// it was folded from, keyed by dataset trajectory index.
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub report: BatchReport,
    pub mpc_logs: Vec<(usize, RunLog)>,
    pub open_loop_logs: Vec<(usize, RunLog)>,
}

/// Run the selected controller(s) over held-out trajectories and aggregate.
///
/// `run_indices` defaults to the test split. Any overlap with the validation
/// split aborts the batch: the coverage guarantee is void when the
/// calibration data is reused.
pub fn batch_evaluate(
    dataset: &Dataset,
    run_indices: Option<&[usize]>,
    predictor: &PredictorSpec,
    table: &CalibrationTable,
    cfg: &PlannerConfig,
    x0: RobotState,
    mode: EvalMode,
) -> Result<BatchOutcome, SimError> {
    let indices: Vec<usize> = match run_indices {
        Some(list) => list.to_vec(),
        None => dataset.indices(Split::Test),
    };
    if indices.is_empty() {
        return Err(SimError::NoRuns);
    }
    for &index in &indices {
        if index >= dataset.trajectories.len() {
            return Err(SimError::BadIndex {
                index,
                len: dataset.trajectories.len(),
            });
        }
        if dataset.splits[index] == Split::Val {
            return Err(SimError::SplitOverlap { index });
        }
        let available = dataset.trajectories[index].task_horizon();
        if available < table.task_horizon {
            return Err(SimError::ShortEnvironment {
                available,
                required: table.task_horizon,
            });
        }
    }
    if mode != EvalMode::Mpc && table.horizon < table.task_horizon {
        return Err(SimError::OpenLoopNeedsFullHorizon {
            horizon: table.horizon,
            task_horizon: table.task_horizon,
        });
    }

    let run_mpc = mode != EvalMode::OpenLoop;
    let run_ol = mode != EvalMode::Mpc;
    let mpc_logs: Vec<(usize, RunLog)> = if run_mpc {
        indices
            .par_iter()
            .map(|&i| {
                (
                    i,
                    run_closed_loop(&dataset.trajectories[i], predictor, table, cfg, x0),
                )
            })
            .collect()
    } else {
        Vec::new()
    };
    let open_loop_logs: Vec<(usize, RunLog)> = if run_ol {
        indices
            .par_iter()
            .map(|&i| {
                (
                    i,
                    run_open_loop(&dataset.trajectories[i], predictor, table, cfg, x0),
                )
            })
            .collect()
    } else {
        Vec::new()
    };

    let cost_pairs: Vec<CostPair> = if mode == EvalMode::Both {
        mpc_logs
            .iter()
            .zip(&open_loop_logs)
            .filter(|((_, m), (_, o))| !m.summary.flagged && !o.summary.flagged)
            .map(|((i, m), (_, o))| CostPair {
                trajectory: *i,
                open_loop_cost: o.summary.total_cost,
                mpc_cost: m.summary.total_cost,
            })
            .collect()
    } else {
        Vec::new()
    };

    let report = BatchReport {
        mode,
        delta: table.delta,
        task_horizon: table.task_horizon,
        horizon: table.horizon,
        dataset_seed: dataset.seed,
        solver_seed: cfg.solver.seed,
        mpc: run_mpc.then(|| fold_logs(&to_logs(&mpc_logs))),
        open_loop: run_ol.then(|| fold_logs(&to_logs(&open_loop_logs))),
        cost_pairs,
    };
    Ok(BatchOutcome {
        report,
        mpc_logs,
        open_loop_logs,
    })
}

fn to_logs(indexed: &[(usize, RunLog)]) -> Vec<RunLog> {
    indexed.iter().map(|(_, l)| l.clone()).collect()
}
