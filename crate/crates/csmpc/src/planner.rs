//! Receding-horizon planning with region-tightened collision constraints.
//!
//! The optimal control problem minimizes a cost over the remaining controls
//! `u_t .. u_{T-1}` subject to the bicycle dynamics, control and state
//! bounds, and the tightened collision constraint
//!
//! ```text
//! c(x_tau, yhat_tau) >= L * C_tau      for tau in t+1 ..= min(t+H, T)
//! ```
//!
//! where `C_tau` is the calibrated region radius for the prediction
//! `yhat_tau`. Satisfying the tightened constraint guarantees the realized
//! constraint `c(x_tau, y_tau) >= 0` whenever the prediction error stays
//! inside its region, because `c` is `L`-Lipschitz in the agent state.
//!
//! The solver is direct single shooting: a quadratic penalty on constraint
//! violations is minimized by projected gradient descent with analytic
//! rollout sensitivities, the penalty weight escalates on a fixed schedule,
//! and several starts (zero controls, the shifted previous solution, seeded
//! random draws) are solved with the best candidate returned. An independent
//! checker re-evaluates every returned plan, so solver quality is auditable.
//!
//! An unbounded region in the window makes the problem infeasible by
//! definition; the solver reports that immediately instead of planning
//! through a diluted constraint.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::{CalibrationTable, Region};
use crate::domain::JointState;
use crate::dynamics::{
    constraint_value, nearest_agent, rollout, rollout_with_sensitivities, ConstraintSpec,
    ControlBounds, ControlInput, RobotState, StateBounds,
};
use crate::predictor::{predict, PredictError, PredictionSet, PredictorSpec};
use crate::vec2::{self, Vec2};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("cannot plan at t = {t}: task horizon is {task_horizon}")]
    HorizonEnd { t: usize, task_horizon: usize },
    #[error("calibration table has no entry for (t = {t}, tau = {tau})")]
    MissingRegion { t: usize, tau: usize },
    #[error("open-loop planning needs a table with H = T, got H = {horizon}, T = {task_horizon}")]
    TableHorizonTooShort { horizon: usize, task_horizon: usize },
    #[error("predictions start at t = {got}, expected {expected}")]
    PredictionWindowMismatch { expected: usize, got: usize },
    #[error("{count} regions supplied for a {window}-step constraint window")]
    RegionCountMismatch { count: usize, window: usize },
    #[error("every solver start produced a non-finite objective")]
    NonFiniteCost,
    #[error(transparent)]
    Predict(#[from] PredictError),
}

/// How reaching the goal region is encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GoalMode {
    /// Terminal constraint `||p_T - goal|| <= radius`.
    HardConstraint,
    /// Terminal cost `terminal_weight * ||p_T - goal||^2`.
    SoftCost,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalSpec {
    pub center: Vec2,
    pub radius: f64,
    pub mode: GoalMode,
}

/// Nonnegative weights of the cost terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    /// Weight on the sum of squared speeds over the remaining states.
    pub speed: f64,
    /// Weight on the sum of squared control entries.
    pub effort: f64,
    /// Weight on the squared terminal goal distance (soft goal mode only).
    pub terminal: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            speed: 1.0,
            effort: 0.1,
            terminal: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlackSettings {
    pub enabled: bool,
    /// Linear penalty per meter of constraint relaxation.
    pub penalty_weight: f64,
    /// Closed-loop fallback escalates to braking past this slack.
    pub cap: f64,
}

impl Default for SlackSettings {
    fn default() -> Self {
        Self {
            enabled: false,
            penalty_weight: 1000.0,
            cap: 0.5,
        }
    }
}

/// Vehicle geometry, discretization, and admissible sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleConfig {
    pub dt: f64,
    pub length: f64,
    pub control_bounds: ControlBounds,
    pub state_bounds: StateBounds,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub penalty_stages: usize,
    pub iterations_per_stage: usize,
    pub initial_penalty: f64,
    pub penalty_factor: f64,
    pub random_starts: usize,
    pub seed: u64,
    /// Constraint satisfaction tolerance for status decisions, meters.
    pub tolerance: f64,
    /// Internal tightening headroom so converged plans satisfy the true
    /// constraint outright rather than within tolerance.
    pub constraint_margin: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            penalty_stages: 5,
            iterations_per_stage: 400,
            initial_penalty: 1e3,
            penalty_factor: 10.0,
            random_starts: 4,
            seed: 0,
            tolerance: 1e-6,
            constraint_margin: 1e-5,
        }
    }
}

/// Everything the planner needs besides the per-step predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub horizon: usize,
    pub goal: GoalSpec,
    pub constraint: ConstraintSpec,
    pub weights: CostWeights,
    pub slack: SlackSettings,
    /// Replace each `C_{t+kappa|t}` with the largest radius at lag `kappa`
    /// across all `t`.
    pub use_worst_case_regions: bool,
    pub solver: SolverConfig,
    pub vehicle: VehicleConfig,
}

/// One fully specified optimal control problem instance.
#[derive(Debug, Clone)]
pub struct OcpSpec {
    pub start_time: usize,
    pub task_horizon: usize,
    /// Predictions for `tau` in `start_time+1 ..= start_time + window`.
    pub predictions: PredictionSet,
    /// Region radii aligned with `predictions.values`.
    pub regions: Vec<Region>,
    pub constraint: ConstraintSpec,
    pub weights: CostWeights,
    pub goal: GoalSpec,
    pub slack: SlackSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanStatus {
    Feasible,
    FeasibleWithSlack,
    Infeasible,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanResult {
    pub start_time: usize,
    pub controls: Vec<ControlInput>,
    /// States `x_{t+1} ..= x_T` reached by applying `controls` in order.
    pub states: Vec<RobotState>,
    /// Cost term value, excluding penalties and slack charges.
    pub cost: f64,
    pub status: PlanStatus,
    /// Largest violation of any true constraint, clamped to finite values.
    pub max_violation: f64,
    /// Constraint relaxation used per constrained step (window order).
    pub slacks: Vec<f64>,
    pub iterations: usize,
    pub infeasible_reason: Option<String>,
}

/// Independent re-evaluation of a candidate control sequence against the
/// true (margin-free) constraints of an [`OcpSpec`].
#[derive(Debug, Clone)]
pub struct PlanAssessment {
    pub cost: f64,
    pub collision_violations: Vec<f64>,
    pub bounds_violation: f64,
    pub goal_violation: f64,
    pub control_violation: f64,
    pub max_violation: f64,
}

/// Evaluate the cost terms and every constraint of `spec` on the rollout of
/// `controls` from `x_start`. Uses only [`rollout`] and direct arithmetic,
/// no solver internals.
pub fn assess_plan(
    x_start: &RobotState,
    controls: &[ControlInput],
    spec: &OcpSpec,
    vehicle: &VehicleConfig,
) -> PlanAssessment {
    let states = rollout(x_start, controls, vehicle.dt, vehicle.length);
    let m = controls.len();

    let mut cost = 0.0;
    for s in &states[1..] {
        cost += spec.weights.speed * s.speed * s.speed;
    }
    for u in controls {
        cost += spec.weights.effort * (u.steer * u.steer + u.accel * u.accel);
    }
    let terminal = states[m].position();
    let goal_dist = vec2::dist(terminal, spec.goal.center);
    let goal_violation = match spec.goal.mode {
        GoalMode::HardConstraint => (goal_dist - spec.goal.radius).max(0.0),
        GoalMode::SoftCost => {
            cost += spec.weights.terminal * goal_dist * goal_dist;
            0.0
        }
    };

    let mut collision_violations = Vec::with_capacity(spec.regions.len());
    for (w, region) in spec.regions.iter().enumerate() {
        let state_idx = w + 1;
        let prediction = &spec.predictions.values[w];
        let c = constraint_value(states[state_idx].position(), prediction, &spec.constraint);
        let violation = match region {
            Region::Bounded(radius) => (spec.constraint.lipschitz * radius - c).max(0.0),
            Region::Unbounded => f64::INFINITY,
        };
        collision_violations.push(violation);
    }

    let bounds_violation = states[1..]
        .iter()
        .map(|s| vehicle.state_bounds.violation(s))
        .fold(0.0, f64::max);
    let control_violation = controls
        .iter()
        .map(|u| {
            let steer = (u.steer.abs() - vehicle.control_bounds.steer_max).max(0.0);
            let accel = (vehicle.control_bounds.accel_min - u.accel)
                .max(u.accel - vehicle.control_bounds.accel_max)
                .max(0.0);
            steer.max(accel)
        })
        .fold(0.0, f64::max);

    let max_violation = collision_violations
        .iter()
        .copied()
        .fold(0.0f64, f64::max)
        .max(bounds_violation)
        .max(goal_violation)
        .max(control_violation);

    PlanAssessment {
        cost,
        collision_violations,
        bounds_violation,
        goal_violation,
        control_violation,
        max_violation,
    }
}

struct Evaluation {
    penalty_value: f64,
    grad: Option<Vec<[f64; 2]>>,
}

// State bounds and the hard goal cannot be slacked, so their hinges escalate
// faster than the collision penalty; otherwise a linear slack charge pushing
// against a quadratic hinge would leave an above-tolerance residual.
const HARD_PENALTY_FACTOR: f64 = 100.0;

/// Penalty objective: cost terms plus `mu`-weighted squared hinges on the
/// margin-tightened collision constraints, state bounds, and hard goal.
/// With slack enabled the collision hinge is the closed-form minimum over
/// the slack variable, which turns it into a Huber-shaped charge.
fn evaluate(
    spec: &OcpSpec,
    vehicle: &VehicleConfig,
    x_start: &RobotState,
    controls: &[ControlInput],
    mu: f64,
    margin: f64,
    with_grad: bool,
) -> Evaluation {
    let m = controls.len();
    let (states, sens) = if with_grad {
        let (s, j) = rollout_with_sensitivities(x_start, controls, vehicle.dt, vehicle.length);
        (s, Some(j))
    } else {
        (rollout(x_start, controls, vehicle.dt, vehicle.length), None)
    };
    let mut value = 0.0;
    let mut grad = if with_grad { vec![[0.0; 2]; m] } else { Vec::new() };

    // Adds coeff * d(state component `row` of state i)/du to the gradient.
    let add_state_grad = |grad: &mut Vec<[f64; 2]>, i: usize, row: usize, coeff: f64| {
        if coeff == 0.0 {
            return;
        }
        let sens = sens.as_ref().expect("gradients need sensitivities");
        for (k, jac) in sens.row(i).iter().enumerate() {
            grad[k][0] += coeff * jac[row][0];
            grad[k][1] += coeff * jac[row][1];
        }
    };

    for (i, s) in states.iter().enumerate().skip(1) {
        value += spec.weights.speed * s.speed * s.speed;
        if with_grad {
            add_state_grad(&mut grad, i, 3, 2.0 * spec.weights.speed * s.speed);
        }
    }
    for (k, u) in controls.iter().enumerate() {
        value += spec.weights.effort * (u.steer * u.steer + u.accel * u.accel);
        if with_grad {
            grad[k][0] += 2.0 * spec.weights.effort * u.steer;
            grad[k][1] += 2.0 * spec.weights.effort * u.accel;
        }
    }

    // Terminal goal handling.
    let terminal = states[m].position();
    let goal_diff = vec2::sub(terminal, spec.goal.center);
    let goal_dist = vec2::norm(goal_diff);
    match spec.goal.mode {
        GoalMode::SoftCost => {
            value += spec.weights.terminal * goal_dist * goal_dist;
            if with_grad {
                let c = 2.0 * spec.weights.terminal;
                add_state_grad(&mut grad, m, 0, c * goal_diff[0]);
                add_state_grad(&mut grad, m, 1, c * goal_diff[1]);
            }
        }
        GoalMode::HardConstraint => {
            let h = goal_dist - spec.goal.radius;
            if h > 0.0 && goal_dist > 1e-12 {
                let mu_hard = mu * HARD_PENALTY_FACTOR;
                value += mu_hard * h * h;
                if with_grad {
                    let c = 2.0 * mu_hard * h / goal_dist;
                    add_state_grad(&mut grad, m, 0, c * goal_diff[0]);
                    add_state_grad(&mut grad, m, 1, c * goal_diff[1]);
                }
            }
        }
    }

    // Tightened collision constraints.
    for (w, region) in spec.regions.iter().enumerate() {
        let radius = match region {
            Region::Bounded(r) => *r,
            Region::Unbounded => {
                // Gated upstream; make the objective reject it anyway.
                value = f64::INFINITY;
                continue;
            }
        };
        let i = w + 1;
        let prediction = &spec.predictions.values[w];
        let p = states[i].position();
        let (agent, dist) = nearest_agent(p, prediction);
        let c = dist - spec.constraint.safety_distance;
        let target = spec.constraint.lipschitz * radius + margin;
        let gap = target - c;
        if gap <= 0.0 {
            continue;
        }
        // d(penalty)/dc, with the slack variable eliminated in closed form.
        let dpen_dc = if spec.slack.enabled {
            let breakpoint = spec.slack.penalty_weight / (2.0 * mu);
            if gap <= breakpoint {
                value += mu * gap * gap;
                -2.0 * mu * gap
            } else {
                value += spec.slack.penalty_weight * gap
                    - spec.slack.penalty_weight * breakpoint / 2.0;
                -spec.slack.penalty_weight
            }
        } else {
            value += mu * gap * gap;
            -2.0 * mu * gap
        };
        if with_grad && dist > 1e-12 {
            let dc_dp = vec2::scale(
                vec2::sub(p, prediction.position(agent)),
                1.0 / dist,
            );
            add_state_grad(&mut grad, i, 0, dpen_dc * dc_dp[0]);
            add_state_grad(&mut grad, i, 1, dpen_dc * dc_dp[1]);
        }
    }

    // State box and speed bounds.
    let ws = vehicle.state_bounds.workspace;
    let mu_hard = mu * HARD_PENALTY_FACTOR;
    for (i, s) in states.iter().enumerate().skip(1) {
        let hinges = [
            (ws.min[0] - s.x, 0usize, -1.0),
            (s.x - ws.max[0], 0, 1.0),
            (ws.min[1] - s.y, 1, -1.0),
            (s.y - ws.max[1], 1, 1.0),
            (-s.speed, 3, -1.0),
            (s.speed - vehicle.state_bounds.speed_max, 3, 1.0),
        ];
        for (h, row, sign) in hinges {
            if h > 0.0 {
                value += mu_hard * h * h;
                if with_grad {
                    add_state_grad(&mut grad, i, row, 2.0 * mu_hard * h * sign);
                }
            }
        }
    }

    Evaluation {
        penalty_value: value,
        grad: with_grad.then_some(grad),
    }
}

/// Proportional pursuit toward the goal: steer against the heading error,
/// accelerate toward a speed that covers the remaining distance. Used as a
/// multi-start seed; the descent refines it.
fn pursuit_start(
    x_start: &RobotState,
    steps: usize,
    goal: Vec2,
    vehicle: &VehicleConfig,
) -> Vec<ControlInput> {
    let bounds = vehicle.control_bounds;
    let mut state = *x_start;
    let mut controls = Vec::with_capacity(steps);
    for k in 0..steps {
        let to_goal = vec2::sub(goal, state.position());
        let distance = vec2::norm(to_goal);
        let remaining = ((steps - k) as f64) * vehicle.dt;
        let heading_error = crate::dynamics::wrap_angle(to_goal[1].atan2(to_goal[0]) - state.heading);
        let target_speed = (distance / remaining).min(vehicle.state_bounds.speed_max * 0.9);
        let u = bounds.clamp(ControlInput::new(
            1.5 * heading_error,
            (target_speed - state.speed) / vehicle.dt,
        ));
        state = crate::dynamics::bicycle_step(&state, &u, vehicle.dt, vehicle.length);
        controls.push(u);
    }
    controls
}

/// Projected gradient descent with backtracking on the penalty objective at
/// fixed `mu`. Returns the iterations consumed.
fn minimize_stage(
    spec: &OcpSpec,
    vehicle: &VehicleConfig,
    x_start: &RobotState,
    controls: &mut Vec<ControlInput>,
    mu: f64,
    margin: f64,
    max_iters: usize,
) -> usize {
    let bounds = vehicle.control_bounds;
    let mut step = 0.1;
    for iter in 0..max_iters {
        let eval = evaluate(spec, vehicle, x_start, controls, mu, margin, true);
        let grad = eval.grad.expect("requested gradient");
        let value = eval.penalty_value;
        if !value.is_finite() {
            return iter;
        }

        let mut accepted = false;
        while step >= 1e-14 {
            let candidate: Vec<ControlInput> = controls
                .iter()
                .zip(&grad)
                .map(|(u, g)| {
                    bounds.clamp(ControlInput::new(u.steer - step * g[0], u.accel - step * g[1]))
                })
                .collect();
            let moved_sq: f64 = candidate
                .iter()
                .zip(controls.iter())
                .map(|(a, b)| (a.steer - b.steer).powi(2) + (a.accel - b.accel).powi(2))
                .sum();
            if moved_sq == 0.0 {
                // Projected fixed point.
                return iter;
            }
            let new_value =
                evaluate(spec, vehicle, x_start, &candidate, mu, margin, false).penalty_value;
            if new_value.is_finite() && new_value <= value - 1e-4 * moved_sq / step {
                *controls = candidate;
                step = (step * 1.5).min(100.0);
                accepted = true;
                if moved_sq.sqrt() < 1e-12 {
                    return iter + 1;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return iter;
        }
    }
    max_iters
}

struct Candidate {
    controls: Vec<ControlInput>,
    assessment: PlanAssessment,
    iterations: usize,
}

impl Candidate {
    /// Lower is better: status class first, then cost (with slack charge)
    /// or violation size.
    fn rank(&self, spec: &OcpSpec, tol: f64) -> (u8, f64) {
        let a = &self.assessment;
        let collision = a.collision_violations.iter().copied().fold(0.0f64, f64::max);
        let hard = a
            .bounds_violation
            .max(a.goal_violation)
            .max(a.control_violation);
        if a.max_violation <= tol {
            (0, a.cost)
        } else if spec.slack.enabled && hard <= tol {
            let slack_total: f64 = a.collision_violations.iter().sum();
            (1, a.cost + spec.slack.penalty_weight * slack_total)
        } else {
            (2, collision.max(hard))
        }
    }
}

/// Solve one tightened OCP instance by multi-start penalty descent.
///
/// `warm` is the previous solution shifted by one step, when available.
pub fn solve_ocp(
    x_start: &RobotState,
    spec: &OcpSpec,
    vehicle: &VehicleConfig,
    solver: &SolverConfig,
    warm: Option<&[ControlInput]>,
) -> Result<PlanResult, PlanError> {
    let t = spec.start_time;
    if t >= spec.task_horizon {
        return Err(PlanError::HorizonEnd {
            t,
            task_horizon: spec.task_horizon,
        });
    }
    let m = spec.task_horizon - t;
    let window = spec.predictions.values.len();
    if spec.regions.len() != window {
        return Err(PlanError::RegionCountMismatch {
            count: spec.regions.len(),
            window,
        });
    }
    if window > 0 && spec.predictions.made_at != t {
        return Err(PlanError::PredictionWindowMismatch {
            expected: t,
            got: spec.predictions.made_at,
        });
    }

    // An unbounded region cannot be planned through.
    if let Some(w) = spec.regions.iter().position(Region::is_unbounded) {
        let controls = vec![vehicle.control_bounds.clamp(ControlInput::ZERO); m];
        let states = rollout(x_start, &controls, vehicle.dt, vehicle.length);
        let mut slacks = vec![0.0; window];
        slacks[w] = f64::MAX;
        return Ok(PlanResult {
            start_time: t,
            states: states[1..].to_vec(),
            cost: assess_plan(x_start, &controls, spec, vehicle).cost,
            controls,
            status: PlanStatus::Infeasible,
            max_violation: f64::MAX,
            slacks,
            iterations: 0,
            infeasible_reason: Some(format!(
                "unbounded prediction region at tau = {}",
                t + w + 1
            )),
        });
    }

    let bounds = vehicle.control_bounds;
    let zero = vec![bounds.clamp(ControlInput::ZERO); m];
    let mut starts: Vec<Vec<ControlInput>> = vec![zero];
    starts.push(pursuit_start(x_start, m, spec.goal.center, vehicle));
    if let Some(previous) = warm {
        let mut padded: Vec<ControlInput> = previous.iter().take(m).map(|u| bounds.clamp(*u)).collect();
        let fill = padded.last().copied().unwrap_or(ControlInput::ZERO);
        padded.resize(m, bounds.clamp(fill));
        starts.push(padded);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(
        solver.seed.wrapping_add((t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
    );
    for _ in 0..solver.random_starts {
        starts.push(
            (0..m)
                .map(|_| {
                    ControlInput::new(
                        rng.gen_range(-bounds.steer_max..=bounds.steer_max) * 0.5,
                        rng.gen_range(bounds.accel_min..=bounds.accel_max) * 0.5,
                    )
                })
                .collect(),
        );
    }

    let margin = solver.constraint_margin;
    let mut best: Option<(Candidate, (u8, f64))> = None;
    for start in starts {
        let mut controls = start;
        let mut iterations = 0;
        let mut mu = solver.initial_penalty;
        for _ in 0..solver.penalty_stages {
            iterations += minimize_stage(
                spec,
                vehicle,
                x_start,
                &mut controls,
                mu,
                margin,
                solver.iterations_per_stage,
            );
            mu *= solver.penalty_factor;
        }
        let assessment = assess_plan(x_start, &controls, spec, vehicle);
        if !assessment.cost.is_finite() {
            continue;
        }
        let candidate = Candidate {
            controls,
            assessment,
            iterations,
        };
        let rank = candidate.rank(spec, solver.tolerance);
        match &best {
            Some((_, best_rank)) if *best_rank <= rank => {}
            _ => best = Some((candidate, rank)),
        }
    }
    let (selected, _) = best.ok_or(PlanError::NonFiniteCost)?;

    let states = rollout(x_start, &selected.controls, vehicle.dt, vehicle.length);
    let a = &selected.assessment;
    let hard_violation = a
        .bounds_violation
        .max(a.goal_violation)
        .max(a.control_violation);
    let slacks = a.collision_violations.clone();
    let any_slack = slacks.iter().any(|s| *s > solver.tolerance);
    let status = if a.max_violation <= solver.tolerance {
        PlanStatus::Feasible
    } else if spec.slack.enabled && hard_violation <= solver.tolerance {
        PlanStatus::FeasibleWithSlack
    } else {
        PlanStatus::Infeasible
    };
    let infeasible_reason = match status {
        PlanStatus::Infeasible => Some(format!(
            "constraint violation {:.6} exceeds tolerance",
            a.max_violation
        )),
        _ => None,
    };
    debug_assert!(status != PlanStatus::Feasible || !any_slack);

    Ok(PlanResult {
        start_time: t,
        states: states[1..].to_vec(),
        cost: a.cost,
        status,
        max_violation: a.max_violation,
        slacks,
        iterations: selected.iterations,
        controls: selected.controls,
        infeasible_reason,
    })
}

/// Region radii for the window `t+1 ..= t + window`, either per-pair table
/// entries or the worst case per lag.
fn window_regions(
    table: &CalibrationTable,
    t: usize,
    window: usize,
    worst_case: bool,
) -> Result<Vec<Region>, PlanError> {
    if worst_case {
        let by_lag = table.worst_case_by_lag();
        (1..=window)
            .map(|lag| {
                by_lag
                    .get(&lag)
                    .copied()
                    .ok_or(PlanError::MissingRegion { t, tau: t + lag })
            })
            .collect()
    } else {
        (1..=window)
            .map(|lag| {
                table
                    .region(t, t + lag)
                    .ok_or(PlanError::MissingRegion { t, tau: t + lag })
            })
            .collect()
    }
}

fn build_spec(
    t: usize,
    predictions: PredictionSet,
    regions: Vec<Region>,
    cfg: &PlannerConfig,
    task_horizon: usize,
) -> OcpSpec {
    OcpSpec {
        start_time: t,
        task_horizon,
        predictions,
        regions,
        constraint: cfg.constraint,
        weights: cfg.weights,
        goal: cfg.goal,
        slack: cfg.slack,
    }
}

/// Solve the full-horizon problem once at `t = 0` with the supplied
/// predictions. Requires a table with `H = T`.
pub fn open_loop_plan(
    x0: &RobotState,
    predictions: &PredictionSet,
    table: &CalibrationTable,
    cfg: &PlannerConfig,
) -> Result<PlanResult, PlanError> {
    if table.horizon < table.task_horizon {
        return Err(PlanError::TableHorizonTooShort {
            horizon: table.horizon,
            task_horizon: table.task_horizon,
        });
    }
    if predictions.made_at != 0 {
        return Err(PlanError::PredictionWindowMismatch {
            expected: 0,
            got: predictions.made_at,
        });
    }
    let t_horizon = table.task_horizon;
    let regions = window_regions(table, 0, t_horizon, cfg.use_worst_case_regions)?;
    let mut window = predictions.clone();
    window.values.truncate(t_horizon);
    let spec = build_spec(0, window, regions, cfg, t_horizon);
    solve_ocp(x0, &spec, &cfg.vehicle, &cfg.solver, None)
}

/// Outcome of one receding-horizon step.
#[derive(Debug, Clone)]
pub struct MpcStep {
    /// The one control actually applied.
    pub control: ControlInput,
    pub plan: PlanResult,
    pub predictions: PredictionSet,
    pub regions: Vec<Region>,
}

/// One receding-horizon step: re-predict from the history through `t`,
/// rebuild the constraint window, solve warm-started, and return the first
/// control of the solution.
pub fn mpc_step(
    t: usize,
    x_t: &RobotState,
    history: &[JointState],
    predictor: &PredictorSpec,
    table: &CalibrationTable,
    cfg: &PlannerConfig,
    warm: Option<&[ControlInput]>,
) -> Result<MpcStep, PlanError> {
    let t_horizon = table.task_horizon;
    if t >= t_horizon {
        return Err(PlanError::HorizonEnd {
            t,
            task_horizon: t_horizon,
        });
    }
    let predictions = predict(predictor, history, t, cfg.horizon, t_horizon)?;
    let window = predictions.values.len();
    let regions = window_regions(table, t, window, cfg.use_worst_case_regions)?;
    let spec = build_spec(t, predictions.clone(), regions.clone(), cfg, t_horizon);
    let plan = solve_ocp(x_t, &spec, &cfg.vehicle, &cfg.solver, warm)?;
    Ok(MpcStep {
        control: plan.controls[0],
        plan,
        predictions,
        regions,
    })
}

/// Maximal braking clamped so the speed never goes negative; the closed-loop
/// fallback when no feasible plan exists.
pub fn braking_control(speed: f64, vehicle: &VehicleConfig) -> ControlInput {
    let accel = (-speed / vehicle.dt).max(vehicle.control_bounds.accel_min);
    ControlInput::new(0.0, accel.min(vehicle.control_bounds.accel_max))
}
