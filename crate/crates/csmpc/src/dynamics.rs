//! Kinematic bicycle model, rollouts with analytic control sensitivities,
//! and the min-distance collision constraint.
//!
//! The discrete-time update is
//!
//! ```text
//! x'       = x + dt * v * cos(heading)
//! y'       = y + dt * v * sin(heading)
//! heading' = wrap(heading + dt * (v / length) * tan(steer))
//! v'       = v + dt * accel
//! ```
//!
//! with the heading wrapped into `(-pi, pi]` after every update. The
//! collision constraint `c(p, Y) = min_j ||p - Y_j|| - epsilon` is
//! 1-Lipschitz in the joint agent state under both score norms, which is
//! what lets the planner tighten it by a calibrated region radius.

use serde::{Deserialize, Serialize};

use crate::domain::{Box2, JointState};
use crate::vec2::{self, Vec2};

/// Robot state: planar position in meters, heading in radians, speed in m/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

impl RobotState {
    pub fn new(x: f64, y: f64, heading: f64, speed: f64) -> Self {
        Self {
            x,
            y,
            heading,
            speed,
        }
    }

    pub fn position(&self) -> Vec2 {
        [self.x, self.y]
    }
}

/// Steering angle in radians and acceleration in m/s^2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub steer: f64,
    pub accel: f64,
}

impl ControlInput {
    pub const ZERO: ControlInput = ControlInput {
        steer: 0.0,
        accel: 0.0,
    };

    pub fn new(steer: f64, accel: f64) -> Self {
        Self { steer, accel }
    }
}

/// The admissible control set: `|steer| <= steer_max`, `accel` in
/// `[accel_min, accel_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlBounds {
    pub steer_max: f64,
    pub accel_min: f64,
    pub accel_max: f64,
}

impl ControlBounds {
    pub fn clamp(&self, u: ControlInput) -> ControlInput {
        ControlInput {
            steer: u.steer.clamp(-self.steer_max, self.steer_max),
            accel: u.accel.clamp(self.accel_min, self.accel_max),
        }
    }

    pub fn contains(&self, u: ControlInput, tol: f64) -> bool {
        u.steer.abs() <= self.steer_max + tol
            && u.accel >= self.accel_min - tol
            && u.accel <= self.accel_max + tol
    }
}

/// The admissible state set: position inside the workspace box, speed in
/// `[0, speed_max]`; heading is unconstrained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateBounds {
    pub workspace: Box2,
    pub speed_max: f64,
}

impl StateBounds {
    /// Largest bound violation of the state, zero when admissible.
    pub fn violation(&self, s: &RobotState) -> f64 {
        let ws = &self.workspace;
        [
            ws.min[0] - s.x,
            s.x - ws.max[0],
            ws.min[1] - s.y,
            s.y - ws.max[1],
            -s.speed,
            s.speed - self.speed_max,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Safety distance and the Lipschitz constant of the collision constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub safety_distance: f64,
    pub lipschitz: f64,
}

impl ConstraintSpec {
    pub fn new(safety_distance: f64) -> Self {
        Self {
            safety_distance,
            lipschitz: 1.0,
        }
    }
}

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut wrapped = theta - two_pi * (theta / two_pi).round();
    if wrapped <= -std::f64::consts::PI {
        wrapped += two_pi;
    }
    wrapped
}

/// One step of the kinematic bicycle model.
pub fn bicycle_step(s: &RobotState, u: &ControlInput, dt: f64, length: f64) -> RobotState {
    RobotState {
        x: s.x + dt * s.speed * s.heading.cos(),
        y: s.y + dt * s.speed * s.heading.sin(),
        heading: wrap_angle(s.heading + dt * (s.speed / length) * u.steer.tan()),
        speed: s.speed + dt * u.accel,
    }
}

/// Repeated [`bicycle_step`]; the result has `controls.len() + 1` states
/// starting with `start`.
pub fn rollout(start: &RobotState, controls: &[ControlInput], dt: f64, length: f64) -> Vec<RobotState> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(*start);
    for u in controls {
        let next = bicycle_step(states.last().unwrap(), u, dt, length);
        states.push(next);
    }
    states
}

/// Jacobian of one state with respect to one control input: rows are
/// `(x, y, heading, speed)`, columns are `(steer, accel)`.
pub type StateJacobian = [[f64; 2]; 4];

const ZERO_JACOBIAN: StateJacobian = [[0.0; 2]; 4];

/// Chain-rule sensitivities of every rollout state with respect to every
/// control entry.
#[derive(Debug, Clone)]
pub struct RolloutSensitivities {
    // blocks[i][k] = d state_{i+1} / d control_k, for k <= i.
    blocks: Vec<Vec<StateJacobian>>,
}

impl RolloutSensitivities {
    /// Jacobian of state `state_idx` (1-based within the rollout) w.r.t.
    /// control `control_idx`; zero when the control acts later.
    pub fn jacobian(&self, state_idx: usize, control_idx: usize) -> &StateJacobian {
        if state_idx == 0 || control_idx >= state_idx {
            &ZERO_JACOBIAN
        } else {
            &self.blocks[state_idx - 1][control_idx]
        }
    }

    /// All control Jacobians of state `state_idx`, indexed by control.
    pub fn row(&self, state_idx: usize) -> &[StateJacobian] {
        &self.blocks[state_idx - 1]
    }
}

/// [`rollout`] plus the analytic sensitivities of each state w.r.t. each
/// control entry, propagated by the chain rule through the step Jacobians.
pub fn rollout_with_sensitivities(
    start: &RobotState,
    controls: &[ControlInput],
    dt: f64,
    length: f64,
) -> (Vec<RobotState>, RolloutSensitivities) {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(*start);
    let mut blocks: Vec<Vec<StateJacobian>> = Vec::with_capacity(controls.len());

    for (step, u) in controls.iter().enumerate() {
        let s = *states.last().unwrap();
        let (sin_h, cos_h) = s.heading.sin_cos();
        // State Jacobian entries of the step map at (s, u).
        let a02 = -dt * s.speed * sin_h;
        let a03 = dt * cos_h;
        let a12 = dt * s.speed * cos_h;
        let a13 = dt * sin_h;
        let a23 = dt * u.steer.tan() / length;
        // Control Jacobian entries.
        let cos_steer = u.steer.cos();
        let b_heading_steer = dt * s.speed / (length * cos_steer * cos_steer);
        let b_speed_accel = dt;

        let mut row: Vec<StateJacobian> = Vec::with_capacity(step + 1);
        for j in blocks.last().map(Vec::as_slice).unwrap_or(&[]) {
            row.push([
                [
                    j[0][0] + a02 * j[2][0] + a03 * j[3][0],
                    j[0][1] + a02 * j[2][1] + a03 * j[3][1],
                ],
                [
                    j[1][0] + a12 * j[2][0] + a13 * j[3][0],
                    j[1][1] + a12 * j[2][1] + a13 * j[3][1],
                ],
                [j[2][0] + a23 * j[3][0], j[2][1] + a23 * j[3][1]],
                [j[3][0], j[3][1]],
            ]);
        }
        row.push([
            [0.0, 0.0],
            [0.0, 0.0],
            [b_heading_steer, 0.0],
            [0.0, b_speed_accel],
        ]);
        blocks.push(row);
        states.push(bicycle_step(&s, u, dt, length));
    }

    (states, RolloutSensitivities { blocks })
}

/// Index and distance of the agent nearest to `p`; ties resolve to the
/// lowest agent index.
pub fn nearest_agent(p: Vec2, agents: &JointState) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (j, a) in agents.agents.iter().enumerate() {
        let d = vec2::dist(p, a.position);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Collision constraint value: distance to the nearest agent minus the
/// safety distance. Nonnegative means safe.
pub fn constraint_value(p: Vec2, agents: &JointState, cs: &ConstraintSpec) -> f64 {
    nearest_agent(p, agents).1 - cs.safety_distance
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::AgentState;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn joint(points: &[[f64; 2]]) -> JointState {
        JointState::new(points.iter().map(|&p| AgentState { position: p }).collect())
    }

    #[test]
    fn straight_line_step() {
        let s = RobotState::new(0.0, 0.0, 0.0, 1.0);
        let next = bicycle_step(&s, &ControlInput::ZERO, 0.125, 1.0);
        assert_eq!(next, RobotState::new(0.125, 0.0, 0.0, 1.0));
    }

    #[test]
    fn accelerating_step_heading_north() {
        let s = RobotState::new(0.0, 0.0, FRAC_PI_2, 2.0);
        let next = bicycle_step(&s, &ControlInput::new(0.0, 1.0), 0.5, 1.0);
        assert!(next.x.abs() < 1e-12);
        assert!((next.y - 1.0).abs() < 1e-12);
        assert!((next.heading - FRAC_PI_2).abs() < 1e-12);
        assert!((next.speed - 2.5).abs() < 1e-12);
    }

    #[test]
    fn steering_uses_the_pre_update_heading_for_position() {
        let s = RobotState::new(0.0, 0.0, 0.0, 1.0);
        let next = bicycle_step(&s, &ControlInput::new(FRAC_PI_4, 0.0), 1.0, 1.0);
        assert!((next.x - 1.0).abs() < 1e-12);
        assert!(next.y.abs() < 1e-12);
        assert!((next.heading - 1.0).abs() < 1e-12);
        assert!((next.speed - 1.0).abs() < 1e-12);
    }

    /// Independent restatement of the four update formulas; a slip in either
    /// copy (sin for cos, x for y, post- for pre-update heading) fails this.
    fn reference_step(s: &RobotState, u: &ControlInput, dt: f64, length: f64) -> RobotState {
        let x_next = s.x + dt * s.speed * f64::cos(s.heading);
        let y_next = s.y + dt * s.speed * f64::sin(s.heading);
        let heading_next = wrap_angle(s.heading + dt * (s.speed / length) * f64::tan(u.steer));
        let speed_next = s.speed + dt * u.accel;
        RobotState::new(x_next, y_next, heading_next, speed_next)
    }

    #[test]
    fn step_matches_independent_reference_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let s = RobotState::new(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-PI..PI),
                rng.gen_range(0.0..3.0),
            );
            let u = ControlInput::new(rng.gen_range(-0.6..0.6), rng.gen_range(-3.0..3.0));
            let dt = rng.gen_range(0.05..0.6);
            assert_eq!(bicycle_step(&s, &u, dt, 1.0), reference_step(&s, &u, dt, 1.0));
        }
    }

    #[test]
    fn wrap_keeps_angles_in_the_half_open_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut samples: Vec<f64> = (0..200).map(|_| rng.gen_range(-32.0..32.0)).collect();
        samples.extend([PI, -PI, 3.0 * PI, -3.0 * PI, 0.0, PI + 1e-9, -PI - 1e-9]);
        for theta in samples {
            let w = wrap_angle(theta);
            assert!(w > -PI && w <= PI, "wrap({theta}) = {w}");
            assert!((w.cos() - theta.cos()).abs() < 1e-12);
            assert!((w.sin() - theta.sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_control_rollout_is_constant_velocity() {
        let start = RobotState::new(0.0, 0.0, 0.0, 1.0);
        let controls = vec![ControlInput::ZERO; 4];
        let states = rollout(&start, &controls, 0.5, 1.0);
        let xs: Vec<f64> = states.iter().map(|s| s.x).collect();
        assert_eq!(xs, vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        assert!(states.iter().all(|s| s.y == 0.0 && s.speed == 1.0));
    }

    #[test]
    fn rollout_concatenation_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let start = RobotState::new(1.0, -2.0, 0.3, 1.2);
        let controls: Vec<ControlInput> = (0..9)
            .map(|_| ControlInput::new(rng.gen_range(-0.5..0.5), rng.gen_range(-2.0..2.0)))
            .collect();
        let full = rollout(&start, &controls, 0.25, 1.0);
        let first = rollout(&start, &controls[..4], 0.25, 1.0);
        let second = rollout(&first[4], &controls[4..], 0.25, 1.0);
        assert_eq!(&full[..5], &first[..]);
        assert_eq!(&full[4..], &second[..]);
    }

    #[test]
    fn sensitivities_match_central_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let dt = 0.25;
        let length = 1.0;
        let eps = 1e-5;
        for _ in 0..30 {
            let start = RobotState::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-PI..PI),
                rng.gen_range(0.0..3.0),
            );
            let m = rng.gen_range(1..=12);
            let controls: Vec<ControlInput> = (0..m)
                .map(|_| ControlInput::new(rng.gen_range(-0.55..0.55), rng.gen_range(-2.5..2.5)))
                .collect();
            let (_, sens) = rollout_with_sensitivities(&start, &controls, dt, length);

            for k in 0..m {
                for col in 0..2 {
                    let mut plus = controls.clone();
                    let mut minus = controls.clone();
                    if col == 0 {
                        plus[k].steer += eps;
                        minus[k].steer -= eps;
                    } else {
                        plus[k].accel += eps;
                        minus[k].accel -= eps;
                    }
                    let sp = rollout(&start, &plus, dt, length);
                    let sm = rollout(&start, &minus, dt, length);
                    for tau in 1..=m {
                        let fd = [
                            (sp[tau].x - sm[tau].x) / (2.0 * eps),
                            (sp[tau].y - sm[tau].y) / (2.0 * eps),
                            (sp[tau].heading - sm[tau].heading) / (2.0 * eps),
                            (sp[tau].speed - sm[tau].speed) / (2.0 * eps),
                        ];
                        let jac = sens.jacobian(tau, k);
                        for row in 0..4 {
                            assert!(
                                (jac[row][col] - fd[row]).abs() <= 1e-6,
                                "state {tau}, control {k}, row {row}, col {col}: \
                                 analytic {} vs fd {}",
                                jac[row][col],
                                fd[row]
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn constraint_takes_the_nearest_agent() {
        let agents = joint(&[[1.0, 0.0], [0.0, 2.0]]);
        let cs = ConstraintSpec::new(0.5);
        assert_eq!(constraint_value([0.0, 0.0], &agents, &cs), 0.5);
    }

    #[test]
    fn coincident_agent_with_zero_margin_gives_zero() {
        let agents = joint(&[[1.5, -0.5]]);
        let cs = ConstraintSpec::new(0.0);
        assert_eq!(constraint_value([1.5, -0.5], &agents, &cs), 0.0);
    }

    #[test]
    fn single_agent_half_meter_margin_example() {
        let agents = joint(&[[0.5, 0.0]]);
        let cs = ConstraintSpec::new(0.5);
        assert_eq!(constraint_value([0.0, 0.0], &agents, &cs), 0.0);
        // Lipschitz in the agent position with constant one.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..1000 {
            let p = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let y1 = joint(&[[rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]]);
            let y2 = joint(&[[rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]]);
            let dv = vec2::dist(y1.position(0), y2.position(0));
            let dc = (constraint_value(p, &y1, &cs) - constraint_value(p, &y2, &cs)).abs();
            assert!(dc <= dv + 1e-12);
        }
    }

    #[test]
    fn constraint_is_one_lipschitz_under_both_score_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let cs = ConstraintSpec::new(0.3);
        let n = 3;
        for _ in 0..100_000 {
            let p = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let a: Vec<[f64; 2]> = (0..n)
                .map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)])
                .collect();
            let b: Vec<[f64; 2]> = (0..n)
                .map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)])
                .collect();
            let ya = joint(&a);
            let yb = joint(&b);
            let dc = (constraint_value(p, &ya, &cs) - constraint_value(p, &yb, &cs)).abs();
            let per_agent_max = a
                .iter()
                .zip(&b)
                .map(|(u, v)| vec2::dist(*u, *v))
                .fold(0.0, f64::max);
            let joint_norm = a
                .iter()
                .zip(&b)
                .map(|(u, v)| {
                    let d = vec2::sub(*u, *v);
                    vec2::dot(d, d)
                })
                .sum::<f64>()
                .sqrt();
            assert!(dc <= per_agent_max + 1e-12, "{dc} > {per_agent_max}");
            assert!(dc <= joint_norm + 1e-12, "{dc} > {joint_norm}");
        }
    }

    #[test]
    fn nearest_agent_ties_resolve_to_the_lowest_index() {
        let agents = joint(&[[1.0, 0.0], [-1.0, 0.0]]);
        assert_eq!(nearest_agent([0.0, 0.0], &agents).0, 0);
    }
}
