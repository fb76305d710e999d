//! Run the receding-horizon controller for one episode against a held-out
//! trajectory and print what happened at every step.
//!
//! ```bash
//! cargo run --example mpc_closed_loop
//! ```

use csmpc::conformal::{calibrate, ScoreMode};
use csmpc::domain::{Box2, ScenarioConfig, Split};
use csmpc::dynamics::{ConstraintSpec, ControlBounds, RobotState, StateBounds};
use csmpc::planner::{
    CostWeights, GoalMode, GoalSpec, PlannerConfig, SlackSettings, SolverConfig, VehicleConfig,
};
use csmpc::predictor::fit_autoregressive;
use csmpc::scenario::generate_dataset;
use csmpc::simulation::run_closed_loop;

fn main() {
    let scenario = ScenarioConfig {
        agent_count: 3,
        task_horizon: 20,
        history_len: 20,
        dt: 0.5,
        workspace: Box2 {
            min: [0.0, 0.0],
            max: [20.0, 20.0],
        },
        speed_range: [0.5, 1.5],
        noise_scale: 0.05,
        goal_center: [10.0, 18.0],
        goal_radius: 0.5,
        safety_distance: 0.3,
    };
    let dataset = generate_dataset(&scenario, 60, 400, 50, 23).unwrap();
    let predictor = fit_autoregressive(&dataset, 2).unwrap();
    let table = calibrate(&dataset, &predictor, 0.05, 20, 20, ScoreMode::PerAgentMax).unwrap();

    let cfg = PlannerConfig {
        horizon: 8,
        goal: GoalSpec {
            center: [10.0, 18.0],
            radius: 0.5,
            mode: GoalMode::SoftCost,
        },
        constraint: ConstraintSpec::new(0.3),
        weights: CostWeights {
            speed: 1.0,
            effort: 0.1,
            terminal: 10.0,
        },
        slack: SlackSettings::default(),
        use_worst_case_regions: false,
        solver: SolverConfig::default(),
        vehicle: VehicleConfig {
            dt: 0.5,
            length: 1.0,
            control_bounds: ControlBounds {
                steer_max: 0.6,
                accel_min: -3.0,
                accel_max: 3.0,
            },
            state_bounds: StateBounds {
                workspace: scenario.workspace,
                speed_max: 4.0,
            },
        },
    };

    let env = &dataset.trajectories[dataset.indices(Split::Test)[0]];
    let x0 = RobotState::new(10.0, 2.0, std::f64::consts::FRAC_PI_2, 1.0);
    let log = run_closed_loop(env, &predictor, &table, &cfg, x0);

    println!("  t      x      y  speed   steer  accel   clearance  status");
    for step in &log.steps {
        let s = &log.states[step.t];
        println!(
            " {:2}  {:5.2}  {:5.2}  {:5.2}  {:+.3} {:+.3}      {:6.3}  {:?}{}",
            step.t,
            s.x,
            s.y,
            s.speed,
            step.control.steer,
            step.control.accel,
            log.constraint_values[step.t],
            step.status,
            if step.braked { " (braked)" } else { "" }
        );
    }
    let last = log.states.last().unwrap();
    println!(
        " {:2}  {:5.2}  {:5.2}  {:5.2}                     {:6.3}",
        log.states.len() - 1,
        last.x,
        last.y,
        last.speed,
        log.constraint_values.last().unwrap()
    );

    let s = &log.summary;
    println!(
        "\nsafe {} (min clearance {:.3} m), goal reached {}, cost {:.2}, \
         infeasible steps {}, flagged {}",
        s.safe, s.min_constraint, s.goal_reached, s.total_cost, s.infeasible_steps, s.flagged
    );
    let covered = log
        .steps
        .iter()
        .filter(|st| st.one_step_covered == Some(true))
        .count();
    println!(
        "one-step regions covered the realized next state in {covered}/{} steps",
        log.steps.len()
    );
}
