//! Audit the finite-sample coverage guarantee on held-out trajectories:
//! the fraction of test trajectories whose realized states stay inside
//! every prediction region must be at least 1 - delta.
//!
//! ```bash
//! cargo run --example coverage_audit
//! ```

use csmpc::conformal::{calibrate, empirical_coverage, CoverageKind, ScoreMode};
use csmpc::domain::{Box2, ScenarioConfig};
use csmpc::predictor::fit_autoregressive;
use csmpc::scenario::generate_dataset;

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
    let dataset = generate_dataset(&scenario, 60, 500, 500, 29).unwrap();
    let predictor = fit_autoregressive(&dataset, 2).unwrap();
    let delta = 0.05;

    for mode in [ScoreMode::PerAgentMax, ScoreMode::JointNorm] {
        let table = calibrate(&dataset, &predictor, delta, 20, 20, mode).unwrap();
        println!("score mode {mode:?}:");
        for kind in [CoverageKind::JointFromZero, CoverageKind::OneStep] {
            let outcome = empirical_coverage(&dataset, &predictor, &table, kind).unwrap();
            let n = outcome.report.passes.len();
            let covered = n - outcome.report.failures.len();
            let slack = 3.0 * (delta * (1.0 - delta) / n as f64).sqrt();
            println!(
                "  {kind:?}: {covered}/{n} trajectories covered \
                 (rate {:.4}; bound {:.2}, minus binomial noise {:.3})",
                outcome.report.rate,
                1.0 - delta,
                1.0 - delta - slack
            );
        }
    }

    println!();
    println!("score spread at (t = 0, tau = 20), per-agent-max mode:");
    let table = calibrate(&dataset, &predictor, delta, 20, 20, ScoreMode::PerAgentMax).unwrap();
    let outcome =
        empirical_coverage(&dataset, &predictor, &table, CoverageKind::JointFromZero).unwrap();
    let mut far: Vec<f64> = outcome
        .scores
        .iter()
        .filter(|r| r.tau == 20)
        .map(|r| r.score)
        .collect();
    far.sort_by(f64::total_cmp);
    let pick = |q: f64| far[((far.len() - 1) as f64 * q) as usize];
    println!(
        "  min {:.3}  median {:.3}  p90 {:.3}  max {:.3}  vs region C = {:?}",
        far[0],
        pick(0.5),
        pick(0.9),
        far[far.len() - 1],
        table.region(0, 20).unwrap()
    );
}
