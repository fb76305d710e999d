//! Build a calibration table and look at how the region radii behave:
//! growth with the prediction lag, growth with the union-bound horizon,
//! and the unbounded sentinel when the validation set is too small.
//!
//! ```bash
//! cargo run --example calibrate_regions
//! ```

use csmpc::conformal::{calibrate, quantile_index, Region, ScoreMode};
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
    let dataset = generate_dataset(&scenario, 60, 2000, 50, 13).unwrap();
    let predictor = fit_autoregressive(&dataset, 2).unwrap();

    let delta = 0.05;
    let table = calibrate(&dataset, &predictor, delta, 20, 20, ScoreMode::PerAgentMax).unwrap();
    println!(
        "delta {} over T {} steps: delta_bar {:.4}, quantile index p = {} of K+1 = {}",
        delta,
        table.task_horizon,
        table.delta_bar(),
        table.quantile,
        table.k_val + 1
    );

    println!("\nregion radius by lag at t = 10 (predictions made at step 10):");
    for tau in 11..=20 {
        if let Some(Region::Bounded(c)) = table.region(10, tau) {
            let bar = "#".repeat((c * 60.0) as usize);
            println!("  tau = {tau:2}  C = {c:.3} m  {bar}");
        }
    }

    println!("\nsame pair (t = 2, tau = 5) under different union-bound horizons:");
    for t_horizon in [5, 10, 20] {
        let t = calibrate(&dataset, &predictor, delta, t_horizon, t_horizon, ScoreMode::PerAgentMax)
            .unwrap();
        println!(
            "  T = {t_horizon:2}: C = {:?} (p = {})",
            t.region(2, 5).unwrap(),
            t.quantile
        );
    }

    println!("\nworst-case radius per lag (reuse mode input):");
    for (lag, region) in table.worst_case_by_lag() {
        if let Region::Bounded(c) = region {
            print!(" k{lag}={c:.2}");
        }
    }
    println!();

    // Too few validation trajectories force the sentinel: p = K + 1.
    let tiny = generate_dataset(&scenario, 0, 10, 5, 13).unwrap();
    let sentinel_table =
        calibrate(&tiny, &predictor, delta, 20, 20, ScoreMode::PerAgentMax).unwrap();
    let unbounded = sentinel_table
        .entries()
        .filter(|(_, _, r)| r.is_unbounded())
        .count();
    println!(
        "\nwith K_val = 10 and delta_bar = {:.4}: p = {} = K+1, so {}/{} regions are unbounded",
        sentinel_table.delta_bar(),
        quantile_index(10, sentinel_table.delta_bar()),
        unbounded,
        sentinel_table.len()
    );
    println!("the planner reports such a window as infeasible rather than planning through it");
}
