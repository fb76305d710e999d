//! Fit the pooled autoregressive predictor and compare it with the
//! constant-velocity baseline on one-step residuals.
//!
//! ```bash
//! cargo run --example fit_predictor
//! ```

use csmpc::domain::{Box2, Dataset, ScenarioConfig, Split};
use csmpc::predictor::{fit_autoregressive, predict, PredictorSpec};
use csmpc::scenario::generate_dataset;
use csmpc::vec2;

fn one_step_rmse(spec: &PredictorSpec, dataset: &Dataset, split: Split) -> f64 {
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for (_, traj) in dataset.in_split(split) {
        let t_max = traj.task_horizon();
        for t in 2..t_max {
            let pred = predict(spec, traj.history_through(t), t, 1, t_max).unwrap();
            let hat = pred.at_tau(t + 1).unwrap();
            for j in 0..traj.agent_count() {
                let e = vec2::sub(traj.at(t + 1).position(j), hat.position(j));
                sum_sq += vec2::dot(e, e);
                count += 1;
            }
        }
    }
    (sum_sq / count as f64).sqrt()
}

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
    let dataset = generate_dataset(&scenario, 80, 50, 50, 11).unwrap();

    for order in [1, 2, 4] {
        let spec = fit_autoregressive(&dataset, order).unwrap();
        if let PredictorSpec::Autoregressive {
            coefficients,
            min_norm_fallback,
            ..
        } = &spec
        {
            let coeffs: Vec<String> = coefficients.iter().map(|c| format!("{c:+.4}")).collect();
            println!(
                "order {order}: coefficients [{}]{}",
                coeffs.join(", "),
                if *min_norm_fallback { " (minimum-norm)" } else { "" }
            );
        }
        println!(
            "  one-step rmse: train {:.4} m, test {:.4} m",
            one_step_rmse(&spec, &dataset, Split::Train),
            one_step_rmse(&spec, &dataset, Split::Test),
        );
    }

    let cv = PredictorSpec::ConstantVelocity;
    println!(
        "constant velocity baseline: train {:.4} m, test {:.4} m",
        one_step_rmse(&cv, &dataset, Split::Train),
        one_step_rmse(&cv, &dataset, Split::Test),
    );

    let spec = fit_autoregressive(&dataset, 2).unwrap();
    println!("serialized spec: {}", serde_json::to_string(&spec).unwrap());
}
