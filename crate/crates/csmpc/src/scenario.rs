//! Synthetic multi-agent trajectory generator.
//!
//! Each agent draws a random start, goal, and speed, then walks toward its
//! goal with an additive isotropic Gaussian perturbation per step. Agents
//! stop (zero nominal velocity, noise continues) once they reach the goal,
//! and never react to the robot, so trajectories are i.i.d. draws from a
//! fixed distribution.
//!
//! Randomness is fully seeded: trajectory `i` of a dataset uses an rng
//! stream derived from `(seed, i)`, so datasets can be extended or generated
//! in parallel without perturbing earlier draws.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::domain::{AgentState, Dataset, JointState, ScenarioConfig, Split, Trajectory};
use crate::vec2::{self, Vec2};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("dataset must contain at least one trajectory")]
    EmptyDataset,
}

/// Per-agent walking script drawn at the start of each trajectory.
#[derive(Debug, Clone, Copy)]
pub struct AgentScript {
    pub start: Vec2,
    pub goal: Vec2,
    pub speed: f64,
    pub noise_scale: f64,
}

/// Deterministic child rng for trajectory `index` of a dataset seeded with `seed`.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn draw_script<R: Rng>(cfg: &ScenarioConfig, rng: &mut R) -> AgentScript {
    let ws = &cfg.workspace;
    let start = [
        rng.gen_range(ws.min[0]..ws.max[0]),
        rng.gen_range(ws.min[1]..ws.max[1]),
    ];
    let goal = [
        rng.gen_range(ws.min[0]..ws.max[0]),
        rng.gen_range(ws.min[1]..ws.max[1]),
    ];
    let speed = if cfg.speed_range[1] > cfg.speed_range[0] {
        rng.gen_range(cfg.speed_range[0]..cfg.speed_range[1])
    } else {
        cfg.speed_range[0]
    };
    AgentScript {
        start,
        goal,
        speed,
        noise_scale: cfg.noise_scale,
    }
}

/// Draw one trajectory of length `history_len + task_horizon + 1`.
///
/// Identical `cfg` and rng state reproduce the trajectory bit-exactly.
pub fn sample_trajectory<R: Rng>(
    cfg: &ScenarioConfig,
    rng: &mut R,
) -> Result<Trajectory, ScenarioError> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(ScenarioError::InvalidConfig(problems.join("; ")));
    }

    let scripts: Vec<AgentScript> = (0..cfg.agent_count).map(|_| draw_script(cfg, rng)).collect();
    let mut positions: Vec<Vec2> = scripts.iter().map(|s| s.start).collect();
    let mut arrived = vec![false; cfg.agent_count];

    let steps = cfg.history_len + cfg.task_horizon;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(JointState::new(
        positions.iter().map(|&p| AgentState { position: p }).collect(),
    ));

    for _ in 0..steps {
        for (j, script) in scripts.iter().enumerate() {
            if !arrived[j] {
                let step_len = script.speed * cfg.dt;
                let remaining = vec2::dist(positions[j], script.goal);
                if remaining <= step_len {
                    positions[j] = script.goal;
                    arrived[j] = true;
                } else {
                    let dir = vec2::unit_toward(positions[j], script.goal);
                    positions[j] = vec2::add(positions[j], vec2::scale(dir, step_len));
                }
            }
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            positions[j] = vec2::add(positions[j], [nx * script.noise_scale, ny * script.noise_scale]);
        }
        states.push(JointState::new(
            positions.iter().map(|&p| AgentState { position: p }).collect(),
        ));
    }

    Ok(Trajectory {
        states,
        history_len: cfg.history_len,
    })
}

/// Generate `k_train + k_val + k_test` independent trajectories with split
/// labels assigned in that order. Trajectory `i` depends only on `(seed, i)`,
/// so regenerating with larger counts reproduces earlier trajectories.
pub fn generate_dataset(
    cfg: &ScenarioConfig,
    k_train: usize,
    k_val: usize,
    k_test: usize,
    seed: u64,
) -> Result<Dataset, ScenarioError> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(ScenarioError::InvalidConfig(problems.join("; ")));
    }
    let total = k_train + k_val + k_test;
    if total == 0 {
        return Err(ScenarioError::EmptyDataset);
    }

    let trajectories: Vec<Trajectory> = (0..total)
        .into_par_iter()
        .map(|i| {
            let mut rng = trajectory_rng(seed, i as u64);
            sample_trajectory(cfg, &mut rng).expect("config validated above")
        })
        .collect();

    let mut splits = Vec::with_capacity(total);
    splits.extend(std::iter::repeat_n(Split::Train, k_train));
    splits.extend(std::iter::repeat_n(Split::Val, k_val));
    splits.extend(std::iter::repeat_n(Split::Test, k_test));

    Ok(Dataset {
        seed,
        scenario: cfg.clone(),
        trajectories,
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Box2;

    fn base_config() -> ScenarioConfig {
        ScenarioConfig {
            agent_count: 2,
            task_horizon: 10,
            history_len: 4,
            dt: 0.5,
            workspace: Box2 {
                min: [0.0, 0.0],
                max: [20.0, 20.0],
            },
            speed_range: [0.5, 1.5],
            noise_scale: 0.1,
            goal_center: [10.0, 18.0],
            goal_radius: 0.5,
            safety_distance: 0.3,
        }
    }

    #[test]
    fn noiseless_walker_stays_on_segment_with_fixed_spacing() {
        let mut cfg = base_config();
        cfg.noise_scale = 0.0;
        cfg.speed_range = [1.0, 1.0];
        cfg.agent_count = 1;
        let mut rng = trajectory_rng(3, 0);
        let traj = sample_trajectory(&cfg, &mut rng).unwrap();

        let start = traj.states[0].position(0);
        let first_dir = vec2::sub(traj.states[1].position(0), start);
        let step_len = cfg.speed_range[0] * cfg.dt;
        let mut arrived = false;
        for w in traj.states.windows(2) {
            let d = vec2::sub(w[1].position(0), w[0].position(0));
            let len = vec2::norm(d);
            if arrived {
                assert!(len < 1e-12, "agent moved after arrival: {len}");
                continue;
            }
            // Collinear with the first displacement.
            let cross = d[0] * first_dir[1] - d[1] * first_dir[0];
            assert!(cross.abs() < 1e-9, "off-segment step, cross = {cross}");
            if (len - step_len).abs() > 1e-12 {
                // Arrival step may be shorter; afterwards the agent is parked.
                assert!(len < step_len + 1e-12);
                arrived = true;
            }
        }
    }

    #[test]
    fn same_seed_reproduces_trajectory_exactly() {
        let cfg = base_config();
        let a = sample_trajectory(&cfg, &mut trajectory_rng(42, 7)).unwrap();
        let b = sample_trajectory(&cfg, &mut trajectory_rng(42, 7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn first_step_noise_matches_configured_sigma() {
        let mut cfg = base_config();
        cfg.agent_count = 1;
        cfg.history_len = 0;
        cfg.task_horizon = 1;
        cfg.speed_range = [0.0, 0.0];
        cfg.noise_scale = 0.25;
        let n = 10_000;
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for i in 0..n {
            let traj = sample_trajectory(&cfg, &mut trajectory_rng(11, i as u64)).unwrap();
            let d = vec2::sub(traj.states[1].position(0), traj.states[0].position(0));
            xs.push(d[0]);
            ys.push(d[1]);
        }
        for samples in [xs, ys] {
            let mean = samples.iter().sum::<f64>() / n as f64;
            let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let sd = var.sqrt();
            assert!(
                (sd - cfg.noise_scale).abs() < 0.03 * cfg.noise_scale,
                "sample sd {sd} vs sigma {}",
                cfg.noise_scale
            );
        }
    }

    #[test]
    fn generate_dataset_counts_and_split_sizes() {
        let cfg = base_config();
        let d = generate_dataset(&cfg, 0, 5, 5, 7).unwrap();
        assert_eq!(d.trajectories.len(), 10);
        assert_eq!(d.split_size(Split::Train), 0);
        assert_eq!(d.split_size(Split::Val), 5);
        assert_eq!(d.split_size(Split::Test), 5);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let cfg = base_config();
        let a = generate_dataset(&cfg, 1, 2, 2, 7).unwrap();
        let b = generate_dataset(&cfg, 1, 2, 2, 7).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn per_index_streams_make_datasets_extendable() {
        let cfg = base_config();
        let small = generate_dataset(&cfg, 0, 2, 0, 9).unwrap();
        let large = generate_dataset(&cfg, 0, 5, 0, 9).unwrap();
        for i in 0..2 {
            assert_eq!(small.trajectories[i], large.trajectories[i]);
        }
    }

    #[test]
    fn generation_order_does_not_change_the_multiset() {
        let cfg = base_config();
        let forward = generate_dataset(&cfg, 0, 6, 0, 13).unwrap();
        let order = [4usize, 0, 5, 2, 1, 3];
        let mut permuted: Vec<Trajectory> = order
            .iter()
            .map(|&i| sample_trajectory(&cfg, &mut trajectory_rng(13, i as u64)).unwrap())
            .collect();
        let key = |t: &Trajectory| format!("{:?}", t.states);
        let mut expected = forward.trajectories.clone();
        expected.sort_by_key(key);
        permuted.sort_by_key(key);
        assert_eq!(expected, permuted);
    }

    #[test]
    fn noiseless_agents_stay_inside_the_workspace() {
        let mut cfg = base_config();
        cfg.noise_scale = 0.0;
        cfg.agent_count = 3;
        for i in 0..50 {
            let traj = sample_trajectory(&cfg, &mut trajectory_rng(21, i)).unwrap();
            for state in &traj.states {
                for a in &state.agents {
                    assert!(cfg.workspace.contains(a.position), "{:?}", a.position);
                }
            }
        }
    }

    #[test]
    fn degenerate_workspace_is_rejected() {
        let mut cfg = base_config();
        cfg.workspace = Box2 {
            min: [5.0, 5.0],
            max: [5.0, 9.0],
        };
        let err = sample_trajectory(&cfg, &mut trajectory_rng(0, 0)).unwrap_err();
        assert!(matches!(err, ScenarioError::InvalidConfig(_)));
    }
}
