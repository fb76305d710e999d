//! End-to-end checks of the command-line pipeline: every subcommand runs
//! against a small scenario, artifacts land where declared, reruns are
//! byte-identical, and bad invocations exit with code 1.

use std::fs;
use std::path::{Path, PathBuf};

use csmpc::cli::dispatch;

fn run(args: &[&str]) -> i32 {
    dispatch(args.iter().map(|s| s.to_string()))
}

struct Workbench {
    _dir: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

impl Workbench {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("config.json");
        let out = dir.path().join("out");
        let body = serde_json::json!({
            "scenario": {
                "agent_count": 2,
                "task_horizon": 6,
                "history_len": 4,
                "dt": 0.5,
                "workspace": {"min": [0.0, 0.0], "max": [12.0, 12.0]},
                "speed_range": [0.5, 1.5],
                "noise_scale": 0.05,
                "goal_center": [6.0, 10.0],
                "goal_radius": 0.6,
                "safety_distance": 0.3
            },
            "counts": {"train": 6, "val": 40, "test": 6},
            "dataset_seed": 3,
            "delta": 0.2,
            "horizon": 6,
            "robot_start": {"x": 6.0, "y": 1.0, "heading": std::f64::consts::FRAC_PI_2, "speed": 1.0},
            "goal_mode": "soft-cost"
        });
        fs::write(&config, serde_json::to_string_pretty(&body).unwrap()).unwrap();
        Self {
            _dir: dir,
            config,
            out,
        }
    }

    fn cfg(&self) -> &str {
        self.config.to_str().unwrap()
    }

    fn out(&self) -> &str {
        self.out.to_str().unwrap()
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()))
}

#[test]
fn full_pipeline_produces_every_declared_artifact() {
    let wb = Workbench::new();
    assert_eq!(
        run(&["generate", "--config", wb.cfg(), "--out", wb.out(), "--export-traj", "0"]),
        0
    );
    assert!(wb.path("dataset.json").exists());
    let csv = read(&wb.path("trajectory_0.csv"));
    assert!(csv.starts_with("t,agent,x,y\n"));
    assert!(csv.lines().nth(1).unwrap().starts_with("-4,0,"));

    assert_eq!(run(&["fit", "--config", wb.cfg(), "--out", wb.out(), "--order", "1"]), 0);
    let predictor: serde_json::Value =
        serde_json::from_str(&read(&wb.path("predictor.json"))).unwrap();
    assert_eq!(predictor["kind"], "autoregressive");
    assert_eq!(predictor["q"], 1);

    let predictor_flag = wb.path("predictor.json");
    let predictor_flag = predictor_flag.to_str().unwrap();
    assert_eq!(
        run(&[
            "calibrate",
            "--config",
            wb.cfg(),
            "--out",
            wb.out(),
            "--predictor",
            predictor_flag,
            "--mode",
            "agentmax",
        ]),
        0
    );
    let table: serde_json::Value = serde_json::from_str(&read(&wb.path("table.json"))).unwrap();
    for key in ["delta", "T", "H", "p", "mode", "K_val", "regions"] {
        assert!(table.get(key).is_some(), "table.json missing key {key}");
    }

    for kind in ["joint", "onestep"] {
        assert_eq!(
            run(&[
                "coverage",
                "--config",
                wb.cfg(),
                "--out",
                wb.out(),
                "--predictor",
                predictor_flag,
                "--kind",
                kind,
            ]),
            0
        );
        let report: serde_json::Value =
            serde_json::from_str(&read(&wb.path("coverage.json"))).unwrap();
        let rate = report["rate"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&rate));
        assert!(report.get("passes").is_some() && report.get("failures").is_some());
        assert!(read(&wb.path("coverage_scores.csv")).starts_with("t,tau,trajectory,score,C\n"));
    }

    for extra in [vec!["--t", "1"], vec!["--openloop"]] {
        let mut args = vec![
            "plan",
            "--config",
            wb.cfg(),
            "--out",
            wb.out(),
            "--predictor",
            predictor_flag,
        ];
        args.extend(extra);
        assert_eq!(run(&args), 0);
        let plan: serde_json::Value = serde_json::from_str(&read(&wb.path("plan.json"))).unwrap();
        assert!(plan.get("status").is_some() && plan.get("controls").is_some());
        assert!(read(&wb.path("plan.csv")).starts_with("tau,x,y,theta,v,c_value,C_value\n"));
    }

    assert_eq!(
        run(&[
            "simulate",
            "--config",
            wb.cfg(),
            "--out",
            wb.out(),
            "--predictor",
            predictor_flag,
            "--mode",
            "both",
            "--runs",
            "3",
        ]),
        0
    );
    assert!(wb.path("report.json").exists());
    assert!(wb.path("summary.csv").exists());
    for overlay in ["overlay_mpc.csv", "overlay_openloop.csv"] {
        let text = read(&wb.path(overlay));
        assert!(text.starts_with("t,series,item,x,y,radius\n"));
        assert!(text.lines().any(|l| l.contains(",robot,")));
        assert!(text.lines().any(|l| l.contains(",observed,")));
    }
    let pairs = read(&wb.path("pairs.csv"));
    assert_eq!(pairs.lines().count(), 1 + 3, "one row per test trajectory");
    let run_files = fs::read_dir(wb.path("runs")).unwrap().count();
    assert_eq!(run_files, 3 + 3 + 1, "mpc logs, open-loop logs, meta");

    // Folding the logs through the second entry point reproduces the report.
    let runs_dir = wb.path("runs");
    let refold_out = wb.path("refold");
    assert_eq!(
        run(&[
            "report",
            "--in",
            runs_dir.to_str().unwrap(),
            "--out",
            refold_out.to_str().unwrap(),
        ]),
        0
    );
    assert_eq!(
        read(&wb.path("report.json")),
        read(&refold_out.join("report.json")),
        "report fold differs between entry points"
    );
}

#[test]
fn reruns_are_byte_identical() {
    let wb = Workbench::new();
    assert_eq!(run(&["generate", "--config", wb.cfg(), "--out", wb.out()]), 0);
    let first = read(&wb.path("dataset.json"));
    assert_eq!(run(&["generate", "--config", wb.cfg(), "--out", wb.out()]), 0);
    assert_eq!(first, read(&wb.path("dataset.json")));
}

#[test]
fn flags_override_config_fields() {
    let wb = Workbench::new();
    assert_eq!(run(&["generate", "--config", wb.cfg(), "--out", wb.out()]), 0);
    // The config says delta = 0.2; the flag wins and shows up in the table.
    assert_eq!(
        run(&["calibrate", "--config", wb.cfg(), "--out", wb.out(), "--delta", "0.4"]),
        0
    );
    let table: serde_json::Value = serde_json::from_str(&read(&wb.path("table.json"))).unwrap();
    assert_eq!(table["delta"].as_f64().unwrap(), 0.4);
}

#[test]
fn bad_invocations_exit_with_code_one() {
    let wb = Workbench::new();
    // Unknown subcommand and unknown flag.
    assert_eq!(run(&["frobnicate"]), 1);
    assert_eq!(run(&["generate", "--config", wb.cfg(), "--bogus", "1"]), 1);
    // Missing input file.
    assert_eq!(run(&["fit", "--config", wb.cfg(), "--out", wb.out()]), 1);
    // Malformed config.
    let bad_config = wb.path("bad.json");
    fs::create_dir_all(&wb.out).unwrap();
    fs::write(&bad_config, "{\"delta\": \"high\"}").unwrap();
    assert_eq!(
        run(&["generate", "--config", bad_config.to_str().unwrap()]),
        1
    );
    // Out-of-range parameter named in the message path.
    assert_eq!(
        run(&["calibrate", "--config", wb.cfg(), "--out", wb.out(), "--delta", "1.5"]),
        1
    );
    // Too many runs requested.
    assert_eq!(run(&["generate", "--config", wb.cfg(), "--out", wb.out()]), 0);
    assert_eq!(run(&["calibrate", "--config", wb.cfg(), "--out", wb.out()]), 0);
    assert_eq!(
        run(&[
            "simulate",
            "--config",
            wb.cfg(),
            "--out",
            wb.out(),
            "--runs",
            "99",
        ]),
        1
    );
}

#[test]
fn help_is_available() {
    assert_eq!(run(&["--help"]), 0);
}
