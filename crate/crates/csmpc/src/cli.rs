//! Command-line front end: data generation, predictor fitting, calibration,
//! coverage auditing, planning, batch simulation, and report folding.
//!
//! Every subcommand reads a JSON config plus input artifacts, writes its
//! outputs atomically (temp file, then rename), and prints a one-line
//! summary. Command-line flags override config-file fields. All randomness
//! flows from seeds in the config, so re-running a subcommand with identical
//! inputs reproduces byte-identical artifacts.
//!
//! Exit codes: 0 on success, 1 on a validation problem (unknown flag,
//! malformed config, missing file), 2 on an internal failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conformal::{
    calibrate, CalibrationTable, CoverageKind, CoverageReport, Region, ScoreMode,
};
use crate::domain::{trajectory_to_csv, Dataset, ScenarioConfig, Split};
use crate::dynamics::{constraint_value, ControlBounds, RobotState, StateBounds};
use crate::planner::{
    mpc_step, open_loop_plan, CostWeights, GoalMode, GoalSpec, PlanResult, PlannerConfig,
    SlackSettings, SolverConfig, VehicleConfig,
};
use crate::predictor::{fit_autoregressive, predict, PredictorSpec};
use crate::scenario::generate_dataset;
use crate::simulation::{batch_evaluate, fold_logs, BatchReport, EvalMode, RunLog};

/// Train/val/test sizes for `generate`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// File locations; flags override these.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub dataset: Option<PathBuf>,
    pub predictor: Option<PathBuf>,
    pub table: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// The full pipeline configuration. Fields absent from the file take the
/// defaults below.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub counts: SplitCounts,
    pub dataset_seed: u64,
    pub delta: f64,
    /// Union-bound horizon `T` for calibration; defaults to the scenario's
    /// task horizon.
    pub calibration_horizon: Option<usize>,
    /// Prediction horizon `H`.
    pub horizon: usize,
    pub score_mode: ScoreMode,
    pub autoregressive_order: usize,
    pub robot_start: RobotState,
    pub goal_mode: GoalMode,
    pub weights: CostWeights,
    pub slack: SlackSettings,
    pub use_worst_case_regions: bool,
    pub vehicle_length: f64,
    pub control_bounds: ControlBounds,
    pub speed_max: f64,
    pub solver: SolverConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig {
                agent_count: 3,
                task_horizon: 20,
                history_len: 20,
                dt: 0.5,
                workspace: crate::domain::Box2 {
                    min: [0.0, 0.0],
                    max: [20.0, 20.0],
                },
                speed_range: [0.5, 1.5],
                noise_scale: 0.05,
                goal_center: [10.0, 18.0],
                goal_radius: 0.5,
                safety_distance: 0.3,
            },
            // delta/T = 0.0025 needs at least 399 validation trajectories
            // before the quantile index stays off the sentinel.
            counts: SplitCounts {
                train: 50,
                val: 500,
                test: 100,
            },
            dataset_seed: 1,
            delta: 0.05,
            calibration_horizon: None,
            horizon: 20,
            score_mode: ScoreMode::PerAgentMax,
            autoregressive_order: 2,
            robot_start: RobotState::new(10.0, 2.0, std::f64::consts::FRAC_PI_2, 1.0),
            goal_mode: GoalMode::SoftCost,
            weights: CostWeights {
                speed: 1.0,
                effort: 0.1,
                terminal: 10.0,
            },
            slack: SlackSettings::default(),
            use_worst_case_regions: false,
            vehicle_length: 1.0,
            control_bounds: ControlBounds {
                steer_max: 0.6,
                accel_min: -3.0,
                accel_max: 3.0,
            },
            speed_max: 4.0,
            solver: SolverConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn calibration_horizon(&self) -> usize {
        self.calibration_horizon.unwrap_or(self.scenario.task_horizon)
    }

    pub fn planner(&self) -> PlannerConfig {
        PlannerConfig {
            horizon: self.horizon,
            goal: GoalSpec {
                center: self.scenario.goal_center,
                radius: self.scenario.goal_radius,
                mode: self.goal_mode,
            },
            constraint: crate::dynamics::ConstraintSpec::new(self.scenario.safety_distance),
            weights: self.weights,
            slack: self.slack,
            use_worst_case_regions: self.use_worst_case_regions,
            solver: self.solver,
            vehicle: VehicleConfig {
                dt: self.scenario.dt,
                length: self.vehicle_length,
                control_bounds: self.control_bounds,
                state_bounds: StateBounds {
                    workspace: self.scenario.workspace,
                    speed_max: self.speed_max,
                },
            },
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(CliError::usage(format!(
                "config field delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        let t = self.calibration_horizon();
        if self.horizon > t {
            return Err(CliError::usage(format!(
                "config field horizon (H = {}) must not exceed T = {t}",
                self.horizon
            )));
        }
        if t > self.scenario.task_horizon {
            return Err(CliError::usage(format!(
                "config field calibration_horizon (T = {t}) exceeds scenario.task_horizon = {}",
                self.scenario.task_horizon
            )));
        }
        let problems = self.scenario.validate();
        if !problems.is_empty() {
            return Err(CliError::usage(format!(
                "config field scenario is invalid: {}",
                problems.join("; ")
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, malformed config, missing files. Exit code 1.
    Usage(String),
    /// Unexpected failures (I/O, serialization). Exit code 2.
    Internal(String),
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    fn internal(msg: impl Into<String>) -> Self {
        CliError::Internal(msg.into())
    }
}

const USAGE: &str = "\
csmpc: conformal prediction regions for provably safe planning

USAGE:
  csmpc <SUBCOMMAND> [FLAGS]

SUBCOMMANDS:
  generate   Sample a dataset of agent trajectories
  fit        Fit the autoregressive predictor on the train split
  calibrate  Build the calibration table of region radii
  coverage   Audit empirical coverage on the test split
  plan       Solve one planning instance and export its trajectory
  simulate   Run the controller(s) over held-out trajectories
  report     Fold a directory of run logs into a batch report

COMMON FLAGS:
  --config FILE      JSON config (defaults apply when omitted)
  --out DIR          Output directory (default: config paths.out_dir or 'out')
  --dataset FILE     Dataset path (default: <out>/dataset.json)
  --predictor FILE   Predictor spec path (default: constant-velocity)
  --table FILE       Calibration table path (default: <out>/table.json)

SUBCOMMAND FLAGS:
  generate  --export-traj N     also write trajectory_N.csv
  fit       --order Q           autoregressive order
  calibrate --delta D --T N --H N --mode {joint,agentmax}
  coverage  --kind {joint,onestep}
  plan      --t N --traj N --openloop
  simulate  --mode {mpc,openloop,both} --runs N
  report    --in DIR            directory of run logs

The CSMPC_THREADS environment variable caps worker threads.
";

/// Parse arguments, run one subcommand, and return the process exit code.
pub fn dispatch<I>(args: I) -> i32
where
    I: IntoIterator<Item = String>,
{
    init_thread_pool();
    let args: Vec<String> = args.into_iter().collect();
    match run(&args) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{USAGE}");
            1
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            2
        }
    }
}

fn init_thread_pool() {
    if let Ok(value) = std::env::var("CSMPC_THREADS") {
        if let Ok(n) = value.parse::<usize>() {
            if n >= 1 {
                // Ignore the error when a pool already exists.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

#[derive(Debug, Default)]
struct Flags {
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    dataset: Option<PathBuf>,
    predictor: Option<PathBuf>,
    table: Option<PathBuf>,
    export_traj: Option<usize>,
    order: Option<usize>,
    delta: Option<f64>,
    big_t: Option<usize>,
    big_h: Option<usize>,
    mode: Option<String>,
    kind: Option<String>,
    t: Option<usize>,
    traj: Option<usize>,
    open_loop: bool,
    runs: Option<usize>,
    in_dir: Option<PathBuf>,
}

fn parse_flags(args: &[String]) -> Result<Flags, CliError> {
    let mut flags = Flags::default();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let mut take = |name: &str| -> Result<String, CliError> {
            it.next()
                .cloned()
                .ok_or_else(|| CliError::usage(format!("missing value for {name}")))
        };
        match arg.as_str() {
            "--config" => flags.config = Some(PathBuf::from(take("--config")?)),
            "--out" => flags.out = Some(PathBuf::from(take("--out")?)),
            "--dataset" => flags.dataset = Some(PathBuf::from(take("--dataset")?)),
            "--predictor" => flags.predictor = Some(PathBuf::from(take("--predictor")?)),
            "--table" => flags.table = Some(PathBuf::from(take("--table")?)),
            "--export-traj" => flags.export_traj = Some(parse_num(&take("--export-traj")?, "--export-traj")?),
            "--order" => flags.order = Some(parse_num(&take("--order")?, "--order")?),
            "--delta" => flags.delta = Some(parse_float(&take("--delta")?, "--delta")?),
            "--T" => flags.big_t = Some(parse_num(&take("--T")?, "--T")?),
            "--H" => flags.big_h = Some(parse_num(&take("--H")?, "--H")?),
            "--mode" => flags.mode = Some(take("--mode")?),
            "--kind" => flags.kind = Some(take("--kind")?),
            "--t" => flags.t = Some(parse_num(&take("--t")?, "--t")?),
            "--traj" => flags.traj = Some(parse_num(&take("--traj")?, "--traj")?),
            "--openloop" => flags.open_loop = true,
            "--runs" => flags.runs = Some(parse_num(&take("--runs")?, "--runs")?),
            "--in" => flags.in_dir = Some(PathBuf::from(take("--in")?)),
            other => return Err(CliError::usage(format!("unknown flag {other}"))),
        }
    }
    Ok(flags)
}

fn parse_num(text: &str, flag: &str) -> Result<usize, CliError> {
    text.parse()
        .map_err(|_| CliError::usage(format!("invalid value for {flag}: {text}")))
}

fn parse_float(text: &str, flag: &str) -> Result<f64, CliError> {
    text.parse()
        .map_err(|_| CliError::usage(format!("invalid value for {flag}: {text}")))
}

fn run(args: &[String]) -> Result<String, CliError> {
    let Some(subcommand) = args.first() else {
        return Err(CliError::usage("missing subcommand"));
    };
    if subcommand == "--help" || subcommand == "-h" || subcommand == "help" {
        return Ok(USAGE.to_string());
    }
    let flags = parse_flags(&args[1..])?;
    let mut cfg = load_config(&flags)?;

    // Flag overrides.
    if let Some(delta) = flags.delta {
        cfg.delta = delta;
    }
    if let Some(t) = flags.big_t {
        cfg.calibration_horizon = Some(t);
    }
    if let Some(h) = flags.big_h {
        cfg.horizon = h;
    }
    if let Some(order) = flags.order {
        cfg.autoregressive_order = order;
    }
    cfg.validate()?;

    let out_dir = flags
        .out
        .clone()
        .or_else(|| cfg.paths.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::internal(format!("cannot create {}: {e}", out_dir.display())))?;

    match subcommand.as_str() {
        "generate" => cmd_generate(&cfg, &flags, &out_dir),
        "fit" => cmd_fit(&cfg, &flags, &out_dir),
        "calibrate" => cmd_calibrate(&cfg, &flags, &out_dir),
        "coverage" => cmd_coverage(&cfg, &flags, &out_dir),
        "plan" => cmd_plan(&cfg, &flags, &out_dir),
        "simulate" => cmd_simulate(&cfg, &flags, &out_dir),
        "report" => cmd_report(&flags, &out_dir),
        other => Err(CliError::usage(format!("unknown subcommand {other}"))),
    }
}

fn load_config(flags: &Flags) -> Result<RunConfig, CliError> {
    match &flags.config {
        None => Ok(RunConfig::default()),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            serde_json::from_str(&text).map_err(|e| {
                CliError::usage(format!("malformed config {}: {e}", path.display()))
            })
        }
    }
}

fn dataset_path(cfg: &RunConfig, flags: &Flags, out_dir: &Path) -> PathBuf {
    flags
        .dataset
        .clone()
        .or_else(|| cfg.paths.dataset.clone())
        .unwrap_or_else(|| out_dir.join("dataset.json"))
}

fn table_path(cfg: &RunConfig, flags: &Flags, out_dir: &Path) -> PathBuf {
    flags
        .table
        .clone()
        .or_else(|| cfg.paths.table.clone())
        .unwrap_or_else(|| out_dir.join("table.json"))
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read dataset {}: {e}", path.display())))?;
    Dataset::from_json(&text)
        .map_err(|e| CliError::usage(format!("malformed dataset {}: {e}", path.display())))
}

fn load_table(path: &Path) -> Result<CalibrationTable, CliError> {
    let text = fs::read_to_string(path).map_err(|e| {
        CliError::usage(format!("cannot read calibration table {}: {e}", path.display()))
    })?;
    CalibrationTable::from_json(&text)
        .map_err(|e| CliError::usage(format!("malformed table {}: {e}", path.display())))
}

fn load_predictor(cfg: &RunConfig, flags: &Flags) -> Result<(PredictorSpec, String), CliError> {
    let path = flags.predictor.clone().or_else(|| cfg.paths.predictor.clone());
    match path {
        None => Ok((PredictorSpec::ConstantVelocity, "constant-velocity".into())),
        Some(path) => {
            let text = fs::read_to_string(&path).map_err(|e| {
                CliError::usage(format!("cannot read predictor {}: {e}", path.display()))
            })?;
            let spec = serde_json::from_str(&text).map_err(|e| {
                CliError::usage(format!("malformed predictor {}: {e}", path.display()))
            })?;
            Ok((spec, path.display().to_string()))
        }
    }
}

/// Write bytes atomically: temp file in the target directory, then rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".tmp_{}_{}",
        std::process::id(),
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
    ));
    let mut file = fs::File::create(&tmp)
        .map_err(|e| CliError::internal(format!("cannot create {}: {e}", tmp.display())))?;
    file.write_all(bytes)
        .and_then(|_| file.sync_all())
        .map_err(|e| CliError::internal(format!("cannot write {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path)
        .map_err(|e| CliError::internal(format!("cannot rename to {}: {e}", path.display())))
}

fn cmd_generate(cfg: &RunConfig, flags: &Flags, out_dir: &Path) -> Result<String, CliError> {
    let dataset = generate_dataset(
        &cfg.scenario,
        cfg.counts.train,
        cfg.counts.val,
        cfg.counts.test,
        cfg.dataset_seed,
    )
    .map_err(|e| CliError::usage(e.to_string()))?;
    let path = dataset_path(cfg, flags, out_dir);
    write_atomic(&path, dataset.to_json().as_bytes())?;
    let mut extra = String::new();
    if let Some(index) = flags.export_traj {
        let traj = dataset
            .trajectories
            .get(index)
            .ok_or_else(|| CliError::usage(format!("--export-traj {index} out of range")))?;
        let csv_path = out_dir.join(format!("trajectory_{index}.csv"));
        write_atomic(&csv_path, trajectory_to_csv(traj).as_bytes())?;
        extra = format!(", exported {}", csv_path.display());
    }
    Ok(format!(
        "generate: {} trajectories (train {} / val {} / test {}) seed {} -> {}{}",
        dataset.trajectories.len(),
        cfg.counts.train,
        cfg.counts.val,
        cfg.counts.test,
        cfg.dataset_seed,
        path.display(),
        extra
    ))
}

fn cmd_fit(cfg: &RunConfig, flags: &Flags, out_dir: &Path) -> Result<String, CliError> {
    let dataset = load_dataset(&dataset_path(cfg, flags, out_dir))?;
    let spec = fit_autoregressive(&dataset, cfg.autoregressive_order)
        .map_err(|e| CliError::usage(e.to_string()))?;
    let path = flags
        .predictor
        .clone()
        .or_else(|| cfg.paths.predictor.clone())
        .unwrap_or_else(|| out_dir.join("predictor.json"));
    let json = serde_json::to_string(&spec)
        .map_err(|e| CliError::internal(format!("predictor serialization failed: {e}")))?;
    write_atomic(&path, json.as_bytes())?;
    let summary = match &spec {
        PredictorSpec::Autoregressive {
            order,
            coefficients,
            min_norm_fallback,
        } => format!(
            "fit: autoregressive order {order}, coefficients {coefficients:?}{} -> {}",
            if *min_norm_fallback {
                " (minimum-norm fallback)"
            } else {
                ""
            },
            path.display()
        ),
        _ => format!("fit -> {}", path.display()),
    };
    Ok(summary)
}

fn cmd_calibrate(cfg: &RunConfig, flags: &Flags, out_dir: &Path) -> Result<String, CliError> {
    let dataset = load_dataset(&dataset_path(cfg, flags, out_dir))?;
    let (predictor, predictor_name) = load_predictor(cfg, flags)?;
    let mode = match flags.mode.as_deref() {
        None => cfg.score_mode,
        Some("joint") => ScoreMode::JointNorm,
        Some("agentmax") => ScoreMode::PerAgentMax,
        Some(other) => {
            return Err(CliError::usage(format!(
                "invalid --mode {other}: expected joint or agentmax"
            )))
        }
    };
    let t_horizon = cfg.calibration_horizon();
    let table = calibrate(&dataset, &predictor, cfg.delta, t_horizon, cfg.horizon, mode)
        .map_err(|e| CliError::usage(e.to_string()))?;
    let path = table_path(cfg, flags, out_dir);
    write_atomic(&path, table.to_json().as_bytes())?;
    let unbounded = table.entries().filter(|(_, _, r)| r.is_unbounded()).count();
    Ok(format!(
        "calibrate: {} regions (T {} H {} delta {} p {} K_val {}, {} unbounded) \
         predictor {} -> {}",
        table.len(),
        t_horizon,
        cfg.horizon,
        cfg.delta,
        table.quantile,
        table.k_val,
        unbounded,
        predictor_name,
        path.display()
    ))
}

#[derive(Serialize)]
struct CoverageArtifact<'a> {
    #[serde(flatten)]
    report: &'a CoverageReport,
    params: CoverageParams,
}

#[derive(Serialize)]
struct CoverageParams {
    kind: CoverageKind,
    delta: f64,
    #[serde(rename = "T")]
    task_horizon: usize,
    #[serde(rename = "H")]
    horizon: usize,
    mode: ScoreMode,
    k_val: usize,
    predictor: String,
    dataset_seed: u64,
}

fn cmd_coverage(cfg: &RunConfig, flags: &Flags, out_dir: &Path) -> Result<String, CliError> {
    let dataset = load_dataset(&dataset_path(cfg, flags, out_dir))?;
    let (predictor, predictor_name) = load_predictor(cfg, flags)?;
    let table = load_table(&table_path(cfg, flags, out_dir))?;
    let kind = match flags.kind.as_deref() {
        None | Some("joint") => CoverageKind::JointFromZero,
        Some("onestep") => CoverageKind::OneStep,
        Some(other) => {
            return Err(CliError::usage(format!(
                "invalid --kind {other}: expected joint or onestep"
            )))
        }
    };
    let outcome = crate::conformal::empirical_coverage(&dataset, &predictor, &table, kind)
        .map_err(|e| CliError::usage(e.to_string()))?;

    let artifact = CoverageArtifact {
        report: &outcome.report,
        params: CoverageParams {
            kind,
            delta: table.delta,
            task_horizon: table.task_horizon,
            horizon: table.horizon,
            mode: table.mode,
            k_val: table.k_val,
            predictor: predictor_name,
            dataset_seed: dataset.seed,
        },
    };
    let json = serde_json::to_string(&artifact)
        .map_err(|e| CliError::internal(format!("coverage serialization failed: {e}")))?;
    let json_path = out_dir.join("coverage.json");
    write_atomic(&json_path, json.as_bytes())?;

    let mut csv = String::from("t,tau,trajectory,score,C\n");
    for row in &outcome.scores {
        let region = match row.region {
            Region::Bounded(c) => c.to_string(),
            Region::Unbounded => "unbounded".to_string(),
        };
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.t, row.tau, row.trajectory, row.score, region
        ));
    }
    write_atomic(&out_dir.join("coverage_scores.csv"), csv.as_bytes())?;

    Ok(format!(
        "coverage: rate {:.4} over {} trajectories ({} failures) -> {}",
        outcome.report.rate,
        outcome.report.passes.len(),
        outcome.report.failures.len(),
        json_path.display()
    ))
}

#[derive(Serialize)]
struct PlanArtifact<'a> {
    #[serde(flatten)]
    plan: &'a PlanResult,
    params: PlanParams,
}

#[derive(Serialize)]
struct PlanParams {
    trajectory: usize,
    open_loop: bool,
    delta: f64,
    #[serde(rename = "T")]
    task_horizon: usize,
    #[serde(rename = "H")]
    horizon: usize,
    mode: ScoreMode,
    solver_seed: u64,
}

fn cmd_plan(cfg: &RunConfig, flags: &Flags, out_dir: &Path) -> Result<String, CliError> {
    let dataset = load_dataset(&dataset_path(cfg, flags, out_dir))?;
    let (predictor, _) = load_predictor(cfg, flags)?;
    let table = load_table(&table_path(cfg, flags, out_dir))?;
    let planner_cfg = cfg.planner();

    let traj_index = match flags.traj {
        Some(i) => i,
        None => *dataset
            .indices(Split::Test)
            .first()
            .ok_or_else(|| CliError::usage("dataset has no test trajectories"))?,
    };
    let traj = dataset
        .trajectories
        .get(traj_index)
        .ok_or_else(|| CliError::usage(format!("--traj {traj_index} out of range")))?;
    let t = flags.t.unwrap_or(0);
    let t_horizon = table.task_horizon;
    if t >= t_horizon {
        return Err(CliError::usage(format!(
            "--t {t} must be below the task horizon {t_horizon}"
        )));
    }

    let (plan, predictions, regions) = if flags.open_loop {
        if t != 0 {
            return Err(CliError::usage("--openloop plans at t = 0; drop --t"));
        }
        let predictions = predict(&predictor, traj.history_through(0), 0, t_horizon, t_horizon)
            .map_err(|e| CliError::usage(e.to_string()))?;
        let plan = open_loop_plan(&cfg.robot_start, &predictions, &table, &planner_cfg)
            .map_err(|e| CliError::usage(e.to_string()))?;
        let regions: Vec<Region> = (1..=t_horizon)
            .map(|tau| table.region(0, tau).expect("open loop checked the table"))
            .collect();
        (plan, predictions, regions)
    } else {
        let step = mpc_step(
            t,
            &cfg.robot_start,
            traj.history_through(t),
            &predictor,
            &table,
            &planner_cfg,
            None,
        )
        .map_err(|e| CliError::usage(e.to_string()))?;
        (step.plan, step.predictions, step.regions)
    };

    let artifact = PlanArtifact {
        plan: &plan,
        params: PlanParams {
            trajectory: traj_index,
            open_loop: flags.open_loop,
            delta: table.delta,
            task_horizon: table.task_horizon,
            horizon: table.horizon,
            mode: table.mode,
            solver_seed: cfg.solver.seed,
        },
    };
    let json = serde_json::to_string(&artifact)
        .map_err(|e| CliError::internal(format!("plan serialization failed: {e}")))?;
    let json_path = out_dir.join("plan.json");
    write_atomic(&json_path, json.as_bytes())?;

    // Rows for tau = t+1 ..= T; constraint columns only inside the window.
    let mut csv = String::from("tau,x,y,theta,v,c_value,C_value\n");
    for (offset, state) in plan.states.iter().enumerate() {
        let tau = t + 1 + offset;
        let (c_value, region) = match predictions.at_tau(tau) {
            Some(hat) => (
                constraint_value(state.position(), hat, &planner_cfg.constraint).to_string(),
                match regions[tau - t - 1] {
                    Region::Bounded(c) => c.to_string(),
                    Region::Unbounded => "unbounded".to_string(),
                },
            ),
            None => (String::new(), String::new()),
        };
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            tau, state.x, state.y, state.heading, state.speed, c_value, region
        ));
    }
    write_atomic(&out_dir.join("plan.csv"), csv.as_bytes())?;

    Ok(format!(
        "plan: t {} trajectory {} status {:?} cost {:.4} max violation {:.2e} -> {}",
        t,
        traj_index,
        plan.status,
        plan.cost,
        plan.max_violation,
        json_path.display()
    ))
}

#[derive(Serialize, Deserialize)]
struct BatchMeta {
    mode: EvalMode,
    delta: f64,
    #[serde(rename = "T")]
    task_horizon: usize,
    #[serde(rename = "H")]
    horizon: usize,
    dataset_seed: u64,
    solver_seed: u64,
}

fn cmd_simulate(cfg: &RunConfig, flags: &Flags, out_dir: &Path) -> Result<String, CliError> {
    let dataset = load_dataset(&dataset_path(cfg, flags, out_dir))?;
    let (predictor, _) = load_predictor(cfg, flags)?;
    let table = load_table(&table_path(cfg, flags, out_dir))?;
    let planner_cfg = cfg.planner();
    let mode = match flags.mode.as_deref() {
        None | Some("mpc") => EvalMode::Mpc,
        Some("openloop") => EvalMode::OpenLoop,
        Some("both") => EvalMode::Both,
        Some(other) => {
            return Err(CliError::usage(format!(
                "invalid --mode {other}: expected mpc, openloop, or both"
            )))
        }
    };

    let test_indices = dataset.indices(Split::Test);
    let indices: Vec<usize> = match flags.runs {
        None => test_indices,
        Some(n) => {
            if n > test_indices.len() {
                return Err(CliError::usage(format!(
                    "--runs {n} exceeds the {} test trajectories",
                    test_indices.len()
                )));
            }
            test_indices[..n].to_vec()
        }
    };

    let outcome = batch_evaluate(
        &dataset,
        Some(&indices),
        &predictor,
        &table,
        &planner_cfg,
        cfg.robot_start,
        mode,
    )
    .map_err(|e| CliError::usage(e.to_string()))?;

    let runs_dir = out_dir.join("runs");
    fs::create_dir_all(&runs_dir)
        .map_err(|e| CliError::internal(format!("cannot create {}: {e}", runs_dir.display())))?;
    for (index, log) in &outcome.mpc_logs {
        write_atomic(
            &runs_dir.join(format!("mpc_{index:05}.json")),
            log.to_json().as_bytes(),
        )?;
    }
    for (index, log) in &outcome.open_loop_logs {
        write_atomic(
            &runs_dir.join(format!("openloop_{index:05}.json")),
            log.to_json().as_bytes(),
        )?;
    }
    let meta = BatchMeta {
        mode,
        delta: outcome.report.delta,
        task_horizon: outcome.report.task_horizon,
        horizon: outcome.report.horizon,
        dataset_seed: outcome.report.dataset_seed,
        solver_seed: outcome.report.solver_seed,
    };
    write_atomic(
        &runs_dir.join("meta.json"),
        serde_json::to_string(&meta)
            .map_err(|e| CliError::internal(e.to_string()))?
            .as_bytes(),
    )?;

    let report_json = serde_json::to_string(&outcome.report)
        .map_err(|e| CliError::internal(format!("report serialization failed: {e}")))?;
    let report_path = out_dir.join("report.json");
    write_atomic(&report_path, report_json.as_bytes())?;

    // Overlay plot data for the first run of each controller.
    if let Some((_, log)) = outcome.mpc_logs.first() {
        write_atomic(
            &out_dir.join("overlay_mpc.csv"),
            crate::simulation::overlay_csv(log).as_bytes(),
        )?;
    }
    if let Some((_, log)) = outcome.open_loop_logs.first() {
        write_atomic(
            &out_dir.join("overlay_openloop.csv"),
            crate::simulation::overlay_csv(log).as_bytes(),
        )?;
    }

    // Per-run summary CSV.
    let mut csv = String::from(
        "trajectory,controller,cost,min_constraint,safe,goal_reached,infeasible_steps,flagged\n",
    );
    let mut push_rows = |label: &str, logs: &[(usize, RunLog)]| {
        for (index, log) in logs {
            let s = &log.summary;
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                index,
                label,
                s.total_cost,
                s.min_constraint,
                s.safe,
                s.goal_reached,
                s.infeasible_steps,
                s.flagged
            ));
        }
    };
    push_rows("mpc", &outcome.mpc_logs);
    push_rows("openloop", &outcome.open_loop_logs);
    write_atomic(&out_dir.join("summary.csv"), csv.as_bytes())?;

    if mode == EvalMode::Both {
        let mut pairs = String::from("trajectory,openloop_cost,mpc_cost,openloop_flagged,mpc_flagged\n");
        for ((index, mpc_log), (_, ol_log)) in outcome.mpc_logs.iter().zip(&outcome.open_loop_logs)
        {
            pairs.push_str(&format!(
                "{},{},{},{},{}\n",
                index,
                ol_log.summary.total_cost,
                mpc_log.summary.total_cost,
                ol_log.summary.flagged,
                mpc_log.summary.flagged
            ));
        }
        write_atomic(&out_dir.join("pairs.csv"), pairs.as_bytes())?;
    }

    let stats = outcome.report.mpc.as_ref().or(outcome.report.open_loop.as_ref());
    let line = match stats {
        Some(s) => format!(
            "simulate: {} runs, violation rate {:.4} (unflagged) / {:.4} (all), \
             mean cost {:.2}, {} flagged -> {}",
            s.runs,
            s.violation_rate_unflagged,
            s.violation_rate_all,
            s.mean_cost,
            s.flagged_runs,
            report_path.display()
        ),
        None => format!("simulate -> {}", report_path.display()),
    };
    Ok(line)
}

fn cmd_report(flags: &Flags, out_dir: &Path) -> Result<String, CliError> {
    let in_dir = flags
        .in_dir
        .clone()
        .ok_or_else(|| CliError::usage("report needs --in DIR"))?;
    let meta_text = fs::read_to_string(in_dir.join("meta.json")).map_err(|e| {
        CliError::usage(format!("cannot read {}: {e}", in_dir.join("meta.json").display()))
    })?;
    let meta: BatchMeta = serde_json::from_str(&meta_text)
        .map_err(|e| CliError::usage(format!("malformed meta.json: {e}")))?;

    let mut mpc_logs: Vec<(usize, RunLog)> = Vec::new();
    let mut open_loop_logs: Vec<(usize, RunLog)> = Vec::new();
    let entries = fs::read_dir(&in_dir)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", in_dir.display())))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    names.sort();
    for name in names {
        let (target, prefix) = if name.starts_with("mpc_") {
            (&mut mpc_logs, "mpc_")
        } else if name.starts_with("openloop_") {
            (&mut open_loop_logs, "openloop_")
        } else {
            continue;
        };
        let index: usize = name
            .trim_start_matches(prefix)
            .trim_end_matches(".json")
            .parse()
            .map_err(|_| CliError::usage(format!("unexpected run log name {name}")))?;
        let text = fs::read_to_string(in_dir.join(&name))
            .map_err(|e| CliError::usage(format!("cannot read {name}: {e}")))?;
        let log = RunLog::from_json(&text)
            .map_err(|e| CliError::usage(format!("malformed run log {name}: {e}")))?;
        target.push((index, log));
    }
    if mpc_logs.is_empty() && open_loop_logs.is_empty() {
        return Err(CliError::usage(format!(
            "no run logs found in {}",
            in_dir.display()
        )));
    }

    let cost_pairs = if meta.mode == EvalMode::Both {
        mpc_logs
            .iter()
            .zip(&open_loop_logs)
            .filter(|((_, m), (_, o))| !m.summary.flagged && !o.summary.flagged)
            .map(|((i, m), (_, o))| crate::simulation::CostPair {
                trajectory: *i,
                open_loop_cost: o.summary.total_cost,
                mpc_cost: m.summary.total_cost,
            })
            .collect()
    } else {
        Vec::new()
    };
    let report = BatchReport {
        mode: meta.mode,
        delta: meta.delta,
        task_horizon: meta.task_horizon,
        horizon: meta.horizon,
        dataset_seed: meta.dataset_seed,
        solver_seed: meta.solver_seed,
        mpc: (!mpc_logs.is_empty())
            .then(|| fold_logs(&mpc_logs.iter().map(|(_, l)| l.clone()).collect::<Vec<_>>())),
        open_loop: (!open_loop_logs.is_empty()).then(|| {
            fold_logs(&open_loop_logs.iter().map(|(_, l)| l.clone()).collect::<Vec<_>>())
        }),
        cost_pairs,
    };
    let json = serde_json::to_string(&report)
        .map_err(|e| CliError::internal(format!("report serialization failed: {e}")))?;
    let path = out_dir.join("report.json");
    write_atomic(&path, json.as_bytes())?;
    Ok(format!(
        "report: folded {} mpc and {} open-loop logs -> {}",
        mpc_logs.len(),
        open_loop_logs.len(),
        path.display()
    ))
}
