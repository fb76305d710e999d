//! Split-conformal calibration of prediction regions.
//!
//! For each pair `(t, tau)` with `t < tau <= min(t+H, T)`, the calibration
//! pass predicts every validation trajectory from its history through `t`,
//! scores the prediction against the realized state at `tau`, and stores the
//! `p`-th smallest score with `p = ceil((K+1) * (1 - delta/T))` after an
//! unbounded sentinel is appended. A region of radius `C` around a prediction
//! then contains the realized state with probability at least `1 - delta/T`,
//! with no assumption on the trajectory distribution beyond exchangeability.
//!
//! The sentinel is a distinguished [`Region::Unbounded`] value, never a large
//! float: arithmetic with it is impossible by construction, and the planner
//! must treat it as an infeasible window rather than a dilute constraint.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::domain::{Dataset, JointState, Split};
use crate::predictor::{predict, PredictError, PredictorSpec};
use crate::vec2;

#[derive(Debug, Error)]
pub enum ConformalError {
    #[error("agent count mismatch: {left} vs {right}")]
    AgentMismatch { left: usize, right: usize },
    #[error("score list is empty")]
    EmptyScores,
    #[error("per-step failure probability must lie in (0, 1), got {0}")]
    InvalidDeltaBar(f64),
    #[error("failure probability delta must lie in (0, 1), got {0}")]
    InvalidDelta(f64),
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("requested horizon {requested} exceeds trajectory horizon {available}")]
    HorizonTooLong { requested: usize, available: usize },
    #[error("dataset has no trajectories in the val split")]
    EmptyValidationSplit,
    #[error("dataset has no trajectories in the test split")]
    EmptyTestSplit,
    #[error("calibration table has no entry for (t = {t}, tau = {tau})")]
    MissingRegion { t: usize, tau: usize },
    #[error("joint coverage needs a table with H = T, got H = {horizon}, T = {task_horizon}")]
    CoverageNeedsFullHorizon { horizon: usize, task_horizon: usize },
    #[error(transparent)]
    Predict(#[from] PredictError),
}

/// How prediction error over the joint agent state is collapsed to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// Euclidean norm of the stacked all-agent error vector.
    JointNorm,
    /// Maximum per-agent Euclidean error; gives one region per agent.
    PerAgentMax,
}

/// A calibrated region radius, or the unbounded sentinel selected when the
/// quantile index lands on the appended infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Region {
    Bounded(f64),
    Unbounded,
}

impl Region {
    pub fn is_unbounded(&self) -> bool {
        matches!(self, Region::Unbounded)
    }

    /// Whether a realized score falls inside the region.
    pub fn covers(&self, score: f64) -> bool {
        match self {
            Region::Bounded(c) => score <= *c,
            Region::Unbounded => true,
        }
    }

    pub fn bounded_value(&self) -> Option<f64> {
        match self {
            Region::Bounded(c) => Some(*c),
            Region::Unbounded => None,
        }
    }

    pub fn max(self, other: Region) -> Region {
        match (self, other) {
            (Region::Bounded(a), Region::Bounded(b)) => Region::Bounded(a.max(b)),
            _ => Region::Unbounded,
        }
    }
}

impl PartialOrd for Region {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        match (self, other) {
            (Region::Bounded(a), Region::Bounded(b)) => a.partial_cmp(b),
            (Region::Unbounded, Region::Unbounded) => Some(std::cmp::Ordering::Equal),
            (Region::Unbounded, Region::Bounded(_)) => Some(std::cmp::Ordering::Greater),
            (Region::Bounded(_), Region::Unbounded) => Some(std::cmp::Ordering::Less),
        }
    }
}

impl Serialize for Region {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Region::Bounded(c) => serializer.serialize_f64(*c),
            Region::Unbounded => serializer.serialize_str("unbounded"),
        }
    }
}

impl<'de> Deserialize<'de> for Region {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Number(f64),
            Text(String),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Number(c) => Ok(Region::Bounded(c)),
            Repr::Text(s) if s == "unbounded" => Ok(Region::Unbounded),
            Repr::Text(s) => Err(D::Error::custom(format!("invalid region value {s:?}"))),
        }
    }
}

/// Scalar nonconformity of a realized joint state against a prediction.
pub fn nonconformity_score(
    realized: &JointState,
    predicted: &JointState,
    mode: ScoreMode,
) -> Result<f64, ConformalError> {
    if realized.agent_count() != predicted.agent_count() {
        return Err(ConformalError::AgentMismatch {
            left: realized.agent_count(),
            right: predicted.agent_count(),
        });
    }
    let per_agent = realized
        .agents
        .iter()
        .zip(&predicted.agents)
        .map(|(a, b)| vec2::dist(a.position, b.position));
    Ok(match mode {
        ScoreMode::JointNorm => per_agent.map(|d| d * d).sum::<f64>().sqrt(),
        ScoreMode::PerAgentMax => per_agent.fold(0.0, f64::max),
    })
}

/// The 1-based order-statistic index `p = ceil((k + 1) * (1 - delta_bar))`
/// into the score list augmented with an unbounded sentinel.
pub fn quantile_index(k: usize, delta_bar: f64) -> usize {
    (((k + 1) as f64) * (1.0 - delta_bar)).ceil() as usize
}

/// The conformal quantile of a score list at per-step failure probability
/// `delta_bar`: sort ascending, append the sentinel, take element `p`.
/// Returns [`Region::Unbounded`] exactly when `p = k + 1`.
pub fn conformal_quantile(scores: &[f64], delta_bar: f64) -> Result<Region, ConformalError> {
    if scores.is_empty() {
        return Err(ConformalError::EmptyScores);
    }
    if !(delta_bar > 0.0 && delta_bar < 1.0) {
        return Err(ConformalError::InvalidDeltaBar(delta_bar));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let p = quantile_index(scores.len(), delta_bar);
    if p > scores.len() {
        Ok(Region::Unbounded)
    } else {
        Ok(Region::Bounded(sorted[p - 1]))
    }
}

/// Calibrated region radii for every `(t, tau)` pair, plus the parameters
/// that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTable {
    pub delta: f64,
    pub task_horizon: usize,
    pub horizon: usize,
    pub quantile: usize,
    pub mode: ScoreMode,
    pub k_val: usize,
    regions: BTreeMap<(usize, usize), Region>,
}

impl CalibrationTable {
    pub fn delta_bar(&self) -> f64 {
        self.delta / self.task_horizon as f64
    }

    pub fn region(&self, t: usize, tau: usize) -> Option<Region> {
        self.regions.get(&(t, tau)).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, Region)> + '_ {
        self.regions.iter().map(|(&(t, tau), &r)| (t, tau, r))
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Largest region per lag `kappa = tau - t` across all `t`. Used by the
    /// worst-case region reuse mode of the planner.
    pub fn worst_case_by_lag(&self) -> BTreeMap<usize, Region> {
        let mut out: BTreeMap<usize, Region> = BTreeMap::new();
        for (&(t, tau), &region) in &self.regions {
            let lag = tau - t;
            out.entry(lag)
                .and_modify(|r| *r = r.max(region))
                .or_insert(region);
        }
        out
    }

    pub fn to_json(&self) -> String {
        let file = TableFile {
            delta: self.delta,
            task_horizon: self.task_horizon,
            horizon: self.horizon,
            quantile: self.quantile,
            mode: self.mode,
            k_val: self.k_val,
            regions: self
                .regions
                .iter()
                .map(|(&(t, tau), &region)| RegionEntryFile {
                    t,
                    tau,
                    c: region.bounded_value(),
                    unbounded: region.is_unbounded().then_some(true),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("table serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let file: TableFile = serde_json::from_str(text)?;
        let mut regions = BTreeMap::new();
        for entry in file.regions {
            let region = match (entry.c, entry.unbounded) {
                (Some(c), None) => Region::Bounded(c),
                (None, Some(true)) => Region::Unbounded,
                _ => {
                    return Err(serde_json::Error::custom(format!(
                        "region entry (t = {}, tau = {}) must carry exactly one of C or unbounded",
                        entry.t, entry.tau
                    )))
                }
            };
            regions.insert((entry.t, entry.tau), region);
        }
        Ok(Self {
            delta: file.delta,
            task_horizon: file.task_horizon,
            horizon: file.horizon,
            quantile: file.quantile,
            mode: file.mode,
            k_val: file.k_val,
            regions,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TableFile {
    delta: f64,
    #[serde(rename = "T")]
    task_horizon: usize,
    #[serde(rename = "H")]
    horizon: usize,
    #[serde(rename = "p")]
    quantile: usize,
    mode: ScoreMode,
    #[serde(rename = "K_val")]
    k_val: usize,
    regions: Vec<RegionEntryFile>,
}

#[derive(Serialize, Deserialize)]
struct RegionEntryFile {
    t: usize,
    tau: usize,
    #[serde(rename = "C", skip_serializing_if = "Option::is_none", default)]
    c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    unbounded: Option<bool>,
}

/// Build the full calibration table from the val split of a dataset.
///
/// For every `t` in `0..T` and `tau` in `t+1 ..= min(t+H, T)`, predictions
/// are made from each validation trajectory's history through `t`, scored
/// against the realized state at `tau`, and reduced by [`conformal_quantile`]
/// at `delta_bar = delta / T`.
pub fn calibrate(
    val: &Dataset,
    spec: &PredictorSpec,
    delta: f64,
    task_horizon: usize,
    horizon: usize,
    mode: ScoreMode,
) -> Result<CalibrationTable, ConformalError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(ConformalError::InvalidDelta(delta));
    }
    if horizon == 0 || task_horizon == 0 {
        return Err(ConformalError::ZeroHorizon);
    }
    if task_horizon > val.scenario.task_horizon {
        return Err(ConformalError::HorizonTooLong {
            requested: task_horizon,
            available: val.scenario.task_horizon,
        });
    }
    let trajectories = val.in_split(Split::Val);
    if trajectories.is_empty() {
        return Err(ConformalError::EmptyValidationSplit);
    }
    let k_val = trajectories.len();
    let delta_bar = delta / task_horizon as f64;

    let pairs: Vec<(usize, usize)> = (0..task_horizon)
        .flat_map(|t| ((t + 1)..=(t + horizon).min(task_horizon)).map(move |tau| (t, tau)))
        .collect();

    // One score per pair per trajectory, computed trajectory-parallel.
    let per_traj: Vec<Vec<f64>> = trajectories
        .par_iter()
        .map(|(_, traj)| -> Result<Vec<f64>, ConformalError> {
            let mut scores = Vec::with_capacity(pairs.len());
            let mut prediction = None;
            let mut predicted_at = usize::MAX;
            for &(t, tau) in &pairs {
                if predicted_at != t {
                    prediction = Some(predict(
                        spec,
                        traj.history_through(t),
                        t,
                        horizon,
                        task_horizon,
                    )?);
                    predicted_at = t;
                }
                let pred = prediction.as_ref().expect("prediction computed above");
                let hat = pred.at_tau(tau).expect("tau lies inside the window");
                scores.push(nonconformity_score(traj.at(tau), hat, mode)?);
            }
            Ok(scores)
        })
        .collect::<Result<_, _>>()?;

    let mut regions = BTreeMap::new();
    for (k, &(t, tau)) in pairs.iter().enumerate() {
        let scores: Vec<f64> = per_traj.iter().map(|row| row[k]).collect();
        regions.insert((t, tau), conformal_quantile(&scores, delta_bar)?);
    }

    Ok(CalibrationTable {
        delta,
        task_horizon,
        horizon,
        quantile: quantile_index(k_val, delta_bar),
        mode,
        k_val,
        regions,
    })
}

/// Which coverage statement to audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoverageKind {
    /// Every region around the time-zero predictions holds for all tau.
    JointFromZero,
    /// Every one-step-ahead region holds for all t.
    OneStep,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageReport {
    pub rate: f64,
    pub passes: Vec<bool>,
    pub failures: Vec<usize>,
}

/// One evaluated score, kept for histogram exports.
#[derive(Debug, Clone, Copy)]
pub struct ScoreRow {
    pub t: usize,
    pub tau: usize,
    pub trajectory: usize,
    pub score: f64,
    pub region: Region,
}

#[derive(Debug, Clone)]
pub struct CoverageOutcome {
    pub report: CoverageReport,
    pub scores: Vec<ScoreRow>,
}

/// Fraction of test trajectories for which every required region inequality
/// holds; sentinel regions count as covered.
pub fn empirical_coverage(
    test: &Dataset,
    spec: &PredictorSpec,
    table: &CalibrationTable,
    kind: CoverageKind,
) -> Result<CoverageOutcome, ConformalError> {
    let trajectories = test.in_split(Split::Test);
    if trajectories.is_empty() {
        return Err(ConformalError::EmptyTestSplit);
    }
    if kind == CoverageKind::JointFromZero && table.horizon < table.task_horizon {
        return Err(ConformalError::CoverageNeedsFullHorizon {
            horizon: table.horizon,
            task_horizon: table.task_horizon,
        });
    }
    let t_horizon = table.task_horizon;

    let evaluated: Vec<(usize, bool, Vec<ScoreRow>)> = trajectories
        .par_iter()
        .map(|(index, traj)| -> Result<_, ConformalError> {
            let mut pass = true;
            let mut rows = Vec::new();
            match kind {
                CoverageKind::JointFromZero => {
                    let pred = predict(spec, traj.history_through(0), 0, t_horizon, t_horizon)?;
                    for tau in 1..=t_horizon {
                        let region = table
                            .region(0, tau)
                            .ok_or(ConformalError::MissingRegion { t: 0, tau })?;
                        let hat = pred.at_tau(tau).expect("tau lies inside the window");
                        let score = nonconformity_score(traj.at(tau), hat, table.mode)?;
                        pass &= region.covers(score);
                        rows.push(ScoreRow {
                            t: 0,
                            tau,
                            trajectory: *index,
                            score,
                            region,
                        });
                    }
                }
                CoverageKind::OneStep => {
                    for t in 0..t_horizon {
                        let tau = t + 1;
                        let region = table
                            .region(t, tau)
                            .ok_or(ConformalError::MissingRegion { t, tau })?;
                        let pred = predict(spec, traj.history_through(t), t, 1, t_horizon)?;
                        let hat = pred.at_tau(tau).expect("one step ahead");
                        let score = nonconformity_score(traj.at(tau), hat, table.mode)?;
                        pass &= region.covers(score);
                        rows.push(ScoreRow {
                            t,
                            tau,
                            trajectory: *index,
                            score,
                            region,
                        });
                    }
                }
            }
            Ok((*index, pass, rows))
        })
        .collect::<Result<_, _>>()?;

    let passes: Vec<bool> = evaluated.iter().map(|(_, p, _)| *p).collect();
    let failures: Vec<usize> = evaluated
        .iter()
        .filter(|(_, p, _)| !p)
        .map(|(i, _, _)| *i)
        .collect();
    let rate = passes.iter().filter(|p| **p).count() as f64 / passes.len() as f64;
    let scores = evaluated.into_iter().flat_map(|(_, _, rows)| rows).collect();
    Ok(CoverageOutcome {
        report: CoverageReport {
            rate,
            passes,
            failures,
        },
        scores,
    })
}
