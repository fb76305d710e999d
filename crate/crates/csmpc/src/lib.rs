//! Safe motion planning in dynamic multi-agent environments with
//! finite-sample prediction regions.
//!
//! The crate wires together five pieces:
//!
//! - [`scenario`]: a seeded generator of i.i.d. multi-agent trajectories.
//! - [`predictor`]: pluggable multi-step trajectory predictors.
//! - [`conformal`]: split-conformal calibration of per-step region radii
//!   with a distribution-free coverage guarantee.
//! - [`planner`]: a receding-horizon optimal control problem whose collision
//!   constraints are tightened by the calibrated radii.
//! - [`simulation`]: closed-loop execution against held-out trajectories and
//!   batch Monte-Carlo evaluation of the resulting safety statistics.
//!
//! The `csmpc` binary exposes the pipeline as subcommands; the `examples/`
//! directory shows each capability as a small runnable program.

pub mod cli;
pub mod conformal;
pub mod dynamics;
pub mod planner;
pub mod domain;
pub mod predictor;
pub mod simulation;
pub mod scenario;
pub mod vec2;
