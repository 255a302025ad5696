//! Multi-speed orchestration: building gait libraries and learning torque
//! libraries across a speed grid, in parallel when the `parallel` feature
//! is enabled.

use std::ops::ControlFlow;

use thiserror::Error;

use crate::gait::{
    check_gait_constraints, generate_reference_gait, FeasibilityReport, GaitEntry, GaitError,
    GaitLibrary, GaitTemplate,
};
use crate::ilc::{ControlMode, ControllerConfig, IlcError, TorqueLibrary, TorqueProfile};
use crate::model::{JointVec, RobotModel};
use crate::sim::{run_experiment_with, ExperimentConfig, SimConfig, SimError};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("gait generation failed at {speed} m/s: {source}")]
    Gait { speed: f64, source: GaitError },
    #[error("gait at {speed} m/s is infeasible: {report:?}")]
    Infeasible { speed: f64, report: FeasibilityReport },
    #[error("speed grid is invalid: {0}")]
    Grid(#[from] GaitError),
    #[error("{speed} m/s lies outside the gait library range")]
    SpeedOutsideLibrary { speed: f64 },
    #[error("simulation failed at {speed} m/s: {source}")]
    Sim { speed: f64, source: SimError },
    #[error("learning did not converge at {speed} m/s within {updates} updates")]
    NotConverged { speed: f64, updates: usize },
    #[error("profile freeze failed at {speed} m/s: {source}")]
    Freeze { speed: f64, source: IlcError },
}

/// Map a closure over a speed grid on the rayon pool, preserving order.
#[cfg(feature = "parallel")]
pub fn sweep_speeds<T, F>(speeds: &[f64], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(f64) -> T + Sync + Send,
{
    use rayon::prelude::*;
    speeds.par_iter().map(|&v| f(v)).collect()
}

/// Map a closure over a speed grid on the calling thread, preserving order.
#[cfg(not(feature = "parallel"))]
pub fn sweep_speeds<T, F>(speeds: &[f64], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(f64) -> T + Sync + Send,
{
    sweep_speeds_sequential(speeds, f)
}

/// Sequential twin of [`sweep_speeds`], kept available for comparison runs.
pub fn sweep_speeds_sequential<T, F>(speeds: &[f64], f: F) -> Vec<T>
where
    F: Fn(f64) -> T,
{
    speeds.iter().map(|&v| f(v)).collect()
}

fn checked_entry(
    model: &RobotModel,
    template: &GaitTemplate,
    speed: f64,
) -> Result<GaitEntry, SweepError> {
    let entry = generate_reference_gait(model, template, speed)
        .map_err(|source| SweepError::Gait { speed, source })?;
    let report = check_gait_constraints(model, &entry);
    if !report.ok() {
        return Err(SweepError::Infeasible { speed, report });
    }
    Ok(entry)
}

fn assemble_library(
    results: Vec<Result<GaitEntry, SweepError>>,
) -> Result<GaitLibrary, SweepError> {
    let entries = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(GaitLibrary::new(entries)?)
}

/// Generate and feasibility-check a gait for every speed, in parallel when
/// the `parallel` feature is enabled.
pub fn build_gait_library(
    model: &RobotModel,
    template: &GaitTemplate,
    speeds: &[f64],
) -> Result<GaitLibrary, SweepError> {
    assemble_library(sweep_speeds(speeds, |v| checked_entry(model, template, v)))
}

/// Sequential twin of [`build_gait_library`].
pub fn build_gait_library_sequential(
    model: &RobotModel,
    template: &GaitTemplate,
    speeds: &[f64],
) -> Result<GaitLibrary, SweepError> {
    assemble_library(sweep_speeds_sequential(speeds, |v| checked_entry(model, template, v)))
}

/// Settings for learning one feedforward profile per speed.
#[derive(Debug, Clone)]
pub struct LearnConfig {
    pub sim: SimConfig,
    /// Gains, filter, and buffer layout; the mode is forced to learning.
    pub controller: ControllerConfig,
    /// Seconds of plain feedback before learning starts, letting the
    /// hopper settle onto its cycle.
    pub enable_at: f64,
    /// Give up on a speed after this many learning updates without
    /// convergence.
    pub max_updates: usize,
    /// Number of post-convergence strides averaged into the frozen
    /// profile.
    pub averaging_strides: usize,
    /// Hard wall on simulated seconds per speed.
    pub max_time: f64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            controller: ControllerConfig::default(),
            enable_at: 2.0,
            max_updates: 30,
            averaging_strides: 30,
            max_time: 90.0,
        }
    }
}

/// What happened while learning one speed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearnReport {
    pub speed: f64,
    /// Learning updates consumed when the convergence window first closed.
    pub updates_to_converge: usize,
    /// Strides actually averaged into the frozen profile.
    pub averaged_strides: usize,
    /// Feedforward sup-norm change of the last update before freezing.
    pub final_ff_delta: f64,
}

fn learn_speed_profile(
    model: &RobotModel,
    gaits: &GaitLibrary,
    cfg: &LearnConfig,
    speed: f64,
) -> Result<(TorqueProfile, LearnReport), SweepError> {
    if gaits.interpolate(speed).clamped {
        return Err(SweepError::SpeedOutsideLibrary { speed });
    }
    let mut controller = cfg.controller.clone();
    controller.mode = ControlMode::Ilc { enable_at: cfg.enable_at };
    let exp = ExperimentConfig {
        sim: cfg.sim.clone(),
        controller,
        speed,
        strides: usize::MAX,
        max_time: cfg.max_time,
        record_ticks: false,
    };

    let mut updates_at_convergence = None;
    let mut updates_seen = 0usize;
    let mut last_ff_delta = f64::NAN;
    let mut snapshots: Vec<Vec<JointVec>> = Vec::new();
    run_experiment_with(model, gaits, None, &exp, |metrics, ctl| {
        updates_seen = ctl.learning_updates() as usize;
        if metrics.learning_active {
            last_ff_delta = metrics.ff_delta;
        }
        if ctl.converged() {
            updates_at_convergence.get_or_insert(updates_seen);
            snapshots.push(ctl.buffer_values());
            if snapshots.len() >= cfg.averaging_strides {
                return ControlFlow::Break(());
            }
        } else if updates_seen >= cfg.max_updates {
            return ControlFlow::Break(());
        }
        ControlFlow::Continue(())
    })
    .map_err(|source| SweepError::Sim { speed, source })?;

    let (Some(updates_to_converge), false) = (updates_at_convergence, snapshots.is_empty()) else {
        return Err(SweepError::NotConverged { speed, updates: updates_seen });
    };
    let profile = TorqueProfile::average(&snapshots)
        .map_err(|source| SweepError::Freeze { speed, source })?;
    let report = LearnReport {
        speed,
        updates_to_converge,
        averaged_strides: snapshots.len(),
        final_ff_delta: last_ff_delta,
    };
    Ok((profile, report))
}

fn assemble_torque_library(
    speeds: &[f64],
    results: Vec<Result<(TorqueProfile, LearnReport), SweepError>>,
) -> Result<(TorqueLibrary, Vec<LearnReport>), SweepError> {
    let mut library = TorqueLibrary::new();
    let mut reports = Vec::with_capacity(speeds.len());
    for (&speed, result) in speeds.iter().zip(results) {
        let (profile, report) = result?;
        library.insert(speed, profile);
        reports.push(report);
    }
    Ok((library, reports))
}

/// Learn a feedforward profile for every speed and freeze the averages
/// into a torque library, in parallel when the `parallel` feature is
/// enabled.
pub fn learn_torque_library(
    model: &RobotModel,
    gaits: &GaitLibrary,
    speeds: &[f64],
    cfg: &LearnConfig,
) -> Result<(TorqueLibrary, Vec<LearnReport>), SweepError> {
    let results = sweep_speeds(speeds, |v| learn_speed_profile(model, gaits, cfg, v));
    assemble_torque_library(speeds, results)
}

/// Sequential twin of [`learn_torque_library`].
pub fn learn_torque_library_sequential(
    model: &RobotModel,
    gaits: &GaitLibrary,
    speeds: &[f64],
    cfg: &LearnConfig,
) -> Result<(TorqueLibrary, Vec<LearnReport>), SweepError> {
    let results = sweep_speeds_sequential(speeds, |v| learn_speed_profile(model, gaits, cfg, v));
    assemble_torque_library(speeds, results)
}
