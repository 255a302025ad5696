//! Simulation, control and learning stack for a planar pronking quadruped.
//!
//! The crate is organized bottom-up:
//!
//! * [`model`] — robot parameters, state containers, contact bookkeeping
//! * [`dynamics`] — floating-base equations of motion and KKT contact solves
//! * [`filters`] — IIR filtering and velocity estimation
//! * [`gait`] — Bézier reference gaits, speed interpolation, gait libraries
//! * [`ilc`] — iterative learning control, feedback law, torque library
//! * [`sim`] — event-driven hybrid integration of the closed loop
//! * [`log`] — tick and stride records plus CSV export
//! * [`sweep`] — multi-speed orchestration (data-parallel with `parallel`)

pub mod dynamics;
pub mod filters;
pub mod gait;
pub mod ilc;
pub mod log;
pub mod model;
pub mod sim;
pub mod sweep;

pub use dynamics::DynamicsError;
pub use model::{GeneralizedState, Leg, RobotModel};
