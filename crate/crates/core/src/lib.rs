//! Differentiable pose-velocity graph optimization.
//!
//! The crate is organized bottom-up:
//!
//! * [`manifold`]: SO(3)/SE(3) arithmetic and Jacobians.
//! * [`imu`]: bias-corrected preintegration with analytic bias Jacobians.
//! * [`scale`]: closed-form translation scale recovery from flow and depth.
//! * [`graph`]: pose-velocity graph residuals, objective and Jacobian assembly.
//! * [`solver`]: Levenberg-Marquardt with trust-region damping.
//! * [`frontend`]: parametric odometry correction model with gradients.
//! * [`imperative`]: bilevel training loop with one-step back-propagation.
//! * [`sim`]: synthetic stereo-inertial data generator.
//! * [`metrics`]: ATE, RME and segment drift.
//! * [`io`] / [`config`]: file formats and run configuration.
//! * [`experiment`]: multi-seed fusion and training runs.
//!
//! With the default `parallel` feature, per-edge and per-seed loops run on
//! rayon; without it every loop runs sequentially with identical results.

pub mod config;
pub mod error;
pub mod experiment;
pub mod frontend;
pub mod graph;
pub mod imperative;
pub mod imu;
pub mod io;
pub mod manifold;
pub mod metrics;
pub mod par;
pub mod scale;
pub mod sim;
pub mod solver;

pub use error::{Error, Result};
pub use manifold::{Pose, Rotation};
