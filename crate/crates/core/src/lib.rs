//! Target-free extrinsic calibration for a LiDAR rotated by a motor about a fixed axis.
//!
//! Points are mapped into the base frame by `p_B = R_MB(t) (R_LM p_L + t_LM)`;
//! roll, pitch, tx and ty of the mount are estimated from plane-consistency
//! residuals between observations taken at different motor angles.

pub mod cli;
pub mod cloud_io;
pub mod config;
pub mod correspondences;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod pipeline;
pub mod primitives;
pub mod report;
pub mod solver;
pub mod spatial;
pub mod synth;

pub use config::{Mode, RunConfig};
pub use error::{CalibError, ErrorClass, Result};
pub use geometry::{ExtrinsicParams, MotorTrajectory, Vec3};
pub use pipeline::{calibrate, vanilla_solve};
pub use solver::{solve, SolveResult, SolverConfig};
