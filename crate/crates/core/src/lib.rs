//! Action-chunk execution runtime.
//!
//! A dual-head policy predicts each chunk of end-effector actions twice: once
//! as 256-bin tokens and once as continuous values. An ensembler then picks
//! which actions to execute before the next inference. The crate also ships a
//! kinematic model of a 6-DOF desk arm, a tabletop pick-and-place simulator
//! with a scripted expert, and the dataset pipeline that connects them.

pub mod actionspace;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod kinematics;
pub mod policy;
pub mod sim;

pub use error::{Error, Result};
