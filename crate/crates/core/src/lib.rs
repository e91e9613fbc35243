//! Modeling, control allocation and simulation for a point-symmetric quadruped
//! whose eight links each carry a spherically vectorable dual-rotor module.
//!
//! The crate is organized bottom-up:
//!
//! - [`model`]: robot description, state, forward kinematics, Jacobians and
//!   centroidal quantities.
//! - [`thrust`]: vectorable rotor model, wrench allocation matrix, angle
//!   extraction and offset-compensating refinement.
//! - [`control`]: centroidal PID, SO(3) attitude control and joint PD.
//! - [`allocation`]: the quasi-static allocation QP, its dense active-set solver
//!   and the end-to-end `allocate` pipeline.
//! - [`gait`]: torso altitude feedback, leg inverse kinematics and the creeping
//!   gait state machine.
//! - [`sim`]: penalty-contact physics over the approximated centroidal dynamics
//!   and the closed-loop scenario runner.

pub mod allocation;
pub mod control;
pub mod gait;
pub mod math;
pub mod model;
pub mod sim;
pub mod thrust;

pub use model::{FrameSet, RobotDescription, RobotState};
