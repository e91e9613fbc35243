//! Robot description, state and kinematics.

pub mod description;
pub mod kinematics;
pub mod state;

pub use description::*;
pub use kinematics::{
    chain_joints, forward_kinematics, forward_kinematics_unchecked, total_inertia, FrameSet, JacobianTarget,
    LinkFrame, RotorFrame, Segment,
};
pub use state::{ContactSet, RobotState};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("joint {joint} at {value:.4} rad outside [{lower:.4}, {upper:.4}]")]
    JointOutOfRange { joint: String, value: f64, lower: f64, upper: f64 },
    #[error("invalid robot state: {0}")]
    InvalidState(String),
    #[error("invalid robot description: {0}")]
    InvalidDescription(String),
    #[error("no such jacobian target: {0}")]
    BadTarget(String),
    #[error("configuration error: {0}")]
    Config(String),
}
