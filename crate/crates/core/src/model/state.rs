use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::description::{joint_name, RobotDescription, NUM_JOINTS, NUM_LEGS, NUM_ROTORS};
use super::ModelError;

/// Set of feet currently standing on the ground.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContactSet(pub [bool; NUM_LEGS]);

impl ContactSet {
    pub const NONE: ContactSet = ContactSet([false; NUM_LEGS]);
    pub const ALL: ContactSet = ContactSet([true; NUM_LEGS]);

    pub fn all_but(leg: usize) -> Self {
        let mut s = Self::ALL;
        s.0[leg] = false;
        s
    }

    pub fn contains(&self, leg: usize) -> bool {
        self.0[leg]
    }

    pub fn insert(&mut self, leg: usize) {
        self.0[leg] = true;
    }

    pub fn remove(&mut self, leg: usize) {
        self.0[leg] = false;
    }

    pub fn len(&self) -> usize {
        self.0.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn legs(&self) -> impl Iterator<Item = usize> + '_ {
        (0..NUM_LEGS).filter(|&k| self.0[k])
    }
}

/// Full measured state of the robot.
///
/// The base twist is split as in the centroidal model: linear velocity in the
/// world frame, angular velocity in the body frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub base_position: Vector3<f64>,
    pub base_orientation: Matrix3<f64>,
    pub base_linear_velocity: Vector3<f64>,
    pub base_angular_velocity: Vector3<f64>,
    pub joint_angles: [f64; NUM_JOINTS],
    pub joint_velocities: [f64; NUM_JOINTS],
    pub vectoring_phi: [f64; NUM_ROTORS],
    pub vectoring_theta: [f64; NUM_ROTORS],
    pub thrusts: [f64; NUM_ROTORS],
    pub contact_set: ContactSet,
}

impl Default for RobotState {
    fn default() -> Self {
        Self {
            base_position: Vector3::zeros(),
            base_orientation: Matrix3::identity(),
            base_linear_velocity: Vector3::zeros(),
            base_angular_velocity: Vector3::zeros(),
            joint_angles: [0.0; NUM_JOINTS],
            joint_velocities: [0.0; NUM_JOINTS],
            vectoring_phi: [0.0; NUM_ROTORS],
            vectoring_theta: [0.0; NUM_ROTORS],
            thrusts: [0.0; NUM_ROTORS],
            contact_set: ContactSet::NONE,
        }
    }
}

impl RobotState {
    pub fn with_joints(joint_angles: [f64; NUM_JOINTS]) -> Self {
        Self { joint_angles, ..Self::default() }
    }

    pub fn validate(&self, desc: &RobotDescription) -> Result<(), ModelError> {
        let r = &self.base_orientation;
        let ortho = (r.transpose() * r - Matrix3::identity()).amax();
        if ortho > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(ModelError::InvalidState(format!(
                "base orientation is not a rotation (orthogonality error {ortho:e})"
            )));
        }
        self.check_joint_limits(desc)?;
        for (i, &l) in self.thrusts.iter().enumerate() {
            if !(0.0..=desc.max_thrust + 1e-9).contains(&l) {
                return Err(ModelError::InvalidState(format!("thrust {i} = {l} outside [0, {}]", desc.max_thrust)));
            }
        }
        Ok(())
    }

    pub fn check_joint_limits(&self, desc: &RobotDescription) -> Result<(), ModelError> {
        for (j, (&q, lim)) in self.joint_angles.iter().zip(&desc.joint_limits).enumerate() {
            if !lim.contains(q) {
                return Err(ModelError::JointOutOfRange { joint: joint_name(j), value: q, lower: lim.lower, upper: lim.upper });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::rot_z;

    #[test]
    fn contact_set_counts() {
        let mut s = ContactSet::all_but(2);
        assert_eq!(s.len(), 3);
        assert!(!s.contains(2));
        s.insert(2);
        assert_eq!(s, ContactSet::ALL);
        assert_eq!(s.legs().collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert!(ContactSet::NONE.is_empty());
    }

    #[test]
    fn validation_catches_bad_rotation_and_joint() {
        let desc = RobotDescription::default();
        let mut s = RobotState::default();
        s.base_orientation = rot_z(0.3);
        s.validate(&desc).unwrap();
        s.base_orientation[(0, 0)] += 1e-6;
        assert!(matches!(s.validate(&desc), Err(ModelError::InvalidState(_))));

        let mut s = RobotState::default();
        s.joint_angles[5] = 2.0;
        match s.validate(&desc) {
            Err(ModelError::JointOutOfRange { joint, .. }) => assert_eq!(joint, "front_right_hip_pitch"),
            other => panic!("unexpected {other:?}"),
        }

        let mut s = RobotState::default();
        s.thrusts[3] = 43.0;
        assert!(s.validate(&desc).is_err());
    }
}
