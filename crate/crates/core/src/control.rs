//! Centroidal position PID, SO(3) attitude control and joint PD servo laws.

use nalgebra::{Matrix3, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::math::vee;
use crate::model::{FrameSet, ModelError, RobotState, NUM_LEGS};

/// Desired force and torque at the CoG, both expressed in the CoG frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WrenchCommand {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

impl WrenchCommand {
    pub fn new(force: Vector3<f64>, torque: Vector3<f64>) -> Self {
        Self { force, torque }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.force.x, self.force.y, self.force.z, self.torque.x, self.torque.y, self.torque.z)
    }

    pub fn from_vector(w: &Vector6<f64>) -> Self {
        Self { force: w.fixed_rows::<3>(0).into(), torque: w.fixed_rows::<3>(3).into() }
    }

    pub fn is_finite(&self) -> bool {
        self.force.iter().chain(self.torque.iter()).all(|v| v.is_finite())
    }
}

/// Controller gains. Diagonal matrices are stored as their diagonals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlGains {
    pub force_p: [f64; 3],
    pub force_i: [f64; 3],
    pub force_d: [f64; 3],
    pub torque_p: [f64; 3],
    pub torque_i: [f64; 3],
    pub torque_d: [f64; 3],
    pub joint_p: f64,
    pub joint_d: f64,
    /// Proportional gain of the torso altitude loop used while walking.
    pub altitude_p: f64,
    /// Bound on each axis of the integral force term (N). `None` uses `m g`.
    pub force_integral_limit: Option<f64>,
    /// Bound on each axis of the integral torque term (Nm).
    pub torque_integral_limit: f64,
}

impl Default for ControlGains {
    fn default() -> Self {
        Self {
            force_p: [3.6, 3.6, 2.8],
            force_i: [0.03, 0.03, 1.2],
            force_d: [4.0, 4.0, 2.8],
            torque_p: [15.0, 15.0, 10.0],
            torque_i: [0.3, 0.3, 0.1],
            torque_d: [5.0, 5.0, 5.0],
            joint_p: 1000.0,
            joint_d: 20.0,
            altitude_p: 25.0,
            force_integral_limit: None,
            torque_integral_limit: 5.0,
        }
    }
}

impl ControlGains {
    pub fn validate(&self) -> Result<(), ModelError> {
        let diagonals = [
            &self.force_p, &self.force_i, &self.force_d, &self.torque_p, &self.torque_i, &self.torque_d,
        ];
        let scalars = [self.joint_p, self.joint_d, self.altitude_p, self.torque_integral_limit];
        let all_ok = diagonals.iter().flat_map(|d| d.iter()).chain(scalars.iter()).all(|&v| v >= 0.0 && v.is_finite())
            && self.force_integral_limit.is_none_or(|v| v >= 0.0);
        if all_ok {
            Ok(())
        } else {
            Err(ModelError::Config("gains must be finite and non-negative".into()))
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ModelError> {
        let gains: Self = toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        gains.validate()?;
        Ok(gains)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}

fn diag(d: &[f64; 3]) -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::from(*d))
}

/// Desired CoG position and velocity in the world frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PositionTarget {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

/// Desired CoG orientation and body angular velocity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttitudeTarget {
    pub rotation: Matrix3<f64>,
    pub angular_velocity: Vector3<f64>,
}

impl Default for AttitudeTarget {
    fn default() -> Self {
        Self { rotation: Matrix3::identity(), angular_velocity: Vector3::zeros() }
    }
}

/// `e_R = 1/2 (R_c^T R_d - R_d^T R_c)^vee`.
pub fn attitude_error(r_c: &Matrix3<f64>, r_d: &Matrix3<f64>) -> Vector3<f64> {
    0.5 * vee(&(r_c.transpose() * r_d - r_d.transpose() * r_c))
}

/// `e_w = R_c^T R_d w_d - w_c`.
pub fn omega_error(r_c: &Matrix3<f64>, r_d: &Matrix3<f64>, w_c: &Vector3<f64>, w_d: &Vector3<f64>) -> Vector3<f64> {
    r_c.transpose() * r_d * w_d - w_c
}

/// `k_p (q_d - q) - k_d qdot`, saturated at `+-limit`.
pub fn joint_pd(q_desired: f64, q: f64, q_dot: f64, k_p: f64, k_d: f64, limit: f64) -> f64 {
    (k_p * (q_desired - q) - k_d * q_dot).clamp(-limit, limit)
}

/// Per-axis clamp of an integrator state.
fn clamp_each(v: &mut Vector3<f64>, bound: &Vector3<f64>) {
    for i in 0..3 {
        v[i] = v[i].clamp(-bound[i], bound[i]);
    }
}

/// Position and attitude loops with their integrator states.
#[derive(Clone, Debug)]
pub struct CentroidalController {
    pub gains: ControlGains,
    pub gravity: f64,
    position_integral: Vector3<f64>,
    attitude_integral: Vector3<f64>,
}

impl CentroidalController {
    pub fn new(gains: ControlGains, gravity: f64) -> Self {
        Self { gains, gravity, position_integral: Vector3::zeros(), attitude_integral: Vector3::zeros() }
    }

    pub fn reset(&mut self) {
        self.position_integral = Vector3::zeros();
        self.attitude_integral = Vector3::zeros();
    }

    pub fn position_integral(&self) -> Vector3<f64> {
        self.position_integral
    }

    pub fn attitude_integral(&self) -> Vector3<f64> {
        self.attitude_integral
    }

    /// Largest per-axis value of the position error integral, chosen so the
    /// integral force term `m K_i int(e)` never exceeds the configured limit.
    pub fn position_integral_bound(&self, mass: f64) -> Vector3<f64> {
        let limit = self.gains.force_integral_limit.unwrap_or(mass * self.gravity);
        Vector3::from(self.gains.force_i.map(|k| if k > 0.0 { limit / (mass * k) } else { f64::INFINITY }))
    }

    pub fn attitude_integral_bound(&self, inertia: &Matrix3<f64>) -> Vector3<f64> {
        let limit = self.gains.torque_integral_limit;
        Vector3::from(std::array::from_fn(|i| {
            let k = self.gains.torque_i[i] * inertia[(i, i)];
            if k > 0.0 { limit / k } else { f64::INFINITY }
        }))
    }

    /// `f_d = m R_c^T (K_p e + K_i int(e) + K_d de) + R_c^T (m g - sum f_c)`.
    ///
    /// `contact_forces` are world-frame reaction forces on the standing feet.
    pub fn position_control(
        &mut self,
        frames: &FrameSet,
        state: &RobotState,
        target: &PositionTarget,
        contact_forces: &[Vector3<f64>],
        dt: f64,
    ) -> Vector3<f64> {
        let m = frames.total_mass;
        let e = target.position - frames.cog_world;
        let de = target.velocity - frames.cog_velocity(state);
        self.position_integral += e * dt;
        let bound = self.position_integral_bound(m);
        clamp_each(&mut self.position_integral, &bound);

        let g = self.gains.clone();
        let feedback = diag(&g.force_p) * e + diag(&g.force_i) * self.position_integral + diag(&g.force_d) * de;
        let support: Vector3<f64> = contact_forces.iter().sum();
        let r_t = frames.orientation.transpose();
        r_t * (feedback * m) + r_t * (Vector3::new(0.0, 0.0, m * self.gravity) - support)
    }

    /// `tau_d = I (K_p e_R + K_i int(e_R) + K_d e_w) + w x I w - sum p_c x R_c^T f_c`.
    pub fn attitude_control(
        &mut self,
        frames: &FrameSet,
        state: &RobotState,
        target: &AttitudeTarget,
        contacts: &[(usize, Vector3<f64>)],
        dt: f64,
    ) -> Vector3<f64> {
        let r_c = &frames.orientation;
        let w = state.base_angular_velocity;
        let e_r = attitude_error(r_c, &target.rotation);
        let e_w = omega_error(r_c, &target.rotation, &w, &target.angular_velocity);
        let inertia = frames.inertia;
        self.attitude_integral += e_r * dt;
        let bound = self.attitude_integral_bound(&inertia);
        clamp_each(&mut self.attitude_integral, &bound);

        let g = &self.gains;
        let feedback = diag(&g.torque_p) * e_r + diag(&g.torque_i) * self.attitude_integral + diag(&g.torque_d) * e_w;
        let contact = contact_torque(frames, contacts);
        inertia * feedback + w.cross(&(inertia * w)) - contact
    }

    /// Desired wrench from both loops. Contacts pair a leg index with its
    /// world-frame reaction force.
    pub fn wrench(
        &mut self,
        frames: &FrameSet,
        state: &RobotState,
        position: &PositionTarget,
        attitude: &AttitudeTarget,
        contacts: &[(usize, Vector3<f64>)],
        dt: f64,
    ) -> WrenchCommand {
        let forces: Vec<Vector3<f64>> = contacts.iter().map(|(_, f)| *f).collect();
        let force = self.position_control(frames, state, position, &forces, dt);
        let torque = self.attitude_control(frames, state, attitude, contacts, dt);
        WrenchCommand { force, torque }
    }
}

/// `sum p_c x R_c^T f_c` over the listed feet.
pub fn contact_torque(frames: &FrameSet, contacts: &[(usize, Vector3<f64>)]) -> Vector3<f64> {
    let r_t = frames.orientation.transpose();
    contacts
        .iter()
        .filter(|(leg, _)| *leg < NUM_LEGS)
        .map(|(leg, f)| frames.contact_points[*leg].cross(&(r_t * f)))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{exp_so3, rot_z};
    use crate::model::{forward_kinematics, RobotDescription};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn home() -> (RobotDescription, RobotState, FrameSet) {
        let desc = RobotDescription::default();
        let state = RobotState::default();
        let frames = forward_kinematics(&desc, &state).unwrap();
        (desc, state, frames)
    }

    #[test]
    fn gravity_feedforward_at_rest() {
        let (_, state, frames) = home();
        let mut c = CentroidalController::new(ControlGains::default(), 9.8);
        let target = PositionTarget { position: frames.cog_world, velocity: Vector3::zeros() };
        let f = c.position_control(&frames, &state, &target, &[], 0.0);
        assert_relative_eq!(f, Vector3::new(0.0, 0.0, 148.96), epsilon = 1e-10);
    }

    #[test]
    fn full_support_cancels_feedforward() {
        let (_, state, frames) = home();
        let mut c = CentroidalController::new(ControlGains::default(), 9.8);
        let target = PositionTarget { position: frames.cog_world, velocity: Vector3::zeros() };
        let each = Vector3::new(0.0, 0.0, 148.96 / 4.0);
        let f = c.position_control(&frames, &state, &target, &[each; 4], 0.0);
        assert_relative_eq!(f, Vector3::zeros(), epsilon = 1e-10);
    }

    #[test]
    fn zero_gains_rotate_feedforward_into_body() {
        let desc = RobotDescription::default();
        let mut state = RobotState::default();
        state.base_orientation = exp_so3(&Vector3::new(0.3, -0.2, 0.9));
        let frames = forward_kinematics(&desc, &state).unwrap();
        let gains = ControlGains {
            force_p: [0.0; 3],
            force_i: [0.0; 3],
            force_d: [0.0; 3],
            ..ControlGains::default()
        };
        let mut c = CentroidalController::new(gains, 9.8);
        let target = PositionTarget { position: Vector3::new(1.0, 2.0, 3.0), velocity: Vector3::x() };
        let f = c.position_control(&frames, &state, &target, &[], 0.01);
        let expected = state.base_orientation.transpose() * Vector3::new(0.0, 0.0, 148.96);
        assert_relative_eq!(f, expected, epsilon = 1e-10);
    }

    #[test]
    fn attitude_error_examples() {
        let r = exp_so3(&Vector3::new(0.1, 0.2, 0.3));
        assert_relative_eq!(attitude_error(&r, &r), Vector3::zeros(), epsilon = 1e-15);
        let e = attitude_error(&Matrix3::identity(), &rot_z(FRAC_PI_2));
        assert_relative_eq!(e, Vector3::z(), epsilon = 1e-15);
        let d = exp_so3(&Vector3::new(-0.4, 0.5, 0.1));
        assert_relative_eq!(attitude_error(&r, &d), -attitude_error(&d, &r), epsilon = 1e-15);
    }

    #[test]
    fn omega_error_with_aligned_frames() {
        let r = rot_z(0.7);
        let e = omega_error(&r, &r, &Vector3::new(0.1, 0.0, 0.0), &Vector3::new(0.0, 0.2, 0.0));
        assert_relative_eq!(e, Vector3::new(-0.1, 0.2, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn attitude_torque_at_rest_is_zero() {
        let (_, state, frames) = home();
        let mut c = CentroidalController::new(ControlGains::default(), 9.8);
        let t = c.attitude_control(&frames, &state, &AttitudeTarget::default(), &[], 0.01);
        assert_relative_eq!(t, Vector3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn gyroscopic_feedforward_matches_cross_product() {
        let (_, mut state, mut frames) = home();
        frames.inertia = Matrix3::from_diagonal(&Vector3::new(1.0, 2.0, 3.0));
        state.base_angular_velocity = Vector3::new(1.0, 1.0, 0.0);
        let gains = ControlGains { torque_d: [0.0; 3], ..ControlGains::default() };
        let mut c = CentroidalController::new(gains, 9.8);
        let t = c.attitude_control(&frames, &state, &AttitudeTarget::default(), &[], 0.0);
        // w x Iw with w = (1,1,0), Iw = (1,2,0): (1*0 - 0*2, 0*1 - 1*0, 1*2 - 1*1).
        assert_relative_eq!(t, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn contact_torque_example() {
        let (_, _, mut frames) = home();
        frames.contact_points[0] = Vector3::new(0.5, 0.0, -0.3);
        let t = contact_torque(&frames, &[(0, Vector3::new(0.0, 0.0, 40.0))]);
        assert_relative_eq!(-t, Vector3::new(0.0, 20.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn joint_pd_examples() {
        assert_eq!(joint_pd(0.3, 0.3, 0.0, 10.0, 1.0, 6.5), 0.0);
        assert_relative_eq!(joint_pd(0.2, 0.0, 0.0, 10.0, 1.0, 6.5), 2.0, epsilon = 1e-15);
        assert_eq!(joint_pd(1.0, 0.0, 0.0, 10.0, 1.0, 6.5), 6.5);
        assert_eq!(joint_pd(-1.0, 0.0, 0.0, 10.0, 1.0, 6.5), -6.5);
    }

    #[test]
    fn gains_from_toml() {
        let g = ControlGains::from_toml_str("joint_p = 12.0\nforce_p = [1.0, 1.0, 2.0]").unwrap();
        assert_eq!(g.joint_p, 12.0);
        assert_eq!(g.force_p, [1.0, 1.0, 2.0]);
        assert_eq!(g.torque_p, [15.0, 15.0, 10.0]);
        assert!(ControlGains::from_toml_str("joint_p = -1.0").is_err());
        assert!(ControlGains::from_toml_str("bogus = 1.0").is_err());
    }

    #[test]
    fn integrator_respects_bound() {
        let (_, state, frames) = home();
        let mut c = CentroidalController::new(ControlGains::default(), 9.8);
        let target = PositionTarget { position: frames.cog_world + Vector3::new(5.0, -5.0, 5.0), velocity: Vector3::zeros() };
        let bound = c.position_integral_bound(frames.total_mass);
        for _ in 0..10_000 {
            c.position_control(&frames, &state, &target, &[], 0.01);
            let i = c.position_integral();
            assert!((0..3).all(|k| i[k].abs() <= bound[k] + 1e-12));
        }
        // The integral force term is saturated at m g on each axis.
        let force_term = frames.total_mass * Vector3::from(c.gains.force_i).component_mul(&c.position_integral());
        assert_relative_eq!(force_term.amax(), 148.96, epsilon = 1e-9);
    }

    proptest! {
        #[test]
        fn attitude_error_is_sine_times_axis(
            ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0,
            angle in -3.1f64..3.1,
            bx in -3.0f64..3.0, by in -3.0f64..3.0, bz in -3.0f64..3.0,
        ) {
            let axis = Vector3::new(ax, ay, az);
            prop_assume!(axis.norm() > 1e-3);
            let axis = axis.normalize();
            let r_c = exp_so3(&Vector3::new(bx, by, bz));
            let r_d = r_c * exp_so3(&(axis * angle));
            let e = attitude_error(&r_c, &r_d);
            prop_assert!((e - axis * angle.sin()).norm() < 1e-9);
            prop_assert!(attitude_error(&r_d, &r_d).norm() < 1e-12);
        }

        #[test]
        fn position_control_is_yaw_equivariant(
            yaw in -3.1f64..3.1,
            tx in -1.0f64..1.0, ty in -1.0f64..1.0, tz in -1.0f64..1.0,
            vx in -1.0f64..1.0, vy in -1.0f64..1.0,
            roll in -0.3f64..0.3,
        ) {
            let desc = RobotDescription::default();
            let mut s = RobotState::default();
            s.base_orientation = exp_so3(&Vector3::new(roll, 0.1, 0.2));
            s.base_linear_velocity = Vector3::new(vx, vy, 0.0);
            let f = forward_kinematics(&desc, &s).unwrap();
            let t = PositionTarget { position: Vector3::new(tx, ty, tz), velocity: Vector3::zeros() };
            let contacts = [Vector3::new(1.0, 2.0, 30.0)];
            let mut c1 = CentroidalController::new(ControlGains::default(), 9.8);
            let a = c1.position_control(&f, &s, &t, &contacts, 0.01);

            let rz = rot_z(yaw);
            let mut s2 = s.clone();
            s2.base_orientation = rz * s.base_orientation;
            s2.base_position = rz * s.base_position;
            s2.base_linear_velocity = rz * s.base_linear_velocity;
            let f2 = forward_kinematics(&desc, &s2).unwrap();
            let t2 = PositionTarget { position: rz * t.position, velocity: rz * t.velocity };
            let mut c2 = CentroidalController::new(ControlGains::default(), 9.8);
            let b = c2.position_control(&f2, &s2, &t2, &[rz * contacts[0]], 0.01);
            prop_assert!((a - b).norm() < 1e-9);
        }
    }
}
