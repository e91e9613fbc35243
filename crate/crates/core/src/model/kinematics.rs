use nalgebra::{Matrix3, Matrix3xX, Vector3};

use super::description::{
    hip_azimuth, leg_of_link, RobotDescription, JOINTS_PER_LEG, NUM_JOINTS, NUM_LEGS, NUM_LINKS, NUM_ROTORS,
};
use super::state::RobotState;
use super::ModelError;
use crate::math::{rot_x, rot_y, rot_z};

/// Origin and orientation of one link frame `{L_i}`, expressed in `{CoG}`.
/// The link rod runs along the local x axis starting at `origin`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkFrame {
    pub origin: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

/// Geometry of one vectorable rotor module in `{CoG}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotorFrame {
    pub link: usize,
    /// Point on the link rod where the roll vectoring axis sits.
    pub base: Vector3<f64>,
    /// `^{CoG}R_{L_i}`.
    pub link_rotation: Matrix3<f64>,
    /// Roll-to-pitch axis lever arm in the roll-rotated link frame.
    pub axis_offset: Vector3<f64>,
    pub phi: f64,
    pub theta: f64,
    /// `p_i`, origin of `{F_i}`.
    pub position: Vector3<f64>,
    /// `^{CoG}R_{F_i}`.
    pub rotation: Matrix3<f64>,
}

impl RotorFrame {
    /// `^{L}R_{F}(phi, theta)`: roll about the rod, then pitch across the rotor pair.
    pub fn vectoring_rotation(phi: f64, theta: f64) -> Matrix3<f64> {
        rot_x(phi) * rot_y(theta)
    }

    /// Rotor origin for a hypothetical roll angle; the axis offset swings with `phi`.
    pub fn position_at(&self, phi: f64) -> Vector3<f64> {
        self.base + self.link_rotation * rot_x(phi) * self.axis_offset
    }

    pub fn rotation_at(&self, phi: f64, theta: f64) -> Matrix3<f64> {
        self.link_rotation * Self::vectoring_rotation(phi, theta)
    }

    /// Same module re-posed at new vectoring angles.
    pub fn with_angles(&self, phi: f64, theta: f64) -> Self {
        Self { phi, theta, position: self.position_at(phi), rotation: self.rotation_at(phi, theta), ..*self }
    }
}

/// A rigid mass element of the robot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub mass: f64,
    /// Segment CoG in `{CoG}`.
    pub position: Vector3<f64>,
    /// Own inertia about the segment CoG, `{CoG}` axes.
    pub inertia: Matrix3<f64>,
    /// Link the segment is attached to; `None` for the torso.
    pub link: Option<usize>,
}

/// Everything the controllers need about the current configuration.
///
/// Positions are relative to the whole-body CoG and expressed in the CoG
/// frame, whose axes coincide with the baselink.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSet {
    pub joint_origins: [Vector3<f64>; NUM_JOINTS],
    pub joint_axes: [Vector3<f64>; NUM_JOINTS],
    pub links: [LinkFrame; NUM_LINKS],
    pub rotors: [RotorFrame; NUM_ROTORS],
    /// Foot sphere centers.
    pub feet: [Vector3<f64>; NUM_LEGS],
    /// Lowest point of each foot sphere along world down.
    pub contact_points: [Vector3<f64>; NUM_LEGS],
    pub segments: Vec<Segment>,
    /// CoG in the baselink frame.
    pub cog_in_base: Vector3<f64>,
    /// `r_c`, CoG in the world frame.
    pub cog_world: Vector3<f64>,
    /// `R_c`, identical to the baselink orientation.
    pub orientation: Matrix3<f64>,
    pub total_mass: f64,
    /// `I_Sigma(q)` about the CoG.
    pub inertia: Matrix3<f64>,
}

/// Point whose Jacobian is requested.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum JacobianTarget {
    ContactPoint(usize),
    FootCenter(usize),
    Rotor(usize),
    Segment(usize),
    /// Arbitrary point rigidly attached to `link` (`None` = torso), CoG frame.
    Point { link: Option<usize>, position: Vector3<f64> },
}

/// Joints upstream of a link, in chain order.
pub fn chain_joints(link: usize) -> std::ops::Range<usize> {
    let first = leg_of_link(link) * JOINTS_PER_LEG;
    if link % 2 == 0 {
        first..first + 2
    } else {
        first..first + JOINTS_PER_LEG
    }
}

/// Positions, orientations, CoG and inertia for the given state.
pub fn forward_kinematics(desc: &RobotDescription, state: &RobotState) -> Result<FrameSet, ModelError> {
    state.check_joint_limits(desc)?;
    Ok(forward_kinematics_unchecked(desc, state))
}

/// [`forward_kinematics`] without the joint-limit check. Used by finite
/// differences and the simulator, which enforce limits themselves.
pub fn forward_kinematics_unchecked(desc: &RobotDescription, state: &RobotState) -> FrameSet {
    let q = &state.joint_angles;
    let len = desc.link_length;
    let ex = Vector3::x();

    let mut joint_origins = [Vector3::zeros(); NUM_JOINTS];
    let mut joint_axes = [Vector3::zeros(); NUM_JOINTS];
    let mut links = [LinkFrame { origin: Vector3::zeros(), rotation: Matrix3::identity() }; NUM_LINKS];
    let mut feet = [Vector3::zeros(); NUM_LEGS];

    // Everything is first computed in the baselink frame.
    for leg in 0..NUM_LEGS {
        let j = leg * JOINTS_PER_LEG;
        let azimuth = hip_azimuth(leg);
        let r0 = rot_z(azimuth);
        let hip = r0 * ex * desc.torso_half_width;

        joint_origins[j] = hip;
        joint_axes[j] = r0 * Vector3::z();
        let r1 = r0 * rot_z(q[j]);
        joint_origins[j + 1] = hip;
        joint_axes[j + 1] = r1 * Vector3::y();
        let r2 = r1 * rot_y(q[j + 1]);
        links[2 * leg] = LinkFrame { origin: hip, rotation: r2 };

        let knee = hip + r2 * ex * len;
        joint_origins[j + 2] = knee;
        joint_axes[j + 2] = r2 * Vector3::z();
        let r3 = r2 * rot_z(q[j + 2]);
        joint_origins[j + 3] = knee;
        joint_axes[j + 3] = r3 * Vector3::y();
        let r4 = r3 * rot_y(q[j + 3]);
        links[2 * leg + 1] = LinkFrame { origin: knee, rotation: r4 };

        feet[leg] = knee + r4 * ex * len;
    }

    let mut segments = Vec::with_capacity(1 + 2 * NUM_LINKS);
    segments.push(Segment {
        mass: desc.torso_mass,
        position: Vector3::zeros(),
        inertia: Matrix3::from_diagonal(&desc.torso_inertia),
        link: None,
    });
    for (l, frame) in links.iter().enumerate() {
        let m = desc.rod_mass[l];
        let own = Matrix3::from_diagonal(&Vector3::new(0.0, 1.0, 1.0)) * (m * len * len / 12.0);
        segments.push(Segment {
            mass: m,
            position: frame.origin + frame.rotation * ex * (0.5 * len),
            inertia: frame.rotation * own * frame.rotation.transpose(),
            link: Some(l),
        });
    }
    for (l, frame) in links.iter().enumerate() {
        segments.push(Segment {
            mass: desc.rotor_module_mass[l],
            position: frame.origin + frame.rotation * ex * desc.rotor_position,
            inertia: Matrix3::zeros(),
            link: Some(l),
        });
    }

    let total_mass: f64 = segments.iter().map(|s| s.mass).sum();
    let cog_in_base = segments.iter().map(|s| s.position * s.mass).sum::<Vector3<f64>>() / total_mass;

    // Shift to the CoG frame.
    for p in joint_origins.iter_mut() {
        *p -= cog_in_base;
    }
    for l in links.iter_mut() {
        l.origin -= cog_in_base;
    }
    for f in feet.iter_mut() {
        *f -= cog_in_base;
    }
    for s in segments.iter_mut() {
        s.position -= cog_in_base;
    }

    let orientation = state.base_orientation;
    let down_in_body = orientation.transpose() * Vector3::new(0.0, 0.0, -desc.foot_radius);
    let contact_points = feet.map(|f| f + down_in_body);

    let rotors = std::array::from_fn(|i| {
        let frame = links[i];
        let base = frame.origin + frame.rotation * ex * desc.rotor_position;
        let proto = RotorFrame {
            link: i,
            base,
            link_rotation: frame.rotation,
            axis_offset: desc.vectoring_axis_offset,
            phi: 0.0,
            theta: 0.0,
            position: base,
            rotation: frame.rotation,
        };
        proto.with_angles(state.vectoring_phi[i], state.vectoring_theta[i])
    });

    let inertia = composite_inertia(&segments);

    FrameSet {
        joint_origins,
        joint_axes,
        links,
        rotors,
        feet,
        contact_points,
        segments,
        cog_in_base,
        cog_world: state.base_position + orientation * cog_in_base,
        orientation,
        total_mass,
        inertia,
    }
}

fn composite_inertia(segments: &[Segment]) -> Matrix3<f64> {
    segments.iter().fold(Matrix3::zeros(), |acc, s| {
        let r = s.position;
        acc + s.inertia + (Matrix3::identity() * r.norm_squared() - r * r.transpose()) * s.mass
    })
}

/// Parallel-axis composition of all segment inertias about the CoG.
pub fn total_inertia(_desc: &RobotDescription, frames: &FrameSet) -> Matrix3<f64> {
    composite_inertia(&frames.segments)
}

impl FrameSet {
    fn target_point(&self, target: JacobianTarget) -> Result<(Option<usize>, Vector3<f64>), ModelError> {
        let bad = || ModelError::BadTarget(format!("{target:?}"));
        Ok(match target {
            JacobianTarget::ContactPoint(k) => (Some(2 * k + 1), *self.contact_points.get(k).ok_or_else(bad)?),
            JacobianTarget::FootCenter(k) => (Some(2 * k + 1), *self.feet.get(k).ok_or_else(bad)?),
            JacobianTarget::Rotor(i) => {
                let r = self.rotors.get(i).ok_or_else(bad)?;
                (Some(r.link), r.position)
            }
            JacobianTarget::Segment(s) => {
                let seg = self.segments.get(s).ok_or_else(bad)?;
                (seg.link, seg.position)
            }
            JacobianTarget::Point { link, position } => {
                if link.is_some_and(|l| l >= NUM_LINKS) {
                    return Err(bad());
                }
                (link, position)
            }
        })
    }

    /// 3 x N_J translational Jacobian of a point with the torso held fixed,
    /// expressed in CoG-frame axes.
    pub fn jacobian(&self, target: JacobianTarget) -> Result<Matrix3xX<f64>, ModelError> {
        let (link, p) = self.target_point(target)?;
        let mut jac = Matrix3xX::zeros(NUM_JOINTS);
        if let Some(link) = link {
            for j in chain_joints(link) {
                let col = self.joint_axes[j].cross(&(p - self.joint_origins[j]));
                jac.set_column(j, &col);
            }
        }
        Ok(jac)
    }

    /// Mass-weighted average of segment Jacobians: maps joint rates to CoG
    /// velocity relative to the baselink.
    pub fn cog_jacobian(&self) -> Matrix3xX<f64> {
        let mut acc = Matrix3xX::zeros(NUM_JOINTS);
        for (s, seg) in self.segments.iter().enumerate() {
            if seg.link.is_some() {
                acc += self.jacobian(JacobianTarget::Segment(s)).expect("segment index in range") * seg.mass;
            }
        }
        acc / self.total_mass
    }

    /// World-frame velocity of the CoG given the measured base twist and joint rates.
    pub fn cog_velocity(&self, state: &RobotState) -> Vector3<f64> {
        let qd = nalgebra::DVector::from_column_slice(&state.joint_velocities);
        let internal = self.cog_jacobian() * qd;
        state.base_linear_velocity
            + self.orientation * (state.base_angular_velocity.cross(&self.cog_in_base) + internal)
    }

    /// Contact point in the world frame.
    pub fn contact_point_world(&self, leg: usize) -> Vector3<f64> {
        self.cog_world + self.orientation * self.contact_points[leg]
    }

    pub fn foot_world(&self, leg: usize) -> Vector3<f64> {
        self.cog_world + self.orientation * self.feet[leg]
    }

    /// Baselink origin in the CoG frame.
    pub fn base_origin(&self) -> Vector3<f64> {
        -self.cog_in_base
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::description::{joint, joint_index};
    use approx::assert_relative_eq;
    use nalgebra::Matrix4;

    fn home() -> (RobotDescription, RobotState) {
        (RobotDescription::default(), RobotState::default())
    }

    #[test]
    fn home_feet_are_quarter_turn_images() {
        let (desc, state) = home();
        let f = forward_kinematics(&desc, &state).unwrap();
        let quarter = rot_z(-std::f64::consts::FRAC_PI_2);
        for k in 0..NUM_LEGS {
            let next = (k + 1) % NUM_LEGS;
            assert_relative_eq!(quarter * f.feet[k], f.feet[next], epsilon = 1e-12);
        }
        assert_relative_eq!(f.feet[0].norm(), desc.torso_half_width + 2.0 * desc.link_length, epsilon = 1e-12);
    }

    #[test]
    fn symmetric_pose_puts_cog_on_torso_axis() {
        let (desc, state) = home();
        let f = forward_kinematics(&desc, &state).unwrap();
        assert_relative_eq!(f.cog_in_base.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(f.cog_in_base.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(f.total_mass, 15.2, epsilon = 1e-12);
    }

    /// Homogeneous-transform chain evaluated independently of the FK code path.
    fn transform_chain_foot(desc: &RobotDescription, leg: usize, q: [f64; 4]) -> Vector3<f64> {
        fn hom(rot: Matrix3<f64>, t: Vector3<f64>) -> Matrix4<f64> {
            let mut m = Matrix4::identity();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
            m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
            m
        }
        let (c, s) = (hip_azimuth(leg).cos(), hip_azimuth(leg).sin());
        let mount = hom(rot_z(hip_azimuth(leg)), Vector3::new(c, s, 0.0) * desc.torso_half_width);
        let link = hom(Matrix3::identity(), Vector3::new(desc.link_length, 0.0, 0.0));
        let t = mount
            * hom(rot_z(q[0]), Vector3::zeros())
            * hom(rot_y(q[1]), Vector3::zeros())
            * link
            * hom(rot_z(q[2]), Vector3::zeros())
            * hom(rot_y(q[3]), Vector3::zeros())
            * link;
        Vector3::new(t[(0, 3)], t[(1, 3)], t[(2, 3)])
    }

    #[test]
    fn pitched_leg_matches_transform_chain() {
        let (desc, mut state) = home();
        let q = [0.0, -30f64.to_radians(), 0.0, 60f64.to_radians()];
        for (m, &v) in q.iter().enumerate() {
            state.joint_angles[joint_index(1, m)] = v;
        }
        let f = forward_kinematics(&desc, &state).unwrap();
        let foot_base = f.feet[1] + f.cog_in_base;
        let hip_base = f.joint_origins[joint_index(1, joint::HIP_PITCH)] + f.cog_in_base;
        // Up 30 degrees then down 30 degrees: no net rise.
        assert_relative_eq!(foot_base.z - hip_base.z, 0.0, epsilon = 1e-12);
        assert_relative_eq!(foot_base, transform_chain_foot(&desc, 1, q), epsilon = 1e-12);

        let q = [0.3, -0.2, -0.5, 0.9];
        for (m, &v) in q.iter().enumerate() {
            state.joint_angles[joint_index(3, m)] = v;
        }
        let f = forward_kinematics(&desc, &state).unwrap();
        assert_relative_eq!(f.feet[3] + f.cog_in_base, transform_chain_foot(&desc, 3, q), epsilon = 1e-12);
    }

    #[test]
    fn out_of_range_joint_is_named() {
        let (desc, mut state) = home();
        state.joint_angles[joint_index(2, joint::KNEE_PITCH)] = 1.7;
        let err = forward_kinematics(&desc, &state).unwrap_err();
        assert!(err.to_string().contains("rear_right_knee_pitch"), "{err}");
    }

    #[test]
    fn torso_point_has_zero_jacobian() {
        let (desc, state) = home();
        let f = forward_kinematics(&desc, &state).unwrap();
        let j = f.jacobian(JacobianTarget::Segment(0)).unwrap();
        assert_eq!(j.amax(), 0.0);
        let j = f.jacobian(JacobianTarget::Point { link: None, position: Vector3::new(0.1, 0.2, 0.0) }).unwrap();
        assert_eq!(j.amax(), 0.0);
    }

    #[test]
    fn hip_yaw_column_is_axis_cross_lever() {
        let (desc, mut state) = home();
        state.joint_angles[1] = -0.3;
        state.joint_angles[3] = 0.8;
        let f = forward_kinematics(&desc, &state).unwrap();
        let j = f.jacobian(JacobianTarget::FootCenter(0)).unwrap();
        let expected = Vector3::z().cross(&(f.feet[0] - f.joint_origins[0]));
        assert_relative_eq!(j.column(0).into_owned(), expected, epsilon = 1e-14);
        // Joints of other legs do not move this foot.
        assert_eq!(j.columns(4, 12).amax(), 0.0);
    }

    #[test]
    fn inner_rotor_ignores_knee_joints() {
        let (desc, state) = home();
        let f = forward_kinematics(&desc, &state).unwrap();
        let j = f.jacobian(JacobianTarget::Rotor(2)).unwrap();
        assert!(j.columns(4, 2).amax() > 0.0);
        assert_eq!(j.columns(6, 2).amax(), 0.0);
    }

    #[test]
    fn bad_target_is_rejected() {
        let (desc, state) = home();
        let f = forward_kinematics(&desc, &state).unwrap();
        assert!(f.jacobian(JacobianTarget::Rotor(8)).is_err());
        assert!(f.jacobian(JacobianTarget::Segment(99)).is_err());
    }

    #[test]
    fn rotor_position_moves_with_roll_when_offset() {
        let desc = RobotDescription::default().with_axis_offset(0.005);
        let mut state = RobotState::default();
        let p0 = forward_kinematics(&desc, &state).unwrap().rotors[0].position;
        state.vectoring_phi[0] = 0.5;
        let p1 = forward_kinematics(&desc, &state).unwrap().rotors[0].position;
        assert!((p1 - p0).norm() > 1e-3);
        let desc = desc.with_axis_offset(0.0);
        let a = forward_kinematics(&desc, &state).unwrap().rotors[0].position;
        state.vectoring_phi[0] = 0.0;
        let b = forward_kinematics(&desc, &state).unwrap().rotors[0].position;
        assert_relative_eq!(a, b, epsilon = 1e-15);
    }

    #[test]
    fn single_point_mass_inertia_is_own_inertia() {
        let own = Matrix3::from_diagonal(&Vector3::new(0.1, 0.2, 0.3));
        let seg = Segment { mass: 2.0, position: Vector3::zeros(), inertia: own, link: None };
        assert_eq!(composite_inertia(&[seg]), own);
    }

    #[test]
    fn two_point_masses_parallel_axis() {
        let (m, d) = (1.5, 0.4);
        let segs = [
            Segment { mass: m, position: Vector3::new(d, 0.0, 0.0), inertia: Matrix3::zeros(), link: None },
            Segment { mass: m, position: Vector3::new(-d, 0.0, 0.0), inertia: Matrix3::zeros(), link: None },
        ];
        let i = composite_inertia(&segs);
        assert_relative_eq!(i[(0, 0)], 0.0);
        assert_relative_eq!(i[(1, 1)], 2.0 * m * d * d, epsilon = 1e-15);
        assert_relative_eq!(i[(2, 2)], 2.0 * m * d * d, epsilon = 1e-15);
    }

    #[test]
    fn inertia_is_symmetric_positive_definite() {
        let (desc, mut state) = home();
        state.joint_angles = std::array::from_fn(|j| ((j as f64) * 0.37).sin() * 1.2);
        let f = forward_kinematics(&desc, &state).unwrap();
        assert_relative_eq!(f.inertia, f.inertia.transpose(), epsilon = 1e-14);
        assert!(f.inertia.cholesky().is_some());
        assert_eq!(total_inertia(&desc, &f), f.inertia);
    }
}
