//! Desk-scale physics for the approximated centroidal model.
//!
//! The robot is integrated as one rigid body about its CoG with the
//! configuration-dependent inertia `I(q)`. Joints are first-order servos
//! with viscous gearboxes, so a joint moves only as fast as the imbalance
//! between motor torque and external load allows. Feet interact with a flat
//! ground through penalty springs.

pub mod log;
pub mod scenario;

use nalgebra::{DVector, Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::control::joint_pd;
use crate::math::{exp_so3, orthonormalize, wrap_angle};
use crate::model::{
    chain_joints, forward_kinematics_unchecked, ContactSet, FrameSet, JacobianTarget, RobotDescription, RobotState,
    JOINTS_PER_LEG, NUM_JOINTS, NUM_LEGS, NUM_ROTORS,
};
use crate::thrust::RotorCommand;

pub use self::log::{LogRow, RunSummary, SimLog};
pub use scenario::{run_scenario, Scenario, ScenarioConfig, ScenarioError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Physics step (s).
    pub timestep: f64,
    /// Controller update rate (Hz).
    pub control_rate: f64,
    pub ground_stiffness: f64,
    pub ground_damping: f64,
    pub tangential_stiffness: f64,
    pub tangential_damping: f64,
    pub friction: f64,
    pub thrust_time_constant: f64,
    pub vectoring_time_constant: f64,
    /// Viscous friction of each joint gearbox (Nms/rad).
    pub joint_damping: f64,
    /// Acceleration limit of the joints of a leg without ground contact (rad/s^2).
    pub joint_acceleration: f64,
    /// Low-pass time constant of the CoG acceleration that loads the leg segments (s).
    pub load_filter_time_constant: f64,
    pub position_noise: f64,
    pub attitude_noise: f64,
    pub velocity_noise: f64,
    pub angular_velocity_noise: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            timestep: 0.001,
            control_rate: 100.0,
            ground_stiffness: 40_000.0,
            ground_damping: 600.0,
            tangential_stiffness: 20_000.0,
            tangential_damping: 300.0,
            friction: 0.8,
            thrust_time_constant: 0.05,
            vectoring_time_constant: 0.03,
            joint_damping: 1.2,
            joint_acceleration: 8.0,
            load_filter_time_constant: 0.02,
            position_noise: 0.0,
            attitude_noise: 0.0,
            velocity_noise: 0.0,
            angular_velocity_noise: 0.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.into()));
        if !(self.timestep > 0.0) || !(self.control_rate > 0.0) {
            return bad("timestep and control rate must be positive");
        }
        let nonneg = [
            self.ground_stiffness,
            self.ground_damping,
            self.tangential_stiffness,
            self.tangential_damping,
            self.friction,
            self.thrust_time_constant,
            self.vectoring_time_constant,
            self.load_filter_time_constant,
            self.position_noise,
            self.attitude_noise,
            self.velocity_noise,
            self.angular_velocity_noise,
        ];
        if nonneg.iter().any(|&v| !(v >= 0.0)) {
            return bad("stiffness, damping, friction, lags and noise must be non-negative");
        }
        if !(self.joint_damping > 0.0) {
            return bad("joint damping must be positive");
        }
        Ok(())
    }

    /// Physics steps per control tick.
    pub fn substeps(&self) -> usize {
        ((1.0 / self.control_rate) / self.timestep).round().max(1.0) as usize
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("simulation diverged at t = {time:.3} s: {what}")]
    Diverged { time: f64, what: String },
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
}

/// Reaction of the ground on one foot.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ContactForce {
    /// World-frame force on the robot.
    pub force: Vector3<f64>,
    pub penetration: f64,
    pub in_contact: bool,
    /// False while the foot slides at the friction limit.
    pub sticking: bool,
}

/// Penalty contact of one foot point with the plane `z = 0`.
///
/// Normal force `max(0, k d + c d')` for penetration `d`. The tangential force
/// is a spring to the touchdown point plus viscous damping, capped at
/// `mu N`; when the cap is hit the anchor slides along.
pub fn contact_force(
    point: &Vector3<f64>,
    velocity: &Vector3<f64>,
    anchor: &mut Option<Vector3<f64>>,
    cfg: &SimConfig,
) -> ContactForce {
    let depth = -point.z;
    if depth <= 0.0 {
        *anchor = None;
        return ContactForce::default();
    }
    let normal = (cfg.ground_stiffness * depth - cfg.ground_damping * velocity.z).max(0.0);
    let a = *anchor.get_or_insert(Vector3::new(point.x, point.y, 0.0));
    let spring = Vector3::new(a.x - point.x, a.y - point.y, 0.0) * cfg.tangential_stiffness;
    let tangential = spring - Vector3::new(velocity.x, velocity.y, 0.0) * cfg.tangential_damping;
    let cap = cfg.friction * normal;
    let (tangential, sticking) = if tangential.norm() > cap {
        let t = if tangential.norm() > 0.0 { tangential * (cap / tangential.norm()) } else { tangential };
        // Slide the anchor so the spring alone carries the capped force.
        if cfg.tangential_stiffness > 0.0 {
            let damping = Vector3::new(velocity.x, velocity.y, 0.0) * cfg.tangential_damping;
            let s = (t + damping) / cfg.tangential_stiffness;
            *anchor = Some(Vector3::new(point.x + s.x, point.y + s.y, 0.0));
        }
        (t, false)
    } else {
        (tangential, true)
    };
    ContactForce { force: Vector3::new(tangential.x, tangential.y, normal), penetration: depth, in_contact: true, sticking }
}

/// Commands applied to the actuators until the next control tick.
#[derive(Clone, Debug, PartialEq)]
pub struct ActuatorCommand {
    pub rotors: [RotorCommand; NUM_ROTORS],
    pub joint_targets: [f64; NUM_JOINTS],
    pub joint_feedforward: [f64; NUM_JOINTS],
    pub joint_p: f64,
    pub joint_d: f64,
}

impl ActuatorCommand {
    pub fn hold(state: &RobotState, joint_p: f64, joint_d: f64) -> Self {
        Self {
            rotors: std::array::from_fn(|i| {
                RotorCommand::new(state.thrusts[i], state.vectoring_phi[i], state.vectoring_theta[i])
            }),
            joint_targets: state.joint_angles,
            joint_feedforward: [0.0; NUM_JOINTS],
            joint_p,
            joint_d,
        }
    }
}

/// External wrench in the world frame, applied at the CoG.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Disturbance {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

/// Full simulator state.
#[derive(Clone, Debug)]
pub struct Simulator {
    pub desc: RobotDescription,
    pub cfg: SimConfig,
    pub time: f64,
    steps: u64,
    /// Measured-quality robot state; the base pose is derived from the CoG.
    pub robot: RobotState,
    pub cog_position: Vector3<f64>,
    pub cog_velocity: Vector3<f64>,
    /// World-frame angular momentum about the CoG.
    pub angular_momentum: Vector3<f64>,
    pub frames: FrameSet,
    pub contacts: [ContactForce; NUM_LEGS],
    anchors: [Option<Vector3<f64>>; NUM_LEGS],
    /// Motor torque output of every joint during the last step.
    pub motor_torques: [f64; NUM_JOINTS],
    /// Motor torque plus external load on every joint; zero in perfect equilibrium.
    pub equilibrium_residual: [f64; NUM_JOINTS],
    /// Low-passed world-frame CoG acceleration.
    pub filtered_acceleration: Vector3<f64>,
}

impl Simulator {
    pub fn new(desc: RobotDescription, cfg: SimConfig, initial: RobotState) -> Result<Self, SimError> {
        cfg.validate()?;
        let frames = forward_kinematics_unchecked(&desc, &initial);
        let cog_velocity = frames.cog_velocity(&initial);
        let angular_momentum = initial.base_orientation * frames.inertia * initial.base_angular_velocity;
        let rotor_force: Vector3<f64> = frames
            .rotors
            .iter()
            .enumerate()
            .map(|(i, r)| r.rotation * Vector3::z() * initial.thrusts[i])
            .sum();
        let filtered_acceleration =
            initial.base_orientation * rotor_force / frames.total_mass - Vector3::z() * desc.gravity;
        let mut sim = Self {
            desc,
            cfg,
            time: 0.0,
            steps: 0,
            cog_position: frames.cog_world,
            cog_velocity,
            angular_momentum,
            frames,
            robot: initial,
            contacts: [ContactForce::default(); NUM_LEGS],
            anchors: [None; NUM_LEGS],
            motor_torques: [0.0; NUM_JOINTS],
            equilibrium_residual: [0.0; NUM_JOINTS],
            filtered_acceleration,
        };
        sim.update_contact_flags();
        for leg in 0..NUM_LEGS {
            let p = sim.frames.contact_point_world(leg);
            sim.contacts[leg] = contact_force(&p, &Vector3::zeros(), &mut sim.anchors[leg], &sim.cfg);
        }
        Ok(sim)
    }

    fn update_contact_flags(&mut self) {
        let mut set = ContactSet::NONE;
        for leg in 0..NUM_LEGS {
            if self.frames.contact_point_world(leg).z <= 0.0 {
                set.insert(leg);
            }
        }
        self.robot.contact_set = set;
    }

    /// Total mechanical energy of the rigid body: kinetic plus potential.
    pub fn energy(&self) -> f64 {
        let m = self.frames.total_mass;
        let w = self.robot.base_angular_velocity;
        0.5 * m * self.cog_velocity.norm_squared()
            + 0.5 * w.dot(&(self.frames.inertia * w))
            + m * self.desc.gravity * self.cog_position.z
    }

    /// World-frame force and torque (about the CoG) produced by the rotors.
    pub fn rotor_wrench_world(&self) -> (Vector3<f64>, Vector3<f64>) {
        let r = self.robot.base_orientation;
        let mut f = Vector3::zeros();
        let mut t = Vector3::zeros();
        for (i, rotor) in self.frames.rotors.iter().enumerate() {
            let fi = rotor.rotation * Vector3::z() * self.robot.thrusts[i];
            f += fi;
            t += rotor.position.cross(&fi);
        }
        (r * f, r * t)
    }

    /// Advance the physics by one timestep.
    pub fn step(&mut self, cmd: &ActuatorCommand, disturbance: &Disturbance) -> Result<(), SimError> {
        let dt = self.cfg.timestep;
        let desc = &self.desc;
        let cfg = &self.cfg;
        let frames = &self.frames;
        let r = self.robot.base_orientation;
        let r_t = r.transpose();
        let m = frames.total_mass;
        let omega = self.robot.base_angular_velocity;
        let qd_prev = self.robot.joint_velocities;

        // Rotor forces in the CoG frame.
        let mut rotor_forces = [Vector3::zeros(); NUM_ROTORS];
        let mut f_rotor = Vector3::zeros();
        let mut t_rotor = Vector3::zeros();
        for (i, rotor) in frames.rotors.iter().enumerate() {
            let fi = rotor.rotation * Vector3::z() * self.robot.thrusts[i];
            rotor_forces[i] = fi;
            f_rotor += fi;
            t_rotor += rotor.position.cross(&fi);
        }

        // Contact forces without the joint-velocity part of the foot velocity.
        let mut rigid_contacts = [ContactForce::default(); NUM_LEGS];
        let mut contact_jac = Vec::with_capacity(NUM_LEGS);
        let mut anchors = self.anchors;
        // Foot velocities include the motion of the CoG caused by legs in the air.
        let mut airborne_rates = DVector::zeros(NUM_JOINTS);
        for leg in 0..NUM_LEGS {
            if frames.contact_point_world(leg).z > 0.0 {
                for j in leg * JOINTS_PER_LEG..(leg + 1) * JOINTS_PER_LEG {
                    airborne_rates[j] = qd_prev[j];
                }
            }
        }
        let cog_shift = frames.cog_jacobian() * airborne_rates;
        let mut v_rigid = [Vector3::zeros(); NUM_LEGS];
        for leg in 0..NUM_LEGS {
            let p_body = frames.contact_points[leg];
            let p = self.cog_position + r * p_body;
            v_rigid[leg] = self.cog_velocity + r * (omega.cross(&p_body) - &cog_shift);
            rigid_contacts[leg] = contact_force(&p, &v_rigid[leg], &mut anchors[leg], cfg);
            contact_jac.push(frames.jacobian(JacobianTarget::ContactPoint(leg)).expect("leg index in range"));
        }

        // Specific force felt by the segments: gravity minus the CoG acceleration.
        let external: Vector3<f64> = r * f_rotor + rigid_contacts.iter().map(|c| c.force).sum::<Vector3<f64>>() + disturbance.force;
        let apparent_gravity = r_t * (-Vector3::z() * desc.gravity - self.filtered_acceleration);

        // Joint loads from rotors and segment weight.
        let mut load = [0.0; NUM_JOINTS];
        for (i, f) in rotor_forces.iter().enumerate() {
            let jac = frames.jacobian(JacobianTarget::Rotor(i)).expect("rotor index in range");
            let tau = jac.transpose() * f;
            for j in chain_joints(i) {
                load[j] += tau[j];
            }
        }
        for (s, seg) in frames.segments.iter().enumerate() {
            if let Some(link) = seg.link {
                let jac = frames.jacobian(JacobianTarget::Segment(s)).expect("segment index in range");
                let tau = jac.transpose() * (apparent_gravity * seg.mass);
                for j in chain_joints(link) {
                    load[j] += tau[j];
                }
            }
        }
        // Unsaturated servos are integrated implicitly in their own gains.
        let mut motor = [0.0; NUM_JOINTS];
        let mut servo_gain = [0.0; NUM_JOINTS];
        for j in 0..NUM_JOINTS {
            let lim = desc.max_joint_torque;
            let pd = joint_pd(cmd.joint_targets[j], self.robot.joint_angles[j], qd_prev[j], cmd.joint_p, cmd.joint_d, f64::INFINITY);
            let explicit = pd + cmd.joint_feedforward[j];
            if explicit.abs() < lim {
                motor[j] = explicit + cmd.joint_d * qd_prev[j];
                servo_gain[j] = cmd.joint_p * dt + cmd.joint_d;
            } else {
                motor[j] = explicit.clamp(-lim, lim);
            }
        }
        // Each leg is solved with its contact stiffness included; a foot that
        // would pull on the ground is released and the leg solved again.
        let mut qd = [0.0; NUM_JOINTS];
        let mut contacts = rigid_contacts;
        for leg in 0..NUM_LEGS {
            let joints = leg * JOINTS_PER_LEG..(leg + 1) * JOINTS_PER_LEG;
            let jc = contact_jac[leg].columns(leg * JOINTS_PER_LEG, JOINTS_PER_LEG).into_owned();
            let jw = r * &jc;
            let c = rigid_contacts[leg];
            let servo = Vector4::from_fn(|k, _| cfg.joint_damping + servo_gain[leg * JOINTS_PER_LEG + k]);
            let mut d = Matrix3::zeros();
            let mut k = Matrix3::zeros();
            let mut f0 = Vector3::zeros();
            if c.in_contact {
                k[(2, 2)] = cfg.ground_stiffness;
                d[(2, 2)] = cfg.ground_damping;
                if c.sticking {
                    for a in 0..2 {
                        k[(a, a)] = cfg.tangential_stiffness;
                        d[(a, a)] = cfg.tangential_damping;
                    }
                }
                // Normal force before clipping, from the rigid-body motion of the foot.
                f0 = c.force;
                f0.z = cfg.ground_stiffness * c.penetration - cfg.ground_damping * v_rigid[leg].z;
            }
            let solve = |coupled: bool| -> Option<Vector4<f64>> {
                let (gain, f) = if coupled { (k * dt + d, f0) } else { (Matrix3::zeros(), Vector3::zeros()) };
                let a: Matrix4<f64> = Matrix4::from_diagonal(&servo) + jw.transpose() * gain * &jw;
                let tau_c = jw.transpose() * f;
                let rhs = Vector4::from_fn(|i, _| {
                    let j = leg * JOINTS_PER_LEG + i;
                    motor[j] + load[j] + tau_c[i]
                });
                a.lu().solve(&rhs)
            };
            let singular = || SimError::Diverged { time: self.time, what: "singular joint servo system".into() };
            let mut coupled = c.in_contact;
            let mut sol = solve(coupled).ok_or_else(singular)?;
            // Scale the whole leg so the speed limit keeps the direction of foot motion.
            let mut scale = (sol.amax() / desc.max_joint_speed).max(1.0);
            let mut f = Vector3::zeros();
            if coupled {
                f = f0 - d * (&jw * (sol / scale));
                if f.z <= 0.0 {
                    coupled = false;
                    sol = solve(false).ok_or_else(singular)?;
                    scale = (sol.amax() / desc.max_joint_speed).max(1.0);
                }
            }
            let mut next = sol / scale;
            if !coupled && cfg.joint_acceleration > 0.0 {
                let prev = Vector4::from_fn(|i, _| qd_prev[leg * JOINTS_PER_LEG + i]);
                let change = next - prev;
                let limit = cfg.joint_acceleration * dt;
                next = prev + change / (change.amax() / limit).max(1.0);
            }
            for (i, j) in joints.enumerate() {
                qd[j] = next[i];
            }
            if coupled {
                let cap = cfg.friction * f.z;
                let t = f.xy().norm();
                if t > cap {
                    f.x *= cap / t;
                    f.y *= cap / t;
                }
                contacts[leg].force = f;
            } else {
                contacts[leg].force = Vector3::zeros();
            }
        }
        for j in 0..NUM_JOINTS {
            let leg = j / JOINTS_PER_LEG;
            let jc = contact_jac[leg].column(j);
            let tau_contact = (r * jc).dot(&contacts[leg].force);
            motor[j] = (motor[j] - servo_gain[j] * qd[j]).clamp(-desc.max_joint_torque, desc.max_joint_torque);
            self.equilibrium_residual[j] = motor[j] + load[j] + tau_contact;
        }

        // Centroidal dynamics.
        let mut force = external - rigid_contacts.iter().map(|c| c.force).sum::<Vector3<f64>>();
        force += contacts.iter().map(|c| c.force).sum::<Vector3<f64>>();
        force.z -= m * desc.gravity;
        let mut torque = r * t_rotor + disturbance.torque;
        for leg in 0..NUM_LEGS {
            torque += (r * frames.contact_points[leg]).cross(&contacts[leg].force);
        }
        let accel = force / m;
        let tf = cfg.load_filter_time_constant;
        let blend = if tf > 0.0 { (dt / tf).min(1.0) } else { 1.0 };
        self.filtered_acceleration += (accel - self.filtered_acceleration) * blend;
        let v_new = self.cog_velocity + accel * dt;
        self.cog_position += v_new * dt;
        self.cog_velocity = v_new;
        self.angular_momentum += torque * dt;

        let inertia_inv = frames
            .inertia
            .try_inverse()
            .ok_or_else(|| SimError::Diverged { time: self.time, what: "singular inertia".into() })?;
        let w0 = inertia_inv * (r_t * self.angular_momentum);
        let r_half = r * exp_so3(&(w0 * (0.5 * dt)));
        let w_half = inertia_inv * (r_half.transpose() * self.angular_momentum);
        let r_new = orthonormalize(&(r * exp_so3(&(w_half * dt))));

        // Joints.
        for j in 0..NUM_JOINTS {
            let lim = desc.joint_limits[j];
            let q = self.robot.joint_angles[j] + qd[j] * dt;
            if q < lim.lower || q > lim.upper {
                self.robot.joint_angles[j] = q.clamp(lim.lower, lim.upper);
                qd[j] = 0.0;
            } else {
                self.robot.joint_angles[j] = q;
            }
        }
        self.robot.joint_velocities = qd;
        self.motor_torques = motor;

        // Vectoring angles and thrust follow their commands with first-order lags.
        for (i, c) in cmd.rotors.iter().enumerate() {
            let vmax = desc.max_vectoring_speed;
            let tv = cfg.vectoring_time_constant;
            let follow = |current: f64, target: f64| {
                let err = wrap_angle(target - current);
                let rate = if tv > 0.0 { err / tv } else { err / dt };
                wrap_angle(current + rate.clamp(-vmax, vmax) * dt)
            };
            self.robot.vectoring_phi[i] = follow(self.robot.vectoring_phi[i], c.phi);
            self.robot.vectoring_theta[i] = follow(self.robot.vectoring_theta[i], c.theta);
            let target = c.thrust.clamp(0.0, desc.max_thrust);
            let tl = cfg.thrust_time_constant;
            let lam = &mut self.robot.thrusts[i];
            *lam = if tl > 0.0 { *lam + (target - *lam) * (dt / tl).min(1.0) } else { target };
        }

        // Recover the baselink from the CoG.
        self.robot.base_orientation = r_new;
        self.robot.base_position = Vector3::zeros();
        let new_frames = forward_kinematics_unchecked(desc, &self.robot);
        let cog_in_base = new_frames.cog_in_base;
        let inertia_inv = new_frames
            .inertia
            .try_inverse()
            .ok_or_else(|| SimError::Diverged { time: self.time, what: "singular inertia".into() })?;
        let w_body = inertia_inv * (r_new.transpose() * self.angular_momentum);
        let qd_vec = nalgebra::DVector::from_column_slice(&qd);
        let internal = new_frames.cog_jacobian() * qd_vec;
        self.robot.base_position = self.cog_position - r_new * cog_in_base;
        self.robot.base_angular_velocity = w_body;
        self.robot.base_linear_velocity = self.cog_velocity - r_new * (w_body.cross(&cog_in_base) + internal);
        let mut frames = new_frames;
        frames.cog_world = self.cog_position;
        self.frames = frames;
        self.contacts = contacts;
        self.anchors = anchors;
        self.steps += 1;
        self.time = self.steps as f64 * dt;
        self.update_contact_flags();

        let finite = self.cog_position.iter().chain(self.cog_velocity.iter()).chain(self.angular_momentum.iter()).all(|v| v.is_finite())
            && self.robot.joint_angles.iter().all(|v| v.is_finite());
        if !finite {
            return Err(SimError::Diverged { time: self.time, what: "non-finite state".into() });
        }
        if self.cog_velocity.norm() > 100.0 || w_body.norm() > 100.0 {
            return Err(SimError::Diverged { time: self.time, what: "velocity blow-up".into() });
        }
        Ok(())
    }
}
