//! Terrestrial locomotion: torso altitude loop, leg inverse kinematics and
//! the creeping-gait state machine.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::math::{rot_y, rot_z};
use crate::model::{
    hip_azimuth, joint, joint_index, ContactSet, FrameSet, RobotDescription, JOINTS_PER_LEG, LEG_NAMES, NUM_JOINTS,
    NUM_LEGS, NUM_ROTORS,
};
use crate::thrust::link_force_map;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum GaitError {
    #[error("foot target for {leg} unreachable: {deficit:.4} m outside the workspace")]
    Unreachable { leg: &'static str, deficit: f64 },
    #[error("invalid gait parameters: {0}")]
    InvalidParams(String),
}

/// `f_z = k_b (z_d - z)`.
pub fn altitude_feedback(z_desired: f64, z: f64, k_b: f64) -> f64 {
    k_b * (z_desired - z)
}

/// Extra link-frame forces for the inner-link rotors that realize a pure
/// vertical force `force` (CoG frame) with minimum norm.
#[derive(Clone, Debug, PartialEq)]
pub struct AltitudeCommand {
    pub force: f64,
    /// Indexed by rotor; outer-link entries are always zero.
    pub delta: [Vector3<f64>; NUM_ROTORS],
    /// False when the inner-rotor map lost row rank and the result is a least-squares fit.
    pub full_rank: bool,
}

/// Inner-link rotor indices (rotor `2k` on the inner link of leg `k`).
pub const INNER_ROTORS: [usize; NUM_LEGS] = [0, 2, 4, 6];

/// `delta f' = pinv(Q~) (0, 0, f_z, 0, 0, 0)` over the inner-link rotors.
pub fn altitude_allocation(force: f64, frames: &FrameSet) -> AltitudeCommand {
    let mut q = DMatrix::zeros(6, 3 * INNER_ROTORS.len());
    for (c, &i) in INNER_ROTORS.iter().enumerate() {
        q.view_mut((0, 3 * c), (6, 3)).copy_from(&link_force_map(&frames.rotors[i]));
    }
    let svd = q.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = 1e-9 * smax.max(1e-300);
    let full_rank = svd.singular_values.iter().all(|&s| s > eps);
    if !full_rank {
        log::warn!("inner-rotor allocation matrix is rank deficient; using least-squares solution");
    }
    let mut delta = [Vector3::zeros(); NUM_ROTORS];
    if force != 0.0 {
        let dw = DVector::from_vec(vec![0.0, 0.0, force, 0.0, 0.0, 0.0]);
        let sol = svd.solve(&dw, eps).expect("SVD computed with both factors");
        for (c, &i) in INNER_ROTORS.iter().enumerate() {
            delta[i] = Vector3::new(sol[3 * c], sol[3 * c + 1], sol[3 * c + 2]);
        }
    }
    AltitudeCommand { force, delta, full_rank }
}

/// Hip yaw, hip pitch and knee pitch of one leg.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LegAngles {
    pub hip_yaw: f64,
    pub hip_pitch: f64,
    pub knee_pitch: f64,
}

/// Hip joint position of `leg` in the baselink frame.
pub fn hip_position(desc: &RobotDescription, leg: usize) -> Vector3<f64> {
    rot_z(hip_azimuth(leg)) * Vector3::x() * desc.torso_half_width
}

/// Foot sphere center of one leg in the baselink frame.
pub fn leg_fk(desc: &RobotDescription, leg: usize, angles: &LegAngles, knee_yaw: f64) -> Vector3<f64> {
    let r1 = rot_z(hip_azimuth(leg) + angles.hip_yaw) * rot_y(angles.hip_pitch);
    let r2 = r1 * rot_z(knee_yaw) * rot_y(angles.knee_pitch);
    hip_position(desc, leg) + (r1 + r2) * Vector3::x() * desc.link_length
}

/// Analytic inverse kinematics for the foot sphere center `target`
/// (baselink frame) with the knee yaw held at `knee_yaw`. The knee bends
/// downward (`knee_pitch >= 0`) and the leg points away from the torso.
pub fn leg_ik(desc: &RobotDescription, leg: usize, target: &Vector3<f64>, knee_yaw: f64) -> Result<LegAngles, GaitError> {
    let len = desc.link_length;
    let unreachable = |deficit: f64| GaitError::Unreachable { leg: LEG_NAMES[leg], deficit };
    let azimuth = hip_azimuth(leg);
    let t = rot_z(-azimuth) * (target - hip_position(desc, leg));
    let d2 = t.norm_squared();
    let cb = knee_yaw.cos();
    if cb.abs() < 1e-9 {
        return Err(unreachable(f64::NAN));
    }
    let c2 = (d2 / (2.0 * len * len) - 1.0) / cb;
    if c2 > 1.0 + 1e-12 {
        return Err(unreachable(d2.sqrt() - (2.0 * len * len * (1.0 + cb)).sqrt()));
    }
    if c2 < -1.0 - 1e-12 {
        return Err(unreachable((2.0 * len * len * (1.0 - cb)).sqrt() - d2.sqrt()));
    }
    let c2 = c2.clamp(-1.0, 1.0);
    let knee_pitch = c2.acos();
    let (s2, c2) = knee_pitch.sin_cos();
    // Leg vector before hip yaw and pitch: L (1 + cos b cos p, sin b cos p, -sin p).
    let w = Vector3::new(1.0 + cb * c2, knee_yaw.sin() * c2, -s2) * len;
    let rho2 = t.x * t.x + t.y * t.y;
    let ux2 = rho2 - w.y * w.y;
    if ux2 < -1e-12 {
        return Err(unreachable(w.y.abs() - rho2.sqrt()));
    }
    let ux = ux2.max(0.0).sqrt();
    let hip_yaw = t.y.atan2(t.x) - w.y.atan2(ux);
    let hip_pitch = w.z.atan2(w.x) - t.z.atan2(ux);
    Ok(LegAngles {
        hip_yaw: crate::math::wrap_angle(hip_yaw),
        hip_pitch: crate::math::wrap_angle(hip_pitch),
        knee_pitch,
    })
}

/// Hip pitch that keeps hip yaw and knee pitch but moves the foot to height
/// `z` (baselink frame). Rotating the hip pitch swings the foot on a circle
/// around the pitch axis; the branch with the foot pointing outward is returned.
pub fn hip_pitch_for_height(
    desc: &RobotDescription,
    leg: usize,
    angles: &LegAngles,
    knee_yaw: f64,
    z: f64,
) -> Result<f64, GaitError> {
    let len = desc.link_length;
    let (s2, c2) = angles.knee_pitch.sin_cos();
    let w = Vector3::new(1.0 + knee_yaw.cos() * c2, knee_yaw.sin() * c2, -s2) * len;
    let radius = w.x.hypot(w.z);
    let dz = z - hip_position(desc, leg).z;
    if dz.abs() > radius {
        return Err(GaitError::Unreachable { leg: LEG_NAMES[leg], deficit: dz.abs() - radius });
    }
    Ok(crate::math::wrap_angle(w.z.atan2(w.x) - (dz / radius).asin()))
}

/// `q_d - q < dq_c`: the lowering hip pitch has caught up with its target.
pub fn touchdown_detect(q_desired: f64, q: f64, threshold: f64) -> bool {
    q_desired - q < threshold
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaitParams {
    pub stride: f64,
    pub lift_height: f64,
    /// Touchdown threshold on the hip pitch tracking error (rad).
    pub touchdown_threshold: f64,
    pub cycles: usize,
    /// Rate at which joint targets are moved (rad/s).
    pub planning_speed: f64,
    /// Pause in four-foot stance after each touchdown or torso move (s).
    pub settle_time: f64,
    /// Joint error below which a motion stage counts as reached (rad).
    pub reach_tolerance: f64,
    /// Longest wait for a stage before moving on regardless (s).
    pub stage_timeout: f64,
    pub stand_hip_pitch: f64,
    pub stand_knee_pitch: f64,
    /// Plan from the measured torso pose instead of the last target.
    pub feedback: bool,
    /// Distance the torso shifts toward the support triangle before a lift (m).
    pub sway: f64,
}

impl Default for GaitParams {
    fn default() -> Self {
        Self {
            stride: 0.10,
            lift_height: 0.05,
            touchdown_threshold: 2f64.to_radians(),
            cycles: 5,
            planning_speed: 8f64.to_radians(),
            settle_time: 0.5,
            reach_tolerance: 1f64.to_radians(),
            stage_timeout: 5.0,
            stand_hip_pitch: -16f64.to_radians(),
            stand_knee_pitch: 70f64.to_radians(),
            feedback: false,
            sway: 0.04,
        }
    }
}

impl GaitParams {
    pub fn validate(&self) -> Result<(), GaitError> {
        let positive = [
            ("planning_speed", self.planning_speed),
            ("touchdown_threshold", self.touchdown_threshold),
            ("reach_tolerance", self.reach_tolerance),
            ("stage_timeout", self.stage_timeout),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(GaitError::InvalidParams(format!("{name} must be positive")));
            }
        }
        if self.stride < 0.0 || self.lift_height < 0.0 || self.settle_time < 0.0 || self.sway < 0.0 {
            return Err(GaitError::InvalidParams("stride, lift height, settle time and sway must be non-negative".into()));
        }
        Ok(())
    }

    /// Joint angles of the nominal four-foot stance.
    pub fn stand_pose(&self) -> [f64; NUM_JOINTS] {
        let mut q = [0.0; NUM_JOINTS];
        for leg in 0..NUM_LEGS {
            q[joint_index(leg, joint::HIP_PITCH)] = self.stand_hip_pitch;
            q[joint_index(leg, joint::KNEE_PITCH)] = self.stand_knee_pitch;
        }
        q
    }

    /// Baselink height at which the stand pose puts every foot on the ground.
    pub fn stand_height(&self, desc: &RobotDescription) -> f64 {
        let angles = LegAngles { hip_yaw: 0.0, hip_pitch: self.stand_hip_pitch, knee_pitch: self.stand_knee_pitch };
        desc.foot_radius - leg_fk(desc, 0, &angles, 0.0).z
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LiftStage {
    ToIntermediate,
    Lowering,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum GaitPhase {
    /// Four-foot stance, waiting `settle_time` before the next move.
    Stand,
    LiftLeg { leg: usize, stage: LiftStage },
    MoveTorso,
    /// Four-foot torso shift ahead of a lift or before finishing.
    Sway,
    Done,
}

impl GaitPhase {
    pub fn label(&self) -> String {
        match self {
            GaitPhase::Stand => "stand".into(),
            GaitPhase::LiftLeg { leg, stage: LiftStage::ToIntermediate } => format!("lift_{}", LEG_NAMES[*leg]),
            GaitPhase::LiftLeg { leg, stage: LiftStage::Lowering } => format!("lower_{}", LEG_NAMES[*leg]),
            GaitPhase::MoveTorso => "move_torso".into(),
            GaitPhase::Sway => "sway".into(),
            GaitPhase::Done => "done".into(),
        }
    }
}

/// One entry of the per-cycle order: a leg or the torso.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum GaitMove {
    Leg(usize),
    Torso,
}

/// Front-left, front-right, torso, rear-right, rear-left.
pub const GAIT_ORDER: [GaitMove; 5] =
    [GaitMove::Leg(0), GaitMove::Leg(1), GaitMove::Torso, GaitMove::Leg(2), GaitMove::Leg(3)];

/// Torso pose planned by the gait: position and heading, level attitude.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TorsoPose {
    pub position: Vector3<f64>,
    pub yaw: f64,
}

impl TorsoPose {
    pub fn rotation(&self) -> Matrix3<f64> {
        rot_z(self.yaw)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GaitState {
    pub phase: GaitPhase,
    /// Position in [`GAIT_ORDER`] of the next or current move.
    pub cursor: usize,
    pub cycle: usize,
    /// Planned world footholds (foot sphere centers).
    pub footholds: [Vector3<f64>; NUM_LEGS],
    /// Foothold being stepped to, while a leg is in the air.
    pub next_foothold: Option<Vector3<f64>>,
    pub torso_target: TorsoPose,
    /// Horizontal offset of `torso_target` from the stride-aligned torso pose.
    pub sway: Vector3<f64>,
    pub joint_targets: [f64; NUM_JOINTS],
    /// Final joint values of the current motion stage.
    goals: [f64; NUM_JOINTS],
    pub contacts: ContactSet,
    pub phase_time: f64,
    /// Nominal start pose, used to plan absolute targets with feedback.
    origin: TorsoPose,
    origin_footholds: [Vector3<f64>; NUM_LEGS],
}

/// Measured quantities the gait planner looks at.
#[derive(Clone, Copy, Debug)]
pub struct GaitInput<'a> {
    pub base_position: Vector3<f64>,
    pub base_orientation: Matrix3<f64>,
    pub joint_angles: &'a [f64; NUM_JOINTS],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GaitEvents {
    pub touchdown: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaitOutput {
    pub joint_targets: [f64; NUM_JOINTS],
    pub torso_target: TorsoPose,
    pub contacts: ContactSet,
    pub phase: GaitPhase,
}

impl GaitState {
    /// Four-foot stance at the stand pose with the torso at `position`, heading `yaw`.
    pub fn new(desc: &RobotDescription, params: &GaitParams, position: Vector3<f64>, yaw: f64) -> Self {
        let q = params.stand_pose();
        let torso = TorsoPose { position, yaw };
        let footholds = std::array::from_fn(|leg| torso.position + torso.rotation() * leg_foot(desc, leg, &q));
        Self {
            phase: GaitPhase::Stand,
            cursor: 0,
            cycle: 0,
            footholds,
            next_foothold: None,
            torso_target: torso,
            sway: Vector3::zeros(),
            joint_targets: q,
            goals: q,
            contacts: ContactSet::ALL,
            phase_time: 0.0,
            origin: torso,
            origin_footholds: footholds,
        }
    }

    pub fn is_done(&self) -> bool {
        self.phase == GaitPhase::Done
    }

    /// Free leg and its lowering hip pitch target, if a leg is being lowered.
    pub fn lowering_joint(&self) -> Option<usize> {
        match self.phase {
            GaitPhase::LiftLeg { leg, stage: LiftStage::Lowering } => Some(joint_index(leg, joint::HIP_PITCH)),
            _ => None,
        }
    }

    /// Touchdown event from the measured hip pitch of the lowering leg.
    pub fn touchdown_event(&self, joint_angles: &[f64; NUM_JOINTS], params: &GaitParams) -> bool {
        self.lowering_joint()
            .is_some_and(|j| touchdown_detect(self.goals[j], joint_angles[j], params.touchdown_threshold))
    }

    fn output(&self) -> GaitOutput {
        GaitOutput {
            joint_targets: self.joint_targets,
            torso_target: self.torso_target,
            contacts: self.contacts,
            phase: self.phase,
        }
    }

    fn targets_reached(&self) -> bool {
        self.joint_targets == self.goals
    }

    fn tracking_ok(&self, measured: &[f64; NUM_JOINTS], joints: impl Iterator<Item = usize>, tol: f64) -> bool {
        let mut ok = true;
        for j in joints {
            ok &= (measured[j] - self.joint_targets[j]).abs() < tol;
        }
        ok
    }

    fn enter(&mut self, phase: GaitPhase) {
        self.phase = phase;
        self.phase_time = 0.0;
    }
}

fn leg_foot(desc: &RobotDescription, leg: usize, q: &[f64; NUM_JOINTS]) -> Vector3<f64> {
    let j = leg * JOINTS_PER_LEG;
    let angles = LegAngles { hip_yaw: q[j], hip_pitch: q[j + 1], knee_pitch: q[j + 3] };
    leg_fk(desc, leg, &angles, q[j + 2])
}

fn set_leg(q: &mut [f64; NUM_JOINTS], leg: usize, a: &LegAngles) {
    let j = leg * JOINTS_PER_LEG;
    q[j + joint::HIP_YAW] = a.hip_yaw;
    q[j + joint::HIP_PITCH] = a.hip_pitch;
    q[j + joint::KNEE_YAW] = 0.0;
    q[j + joint::KNEE_PITCH] = a.knee_pitch;
}

fn leg_joints(leg: usize) -> std::ops::Range<usize> {
    leg * JOINTS_PER_LEG..(leg + 1) * JOINTS_PER_LEG
}

/// Torso frame used to convert world footholds into leg targets.
fn planning_frame(gait: &GaitState, params: &GaitParams, input: &GaitInput) -> (Vector3<f64>, Matrix3<f64>) {
    if params.feedback {
        (input.base_position, input.base_orientation)
    } else {
        (gait.torso_target.position, gait.torso_target.rotation())
    }
}

/// Advance the creeping gait by `dt`.
///
/// The returned state carries the joint targets for this tick. With
/// `feedback` off every target is derived from the previous targets only, so
/// any slip of the real robot accumulates as drift.
pub fn gait_step(
    desc: &RobotDescription,
    params: &GaitParams,
    gait: &GaitState,
    input: &GaitInput,
    events: GaitEvents,
    dt: f64,
) -> Result<(GaitState, GaitOutput), GaitError> {
    let mut g = gait.clone();
    g.phase_time += dt;
    let measured = input.joint_angles;

    match g.phase {
        GaitPhase::Done => {}
        GaitPhase::Stand => {
            if g.phase_time >= params.settle_time {
                if g.cycle >= params.cycles {
                    if g.sway.norm() > SWAY_EPS {
                        start_sway(desc, params, &mut g, input, Vector3::zeros())?;
                    } else {
                        g.enter(GaitPhase::Done);
                    }
                } else {
                    start_move(desc, params, &mut g, input)?;
                }
            }
        }
        GaitPhase::LiftLeg { leg, stage: LiftStage::ToIntermediate } => {
            let reached = g.targets_reached()
                && g.tracking_ok(measured, leg_joints(leg), params.reach_tolerance);
            if reached || (g.targets_reached() && g.phase_time > params.stage_timeout) {
                // Lower by the hip pitch alone, straight to its final value.
                let foothold = g.next_foothold.expect("lifting leg has a foothold");
                let (p, r) = planning_frame(&g, params, input);
                let local = r.transpose() * (foothold - p);
                let fin = leg_ik(desc, leg, &local, 0.0)?;
                let j = joint_index(leg, joint::HIP_PITCH);
                g.goals[j] = fin.hip_pitch;
                g.joint_targets[j] = fin.hip_pitch;
                g.enter(GaitPhase::LiftLeg { leg, stage: LiftStage::Lowering });
            }
        }
        GaitPhase::LiftLeg { leg, stage: LiftStage::Lowering } => {
            let timed_out = g.phase_time > params.stage_timeout;
            if events.touchdown || timed_out {
                if timed_out && !events.touchdown {
                    log::warn!("touchdown of {} not detected before timeout", LEG_NAMES[leg]);
                }
                g.footholds[leg] = g.next_foothold.take().expect("lifting leg has a foothold");
                g.contacts.insert(leg);
                finish_move(params, &mut g);
            }
        }
        GaitPhase::MoveTorso | GaitPhase::Sway => {
            let all = 0..NUM_JOINTS;
            if g.targets_reached() && (g.tracking_ok(measured, all, params.reach_tolerance) || g.phase_time > params.stage_timeout) {
                if g.phase == GaitPhase::MoveTorso {
                    finish_move(params, &mut g);
                } else {
                    g.enter(GaitPhase::Stand);
                }
            }
        }
    }

    // Move the joint targets toward the goals along a straight line in joint
    // space, the largest change at the planning speed.
    let step = params.planning_speed * dt;
    let largest = (0..NUM_JOINTS).fold(0.0f64, |m, j| m.max((g.goals[j] - g.joint_targets[j]).abs()));
    if largest <= step {
        g.joint_targets = g.goals;
    } else {
        for j in 0..NUM_JOINTS {
            g.joint_targets[j] += (g.goals[j] - g.joint_targets[j]) * (step / largest);
        }
    }
    let out = g.output();
    Ok((g, out))
}

fn finish_move(_params: &GaitParams, g: &mut GaitState) {
    g.cursor += 1;
    if g.cursor == GAIT_ORDER.len() {
        g.cursor = 0;
        g.cycle += 1;
    }
    g.enter(GaitPhase::Stand);
}

fn start_move(desc: &RobotDescription, params: &GaitParams, g: &mut GaitState, input: &GaitInput) -> Result<(), GaitError> {
    let forward = g.origin.rotation() * Vector3::x() * params.stride;
    match GAIT_ORDER[g.cursor] {
        GaitMove::Leg(leg) => {
            let sway = sway_toward_support(params, g, leg);
            if (sway - g.sway).norm() > SWAY_EPS {
                return start_sway(desc, params, g, input, sway);
            }
            let foothold = if params.feedback {
                g.origin_footholds[leg] + forward * (g.cycle + 1) as f64
            } else {
                g.footholds[leg] + forward
            };
            let (p, r) = planning_frame(g, params, input);
            let local = r.transpose() * (foothold - p);
            let fin = leg_ik(desc, leg, &local, 0.0)?;
            let lifted = r.transpose() * (foothold + Vector3::z() * params.lift_height - p);
            let mid = hip_pitch_for_height(desc, leg, &fin, 0.0, lifted.z)?;
            let mut goals = g.goals;
            set_leg(&mut goals, leg, &LegAngles { hip_pitch: mid, ..fin });
            g.goals = goals;
            g.next_foothold = Some(foothold);
            g.contacts.remove(leg);
            g.enter(GaitPhase::LiftLeg { leg, stage: LiftStage::ToIntermediate });
        }
        GaitMove::Torso => {
            let target = if params.feedback {
                let steps = g.cycle as f64 + 1.0;
                TorsoPose { position: g.origin.position + forward * steps, yaw: g.origin.yaw }
            } else {
                TorsoPose { position: g.torso_target.position - g.sway + forward, yaw: g.torso_target.yaw }
            };
            g.goals = stance_goals(desc, params, g, input, &target)?;
            g.torso_target = target;
            g.sway = Vector3::zeros();
            g.enter(GaitPhase::MoveTorso);
        }
    }
    Ok(())
}

const SWAY_EPS: f64 = 1e-9;

/// Sway offset that moves the torso toward the centroid of the feet left standing when `leg` lifts.
fn sway_toward_support(params: &GaitParams, g: &GaitState, leg: usize) -> Vector3<f64> {
    let nominal = g.torso_target.position - g.sway;
    let others: Vector3<f64> = (0..NUM_LEGS).filter(|&l| l != leg).map(|l| g.footholds[l]).sum();
    let mut dir = others / (NUM_LEGS - 1) as f64 - nominal;
    dir.z = 0.0;
    let n = dir.norm();
    if n < 1e-9 {
        Vector3::zeros()
    } else {
        dir * (params.sway.min(n) / n)
    }
}

/// Shift the torso by a new sway offset with all feet on the ground.
fn start_sway(
    desc: &RobotDescription,
    params: &GaitParams,
    g: &mut GaitState,
    input: &GaitInput,
    sway: Vector3<f64>,
) -> Result<(), GaitError> {
    let target = TorsoPose { position: g.torso_target.position - g.sway + sway, yaw: g.torso_target.yaw };
    g.goals = stance_goals(desc, params, g, input, &target)?;
    g.torso_target = target;
    g.sway = sway;
    g.enter(GaitPhase::Sway);
    Ok(())
}

/// Joint goals that keep every foot in place with the torso at `target`.
fn stance_goals(
    desc: &RobotDescription,
    params: &GaitParams,
    g: &GaitState,
    input: &GaitInput,
    target: &TorsoPose,
) -> Result<[f64; NUM_JOINTS], GaitError> {
    let r = target.rotation();
    let mut goals = g.goals;
    for leg in 0..NUM_LEGS {
        let foot = if params.feedback {
            input.base_position + input.base_orientation * leg_foot(desc, leg, input.joint_angles)
        } else {
            g.footholds[leg]
        };
        let local = r.transpose() * (foot - target.position);
        set_leg(&mut goals, leg, &leg_ik(desc, leg, &local, 0.0)?);
    }
    Ok(goals)
}

/// Signed distance of `p` from the boundary of the triangle/polygon spanned
/// by `vertices` in the ground plane, positive inside.
pub fn support_margin(p: &Vector3<f64>, vertices: &[Vector3<f64>]) -> f64 {
    let n = vertices.len();
    if n < 3 {
        return f64::NEG_INFINITY;
    }
    // Order the vertices counter-clockwise around their centroid.
    let c = vertices.iter().sum::<Vector3<f64>>() / n as f64;
    let mut v: Vec<_> = vertices.to_vec();
    v.sort_by(|a, b| (a.y - c.y).atan2(a.x - c.x).total_cmp(&(b.y - c.y).atan2(b.x - c.x)));
    let mut margin = f64::INFINITY;
    for k in 0..n {
        let a = v[k];
        let b = v[(k + 1) % n];
        let e = (b - a).xy();
        let len = e.norm();
        if len < 1e-12 {
            continue;
        }
        let rel = (p - a).xy();
        margin = margin.min((e.x * rel.y - e.y * rel.x) / len);
    }
    margin
}
