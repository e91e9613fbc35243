//! Closed-loop scenarios: controllers, allocation, actuators and physics.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::log::{LogRow, SimLog};
use super::{ActuatorCommand, Disturbance, SimConfig, SimError, Simulator};
use crate::allocation::{AllocationError, AllocationOutput, AllocationSettings, Allocator, Mode};
use crate::control::{attitude_error, AttitudeTarget, CentroidalController, ControlGains, PositionTarget, WrenchCommand};
use crate::gait::{
    altitude_allocation, altitude_feedback, gait_step, support_margin, touchdown_detect, GaitError, GaitEvents,
    GaitInput, GaitParams, GaitState,
};
use crate::math::{exp_so3, orthonormalize, rot_z, rpy};
use crate::model::{
    forward_kinematics_unchecked, joint, joint_index, ContactSet, RobotDescription, RobotState, NUM_JOINTS, NUM_LEGS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Hold a fixed pose in midair.
    Hover,
    /// Sweep all legs from the stand pose to straight and back while hovering.
    Transform,
    /// Stand on four feet, raise one leg, hold it, put it back down.
    LegLift,
    /// Creeping gait on the flat floor.
    Walk,
    /// Walk, then take off directly from the terrestrial pose and hover.
    Hybrid,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [Scenario::Hover, Scenario::Transform, Scenario::LegLift, Scenario::Walk, Scenario::Hybrid];

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Hover => "hover",
            Scenario::Transform => "transform",
            Scenario::LegLift => "leg-lift",
            Scenario::Walk => "walk",
            Scenario::Hybrid => "hybrid",
        }
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL.into_iter().find(|sc| sc.name() == s).ok_or_else(|| format!("unknown scenario `{s}`"))
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HoverConfig {
    /// Baselink height at the start (m).
    pub altitude: f64,
}

impl Default for HoverConfig {
    fn default() -> Self {
        Self { altitude: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformConfig {
    /// Start of the outbound sweep (s).
    pub start: f64,
    /// Duration of each sweep (s).
    pub motion_time: f64,
    /// Pause at the far pose (s).
    pub hold_time: f64,
    pub hip_pitch_deg: f64,
    pub knee_pitch_deg: f64,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self { start: 3.0, motion_time: 7.0, hold_time: 2.0, hip_pitch_deg: 0.0, knee_pitch_deg: 0.0 }
    }
}

impl TransformConfig {
    pub fn return_start(&self) -> f64 {
        self.start + self.motion_time + self.hold_time
    }

    pub fn return_end(&self) -> f64 {
        self.return_start() + self.motion_time
    }

    /// Sweep progress in `[0, 1]` at time `t`.
    pub fn progress(&self, t: f64) -> f64 {
        let cosine = |s: f64| 0.5 * (1.0 - (std::f64::consts::PI * s.clamp(0.0, 1.0)).cos());
        if t < self.start {
            0.0
        } else if t < self.start + self.motion_time {
            cosine((t - self.start) / self.motion_time)
        } else if t < self.return_start() {
            1.0
        } else {
            1.0 - cosine((t - self.return_start()) / self.motion_time)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LegLiftConfig {
    pub leg: usize,
    /// Time at which the leg leaves the contact set (s).
    pub lift_time: f64,
    pub lifted_hip_pitch_deg: f64,
    /// Time at which the hip pitch target returns to the stand pose (s).
    pub lower_time: f64,
    pub allocation: AllocationSettings,
}

impl Default for LegLiftConfig {
    fn default() -> Self {
        Self {
            leg: 0,
            lift_time: 2.0,
            lifted_hip_pitch_deg: -28.0,
            lower_time: 32.0,
            allocation: AllocationSettings::terrestrial(&RobotDescription::default()),
        }
    }
}

/// Gait parameters with angles in degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaitConfig {
    pub stride: f64,
    pub lift_height: f64,
    pub touchdown_threshold_deg: f64,
    pub cycles: usize,
    /// Rate of the planned joint targets (deg/s).
    pub planning_speed_deg: f64,
    pub settle_time: f64,
    pub reach_tolerance_deg: f64,
    pub stage_timeout: f64,
    pub stand_hip_pitch_deg: f64,
    pub stand_knee_pitch_deg: f64,
    pub feedback: bool,
    pub sway: f64,
}

impl Default for GaitConfig {
    fn default() -> Self {
        Self {
            stride: 0.10,
            lift_height: 0.05,
            touchdown_threshold_deg: 2.0,
            cycles: 5,
            planning_speed_deg: 8.0,
            settle_time: 0.5,
            reach_tolerance_deg: 1.0,
            stage_timeout: 5.0,
            stand_hip_pitch_deg: -16.0,
            stand_knee_pitch_deg: 70.0,
            feedback: false,
            sway: 0.04,
        }
    }
}

impl GaitConfig {
    pub fn params(&self) -> GaitParams {
        GaitParams {
            stride: self.stride,
            lift_height: self.lift_height,
            touchdown_threshold: self.touchdown_threshold_deg.to_radians(),
            cycles: self.cycles,
            planning_speed: self.planning_speed_deg.to_radians(),
            settle_time: self.settle_time,
            reach_tolerance: self.reach_tolerance_deg.to_radians(),
            stage_timeout: self.stage_timeout,
            stand_hip_pitch: self.stand_hip_pitch_deg.to_radians(),
            stand_knee_pitch: self.stand_knee_pitch_deg.to_radians(),
            feedback: self.feedback,
            sway: self.sway,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HybridConfig {
    /// Height gained above the CoG position at takeoff (m).
    pub climb: f64,
    /// Flight time after takeoff (s).
    pub hover_time: f64,
    /// Stance time between the end of the gait and takeoff (s).
    pub pause: f64,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self { climb: 0.5, hover_time: 15.0, pause: 1.0 }
    }
}

/// Everything a scenario run needs besides the robot description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Run length (s). For walking scenarios this caps the run; `None`
    /// uses the scenario default.
    pub duration: Option<f64>,
    pub seed: u64,
    /// Final interval used for steady-state statistics (s).
    pub steady_window: f64,
    pub sim: SimConfig,
    pub gains: ControlGains,
    pub aerial: AllocationSettings,
    pub terrestrial: AllocationSettings,
    pub hover: HoverConfig,
    pub transform: TransformConfig,
    pub leg_lift: LegLiftConfig,
    pub gait: GaitConfig,
    pub hybrid: HybridConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let desc = RobotDescription::default();
        Self {
            duration: None,
            seed: 0,
            steady_window: 3.0,
            sim: SimConfig::default(),
            gains: ControlGains::default(),
            aerial: AllocationSettings::aerial(&desc),
            terrestrial: AllocationSettings::terrestrial(&desc),
            hover: HoverConfig::default(),
            transform: TransformConfig::default(),
            leg_lift: LegLiftConfig::default(),
            gait: GaitConfig::default(),
            hybrid: HybridConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ScenarioError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| ScenarioError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let cfg = |e: String| ScenarioError::Config(e);
        self.sim.validate().map_err(|e| cfg(e.to_string()))?;
        self.gains.validate().map_err(|e| cfg(e.to_string()))?;
        self.gait.params().validate().map_err(|e| cfg(e.to_string()))?;
        if self.duration.is_some_and(|d| !(d > 0.0)) {
            return Err(cfg("duration must be positive".into()));
        }
        if self.leg_lift.leg >= NUM_LEGS {
            return Err(cfg(format!("leg-lift leg {} out of range", self.leg_lift.leg)));
        }
        if !(self.transform.motion_time > 0.0) || self.transform.hold_time < 0.0 || self.transform.start < 0.0 {
            return Err(cfg("transform timing must be non-negative with a positive motion time".into()));
        }
        if !(self.leg_lift.lower_time > self.leg_lift.lift_time) {
            return Err(cfg("leg-lift lower_time must come after lift_time".into()));
        }
        if self.hybrid.hover_time < 0.0 || self.hybrid.pause < 0.0 || self.steady_window < 0.0 {
            return Err(cfg("hybrid times and steady window must be non-negative".into()));
        }
        Ok(())
    }

    /// Default length of a run; walking runs end earlier once the gait finishes.
    pub fn duration_for(&self, scenario: Scenario) -> f64 {
        self.duration.unwrap_or(match scenario {
            Scenario::Hover => 10.0,
            Scenario::Transform => self.transform.return_end() + 6.0,
            Scenario::LegLift => self.leg_lift.lower_time + 13.0,
            Scenario::Walk | Scenario::Hybrid => 600.0,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("invalid scenario config: {0}")]
    Config(String),
    #[error("allocation failed at t = {time:.3} s: {error}")]
    Allocation { time: f64, error: AllocationError, log: Box<SimLog> },
    #[error("{error}")]
    Sim { error: SimError, log: Box<SimLog> },
    #[error("gait planning failed at t = {time:.3} s: {error}")]
    Gait { time: f64, error: GaitError, log: Box<SimLog> },
}

impl ScenarioError {
    /// Log recorded up to the failure.
    pub fn log(&self) -> Option<&SimLog> {
        match self {
            ScenarioError::Config(_) => None,
            ScenarioError::Allocation { log, .. } | ScenarioError::Sim { log, .. } | ScenarioError::Gait { log, .. } => {
                Some(log)
            }
        }
    }

    pub fn time(&self) -> Option<f64> {
        match self {
            ScenarioError::Config(_) => None,
            ScenarioError::Allocation { time, .. } | ScenarioError::Gait { time, .. } => Some(*time),
            ScenarioError::Sim { error: SimError::Diverged { time, .. }, .. } => Some(*time),
            ScenarioError::Sim { .. } => None,
        }
    }

    /// Machine-readable failure class.
    pub fn status(&self) -> &'static str {
        match self {
            ScenarioError::Config(_) => "config",
            ScenarioError::Allocation { error: AllocationError::Infeasible { .. }, .. } => "infeasible",
            ScenarioError::Allocation { .. } => "allocation",
            ScenarioError::Sim { .. } => "diverged",
            ScenarioError::Gait { .. } => "gait",
        }
    }
}

/// What the scenario asks of the controllers during one tick.
#[derive(Clone, Debug)]
struct Plan {
    mode: Mode,
    phase: String,
    joint_targets: [f64; NUM_JOINTS],
    contacts: ContactSet,
    /// CoG target in flight, baselink target on the ground.
    position: Vector3<f64>,
    rotation: Matrix3<f64>,
}

struct Runner<'a> {
    desc: &'a RobotDescription,
    cfg: &'a ScenarioConfig,
    sim: Simulator,
    controller: CentroidalController,
    allocator: Allocator,
    rng: ChaCha8Rng,
    log: SimLog,
    control_dt: f64,
}

fn noise(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    if sigma > 0.0 {
        let n = Normal::new(0.0, sigma).expect("finite non-negative standard deviation");
        Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng))
    } else {
        Vector3::zeros()
    }
}

impl<'a> Runner<'a> {
    fn new(
        desc: &'a RobotDescription,
        cfg: &'a ScenarioConfig,
        scenario: Scenario,
        initial: RobotState,
        first: &Plan,
        dump: Option<Box<dyn Write + Send>>,
    ) -> Result<Self, ScenarioError> {
        let control_dt = cfg.sim.substeps() as f64 * cfg.sim.timestep;
        let mut allocator = Allocator::new(cfg.aerial);
        if let Some(sink) = dump {
            allocator = allocator.with_dump(sink);
        }
        let sim = Simulator::new(desc.clone(), cfg.sim.clone(), initial)
            .map_err(|e| ScenarioError::Config(e.to_string()))?;
        let mut runner = Self {
            desc,
            cfg,
            sim,
            controller: CentroidalController::new(cfg.gains.clone(), desc.gravity),
            allocator,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            log: SimLog::new(scenario.name(), control_dt),
            control_dt,
        };
        // Start the actuators at the first allocation so the run begins in equilibrium.
        let state = runner.sim.robot.clone();
        let out = runner.allocate(first, &state)?.1;
        let mut robot = runner.sim.robot.clone();
        for (i, c) in out.commands.iter().enumerate() {
            robot.thrusts[i] = c.thrust;
            robot.vectoring_phi[i] = c.phi;
            robot.vectoring_theta[i] = c.theta;
        }
        // Press the feet into the ground by the planned static load.
        let planned = &out.solution.contact_forces;
        if !planned.is_empty() {
            let mean_normal = planned.iter().map(|(_, f)| f.z).sum::<f64>() / planned.len() as f64;
            robot.base_position.z -= mean_normal / cfg.sim.ground_stiffness;
        }
        runner.sim = Simulator::new(desc.clone(), cfg.sim.clone(), robot).map_err(|e| ScenarioError::Config(e.to_string()))?;
        runner.controller.reset();
        Ok(runner)
    }

    fn fail_alloc(&self, error: AllocationError) -> ScenarioError {
        ScenarioError::Allocation { time: self.sim.time, error, log: Box::new(self.log.clone()) }
    }

    fn fail_gait(&self, error: GaitError) -> ScenarioError {
        ScenarioError::Gait { time: self.sim.time, error, log: Box::new(self.log.clone()) }
    }

    /// Sensor reading of the robot state.
    fn measure(&mut self) -> RobotState {
        let mut s = self.sim.robot.clone();
        let c = &self.cfg.sim;
        s.base_position += noise(&mut self.rng, c.position_noise);
        s.base_orientation = orthonormalize(&(s.base_orientation * exp_so3(&noise(&mut self.rng, c.attitude_noise))));
        s.base_linear_velocity += noise(&mut self.rng, c.velocity_noise);
        s.base_angular_velocity += noise(&mut self.rng, c.angular_velocity_noise);
        s
    }

    /// Controller and allocation for one tick.
    fn allocate(&mut self, plan: &Plan, state: &RobotState) -> Result<(WrenchCommand, AllocationOutput), ScenarioError> {
        let frames = forward_kinematics_unchecked(self.desc, state);
        let dt = self.control_dt;
        let (wrench, extra, contacts, settings) = match plan.mode {
            Mode::Aerial => {
                let pos = PositionTarget { position: plan.position, velocity: Vector3::zeros() };
                let att = AttitudeTarget { rotation: plan.rotation, angular_velocity: Vector3::zeros() };
                let w = self.controller.wrench(&frames, state, &pos, &att, &[], dt);
                (w, None, ContactSet::NONE, self.cfg.aerial)
            }
            Mode::Terrestrial => {
                let m = frames.total_mass;
                let force = frames.orientation.transpose() * Vector3::new(0.0, 0.0, m * self.desc.gravity);
                let fz = altitude_feedback(plan.position.z, state.base_position.z, self.cfg.gains.altitude_p);
                let alt = altitude_allocation(fz, &frames);
                let settings = if self.log.scenario == Scenario::LegLift.name() {
                    self.cfg.leg_lift.allocation
                } else {
                    self.cfg.terrestrial
                };
                (WrenchCommand::new(force, Vector3::zeros()), Some(alt.delta), plan.contacts, settings)
            }
        };
        self.allocator.settings = settings;
        let out = self
            .allocator
            .allocate(self.desc, &wrench, &frames, contacts, extra.as_ref())
            .map_err(|e| self.fail_alloc(e))?;
        Ok((wrench, out))
    }

    /// One control tick followed by the physics substeps.
    fn tick(&mut self, plan: &Plan) -> Result<(), ScenarioError> {
        let state = self.measure();
        let (wrench, out) = self.allocate(plan, &state)?;
        let frames = forward_kinematics_unchecked(self.desc, &state);
        let joint_targets = plan.joint_targets;

        let position_error = match plan.mode {
            Mode::Aerial => plan.position - frames.cog_world,
            Mode::Terrestrial => plan.position - state.base_position,
        };
        let sim = &self.sim;
        let contact_points: [Vector3<f64>; NUM_LEGS] = std::array::from_fn(|l| sim.frames.contact_point_world(l));
        let support: Vec<Vector3<f64>> = plan.contacts.legs().map(|l| contact_points[l]).collect();
        let total_normal: f64 = sim.contacts.iter().map(|c| c.force.z).sum();
        let (cop_margin, cog_margin) = if plan.mode == Mode::Terrestrial && support.len() >= 3 && total_normal > 1e-6 {
            let cop = (0..NUM_LEGS).map(|l| contact_points[l] * sim.contacts[l].force.z).sum::<Vector3<f64>>() / total_normal;
            (support_margin(&cop, &support), support_margin(&sim.cog_position, &support))
        } else {
            (f64::INFINITY, f64::INFINITY)
        };
        let mut qp_contact_forces = [Vector3::zeros(); NUM_LEGS];
        for (leg, f) in &out.solution.contact_forces {
            qp_contact_forces[*leg] = *f;
        }
        let refine_residual = out.refinement.as_ref().map_or(0.0, |r| r.residual);
        self.log.rows.push(LogRow {
            time: sim.time,
            mode: match plan.mode {
                Mode::Aerial => "aerial",
                Mode::Terrestrial => "terrestrial",
            },
            phase: plan.phase.clone(),
            base_position: sim.robot.base_position,
            base_rpy: rpy(&sim.robot.base_orientation),
            cog_position: sim.cog_position,
            target_position: plan.position,
            position_error,
            rotation_error: attitude_error(&state.base_orientation, &plan.rotation),
            wrench_force: wrench.force,
            wrench_torque: wrench.torque,
            joint_angles: sim.robot.joint_angles,
            joint_targets,
            joint_velocities: sim.robot.joint_velocities,
            qp_joint_torques: out.joint_torques,
            motor_torques: sim.motor_torques,
            joint_residuals: sim.equilibrium_residual,
            thrusts: sim.robot.thrusts,
            thrust_commands: std::array::from_fn(|i| out.commands[i].thrust),
            phi: sim.robot.vectoring_phi,
            theta: sim.robot.vectoring_theta,
            planned_contacts: plan.contacts.0,
            contact_forces: std::array::from_fn(|l| sim.contacts[l].force),
            qp_contact_forces,
            qp_objective: out.solution.objective,
            qp_iterations: out.solution.iterations,
            refine_residual,
            cop_margin,
            cog_margin,
        });

        let cmd = ActuatorCommand {
            rotors: std::array::from_fn(|i| out.commands[i]),
            joint_targets,
            joint_feedforward: out.joint_torques,
            joint_p: self.cfg.gains.joint_p,
            joint_d: self.cfg.gains.joint_d,
        };
        for _ in 0..self.cfg.sim.substeps() {
            if let Err(error) = self.sim.step(&cmd, &Disturbance::default()) {
                return Err(ScenarioError::Sim { error, log: Box::new(self.log.clone()) });
            }
        }
        Ok(())
    }
}

fn stand_state(params: &GaitParams, position: Vector3<f64>) -> RobotState {
    let mut s = RobotState::with_joints(params.stand_pose());
    s.base_position = position;
    s
}

fn aerial_plan(phase: &str, q: [f64; NUM_JOINTS], cog: Vector3<f64>, rotation: Matrix3<f64>) -> Plan {
    Plan { mode: Mode::Aerial, phase: phase.into(), joint_targets: q, contacts: ContactSet::NONE, position: cog, rotation }
}

/// Run `scenario` and return its log.
pub fn run_scenario(desc: &RobotDescription, scenario: Scenario, cfg: &ScenarioConfig) -> Result<SimLog, ScenarioError> {
    run_scenario_with_dump(desc, scenario, cfg, None)
}

/// [`run_scenario`] that also writes every allocation QP to `dump`.
pub fn run_scenario_with_dump(
    desc: &RobotDescription,
    scenario: Scenario,
    cfg: &ScenarioConfig,
    dump: Option<Box<dyn Write + Send>>,
) -> Result<SimLog, ScenarioError> {
    cfg.validate()?;
    desc.validate().map_err(|e| ScenarioError::Config(e.to_string()))?;
    let params = cfg.gait.params();
    let duration = cfg.duration_for(scenario);
    let stand = params.stand_pose();
    let ticks = |d: f64, dt: f64| (d / dt - 1e-9).ceil() as usize;

    match scenario {
        Scenario::Hover | Scenario::Transform => {
            let initial = stand_state(&params, Vector3::new(0.0, 0.0, cfg.hover.altitude));
            let cog0 = forward_kinematics_unchecked(desc, &initial).cog_world;
            let tc = &cfg.transform;
            let far = {
                let mut q = stand;
                for leg in 0..NUM_LEGS {
                    q[joint_index(leg, joint::HIP_PITCH)] = tc.hip_pitch_deg.to_radians();
                    q[joint_index(leg, joint::KNEE_PITCH)] = tc.knee_pitch_deg.to_radians();
                }
                q
            };
            let plan_at = |t: f64| -> Plan {
                if scenario == Scenario::Hover {
                    return aerial_plan("hover", stand, cog0, Matrix3::identity());
                }
                let s = tc.progress(t);
                let q = std::array::from_fn(|j| stand[j] + s * (far[j] - stand[j]));
                let phase = if t < tc.start {
                    "hover"
                } else if t < tc.start + tc.motion_time {
                    "extend"
                } else if t < tc.return_start() {
                    "hold"
                } else if t < tc.return_end() {
                    "retract"
                } else {
                    "recover"
                };
                aerial_plan(phase, q, cog0, Matrix3::identity())
            };
            let mut runner = Runner::new(desc, cfg, scenario, initial, &plan_at(0.0), dump)?;
            for _ in 0..ticks(duration, runner.control_dt) {
                let plan = plan_at(runner.sim.time);
                runner.tick(&plan)?;
            }
            Ok(runner.log)
        }
        Scenario::LegLift => {
            let lc = &cfg.leg_lift;
            let initial = stand_state(&params, Vector3::new(0.0, 0.0, params.stand_height(desc)));
            let base0 = initial.base_position;
            let hip = joint_index(lc.leg, joint::HIP_PITCH);
            let lifted = lc.lifted_hip_pitch_deg.to_radians();
            let mut contacts = ContactSet::ALL;
            let mut touched = false;
            let mut target = stand;
            let plan = |phase: &str, q: [f64; NUM_JOINTS], contacts: ContactSet| Plan {
                mode: Mode::Terrestrial,
                phase: phase.into(),
                joint_targets: q,
                contacts,
                position: base0,
                rotation: Matrix3::identity(),
            };
            let mut runner = Runner::new(desc, cfg, scenario, initial, &plan("stand", stand, contacts), dump)?;
            for _ in 0..ticks(duration, runner.control_dt) {
                let t = runner.sim.time;
                let phase = if t < lc.lift_time {
                    "stand"
                } else if t < lc.lower_time {
                    contacts = if touched { ContactSet::ALL } else { ContactSet::all_but(lc.leg) };
                    let step = params.planning_speed * runner.control_dt;
                    let d = lifted - target[hip];
                    target[hip] += d.clamp(-step, step);
                    if target[hip] == lifted { "hold" } else { "lift" }
                } else if !touched {
                    target[hip] = stand[hip];
                    let q = runner.sim.robot.joint_angles[hip];
                    if touchdown_detect(target[hip], q, params.touchdown_threshold) {
                        touched = true;
                        contacts = ContactSet::ALL;
                        runner.log.touchdowns.push(t);
                        "stand"
                    } else {
                        "lower"
                    }
                } else {
                    "stand"
                };
                runner.tick(&plan(phase, target, contacts))?;
            }
            Ok(runner.log)
        }
        Scenario::Walk | Scenario::Hybrid => {
            let initial = stand_state(&params, Vector3::new(0.0, 0.0, params.stand_height(desc)));
            let base0 = initial.base_position;
            let mut gait = GaitState::new(desc, &params, base0, 0.0);
            let first = Plan {
                mode: Mode::Terrestrial,
                phase: gait.phase.label(),
                joint_targets: gait.joint_targets,
                contacts: gait.contacts,
                position: base0,
                rotation: Matrix3::identity(),
            };
            let mut runner = Runner::new(desc, cfg, scenario, initial, &first, dump)?;
            let dt = runner.control_dt;
            let mut done_at: Option<f64> = None;
            let mut takeoff: Option<(f64, Vector3<f64>, Matrix3<f64>, [f64; NUM_JOINTS])> = None;
            for _ in 0..ticks(duration, dt) {
                let t = runner.sim.time;
                if let Some((t0, cog, rot, q)) = takeoff {
                    if t >= t0 + cfg.hybrid.hover_time {
                        break;
                    }
                    runner.tick(&aerial_plan("flight", q, cog, rot))?;
                    continue;
                }
                if let Some(td) = done_at {
                    let pause = if scenario == Scenario::Hybrid { cfg.hybrid.pause } else { 2.0 };
                    if t >= td + pause {
                        if scenario == Scenario::Walk {
                            break;
                        }
                        let state = runner.measure();
                        let cog = forward_kinematics_unchecked(desc, &state).cog_world;
                        let rot = rot_z(gait.torso_target.yaw);
                        runner.log.takeoff_time = Some(t);
                        runner.controller.reset();
                        takeoff = Some((t, cog + Vector3::new(0.0, 0.0, cfg.hybrid.climb), rot, gait.joint_targets));
                        runner.tick(&aerial_plan("takeoff", gait.joint_targets, cog + Vector3::z() * cfg.hybrid.climb, rot))?;
                        continue;
                    }
                }
                let state = runner.sim.robot.clone();
                let events = GaitEvents { touchdown: gait.touchdown_event(&state.joint_angles, &params) };
                if events.touchdown {
                    runner.log.touchdowns.push(t);
                }
                let input = GaitInput {
                    base_position: state.base_position,
                    base_orientation: state.base_orientation,
                    joint_angles: &state.joint_angles,
                };
                let (next, out) = gait_step(desc, &params, &gait, &input, events, dt).map_err(|e| runner.fail_gait(e))?;
                gait = next;
                if gait.is_done() && done_at.is_none() {
                    done_at = Some(t);
                }
                let plan = Plan {
                    mode: Mode::Terrestrial,
                    phase: out.phase.label(),
                    joint_targets: out.joint_targets,
                    contacts: out.contacts,
                    position: out.torso_target.position,
                    rotation: out.torso_target.rotation(),
                };
                runner.tick(&plan)?;
            }
            let nominal = base0 + Vector3::x() * params.stride * gait.cycle as f64;
            let end = runner.log.takeoff_time.map_or(runner.sim.robot.base_position, |t0| {
                runner.log.window(t0 - dt, t0).last().map_or(runner.sim.robot.base_position, |r| r.base_position)
            });
            runner.log.drift = Some((end - nominal).xy().norm());
            runner.log.gait_cycles = Some(gait.cycle);
            Ok(runner.log)
        }
    }
}

/// Summary of a run that failed part-way, built from its partial log.
pub fn failure_summary(scenario: Scenario, err: &ScenarioError, steady_window: f64) -> super::RunSummary {
    let mut s = err.log().cloned().unwrap_or_else(|| SimLog::new(scenario.name(), 0.0)).summary(steady_window);
    s.status = err.status().into();
    s.failure = Some(err.to_string());
    s.failure_time = err.time();
    if matches!(err, ScenarioError::Allocation { .. }) {
        s.infeasibility_events = 1;
    }
    s
}
