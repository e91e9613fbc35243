//! Whole-body control allocation.
//!
//! The decision vector stacks the link-frame rotor forces `f'_i`, the joint
//! torques `tau_q` and the world-frame contact forces `f_c` of the standing
//! feet. The QP minimizes `w_1 sum |f'_i|^2 + w_2 |tau_q|^2` subject to the
//! wrench allocation rows, quasi-static joint equilibrium rows and bounds.

pub mod qp;
pub mod verify;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3, Vector6};
use serde::Serialize;
use std::io::Write;

use crate::control::WrenchCommand;
use crate::model::{
    joint_name, ContactSet, FrameSet, JacobianTarget, RobotDescription, LEG_NAMES, NUM_JOINTS, NUM_ROTORS,
};
use crate::thrust::{
    extract_angles, link_force_map, refine_allocation, LinkFrameForce, RefineParams, Refinement, RotorCommand,
};
use qp::{DenseQp, QpError, SolverOptions};

/// Locomotion mode seen by the allocator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Mode {
    Aerial,
    Terrestrial,
}

/// Cost weights and actuator bounds of the QP.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocationSettings {
    pub rotor_weight: f64,
    pub torque_weight: f64,
    pub max_thrust: f64,
    pub max_joint_torque: f64,
    /// Per-component bound on `f'_i` as a fraction of `max_thrust`. The
    /// default `1/sqrt(3)` keeps every force inside the norm ball.
    pub box_fraction: f64,
    /// Lower bound on the vertical component of each contact force.
    pub min_normal_force: f64,
    pub refine: bool,
    pub refine_max_iters: usize,
    pub refine_tolerance: f64,
}

impl Default for AllocationSettings {
    fn default() -> Self {
        Self::aerial(&RobotDescription::default())
    }
}

impl AllocationSettings {
    /// Flight: thrust-only objective with the full joint torque range.
    pub fn aerial(desc: &RobotDescription) -> Self {
        Self {
            rotor_weight: 1.0,
            torque_weight: 0.0,
            max_thrust: desc.max_thrust,
            max_joint_torque: desc.max_joint_torque,
            box_fraction: 1.0 / 3f64.sqrt(),
            min_normal_force: 0.0,
            refine: true,
            refine_max_iters: 50,
            refine_tolerance: 1e-6,
        }
    }

    /// Standing and walking: equal weights and a reduced torque bound.
    pub fn terrestrial(desc: &RobotDescription) -> Self {
        Self { torque_weight: 1.0, max_joint_torque: 1.5, ..Self::aerial(desc) }
    }
}

/// Index bookkeeping for the decision vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct QpLayout {
    pub num_rotors: usize,
    pub num_joints: usize,
    pub contact_legs: Vec<usize>,
}

impl QpLayout {
    pub fn rotor(&self, i: usize) -> usize {
        3 * i
    }

    pub fn torque(&self, j: usize) -> usize {
        3 * self.num_rotors + j
    }

    pub fn contact(&self, c: usize) -> usize {
        3 * self.num_rotors + self.num_joints + 3 * c
    }

    pub fn dim(&self) -> usize {
        3 * self.num_rotors + self.num_joints + 3 * self.contact_legs.len()
    }
}

/// Allocation QP together with its variable layout.
#[derive(Clone, Debug, PartialEq)]
pub struct QPProblem {
    pub layout: QpLayout,
    pub rotor_weight: f64,
    pub torque_weight: f64,
    pub qp: DenseQp,
    /// Rows of the equality block that encode the wrench balance.
    pub wrench_rows: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SolverStatus {
    Optimal,
    /// A rotor exceeded the thrust norm and the QP was re-solved with a tighter box.
    ResolvedNormBound,
}

#[derive(Clone, Debug, Serialize)]
pub struct AllocationSolution {
    /// `f'_i` in each link frame.
    pub link_forces: Vec<Vector3<f64>>,
    pub joint_torques: Vec<f64>,
    /// Leg index and world-frame reaction force of each standing foot.
    pub contact_forces: Vec<(usize, Vector3<f64>)>,
    /// `w_1 sum |f'_i|^2 + w_2 |tau_q|^2`.
    pub objective: f64,
    pub status: SolverStatus,
    pub iterations: usize,
    #[serde(skip)]
    pub active_set: Vec<usize>,
    #[serde(skip)]
    pub x: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum AllocationError {
    #[error("allocation infeasible: {constraint} violated by {violation:e}")]
    Infeasible { constraint: String, violation: f64 },
    #[error("allocation solver failure: {0}")]
    SolverFailure(String),
    #[error("invalid allocation problem: {0}")]
    InvalidProblem(String),
}

/// Relative weight that keeps the Hessian positive definite on blocks with zero cost.
const REGULARIZATION: f64 = 1e-8;

/// Assemble the allocation QP.
///
/// `wrench` is the total wrench the robot must produce about its CoG. In
/// stance the ground reaction of the standing feet is part of the balance,
/// so the rotor share is `wrench` minus the contact wrench.
pub fn build_qp(
    desc: &RobotDescription,
    wrench: &WrenchCommand,
    frames: &FrameSet,
    contacts: ContactSet,
    settings: &AllocationSettings,
) -> Result<QPProblem, AllocationError> {
    if !wrench.is_finite() {
        return Err(AllocationError::InvalidProblem("non-finite wrench command".into()));
    }
    let nc = contacts.len();
    if nc == 1 || nc == 2 {
        return Err(AllocationError::InvalidProblem(format!("{nc} standing feet cannot support the torso")));
    }
    if settings.rotor_weight <= 0.0 || settings.torque_weight < 0.0 {
        return Err(AllocationError::InvalidProblem("rotor weight must be positive, torque weight non-negative".into()));
    }
    let layout = QpLayout { num_rotors: NUM_ROTORS, num_joints: NUM_JOINTS, contact_legs: contacts.legs().collect() };
    let n = layout.dim();
    let jacobian = |t| frames.jacobian(t).map_err(|e| AllocationError::InvalidProblem(e.to_string()));

    let reg = REGULARIZATION * settings.rotor_weight.max(settings.torque_weight);
    let mut h = DVector::zeros(n);
    for i in 0..3 * NUM_ROTORS {
        h[i] = 2.0 * settings.rotor_weight;
    }
    for j in 0..NUM_JOINTS {
        h[layout.torque(j)] = (2.0 * settings.torque_weight).max(reg);
    }
    for c in 0..3 * nc {
        h[layout.contact(0) + c] = reg;
    }

    let me = 6 + NUM_JOINTS;
    let mut a = DMatrix::zeros(me, n);
    let mut b = DVector::zeros(me);
    b.fixed_rows_mut::<6>(0).copy_from(&wrench.to_vector());

    let r_t = frames.orientation.transpose();
    for (i, rotor) in frames.rotors.iter().enumerate() {
        let col = layout.rotor(i);
        a.view_mut((0, col), (6, 3)).copy_from(&link_force_map(rotor));
        let j_r = jacobian(JacobianTarget::Rotor(i))?;
        a.view_mut((6, col), (NUM_JOINTS, 3)).copy_from(&(j_r.transpose() * rotor.link_rotation));
    }
    for j in 0..NUM_JOINTS {
        a[(6 + j, layout.torque(j))] = 1.0;
    }
    for (c, &leg) in layout.contact_legs.iter().enumerate() {
        let col = layout.contact(c);
        let p = frames.contact_points[leg];
        a.view_mut((0, col), (3, 3)).copy_from(&r_t);
        a.view_mut((3, col), (3, 3)).copy_from(&(crate::math::skew(&p) * r_t));
        let j_c = jacobian(JacobianTarget::ContactPoint(leg))?;
        a.view_mut((6, col), (NUM_JOINTS, 3)).copy_from(&(j_c.transpose() * r_t));
    }
    let gravity_body = r_t * Vector3::new(0.0, 0.0, -desc.gravity);
    for (s, seg) in frames.segments.iter().enumerate() {
        if seg.link.is_none() {
            continue;
        }
        let j_s = jacobian(JacobianTarget::Segment(s))?;
        let load = j_s.transpose() * (gravity_body * seg.mass);
        for j in 0..NUM_JOINTS {
            b[6 + j] -= load[j];
        }
    }

    let box_bound = settings.max_thrust * settings.box_fraction;
    let ni = 2 * 3 * NUM_ROTORS + 2 * NUM_JOINTS + nc;
    let mut c_in = DMatrix::zeros(ni, n);
    let mut d_in = DVector::zeros(ni);
    let mut row = 0;
    for v in 0..3 * NUM_ROTORS {
        for sign in [1.0, -1.0] {
            c_in[(row, v)] = -sign;
            d_in[row] = -box_bound;
            row += 1;
        }
    }
    for j in 0..NUM_JOINTS {
        for sign in [1.0, -1.0] {
            c_in[(row, layout.torque(j))] = -sign;
            d_in[row] = -settings.max_joint_torque;
            row += 1;
        }
    }
    for c in 0..nc {
        c_in[(row, layout.contact(c) + 2)] = 1.0;
        d_in[row] = settings.min_normal_force;
        row += 1;
    }

    Ok(QPProblem {
        layout,
        rotor_weight: settings.rotor_weight,
        torque_weight: settings.torque_weight,
        qp: DenseQp {
            hessian: DMatrix::from_diagonal(&h),
            linear: DVector::zeros(n),
            a_eq: a,
            b_eq: b,
            c_ineq: c_in,
            d_ineq: d_in,
        },
        wrench_rows: 6,
    })
}

impl QPProblem {
    /// Human-readable name of constraint `k` (equalities first).
    pub fn constraint_name(&self, k: usize) -> String {
        let me = self.qp.num_eq();
        let l = &self.layout;
        if k < self.wrench_rows {
            return format!("wrench balance row {k}");
        }
        if k < me {
            let j = k - self.wrench_rows;
            return if l.num_joints == NUM_JOINTS {
                format!("joint equilibrium of {}", joint_name(j))
            } else {
                format!("joint equilibrium row {j}")
            };
        }
        let i = k - me;
        let rotor_rows = 6 * l.num_rotors;
        let torque_rows = 2 * l.num_joints;
        let side = |r: usize| if r % 2 == 0 { "upper" } else { "lower" };
        if i < rotor_rows && self.qp.num_ineq() >= rotor_rows {
            let v = i / 2;
            format!("rotor {} force component {} {} bound", v / 3, ["x", "y", "z"][v % 3], side(i))
        } else if i < rotor_rows + torque_rows {
            let j = (i - rotor_rows) / 2;
            let name = if l.num_joints == NUM_JOINTS { joint_name(j) } else { format!("joint {j}") };
            format!("{name} torque {} bound", side(i - rotor_rows))
        } else if let Some(&leg) = l.contact_legs.get(i - rotor_rows - torque_rows) {
            format!("{} contact normal force", LEG_NAMES[leg])
        } else {
            format!("inequality {i}")
        }
    }

    /// Tighten the component box of one rotor.
    fn shrink_rotor_box(&mut self, rotor: usize, bound: f64) {
        for r in 6 * rotor..6 * rotor + 6 {
            self.qp.d_ineq[r] = -bound;
        }
    }

    fn unpack(&self, sol: qp::DenseSolution, status: SolverStatus) -> AllocationSolution {
        let l = &self.layout;
        let x = sol.x;
        let link_forces: Vec<_> = (0..l.num_rotors).map(|i| x.fixed_rows::<3>(l.rotor(i)).into()).collect();
        let joint_torques: Vec<_> = (0..l.num_joints).map(|j| x[l.torque(j)]).collect();
        let contact_forces = l
            .contact_legs
            .iter()
            .enumerate()
            .map(|(c, &leg)| (leg, x.fixed_rows::<3>(l.contact(c)).into()))
            .collect();
        let objective = self.rotor_weight * link_forces.iter().map(|f: &Vector3<f64>| f.norm_squared()).sum::<f64>()
            + self.torque_weight * joint_torques.iter().map(|t| t * t).sum::<f64>();
        AllocationSolution {
            link_forces,
            joint_torques,
            contact_forces,
            objective,
            status,
            iterations: sol.iterations,
            active_set: sol.active,
            x,
        }
    }

    /// Largest residual of the equality rows and largest bound violation at `x`.
    pub fn residuals(&self, x: &DVector<f64>) -> (f64, f64, f64) {
        let eq = &self.qp.a_eq * x - &self.qp.b_eq;
        let w = eq.rows(0, self.wrench_rows).amax();
        let j = if eq.len() > self.wrench_rows { eq.rows(self.wrench_rows, eq.len() - self.wrench_rows).amax() } else { 0.0 };
        (w, j, self.qp.violations(x).1)
    }
}

/// Solve the allocation QP with a cold start.
pub fn solve_qp(problem: &QPProblem) -> Result<AllocationSolution, AllocationError> {
    solve_qp_warm(problem, &[], f64::INFINITY)
}

/// Solve with a warm-start hint, then enforce the thrust norm bound
/// `|f'_i| <= max_thrust` with one re-solve if the box allowed an overshoot.
pub fn solve_qp_warm(problem: &QPProblem, warm: &[usize], max_thrust: f64) -> Result<AllocationSolution, AllocationError> {
    let opts = SolverOptions::default();
    let map_err = |p: &QPProblem, e: QpError| match e {
        QpError::Infeasible { constraint, violation } => {
            AllocationError::Infeasible { constraint: p.constraint_name(constraint), violation }
        }
        other => AllocationError::SolverFailure(other.to_string()),
    };
    let sol = qp::solve(&problem.qp, warm, &opts).map_err(|e| map_err(problem, e))?;
    let first = problem.unpack(sol, SolverStatus::Optimal);
    let over: Vec<usize> = first
        .link_forces
        .iter()
        .enumerate()
        .filter(|(_, f)| f.norm() > max_thrust * (1.0 + 1e-12))
        .map(|(i, _)| i)
        .collect();
    if over.is_empty() {
        return Ok(first);
    }
    let mut tightened = problem.clone();
    for &i in &over {
        tightened.shrink_rotor_box(i, max_thrust / 3f64.sqrt());
    }
    let sol = qp::solve(&tightened.qp, &first.active_set, &opts).map_err(|e| map_err(&tightened, e))?;
    Ok(tightened.unpack(sol, SolverStatus::ResolvedNormBound))
}

/// Contact wrench about the CoG from world-frame foot forces.
pub fn contact_wrench(frames: &FrameSet, contacts: &[(usize, Vector3<f64>)]) -> Vector6<f64> {
    let r_t: Matrix3<f64> = frames.orientation.transpose();
    contacts.iter().fold(Vector6::zeros(), |acc, (leg, f)| {
        let fb = r_t * f;
        let t = frames.contact_points[*leg].cross(&fb);
        acc + Vector6::new(fb.x, fb.y, fb.z, t.x, t.y, t.z)
    })
}

/// Result of the full allocation pipeline.
#[derive(Clone, Debug)]
pub struct AllocationOutput {
    pub commands: Vec<RotorCommand>,
    /// Joint torque feedforward `tau_q`.
    pub joint_torques: [f64; NUM_JOINTS],
    pub solution: AllocationSolution,
    /// Wrench the rotors must realize: total demand minus contact support,
    /// plus any additional force added after the QP.
    pub rotor_wrench: WrenchCommand,
    pub refinement: Option<Refinement>,
    /// Rotors whose force was too small to define vectoring angles.
    pub degenerate: Vec<usize>,
}

/// Stateful allocator: keeps the previous active set for warm starts and the
/// previous commands for rotors whose thrust direction is undefined.
pub struct Allocator {
    pub settings: AllocationSettings,
    warm: Vec<usize>,
    warm_layout: Option<QpLayout>,
    previous: Vec<RotorCommand>,
    dump: Option<Box<dyn Write + Send>>,
}

impl std::fmt::Debug for Allocator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Allocator")
            .field("settings", &self.settings)
            .field("warm", &self.warm)
            .field("dump", &self.dump.is_some())
            .finish()
    }
}

#[derive(Serialize)]
struct QpDump<'a> {
    dim: usize,
    layout: &'a QpLayout,
    hessian_diagonal: Vec<f64>,
    a_eq: Vec<Vec<f64>>,
    b_eq: Vec<f64>,
    c_ineq: Vec<Vec<f64>>,
    d_ineq: Vec<f64>,
    solution: Vec<f64>,
    objective: f64,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

impl Allocator {
    pub fn new(settings: AllocationSettings) -> Self {
        Self { settings, warm: Vec::new(), warm_layout: None, previous: vec![RotorCommand::default(); NUM_ROTORS], dump: None }
    }

    /// Write every solved QP as one JSON line to `sink`.
    pub fn with_dump(mut self, sink: Box<dyn Write + Send>) -> Self {
        self.dump = Some(sink);
        self
    }

    pub fn set_previous_commands(&mut self, commands: &[RotorCommand]) {
        self.previous = commands.to_vec();
    }

    /// QP, then added link-frame forces, then angle extraction and refinement.
    ///
    /// `extra` holds link-frame forces added to the QP result per rotor,
    /// used by the terrestrial altitude loop.
    pub fn allocate(
        &mut self,
        desc: &RobotDescription,
        wrench: &WrenchCommand,
        frames: &FrameSet,
        contacts: ContactSet,
        extra: Option<&[Vector3<f64>; NUM_ROTORS]>,
    ) -> Result<AllocationOutput, AllocationError> {
        let problem = build_qp(desc, wrench, frames, contacts, &self.settings)?;
        let warm: &[usize] = if self.warm_layout.as_ref() == Some(&problem.layout) { &self.warm } else { &[] };
        let solution = solve_qp_warm(&problem, warm, self.settings.max_thrust)?;
        self.warm = solution.active_set.clone();
        self.warm_layout = Some(problem.layout.clone());
        if let Some(sink) = self.dump.as_mut() {
            let record = QpDump {
                dim: problem.layout.dim(),
                layout: &problem.layout,
                hessian_diagonal: problem.qp.hessian.diagonal().iter().copied().collect(),
                a_eq: rows(&problem.qp.a_eq),
                b_eq: problem.qp.b_eq.iter().copied().collect(),
                c_ineq: rows(&problem.qp.c_ineq),
                d_ineq: problem.qp.d_ineq.iter().copied().collect(),
                solution: solution.x.iter().copied().collect(),
                objective: solution.objective,
            };
            let line = serde_json::to_string(&record).map_err(|e| AllocationError::SolverFailure(e.to_string()))?;
            writeln!(sink, "{line}").map_err(|e| AllocationError::SolverFailure(e.to_string()))?;
        }

        let mut forces = solution.link_forces.clone();
        let mut target = wrench.to_vector() - contact_wrench(frames, &solution.contact_forces);
        if let Some(extra) = extra {
            for (i, df) in extra.iter().enumerate() {
                forces[i] += df;
                target += link_force_map(&frames.rotors[i]) * df;
            }
        }

        let mut degenerate = Vec::new();
        let mut commands = Vec::with_capacity(NUM_ROTORS);
        for (i, f) in forces.iter().enumerate() {
            match extract_angles(&LinkFrameForce(*f)) {
                Ok(c) => commands.push(c),
                Err(e) => {
                    degenerate.push(i);
                    let prev = self.previous.get(i).copied().unwrap_or_default();
                    commands.push(RotorCommand { thrust: e.norm, ..prev });
                }
            }
        }
        let rotor_wrench = WrenchCommand::from_vector(&target);
        let refinement = if self.settings.refine {
            let params = RefineParams {
                max_iters: self.settings.refine_max_iters,
                tolerance: self.settings.refine_tolerance,
                max_thrust: self.settings.max_thrust,
            };
            let r = refine_allocation(&rotor_wrench, &commands, frames, &params);
            commands.clone_from(&r.commands);
            Some(r)
        } else {
            None
        };
        for c in commands.iter_mut() {
            c.thrust = c.thrust.clamp(0.0, self.settings.max_thrust);
        }
        self.previous.clone_from(&commands);

        let mut joint_torques = [0.0; NUM_JOINTS];
        joint_torques.copy_from_slice(&solution.joint_torques);
        Ok(AllocationOutput { commands, joint_torques, solution, rotor_wrench, refinement, degenerate })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_kinematics, RobotState};
    use crate::thrust::realized_wrench;
    use approx::assert_relative_eq;

    fn hover_wrench(desc: &RobotDescription) -> WrenchCommand {
        WrenchCommand::new(Vector3::new(0.0, 0.0, desc.total_mass() * desc.gravity), Vector3::zeros())
    }

    #[test]
    fn dimensions_by_mode() {
        let desc = RobotDescription::default();
        let f = forward_kinematics(&desc, &RobotState::default()).unwrap();
        let w = hover_wrench(&desc);
        let s = AllocationSettings::aerial(&desc);
        let p = build_qp(&desc, &w, &f, ContactSet::NONE, &s).unwrap();
        assert_eq!(p.layout.dim(), 40);
        assert_eq!(p.qp.num_eq(), 22);
        let p = build_qp(&desc, &w, &f, ContactSet::ALL, &s).unwrap();
        assert_eq!(p.layout.dim(), 52);
        assert_eq!(p.qp.num_eq(), 22);
        let p = build_qp(&desc, &w, &f, ContactSet::all_but(1), &s).unwrap();
        assert_eq!(p.layout.dim(), 49);
        let mut two = ContactSet::NONE;
        two.insert(0);
        two.insert(2);
        assert!(build_qp(&desc, &w, &f, two, &s).is_err());
    }

    #[test]
    fn hover_home_pose_is_symmetric() {
        let desc = RobotDescription::default().with_axis_offset(0.0);
        let f = forward_kinematics(&desc, &RobotState::default()).unwrap();
        let p = build_qp(&desc, &hover_wrench(&desc), &f, ContactSet::NONE, &AllocationSettings::aerial(&desc)).unwrap();
        let sol = solve_qp(&p).unwrap();
        for (i, force) in sol.link_forces.iter().enumerate() {
            let world = f.rotors[i].link_rotation * force;
            assert_relative_eq!(world, Vector3::new(0.0, 0.0, 18.62), epsilon = 1e-6);
        }
        let (w, j, b) = p.residuals(&sol.x);
        assert!(w < 1e-9 && j < 1e-9 && b < 1e-12);
    }

    #[test]
    fn zero_problem_has_zero_solution() {
        let desc = RobotDescription { gravity: 0.0, ..RobotDescription::default() };
        let f = forward_kinematics(&desc, &RobotState::default()).unwrap();
        let p = build_qp(&desc, &WrenchCommand::default(), &f, ContactSet::NONE, &AllocationSettings::aerial(&desc)).unwrap();
        let sol = solve_qp(&p).unwrap();
        assert!(sol.x.amax() < 1e-12);
        assert_eq!(sol.objective, 0.0);
    }

    #[test]
    fn excessive_force_is_infeasible() {
        let desc = RobotDescription::default();
        let f = forward_kinematics(&desc, &RobotState::default()).unwrap();
        let w = WrenchCommand::new(Vector3::new(0.0, 0.0, 10.0 * desc.total_mass() * desc.gravity), Vector3::zeros());
        let mut alloc = Allocator::new(AllocationSettings::aerial(&desc));
        match alloc.allocate(&desc, &w, &f, ContactSet::NONE, None) {
            Err(AllocationError::Infeasible { constraint, .. }) => assert!(!constraint.is_empty()),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn pipeline_realizes_wrench_with_pitched_leg() {
        let desc = RobotDescription::default().with_axis_offset(0.0);
        let mut state = RobotState::default();
        state.joint_angles[1] = 45f64.to_radians();
        state.joint_angles[3] = 45f64.to_radians();
        let f = forward_kinematics(&desc, &state).unwrap();
        let w = hover_wrench(&desc);
        let mut alloc = Allocator::new(AllocationSettings::aerial(&desc));
        let out = alloc.allocate(&desc, &w, &f, ContactSet::NONE, None).unwrap();
        let realized = realized_wrench(&f, &out.commands);
        assert!((realized - w.to_vector()).norm() < 1e-6);
        assert!(out.commands.iter().all(|c| c.thrust > 0.0 && c.thrust < desc.max_thrust));
    }

    #[test]
    fn stance_solution_balances_contacts() {
        let desc = RobotDescription::default();
        let mut state = RobotState::default();
        for k in 0..4 {
            state.joint_angles[4 * k + 1] = -16f64.to_radians();
            state.joint_angles[4 * k + 3] = 70f64.to_radians();
        }
        let f = forward_kinematics(&desc, &state).unwrap();
        let s = AllocationSettings::terrestrial(&desc);
        let p = build_qp(&desc, &hover_wrench(&desc), &f, ContactSet::ALL, &s).unwrap();
        let sol = solve_qp(&p).unwrap();
        let (w, j, b) = p.residuals(&sol.x);
        assert!(w < 1e-6 && j < 1e-6 && b < 1e-9, "{w} {j} {b}");
        assert!(sol.joint_torques.iter().all(|t| t.abs() <= 1.5 + 1e-9));
        assert!(sol.contact_forces.iter().all(|(_, fc)| fc.z >= -1e-9));
        let support: f64 = sol.contact_forces.iter().map(|(_, fc)| fc.z).sum();
        assert!(support > 0.0);
    }

    #[test]
    fn weight_scaling_keeps_argmin() {
        let desc = RobotDescription::default();
        let mut state = RobotState::default();
        for k in 0..4 {
            state.joint_angles[4 * k + 1] = -16f64.to_radians();
            state.joint_angles[4 * k + 3] = 70f64.to_radians();
        }
        let f = forward_kinematics(&desc, &state).unwrap();
        let base = AllocationSettings::terrestrial(&desc);
        let scaled = AllocationSettings { rotor_weight: 7.0, torque_weight: 7.0, ..base };
        let a = solve_qp(&build_qp(&desc, &hover_wrench(&desc), &f, ContactSet::ALL, &base).unwrap()).unwrap();
        let b = solve_qp(&build_qp(&desc, &hover_wrench(&desc), &f, ContactSet::ALL, &scaled).unwrap()).unwrap();
        assert!((a.x - b.x).amax() < 1e-6);
    }

    #[test]
    fn oversized_box_triggers_norm_resolve() {
        // Two rotors sharing a force; rotor 1 is expensive, so rotor 0 takes
        // almost everything and leaves the norm ball through the box corner.
        let max_thrust = 10.0 * 3f64.sqrt();
        let mut c_ineq = DMatrix::zeros(12, 6);
        for v in 0..6 {
            c_ineq[(2 * v, v)] = -1.0;
            c_ineq[(2 * v + 1, v)] = 1.0;
        }
        let problem = QPProblem {
            layout: QpLayout { num_rotors: 2, num_joints: 0, contact_legs: vec![] },
            rotor_weight: 1.0,
            torque_weight: 0.0,
            qp: DenseQp {
                hessian: DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 2.0, 2.0, 200.0, 200.0, 200.0])),
                linear: DVector::zeros(6),
                a_eq: DMatrix::from_fn(3, 6, |r, c| if c % 3 == r { 1.0 } else { 0.0 }),
                b_eq: DVector::from_vec(vec![12.0, 12.0, 12.0]),
                c_ineq,
                d_ineq: DVector::from_element(12, -max_thrust),
            },
            wrench_rows: 3,
        };
        let unchecked = solve_qp_warm(&problem, &[], f64::INFINITY).unwrap();
        assert!(unchecked.link_forces[0].norm() > max_thrust);
        let sol = solve_qp_warm(&problem, &[], max_thrust).unwrap();
        assert_eq!(sol.status, SolverStatus::ResolvedNormBound);
        assert!(sol.link_forces.iter().all(|v| v.norm() <= max_thrust + 1e-9));
        assert_relative_eq!(sol.link_forces[0], Vector3::new(10.0, 10.0, 10.0), epsilon = 1e-9);
    }

    #[test]
    fn constraint_names_are_descriptive() {
        let desc = RobotDescription::default();
        let f = forward_kinematics(&desc, &RobotState::default()).unwrap();
        let p = build_qp(&desc, &hover_wrench(&desc), &f, ContactSet::ALL, &AllocationSettings::terrestrial(&desc)).unwrap();
        assert_eq!(p.constraint_name(2), "wrench balance row 2");
        assert_eq!(p.constraint_name(6), "joint equilibrium of front_left_hip_yaw");
        assert_eq!(p.constraint_name(22), "rotor 0 force component x upper bound");
        assert_eq!(p.constraint_name(22 + 48 + 3), "front_left_hip_pitch torque lower bound");
        assert_eq!(p.constraint_name(22 + 48 + 32 + 3), "rear_left contact normal force");
    }

    #[test]
    fn dump_writes_one_json_line_per_solve() {
        use std::sync::{Arc, Mutex};
        #[derive(Clone)]
        struct Shared(Arc<Mutex<Vec<u8>>>);
        impl Write for Shared {
            fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
                self.0.lock().unwrap().extend_from_slice(buf);
                Ok(buf.len())
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }
        let buf = Shared(Arc::new(Mutex::new(Vec::new())));
        let desc = RobotDescription::default();
        let f = forward_kinematics(&desc, &RobotState::default()).unwrap();
        let mut alloc = Allocator::new(AllocationSettings::aerial(&desc)).with_dump(Box::new(buf.clone()));
        alloc.allocate(&desc, &hover_wrench(&desc), &f, ContactSet::NONE, None).unwrap();
        alloc.allocate(&desc, &hover_wrench(&desc), &f, ContactSet::NONE, None).unwrap();
        let text = String::from_utf8(buf.0.lock().unwrap().clone()).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(v["dim"], 40);
        assert_eq!(v["b_eq"].as_array().unwrap().len(), 22);
    }
}
