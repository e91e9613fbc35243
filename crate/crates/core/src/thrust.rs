//! Spherically vectorable rotor model.
//!
//! Each module produces a thrust of magnitude `lambda` along the z axis of its
//! rotor frame `{F_i}`. The frame is reached from the link frame by a roll
//! `phi` about the rod followed by a pitch `theta` across the rotor pair.

use nalgebra::{DMatrix, DVector, SMatrix, Vector3, Vector6};

use crate::control::WrenchCommand;
use crate::math::{rot_x, rot_y, wrap_angle};
use crate::model::{FrameSet, RotorFrame, NUM_ROTORS};

/// Norm below which a link-frame force has no usable direction.
pub const DEGENERATE_THRUST: f64 = 1e-3;

pub type AllocationMatrix = SMatrix<f64, 6, NUM_ROTORS>;

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RotorCommand {
    pub thrust: f64,
    pub phi: f64,
    pub theta: f64,
}

impl RotorCommand {
    pub fn new(thrust: f64, phi: f64, theta: f64) -> Self {
        Self { thrust, phi, theta }
    }
}

/// Rotor force expressed in its link frame `{L_i}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkFrameForce(pub Vector3<f64>);

#[derive(Clone, Copy, Debug, PartialEq, thiserror::Error)]
#[error("thrust vector norm {norm:e} N below {DEGENERATE_THRUST} N; vectoring angles undefined")]
pub struct DegenerateThrust {
    pub norm: f64,
}

/// `u_i = ^{CoG}R_{F_i} e_z`.
pub fn unit_vector(frames: &FrameSet, i: usize) -> Vector3<f64> {
    frames.rotors[i].rotation * Vector3::z()
}

/// Column `i` is `(u_i; p_i x u_i)`, so the total thrust wrench is `Q lambda`.
pub fn allocation_matrix(frames: &FrameSet) -> AllocationMatrix {
    let mut q = AllocationMatrix::zeros();
    for (i, rotor) in frames.rotors.iter().enumerate() {
        let u = rotor.rotation * Vector3::z();
        q.fixed_view_mut::<3, 1>(0, i).copy_from(&u);
        q.fixed_view_mut::<3, 1>(3, i).copy_from(&rotor.position.cross(&u));
    }
    q
}

/// Sum of `(f_i; p_i x f_i)` over rotors with the given commands.
pub fn realized_wrench(frames: &FrameSet, commands: &[RotorCommand]) -> Vector6<f64> {
    frames
        .rotors
        .iter()
        .zip(commands)
        .map(|(rotor, cmd)| rotor_wrench(rotor, cmd))
        .sum()
}

fn rotor_wrench(rotor: &RotorFrame, cmd: &RotorCommand) -> Vector6<f64> {
    let f = rotor.rotation_at(cmd.phi, cmd.theta) * Vector3::z() * cmd.thrust;
    let p = rotor.position_at(cmd.phi);
    let tau = p.cross(&f);
    Vector6::new(f.x, f.y, f.z, tau.x, tau.y, tau.z)
}

/// `f' = ^{L}R_{F}(phi, theta) (0, 0, lambda)`.
pub fn link_frame_force(cmd: &RotorCommand) -> LinkFrameForce {
    LinkFrameForce(RotorFrame::vectoring_rotation(cmd.phi, cmd.theta) * Vector3::new(0.0, 0.0, cmd.thrust))
}

/// Inverse of [`link_frame_force`] with `lambda >= 0`, `phi` in `(-pi, pi]`
/// and `theta` in `[-pi/2, pi/2]`.
pub fn extract_angles(force: &LinkFrameForce) -> Result<RotorCommand, DegenerateThrust> {
    let f = force.0;
    let thrust = f.norm();
    if thrust <= DEGENERATE_THRUST {
        return Err(DegenerateThrust { norm: thrust });
    }
    let phi = wrap_angle((-f.y).atan2(f.z));
    let theta = f.x.atan2(-f.y * phi.sin() + f.z * phi.cos());
    Ok(RotorCommand { thrust, phi, theta })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineParams {
    pub max_iters: usize,
    /// Residual norm at which refinement stops.
    pub tolerance: f64,
    pub max_thrust: f64,
}

impl Default for RefineParams {
    fn default() -> Self {
        Self { max_iters: 50, tolerance: 1e-6, max_thrust: 42.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum RefineStatus {
    Converged,
    /// Best iterate returned; residual still above tolerance.
    MaxIterations,
}

#[derive(Clone, Debug)]
pub struct Refinement {
    pub commands: Vec<RotorCommand>,
    pub residual: f64,
    pub iterations: usize,
    pub status: RefineStatus,
    /// Residual norm of every accepted iterate, starting with the initial guess.
    pub history: Vec<f64>,
}

/// Adjust `(lambda, phi, theta)` of every rotor so that the realized wrench
/// matches `target`, accounting for the rotor origin moving with `phi`.
///
/// Damped Gauss-Newton on the 6-D residual with a minimum-norm step over the
/// 3 N_r unknowns. A step is kept only if it lowers the residual norm; otherwise
/// the damping grows and the step is retried.
pub fn refine_allocation(
    target: &WrenchCommand,
    initial: &[RotorCommand],
    frames: &FrameSet,
    params: &RefineParams,
) -> Refinement {
    let target = target.to_vector();
    let n = initial.len().min(frames.rotors.len());
    let rotors = &frames.rotors[..n];
    let mut commands = initial[..n].to_vec();
    let residual_of = |cmds: &[RotorCommand]| -> Vector6<f64> {
        target - rotors.iter().zip(cmds).map(|(r, c)| rotor_wrench(r, c)).sum::<Vector6<f64>>()
    };

    let mut residual = residual_of(&commands);
    let mut norm = residual.norm();
    let mut history = vec![norm];
    let mut damping = 1e-9;
    let mut iterations = 0;

    while norm > params.tolerance && iterations < params.max_iters {
        iterations += 1;
        let jac = residual_jacobian(rotors, &commands);
        let jjt = &jac * jac.transpose();
        let scale = jjt.trace() / 6.0;
        let mut accepted = false;
        while damping < 1e6 {
            let system = &jjt + DMatrix::identity(6, 6) * (damping * scale);
            let Some(chol) = system.cholesky() else {
                damping *= 10.0;
                continue;
            };
            let y = chol.solve(&DVector::from_column_slice(residual.as_slice()));
            let step = jac.transpose() * y;
            let candidate: Vec<RotorCommand> = commands
                .iter()
                .enumerate()
                .map(|(i, c)| RotorCommand {
                    thrust: (c.thrust + step[3 * i]).clamp(0.0, params.max_thrust),
                    phi: wrap_angle(c.phi + step[3 * i + 1]),
                    theta: wrap_angle(c.theta + step[3 * i + 2]),
                })
                .collect();
            let cand_residual = residual_of(&candidate);
            let cand_norm = cand_residual.norm();
            if cand_norm < norm {
                commands = candidate;
                residual = cand_residual;
                norm = cand_norm;
                history.push(norm);
                damping = (damping / 10.0).max(1e-12);
                accepted = true;
                break;
            }
            damping *= 10.0;
        }
        if !accepted {
            break;
        }
    }

    let status = if norm <= params.tolerance { RefineStatus::Converged } else { RefineStatus::MaxIterations };
    if status == RefineStatus::MaxIterations {
        log::warn!("thrust refinement stopped after {iterations} iterations with residual {norm:e}");
    }
    Refinement { commands, residual: norm, iterations, status, history }
}

/// d(realized wrench) / d(lambda_i, phi_i, theta_i), 6 x 3n.
fn residual_jacobian(rotors: &[RotorFrame], commands: &[RotorCommand]) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(6, 3 * rotors.len());
    for (i, (rotor, cmd)) in rotors.iter().zip(commands).enumerate() {
        let rl = rotor.link_rotation;
        let rx = rot_x(cmd.phi);
        let ry_z = rot_y(cmd.theta) * Vector3::z();
        let u = rl * rx * ry_z;
        let f = u * cmd.thrust;
        let p = rotor.position_at(cmd.phi);
        let ex = Vector3::x();

        let df_dphi = rl * rx * ex.cross(&ry_z) * cmd.thrust;
        let df_dtheta = rl * rx * rot_y(cmd.theta) * ex * cmd.thrust;
        let dp_dphi = rl * rx * ex.cross(&rotor.axis_offset);

        let cols: [(Vector3<f64>, Vector3<f64>); 3] = [
            (u, p.cross(&u)),
            (df_dphi, dp_dphi.cross(&f) + p.cross(&df_dphi)),
            (df_dtheta, p.cross(&df_dtheta)),
        ];
        for (c, (df, dtau)) in cols.iter().enumerate() {
            jac.fixed_view_mut::<3, 1>(0, 3 * i + c).copy_from(df);
            jac.fixed_view_mut::<3, 1>(3, 3 * i + c).copy_from(dtau);
        }
    }
    jac
}

/// `Q_i = [E; [p_i x]] ^{CoG}R_{L_i}`: maps a link-frame force to its wrench about the CoG.
pub fn link_force_map(rotor: &RotorFrame) -> SMatrix<f64, 6, 3> {
    let mut q = SMatrix::<f64, 6, 3>::zeros();
    q.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotor.link_rotation);
    q.fixed_view_mut::<3, 3>(3, 0).copy_from(&(crate::math::skew(&rotor.position) * rotor.link_rotation));
    q
}

/// World-independent helper: rotor force in the CoG frame.
pub fn cog_frame_force(rotor: &RotorFrame, force: &LinkFrameForce) -> Vector3<f64> {
    rotor.link_rotation * force.0
}
