//! Randomized allocation roundtrips: random joint poses, contact modes and
//! hover-scale wrench demands pushed through the full allocation pipeline.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::time::Instant;

use super::{build_qp, AllocationSettings, Allocator};
use crate::control::WrenchCommand;
use crate::model::{forward_kinematics, ContactSet, RobotDescription, RobotState, NUM_JOINTS, NUM_LEGS};
use crate::thrust::realized_wrench;

/// One random allocation problem.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyCase {
    pub joint_angles: [f64; NUM_JOINTS],
    pub contacts: ContactSet,
    pub wrench: WrenchCommand,
}

/// Contact modes the allocator supports: flight, four feet and each three-foot stance.
pub fn contact_modes() -> Vec<ContactSet> {
    let mut modes = vec![ContactSet::NONE, ContactSet::ALL];
    modes.extend((0..NUM_LEGS).map(ContactSet::all_but));
    modes
}

/// Joints uniform in `±max_joint_angle`, a uniformly chosen contact mode and
/// a wrench within 10 % of hover force and 1 Nm of torque per axis.
pub fn random_case(desc: &RobotDescription, rng: &mut impl Rng, max_joint_angle: f64) -> VerifyCase {
    let mut joint_angles = [0.0; NUM_JOINTS];
    for q in joint_angles.iter_mut() {
        *q = rng.random_range(-max_joint_angle..=max_joint_angle);
    }
    let modes = contact_modes();
    let contacts = modes[rng.random_range(0..modes.len())];
    let weight = desc.total_mass() * desc.gravity;
    let force = Vector3::new(
        rng.random_range(-0.1..=0.1) * weight,
        rng.random_range(-0.1..=0.1) * weight,
        rng.random_range(0.9..=1.1) * weight,
    );
    let torque = Vector3::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
    VerifyCase { joint_angles, contacts, wrench: WrenchCommand::new(force, torque) }
}

/// Outcome of one case.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseResult {
    pub case: VerifyCase,
    /// Solver error text when the problem had no solution.
    pub error: Option<String>,
    /// Largest wrench-row residual of the QP solution (N, Nm).
    pub wrench_residual: f64,
    /// Largest joint-equilibrium residual of the QP solution (Nm).
    pub joint_residual: f64,
    /// Largest bound violation, including the thrust norm bound.
    pub bound_violation: f64,
    /// Difference between the wrench of the final rotor commands and the rotor share of the demand.
    pub roundtrip_residual: f64,
    /// Wall time of the full pipeline (s).
    pub solve_time: f64,
}

pub fn run_case(desc: &RobotDescription, case: &VerifyCase) -> CaseResult {
    let settings = if case.contacts.is_empty() {
        AllocationSettings::aerial(desc)
    } else {
        AllocationSettings::terrestrial(desc)
    };
    let mut result = CaseResult {
        case: case.clone(),
        error: None,
        wrench_residual: f64::NAN,
        joint_residual: f64::NAN,
        bound_violation: f64::NAN,
        roundtrip_residual: f64::NAN,
        solve_time: f64::NAN,
    };
    let frames = match forward_kinematics(desc, &RobotState::with_joints(case.joint_angles)) {
        Ok(f) => f,
        Err(e) => {
            result.error = Some(e.to_string());
            return result;
        }
    };
    let mut allocator = Allocator::new(settings);
    let start = Instant::now();
    let out = allocator.allocate(desc, &case.wrench, &frames, case.contacts, None);
    result.solve_time = start.elapsed().as_secs_f64();
    let out = match out {
        Ok(o) => o,
        Err(e) => {
            result.error = Some(e.to_string());
            return result;
        }
    };
    let problem = build_qp(desc, &case.wrench, &frames, case.contacts, &settings).expect("problem built during allocation");
    let (w, j, b) = problem.residuals(&out.solution.x);
    let norm_excess =
        out.solution.link_forces.iter().map(|f| f.norm() - settings.max_thrust).fold(f64::NEG_INFINITY, f64::max);
    result.wrench_residual = w;
    result.joint_residual = j;
    result.bound_violation = b.max(norm_excess).max(0.0);
    result.roundtrip_residual = (realized_wrench(&frames, &out.commands) - out.rotor_wrench.to_vector()).amax();
    result
}

/// Aggregate of a verification run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub cases: usize,
    pub seed: u64,
    pub failures: usize,
    pub max_wrench_residual: f64,
    pub max_joint_residual: f64,
    pub max_bound_violation: f64,
    pub max_roundtrip_residual: f64,
    pub max_solve_time: f64,
    pub mean_solve_time: f64,
    /// Cases that errored, in generation order.
    pub failed_cases: Vec<CaseResult>,
}

impl VerifyReport {
    pub fn from_results(seed: u64, results: &[CaseResult]) -> Self {
        let ok: Vec<_> = results.iter().filter(|r| r.error.is_none()).collect();
        let max = |f: &dyn Fn(&CaseResult) -> f64| ok.iter().map(|r| f(r)).fold(0.0, f64::max);
        Self {
            cases: results.len(),
            seed,
            failures: results.len() - ok.len(),
            max_wrench_residual: max(&|r| r.wrench_residual),
            max_joint_residual: max(&|r| r.joint_residual),
            max_bound_violation: max(&|r| r.bound_violation),
            max_roundtrip_residual: max(&|r| r.roundtrip_residual),
            max_solve_time: max(&|r| r.solve_time),
            mean_solve_time: ok.iter().map(|r| r.solve_time).sum::<f64>() / ok.len().max(1) as f64,
            failed_cases: results.iter().filter(|r| r.error.is_some()).cloned().collect(),
        }
    }
}

/// `count` random problems drawn from one stream seeded with `seed`.
pub fn random_cases(desc: &RobotDescription, count: usize, seed: u64, max_joint_angle: f64) -> Vec<VerifyCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| random_case(desc, &mut rng, max_joint_angle)).collect()
}

/// Generate `cases` random problems from `seed` and solve each.
pub fn verify_cases(desc: &RobotDescription, cases: usize, seed: u64, max_joint_angle: f64) -> Vec<CaseResult> {
    random_cases(desc, cases, seed, max_joint_angle).iter().map(|c| run_case(desc, c)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_cover_flight_and_stances() {
        let modes = contact_modes();
        assert_eq!(modes.len(), 6);
        assert_eq!(modes.iter().filter(|m| m.len() == 3).count(), 4);
    }

    #[test]
    fn cases_are_reproducible() {
        let desc = RobotDescription::default();
        let a = random_case(&desc, &mut ChaCha8Rng::seed_from_u64(3), 1.0);
        let b = random_case(&desc, &mut ChaCha8Rng::seed_from_u64(3), 1.0);
        assert_eq!(a, b);
        assert!(a.joint_angles.iter().all(|q| q.abs() <= 1.0));
    }

    #[test]
    fn small_run_roundtrips() {
        let desc = RobotDescription::default();
        let results = verify_cases(&desc, 30, 11, 60f64.to_radians());
        let report = VerifyReport::from_results(11, &results);
        assert_eq!(report.failures, 0, "{:?}", report.failed_cases.first().map(|c| &c.error));
        assert!(report.max_roundtrip_residual < 1e-4);
    }
}
