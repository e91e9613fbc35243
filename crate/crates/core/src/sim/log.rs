//! Per-tick run log, CSV export and the JSON run summary.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::model::{joint_name, LEG_NAMES, NUM_JOINTS, NUM_LEGS, NUM_ROTORS};

/// One sample of the closed loop, taken at every control tick.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub time: f64,
    /// `aerial` or `terrestrial`.
    pub mode: &'static str,
    pub phase: String,
    pub base_position: Vector3<f64>,
    /// Roll, pitch, yaw of the baselink (rad).
    pub base_rpy: Vector3<f64>,
    pub cog_position: Vector3<f64>,
    /// Reference of the tracked point: the CoG in flight, the baselink on the ground.
    pub target_position: Vector3<f64>,
    /// Target minus measured position of the tracked point.
    pub position_error: Vector3<f64>,
    /// `e_R` between the measured and target attitude.
    pub rotation_error: Vector3<f64>,
    pub wrench_force: Vector3<f64>,
    pub wrench_torque: Vector3<f64>,
    pub joint_angles: [f64; NUM_JOINTS],
    pub joint_targets: [f64; NUM_JOINTS],
    pub joint_velocities: [f64; NUM_JOINTS],
    /// Joint torques `tau_q` from the allocation.
    pub qp_joint_torques: [f64; NUM_JOINTS],
    /// Torque delivered by the joint motors.
    pub motor_torques: [f64; NUM_JOINTS],
    /// Imbalance of the quasi-static joint equilibrium.
    pub joint_residuals: [f64; NUM_JOINTS],
    pub thrusts: [f64; NUM_ROTORS],
    pub thrust_commands: [f64; NUM_ROTORS],
    pub phi: [f64; NUM_ROTORS],
    pub theta: [f64; NUM_ROTORS],
    /// Planned contact set of the allocation.
    pub planned_contacts: [bool; NUM_LEGS],
    /// World-frame simulated ground reaction on each foot.
    pub contact_forces: [Vector3<f64>; NUM_LEGS],
    /// World-frame contact forces chosen by the allocation.
    pub qp_contact_forces: [Vector3<f64>; NUM_LEGS],
    pub qp_objective: f64,
    pub qp_iterations: usize,
    pub refine_residual: f64,
    /// Signed distance of the centre of pressure from the planned support polygon.
    pub cop_margin: f64,
    /// Signed distance of the CoG ground projection from the planned support polygon.
    pub cog_margin: f64,
}

impl LogRow {
    pub fn contact_count(&self) -> usize {
        self.contact_forces.iter().filter(|f| f.z > 0.0).count()
    }
}

/// Column names of [`SimLog::write_csv`], in order.
pub fn csv_header() -> Vec<String> {
    let mut h: Vec<String> = vec!["time".into(), "mode".into(), "phase".into()];
    let xyz = ["x", "y", "z"];
    for (name, axes) in [
        ("base", &xyz[..]),
        ("base", &["roll", "pitch", "yaw"][..]),
        ("cog", &xyz[..]),
        ("target", &xyz[..]),
        ("pos_err", &xyz[..]),
        ("rot_err", &xyz[..]),
        ("wrench_f", &xyz[..]),
        ("wrench_tau", &xyz[..]),
    ] {
        h.extend(axes.iter().map(|a| format!("{name}_{a}")));
    }
    for prefix in ["q", "q_ref", "qdot", "tau_qp", "tau_motor", "tau_residual"] {
        h.extend((0..NUM_JOINTS).map(|j| format!("{prefix}_{}", joint_name(j))));
    }
    for prefix in ["thrust", "thrust_cmd", "phi", "theta"] {
        h.extend((0..NUM_ROTORS).map(|i| format!("{prefix}_{i}")));
    }
    h.extend(LEG_NAMES.iter().map(|l| format!("contact_{l}")));
    for prefix in ["fc", "fc_qp"] {
        for l in LEG_NAMES {
            h.extend(xyz.iter().map(|a| format!("{prefix}_{l}_{a}")));
        }
    }
    h.extend(["qp_objective", "qp_iterations", "refine_residual", "cop_margin", "cog_margin"].map(String::from));
    h
}

fn row_fields(r: &LogRow) -> Vec<String> {
    let mut out = vec![format!("{}", r.time), r.mode.to_string(), r.phase.clone()];
    let push3 = |out: &mut Vec<String>, v: &Vector3<f64>| out.extend(v.iter().map(|x| x.to_string()));
    for v in [
        &r.base_position,
        &r.base_rpy,
        &r.cog_position,
        &r.target_position,
        &r.position_error,
        &r.rotation_error,
        &r.wrench_force,
        &r.wrench_torque,
    ] {
        push3(&mut out, v);
    }
    for a in [&r.joint_angles, &r.joint_targets, &r.joint_velocities, &r.qp_joint_torques, &r.motor_torques, &r.joint_residuals] {
        out.extend(a.iter().map(|x| x.to_string()));
    }
    for a in [&r.thrusts, &r.thrust_commands, &r.phi, &r.theta] {
        out.extend(a.iter().map(|x| x.to_string()));
    }
    out.extend(r.planned_contacts.iter().map(|&c| u8::from(c).to_string()));
    for f in r.contact_forces.iter().chain(r.qp_contact_forces.iter()) {
        push3(&mut out, f);
    }
    out.extend([
        r.qp_objective.to_string(),
        r.qp_iterations.to_string(),
        r.refine_residual.to_string(),
        r.cop_margin.to_string(),
        r.cog_margin.to_string(),
    ]);
    out
}

/// Time series of one scenario run.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SimLog {
    pub scenario: String,
    pub control_period: f64,
    pub rows: Vec<LogRow>,
    /// Times at which the gait detected a touchdown.
    pub touchdowns: Vec<f64>,
    /// Final horizontal distance between the baselink and its nominal gait target.
    pub drift: Option<f64>,
    pub gait_cycles: Option<usize>,
    /// Time at which the robot switched from walking to flight.
    pub takeoff_time: Option<f64>,
}

fn csv_err(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}

impl SimLog {
    pub fn new(scenario: &str, control_period: f64) -> Self {
        Self { scenario: scenario.into(), control_period, ..Self::default() }
    }

    pub fn duration(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.time)
    }

    /// Rows with `time` in `[from, to]`.
    pub fn window(&self, from: f64, to: f64) -> impl Iterator<Item = &LogRow> {
        self.rows.iter().filter(move |r| r.time >= from - 1e-9 && r.time <= to + 1e-9)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(csv_header()).map_err(csv_err)?;
        for r in &self.rows {
            wr.write_record(row_fields(r)).map_err(csv_err)?;
        }
        wr.flush()
    }

    /// Long-format CSVs, one per plot panel: `time,series,value`.
    pub fn write_plot_csvs(&self, dir: &Path) -> std::io::Result<()> {
        type Series<'a> = Box<dyn Fn(&LogRow) -> Vec<(String, f64)> + 'a>;
        let xyz = ["x", "y", "z"];
        let plots: Vec<(&str, Series)> = vec![
            (
                "position_errors.csv",
                Box::new(move |r: &LogRow| xyz.iter().zip(r.position_error.iter()).map(|(a, v)| (a.to_string(), *v)).collect()),
            ),
            (
                "rotation_errors.csv",
                Box::new(move |r: &LogRow| {
                    ["roll", "pitch", "yaw"].iter().zip(r.rotation_error.iter()).map(|(a, v)| (a.to_string(), v.to_degrees())).collect()
                }),
            ),
            (
                "joint_trajectories.csv",
                Box::new(|r: &LogRow| {
                    (0..NUM_JOINTS)
                        .flat_map(|j| {
                            [(joint_name(j), r.joint_angles[j].to_degrees()), (format!("{}_ref", joint_name(j)), r.joint_targets[j].to_degrees())]
                        })
                        .collect()
                }),
            ),
            (
                "joint_torques.csv",
                Box::new(|r: &LogRow| (0..NUM_JOINTS).map(|j| (joint_name(j), r.qp_joint_torques[j])).collect()),
            ),
            (
                "rotor_thrusts.csv",
                Box::new(|r: &LogRow| (0..NUM_ROTORS).map(|i| (format!("rotor_{i}"), r.thrusts[i])).collect()),
            ),
        ];
        for (name, series) in plots {
            let file = std::fs::File::create(dir.join(name))?;
            let mut wr = csv::Writer::from_writer(std::io::BufWriter::new(file));
            wr.write_record(["time", "series", "value"]).map_err(csv_err)?;
            for r in &self.rows {
                for (s, v) in series(r) {
                    wr.write_record([r.time.to_string(), s, v.to_string()]).map_err(csv_err)?;
                }
            }
            wr.flush()?;
        }
        Ok(())
    }

    /// Summary statistics; `steady_window` is the length of the final
    /// interval used for the steady-state errors.
    pub fn summary(&self, steady_window: f64) -> RunSummary {
        let n = self.rows.len().max(1) as f64;
        let rms = |f: &dyn Fn(&LogRow) -> Vector3<f64>| -> [f64; 3] {
            let mut acc = [0.0; 3];
            for r in &self.rows {
                let v = f(r);
                for k in 0..3 {
                    acc[k] += v[k] * v[k];
                }
            }
            acc.map(|a| (a / n).sqrt())
        };
        let end = self.duration();
        let steady_from = (end - steady_window).max(0.0);
        let mut steady_pos = [0.0f64; 3];
        let mut steady_att = [0.0f64; 3];
        for r in self.window(steady_from, end) {
            for k in 0..3 {
                steady_pos[k] = steady_pos[k].max(r.position_error[k].abs());
                steady_att[k] = steady_att[k].max(r.rotation_error[k].abs().to_degrees());
            }
        }
        let max_over = |f: &dyn Fn(&LogRow) -> f64| self.rows.iter().map(f).fold(0.0, f64::max);
        let min_standing_normal = self
            .rows
            .iter()
            .flat_map(|r| (0..NUM_LEGS).filter(|&l| r.planned_contacts[l]).map(|l| r.contact_forces[l].z))
            .fold(f64::INFINITY, f64::min);
        RunSummary {
            scenario: self.scenario.clone(),
            status: "ok".into(),
            failure: None,
            failure_time: None,
            duration: end,
            ticks: self.rows.len(),
            rms_position_error: rms(&|r| r.position_error),
            rms_rotation_error_deg: rms(&|r| r.rotation_error.map(f64::to_degrees)),
            steady_window,
            steady_position_error: steady_pos,
            steady_rotation_error_deg: steady_att,
            max_joint_speed: max_over(&|r| r.joint_velocities.iter().fold(0.0, |a, v| a.max(v.abs()))),
            max_joint_residual: max_over(&|r| r.joint_residuals.iter().fold(0.0, |a, v| a.max(v.abs()))),
            max_qp_joint_torque: max_over(&|r| r.qp_joint_torques.iter().fold(0.0, |a, v| a.max(v.abs()))),
            max_thrust: max_over(&|r| r.thrusts.iter().fold(0.0, |a, v| a.max(*v))),
            min_standing_normal_force: if min_standing_normal.is_finite() { Some(min_standing_normal) } else { None },
            min_contact_count: self.rows.iter().map(LogRow::contact_count).min().unwrap_or(0),
            support_violations: self.rows.iter().filter(|r| r.cog_margin < 0.0).count(),
            min_cop_margin: finite_min(self.rows.iter().map(|r| r.cop_margin)),
            min_cog_margin: finite_min(self.rows.iter().map(|r| r.cog_margin)),
            infeasibility_events: 0,
            touchdowns: self.touchdowns.len(),
            gait_cycles: self.gait_cycles,
            drift: self.drift,
            takeoff_time: self.takeoff_time,
            final_position: self.rows.last().map(|r| r.base_position.into()),
        }
    }
}

fn finite_min(it: impl Iterator<Item = f64>) -> Option<f64> {
    let m = it.filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
    m.is_finite().then_some(m)
}

/// JSON run summary; the schema ships as `summary.schema.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    /// `ok` or the failure class: `config`, `infeasible`, `allocation`, `diverged` or `gait`.
    pub status: String,
    pub failure: Option<String>,
    pub failure_time: Option<f64>,
    pub duration: f64,
    pub ticks: usize,
    pub rms_position_error: [f64; 3],
    pub rms_rotation_error_deg: [f64; 3],
    pub steady_window: f64,
    /// Largest absolute per-axis error over the steady window.
    pub steady_position_error: [f64; 3],
    pub steady_rotation_error_deg: [f64; 3],
    pub max_joint_speed: f64,
    pub max_joint_residual: f64,
    pub max_qp_joint_torque: f64,
    pub max_thrust: f64,
    pub min_standing_normal_force: Option<f64>,
    pub min_contact_count: usize,
    /// Ticks with the CoG ground projection outside the planned support polygon.
    pub support_violations: usize,
    pub min_cop_margin: Option<f64>,
    pub min_cog_margin: Option<f64>,
    pub infeasibility_events: usize,
    pub touchdowns: usize,
    pub gait_cycles: Option<usize>,
    pub drift: Option<f64>,
    pub takeoff_time: Option<f64>,
    pub final_position: Option<[f64; 3]>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: f64, e: f64) -> LogRow {
        LogRow {
            time: t,
            mode: "aerial",
            phase: "hover".into(),
            base_position: Vector3::zeros(),
            base_rpy: Vector3::zeros(),
            cog_position: Vector3::zeros(),
            target_position: Vector3::zeros(),
            position_error: Vector3::new(e, -e, 0.0),
            rotation_error: Vector3::zeros(),
            wrench_force: Vector3::zeros(),
            wrench_torque: Vector3::zeros(),
            joint_angles: [0.0; NUM_JOINTS],
            joint_targets: [0.0; NUM_JOINTS],
            joint_velocities: [0.0; NUM_JOINTS],
            qp_joint_torques: [0.0; NUM_JOINTS],
            motor_torques: [0.0; NUM_JOINTS],
            joint_residuals: [0.0; NUM_JOINTS],
            thrusts: [0.0; NUM_ROTORS],
            thrust_commands: [0.0; NUM_ROTORS],
            phi: [0.0; NUM_ROTORS],
            theta: [0.0; NUM_ROTORS],
            planned_contacts: [false; NUM_LEGS],
            contact_forces: [Vector3::zeros(); NUM_LEGS],
            qp_contact_forces: [Vector3::zeros(); NUM_LEGS],
            qp_objective: 0.0,
            qp_iterations: 0,
            refine_residual: 0.0,
            cop_margin: f64::INFINITY,
            cog_margin: f64::INFINITY,
        }
    }

    #[test]
    fn csv_header_matches_row_width() {
        let mut log = SimLog::new("hover", 0.01);
        log.rows.push(row(0.0, 0.1));
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap().split(',').count();
        assert_eq!(header, csv_header().len());
        assert_eq!(lines.next().unwrap().split(',').count(), header);
    }

    #[test]
    fn summary_rms_and_steady() {
        let mut log = SimLog::new("hover", 0.01);
        log.rows.push(row(0.0, 3.0));
        log.rows.push(row(1.0, 4.0));
        let s = log.summary(0.5);
        assert!((s.rms_position_error[0] - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.steady_position_error, [4.0, 4.0, 0.0]);
        assert_eq!(s.min_standing_normal_force, None);
        assert_eq!(s.min_cop_margin, None);
    }
}
