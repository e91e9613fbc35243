use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_4;
use std::path::Path;

use super::ModelError;

pub const NUM_LEGS: usize = 4;
pub const JOINTS_PER_LEG: usize = 4;
pub const NUM_JOINTS: usize = NUM_LEGS * JOINTS_PER_LEG;
pub const NUM_LINKS: usize = 2 * NUM_LEGS;
pub const NUM_ROTORS: usize = NUM_LINKS;
/// Torso, one thin rod per link and one rotor module per link.
pub const NUM_SEGMENTS: usize = 1 + 2 * NUM_LINKS;

pub const LEG_NAMES: [&str; NUM_LEGS] = ["front_left", "front_right", "rear_right", "rear_left"];
pub const JOINT_KINDS: [&str; JOINTS_PER_LEG] = ["hip_yaw", "hip_pitch", "knee_yaw", "knee_pitch"];

/// Offsets inside one leg's block of four joints.
pub mod joint {
    pub const HIP_YAW: usize = 0;
    pub const HIP_PITCH: usize = 1;
    pub const KNEE_YAW: usize = 2;
    pub const KNEE_PITCH: usize = 3;
}

pub fn joint_index(leg: usize, kind: usize) -> usize {
    leg * JOINTS_PER_LEG + kind
}

pub fn joint_name(j: usize) -> String {
    format!("{}_{}", LEG_NAMES[j / JOINTS_PER_LEG], JOINT_KINDS[j % JOINTS_PER_LEG])
}

/// Inner link of leg `k` is link `2k`, the outer link is `2k + 1`. Rotor `i` sits on link `i`.
pub fn leg_of_link(link: usize) -> usize {
    link / 2
}

pub fn is_inner_link(link: usize) -> bool {
    link % 2 == 0
}

/// Mounting direction of each hip around the torso z axis. Legs are ordered
/// clockwise seen from above, so legs `k` and `k + 2` are point-symmetric.
pub fn hip_azimuth(leg: usize) -> f64 {
    FRAC_PI_4 - leg as f64 * 2.0 * FRAC_PI_4
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    pub lower: f64,
    pub upper: f64,
}

impl JointLimits {
    pub fn contains(&self, q: f64) -> bool {
        q >= self.lower - 1e-12 && q <= self.upper + 1e-12
    }
}

/// Immutable geometry, mass and actuator-limit model of the eight-link robot.
///
/// All quantities are SI with angles in radians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotDescription {
    /// Distance from the baselink origin to each hip joint.
    pub torso_half_width: f64,
    pub link_length: f64,
    pub torso_mass: f64,
    /// Principal moments of the torso about its own center.
    pub torso_inertia: Vector3<f64>,
    /// Uniform thin-rod mass of each link.
    pub rod_mass: [f64; NUM_LINKS],
    /// Point mass of each rotor module, placed on the rod at `rotor_position`.
    pub rotor_module_mass: [f64; NUM_LINKS],
    /// Distance of the rotor module from the proximal joint of its link.
    pub rotor_position: f64,
    /// Lever arm between the roll vectoring axis and the pitch vectoring axis,
    /// expressed in the link frame after the roll rotation.
    pub vectoring_axis_offset: Vector3<f64>,
    pub foot_radius: f64,
    pub joint_limits: [JointLimits; NUM_JOINTS],
    pub max_thrust: f64,
    pub max_joint_torque: f64,
    pub max_joint_speed: f64,
    pub max_vectoring_speed: f64,
    /// Magnitude of gravitational acceleration.
    pub gravity: f64,
}

impl Default for RobotDescription {
    /// Defaults reproduce the prototype totals: 15.2 kg and 2.7 m tip-to-tip diameter.
    fn default() -> Self {
        let limit = JointLimits { lower: -90f64.to_radians(), upper: 90f64.to_radians() };
        Self {
            torso_half_width: 0.27,
            link_length: 0.54,
            torso_mass: 2.4,
            torso_inertia: Vector3::new(0.04, 0.04, 0.07),
            rod_mass: [0.6; NUM_LINKS],
            rotor_module_mass: [1.0; NUM_LINKS],
            rotor_position: 0.27,
            vectoring_axis_offset: Vector3::new(0.0, 0.0, 0.005),
            foot_radius: 0.02,
            joint_limits: [limit; NUM_JOINTS],
            max_thrust: 42.0,
            max_joint_torque: 6.5,
            max_joint_speed: 0.34,
            max_vectoring_speed: 4.2,
            gravity: 9.8,
        }
    }
}

impl RobotDescription {
    pub fn total_mass(&self) -> f64 {
        self.torso_mass + self.rod_mass.iter().sum::<f64>() + self.rotor_module_mass.iter().sum::<f64>()
    }

    /// Longest tip-to-tip distance with every leg stretched out.
    pub fn max_diameter(&self) -> f64 {
        2.0 * (self.torso_half_width + 2.0 * self.link_length)
    }

    pub fn with_axis_offset(mut self, offset: f64) -> Self {
        self.vectoring_axis_offset = Vector3::new(0.0, 0.0, offset);
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("torso_mass", self.torso_mass),
            ("link_length", self.link_length),
            ("max_thrust", self.max_thrust),
            ("max_joint_torque", self.max_joint_torque),
            ("max_joint_speed", self.max_joint_speed),
            ("max_vectoring_speed", self.max_vectoring_speed),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(ModelError::InvalidDescription(format!("{name} must be positive, got {v}")));
            }
        }
        for (i, (&rod, &rotor)) in self.rod_mass.iter().zip(&self.rotor_module_mass).enumerate() {
            if !(rod > 0.0 && rotor > 0.0) {
                return Err(ModelError::InvalidDescription(format!("link {i} masses must be positive")));
            }
        }
        if self.torso_half_width < 0.0 || self.foot_radius < 0.0 || self.gravity < 0.0 {
            return Err(ModelError::InvalidDescription("negative geometry or gravity".into()));
        }
        if self.torso_inertia.iter().any(|&v| v <= 0.0) {
            return Err(ModelError::InvalidDescription("torso inertia must be positive".into()));
        }
        for (j, lim) in self.joint_limits.iter().enumerate() {
            if lim.lower >= lim.upper {
                return Err(ModelError::InvalidDescription(format!("empty range for joint {}", joint_name(j))));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ModelError> {
        let file: RobotFile = toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        let desc = file.into_description();
        desc.validate()?;
        Ok(desc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}

/// Either one value for every link or an explicit per-link list.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
enum PerLink {
    Uniform(f64),
    Each([f64; NUM_LINKS]),
}

impl PerLink {
    fn expand(self) -> [f64; NUM_LINKS] {
        match self {
            PerLink::Uniform(v) => [v; NUM_LINKS],
            PerLink::Each(v) => v,
        }
    }
}

/// On-disk layout. Angles are in degrees here and converted on load.
#[derive(Debug, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct RobotFile {
    geometry: GeometrySection,
    mass: MassSection,
    limits: LimitsSection,
    gravity: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GeometrySection {
    torso_half_width: f64,
    link_length: f64,
    rotor_position: f64,
    vectoring_axis_offset: [f64; 3],
    foot_radius: f64,
}

impl Default for GeometrySection {
    fn default() -> Self {
        let d = RobotDescription::default();
        Self {
            torso_half_width: d.torso_half_width,
            link_length: d.link_length,
            rotor_position: d.rotor_position,
            vectoring_axis_offset: d.vectoring_axis_offset.into(),
            foot_radius: d.foot_radius,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct MassSection {
    torso: f64,
    torso_inertia: [f64; 3],
    link_rod: PerLink,
    rotor_module: PerLink,
}

impl Default for MassSection {
    fn default() -> Self {
        let d = RobotDescription::default();
        Self {
            torso: d.torso_mass,
            torso_inertia: d.torso_inertia.into(),
            link_rod: PerLink::Each(d.rod_mass),
            rotor_module: PerLink::Each(d.rotor_module_mass),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LimitsSection {
    joint_range_deg: [f64; 2],
    max_thrust: f64,
    max_joint_torque: f64,
    max_joint_speed: f64,
    max_vectoring_speed: f64,
}

impl Default for LimitsSection {
    fn default() -> Self {
        let d = RobotDescription::default();
        Self {
            joint_range_deg: [d.joint_limits[0].lower.to_degrees(), d.joint_limits[0].upper.to_degrees()],
            max_thrust: d.max_thrust,
            max_joint_torque: d.max_joint_torque,
            max_joint_speed: d.max_joint_speed,
            max_vectoring_speed: d.max_vectoring_speed,
        }
    }
}

impl RobotFile {
    fn into_description(self) -> RobotDescription {
        let limit = JointLimits {
            lower: self.limits.joint_range_deg[0].to_radians(),
            upper: self.limits.joint_range_deg[1].to_radians(),
        };
        RobotDescription {
            torso_half_width: self.geometry.torso_half_width,
            link_length: self.geometry.link_length,
            torso_mass: self.mass.torso,
            torso_inertia: self.mass.torso_inertia.into(),
            rod_mass: self.mass.link_rod.expand(),
            rotor_module_mass: self.mass.rotor_module.expand(),
            rotor_position: self.geometry.rotor_position,
            vectoring_axis_offset: self.geometry.vectoring_axis_offset.into(),
            foot_radius: self.geometry.foot_radius,
            joint_limits: [limit; NUM_JOINTS],
            max_thrust: self.limits.max_thrust,
            max_joint_torque: self.limits.max_joint_torque,
            max_joint_speed: self.limits.max_joint_speed,
            max_vectoring_speed: self.limits.max_vectoring_speed,
            gravity: self.gravity.unwrap_or(9.8),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn defaults_match_prototype_totals() {
        let d = RobotDescription::default();
        assert_relative_eq!(d.total_mass(), 15.2, epsilon = 1e-12);
        assert_relative_eq!(d.max_diameter(), 2.7, epsilon = 1e-12);
        d.validate().unwrap();
    }

    #[test]
    fn legs_k_and_k_plus_2_are_opposite() {
        for k in 0..2 {
            let a = hip_azimuth(k);
            let b = hip_azimuth(k + 2);
            assert_relative_eq!((a - b).abs(), std::f64::consts::PI, epsilon = 1e-15);
        }
    }

    #[test]
    fn toml_uses_degrees_and_per_link_arrays() {
        let text = r#"
            gravity = 9.81
            [geometry]
            link_length = 0.5
            [mass]
            torso = 3.0
            link_rod = [0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.7]
            rotor_module = 0.9
            [limits]
            joint_range_deg = [-45.0, 60.0]
        "#;
        let d = RobotDescription::from_toml_str(text).unwrap();
        assert_relative_eq!(d.joint_limits[3].lower, -45f64.to_radians());
        assert_relative_eq!(d.joint_limits[3].upper, 60f64.to_radians());
        assert_eq!(d.rod_mass[7], 0.7);
        assert_eq!(d.rotor_module_mass[0], 0.9);
        assert_eq!(d.link_length, 0.5);
        assert_eq!(d.gravity, 9.81);
        assert_relative_eq!(d.total_mass(), 3.0 + 0.5 * 7.0 + 0.7 + 0.9 * 8.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_nonpositive_mass_and_unknown_keys() {
        assert!(RobotDescription::from_toml_str("[mass]\ntorso = -1.0").is_err());
        assert!(RobotDescription::from_toml_str("[geometry]\nbogus = 1.0").is_err());
    }

    #[test]
    fn joint_names_follow_leg_order() {
        assert_eq!(joint_name(0), "front_left_hip_yaw");
        assert_eq!(joint_name(7), "front_right_knee_pitch");
        assert_eq!(joint_name(13), "rear_left_hip_pitch");
    }
}
