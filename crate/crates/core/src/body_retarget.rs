//! Human wrist-to-torso transform mapped onto an end-effector target for the
//! robot arm. Axes: +x out of the torso front, +y to the body's left, +z up.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::se3::{AxisAngle, Rotation3, Transform3, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BodyRetargetConfig {
    /// Robot torso origin in the arm base frame (meters).
    pub torso_translation: [f64; 3],
    /// Robot torso orientation as `[axis_x, axis_y, axis_z, angle]`.
    pub torso_rotation_axis_angle: [f64; 4],
    /// Workspace scale applied to the wrist translation.
    pub scale: f64,
    /// Targets are kept within this distance of the torso origin (meters).
    pub reach_radius_m: f64,
}

impl Default for BodyRetargetConfig {
    fn default() -> Self {
        BodyRetargetConfig {
            torso_translation: [0.0, 0.0, 0.25],
            torso_rotation_axis_angle: [0.0, 0.0, 1.0, 0.0],
            scale: 1.0,
            reach_radius_m: 0.6,
        }
    }
}

impl BodyRetargetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!(
                "body_retarget.scale must be positive, got {}",
                self.scale
            )));
        }
        if !(self.reach_radius_m > 0.0 && self.reach_radius_m.is_finite()) {
            return Err(Error::Config(format!(
                "body_retarget.reach_radius_m must be positive, got {}",
                self.reach_radius_m
            )));
        }
        self.torso_in_base().map(|_| ())
    }

    pub fn torso_in_base(&self) -> Result<Transform3> {
        let [x, y, z, angle] = self.torso_rotation_axis_angle;
        let aa = AxisAngle::new(Vec3::new(x, y, z), angle)
            .map_err(|e| Error::Config(format!("body_retarget.torso_rotation_axis_angle: {e}")))?;
        Ok(Transform3::new(
            Rotation3::from_axis_angle(&aa),
            Vec3::from(self.torso_translation),
        ))
    }
}

/// Desired robot wrist pose in the arm base frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EndEffectorTarget {
    pub pose: Transform3,
    pub timestamp: f64,
}

/// `target = torso_in_base * scaled(wrist_in_torso)`, with the scaled
/// translation clamped to the reach sphere around the torso origin. The
/// rotation is copied unchanged.
pub fn map_wrist_to_target(
    wrist_in_torso: &Transform3,
    cfg: &BodyRetargetConfig,
    timestamp: f64,
) -> Result<EndEffectorTarget> {
    if !wrist_in_torso.is_finite() || !timestamp.is_finite() {
        return Err(Error::InvalidInput(
            "non-finite wrist transform or timestamp".into(),
        ));
    }
    cfg.validate()?;
    let mut t = wrist_in_torso.translation * cfg.scale;
    let d = t.norm();
    if d > cfg.reach_radius_m {
        t *= cfg.reach_radius_m / d;
    }
    let local = Transform3::new(wrist_in_torso.rotation, t);
    Ok(EndEffectorTarget {
        pose: cfg.torso_in_base()?.compose(&local),
        timestamp,
    })
}
