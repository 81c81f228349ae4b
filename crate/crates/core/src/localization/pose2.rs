use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::Pose;

/// Wraps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Planar robot pose in the map frame. The robot frame has x forward, y left, z up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Pose2 {
            x,
            y,
            yaw: wrap_angle(yaw),
        }
    }

    /// `self ∘ delta`, with `delta` expressed in this pose's frame.
    pub fn compose(&self, delta: &Pose2) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2::new(
            self.x + c * delta.x - s * delta.y,
            self.y + s * delta.x + c * delta.y,
            self.yaw + delta.yaw,
        )
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2::new(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.yaw)
    }

    /// Motion from `self` to `next`, in `self`'s frame.
    pub fn delta_to(&self, next: &Pose2) -> Pose2 {
        self.inverse().compose(next)
    }

    pub fn to_pose(&self) -> Pose {
        Pose::from_yaw(self.yaw, Vector3::new(self.x, self.y, 0.0))
    }
}

/// Rigid camera mount on the robot: camera at `height` above the robot origin, looking along
/// the robot's x axis tilted down by `pitch` radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraMount {
    pub height: f64,
    pub pitch: f64,
}

impl Default for CameraMount {
    fn default() -> Self {
        CameraMount {
            height: 2.0,
            pitch: 0.0,
        }
    }
}

impl CameraMount {
    /// Camera → robot transform. Camera axes: x right, y down, z forward.
    pub fn pose(&self) -> Pose {
        let (s, c) = self.pitch.sin_cos();
        let forward = Vector3::new(c, 0.0, -s);
        let right = Vector3::new(0.0, -1.0, 0.0);
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Pose::new(rotation, Vector3::new(0.0, 0.0, self.height)).expect("mount rotation is orthonormal")
    }

    /// Camera → map transform for a robot at `robot`.
    pub fn camera_pose(&self, robot: &Pose2) -> Pose {
        robot.to_pose().compose(&self.pose())
    }
}
