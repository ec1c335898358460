use serde::{Deserialize, Serialize};

use super::{is_rotation, Mat3, Vec3};
use crate::error::{Error, Result};

pub const DEFAULT_NEAR_CLIP: f64 = 0.2;

/// Pinhole camera. `rotation`/`translation` map world points into the
/// camera frame (x right, y down, z forward).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "CameraRecord", try_from = "CameraRecord")]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub near_clip: f64,
}

/// On-disk form of a camera: rotation is row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    #[serde(default = "default_near")]
    pub near_clip: f64,
}

fn default_near() -> f64 {
    DEFAULT_NEAR_CLIP
}

impl From<Camera> for CameraRecord {
    fn from(c: Camera) -> Self {
        CameraRecord {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            rotation: super::mat3_to_row_major(&c.rotation),
            translation: [c.translation.x, c.translation.y, c.translation.z],
            near_clip: c.near_clip,
        }
    }
}

impl TryFrom<CameraRecord> for Camera {
    type Error = Error;

    fn try_from(r: CameraRecord) -> Result<Self> {
        let cam = Camera {
            fx: r.fx,
            fy: r.fy,
            cx: r.cx,
            cy: r.cy,
            width: r.width,
            height: r.height,
            rotation: super::mat3_from_row_major(&r.rotation),
            translation: Vec3::from(r.translation),
            near_clip: r.near_clip,
        };
        cam.validate()?;
        Ok(cam)
    }
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.near_clip]
            .iter()
            .all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite {
                context: "camera".into(),
            });
        }
        if !is_rotation(&self.rotation, 1e-5) {
            return Err(Error::InvalidRotation {
                context: "camera extrinsics".into(),
            });
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invalid("camera focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera has zero-sized image"));
        }
        if !(0.0..self.width as f64).contains(&self.cx)
            || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(Error::invalid("camera principal point outside the image"));
        }
        if self.near_clip <= 0.0 {
            return Err(Error::invalid("camera near clip must be positive"));
        }
        Ok(())
    }

    /// Camera looking from `eye` towards `target`, with `up` roughly the
    /// world up direction.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fx: f64,
        fy: f64,
        width: u32,
        height: u32,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Camera {
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation,
            translation,
            near_clip: DEFAULT_NEAR_CLIP,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Unnormalized world-space direction of the ray through continuous
    /// pixel coordinates `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        let d = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        self.rotation.transpose() * d
    }

    /// Continuous pixel coordinates and camera-frame depth of a world point,
    /// or `None` when it lies at or behind the near plane.
    pub fn project_point(&self, p: &Vec3) -> Option<(f64, f64, f64)> {
        let c = self.world_to_camera(p);
        if c.z <= self.near_clip {
            return None;
        }
        Some((
            self.fx * c.x / c.z + self.cx,
            self.fy * c.y / c.z + self.cy,
            c.z,
        ))
    }

    /// Integer pixel containing the projection of `p`, if it lands on the
    /// image in front of the near plane.
    pub fn pixel_of(&self, p: &Vec3) -> Option<(usize, usize, f64)> {
        let (u, v, z) = self.project_point(p)?;
        let (x, y) = (u.floor(), v.floor());
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        Some((x as usize, y as usize, z))
    }
}
