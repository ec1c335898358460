use serde::{Deserialize, Serialize};

use super::GaussianSet;
use crate::error::{Error, Result};
use crate::geometry::{is_rotation, mat3_from_row_major, mat3_to_row_major, Mat3, RigidPose, Vec3};

/// Per-frame tracked pose of one rigid object plus its learnable corrections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "TrackRecord", try_from = "TrackRecord")]
pub struct PoseTrack {
    /// World <- object rotation per frame.
    pub rotations: Vec<Mat3>,
    pub translations: Vec<Vec3>,
    pub delta_translations: Vec<Vec3>,
    pub delta_yaws: Vec<f64>,
    /// Box length, width, height along the object x, y, z axes.
    pub box_dims: Vec3,
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackRecord {
    pub box_dims: [f64; 3],
    /// Row-major 3×3 per frame.
    pub rotations: Vec<[f64; 9]>,
    pub translations: Vec<[f64; 3]>,
    pub valid: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_translations: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_yaws: Option<Vec<f64>>,
}

impl From<PoseTrack> for TrackRecord {
    fn from(t: PoseTrack) -> Self {
        let has_delta = t.delta_yaws.iter().any(|v| *v != 0.0)
            || t.delta_translations
                .iter()
                .any(|v| v.iter().any(|x| *x != 0.0));
        TrackRecord {
            box_dims: t.box_dims.into(),
            rotations: t.rotations.iter().map(mat3_to_row_major).collect(),
            translations: t.translations.iter().map(|v| (*v).into()).collect(),
            valid: t.valid,
            delta_translations: has_delta
                .then(|| t.delta_translations.iter().map(|v| (*v).into()).collect()),
            delta_yaws: has_delta.then_some(t.delta_yaws),
        }
    }
}

impl TryFrom<TrackRecord> for PoseTrack {
    type Error = Error;

    fn try_from(r: TrackRecord) -> Result<Self> {
        let n = r.rotations.len();
        let delta_translations = r
            .delta_translations
            .map(|v| v.into_iter().map(Vec3::from).collect())
            .unwrap_or_else(|| vec![Vec3::zeros(); n]);
        let delta_yaws = r.delta_yaws.unwrap_or_else(|| vec![0.0; n]);
        let track = PoseTrack {
            rotations: r.rotations.iter().map(mat3_from_row_major).collect(),
            translations: r.translations.into_iter().map(Vec3::from).collect(),
            delta_translations,
            delta_yaws,
            box_dims: Vec3::from(r.box_dims),
            valid: r.valid,
        };
        track.validate()?;
        Ok(track)
    }
}

impl PoseTrack {
    pub fn new(
        rotations: Vec<Mat3>,
        translations: Vec<Vec3>,
        box_dims: Vec3,
        valid: Vec<bool>,
    ) -> Self {
        let n = rotations.len();
        Self {
            rotations,
            translations,
            delta_translations: vec![Vec3::zeros(); n],
            delta_yaws: vec![0.0; n],
            box_dims,
            valid,
        }
    }

    pub fn frame_count(&self) -> usize {
        self.rotations.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frame_count();
        for (name, len) in [
            ("translations", self.translations.len()),
            ("delta_translations", self.delta_translations.len()),
            ("delta_yaws", self.delta_yaws.len()),
            ("valid", self.valid.len()),
        ] {
            if len != n {
                return Err(Error::ShapeMismatch {
                    context: format!("pose track {name}"),
                    expected: n,
                    found: len,
                });
            }
        }
        let finite = self
            .rotations
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()))
            && self
                .translations
                .iter()
                .chain(&self.delta_translations)
                .all(|v| v.iter().all(|x| x.is_finite()))
            && self.delta_yaws.iter().all(|v| v.is_finite())
            && self.box_dims.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite {
                context: "pose track".into(),
            });
        }
        for (t, r) in self.rotations.iter().enumerate() {
            if !is_rotation(r, 1e-5) {
                return Err(Error::InvalidRotation {
                    context: format!("pose track frame {t}"),
                });
            }
        }
        if self.box_dims.iter().any(|v| *v <= 0.0) {
            return Err(Error::invalid("pose track box dimensions must be positive"));
        }
        Ok(())
    }

    /// Tracked pose without the learned correction.
    pub fn base_pose(&self, t: usize) -> Result<RigidPose> {
        self.check_frame(t)?;
        Ok(RigidPose {
            rotation: self.rotations[t],
            translation: self.translations[t],
        })
    }

    /// Tracked pose with the learned yaw and translation correction applied.
    pub fn effective_pose(&self, t: usize) -> Result<RigidPose> {
        Ok(self
            .base_pose(t)?
            .with_delta(&self.delta_translations[t], self.delta_yaws[t]))
    }

    pub fn is_valid(&self, t: usize) -> bool {
        t < self.frame_count() && self.valid[t]
    }

    fn check_frame(&self, t: usize) -> Result<()> {
        if t >= self.frame_count() {
            return Err(Error::invalid(format!(
                "frame {t} out of range for track with {} frames",
                self.frame_count()
            )));
        }
        if !self.valid[t] {
            return Err(Error::invalid(format!("object not tracked at frame {t}")));
        }
        Ok(())
    }

    /// Closed point-in-box test in the object frame.
    pub fn contains_local(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a].abs() <= 0.5 * self.box_dims[a])
    }

    pub fn box_diagonal(&self) -> f64 {
        self.box_dims.norm()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectModel {
    pub id: u32,
    pub gaussians: GaussianSet,
    pub track: PoseTrack,
}
