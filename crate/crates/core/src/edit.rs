//! Object-level scene edits: move, turn and swap objects.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::scene::SceneGraph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Edit {
    /// Adds `delta` (world frame, meters) to the object translation.
    Translate {
        object: u32,
        delta: [f64; 3],
        /// Half-open `[start, end)`; all frames when absent.
        #[serde(default)]
        frames: Option<[usize; 2]>,
    },
    /// Composes a yaw turn (radians) about the object's own z axis.
    RotateYaw {
        object: u32,
        angle: f64,
        #[serde(default)]
        frames: Option<[usize; 2]>,
    },
    /// Exchanges the Gaussians of two objects; pose tracks stay in place.
    Swap { a: u32, b: u32 },
}

/// Edits applied in order. Reads either a bare JSON list or `{"edits": [...]}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "ScriptFile")]
pub struct EditScript {
    pub edits: Vec<Edit>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScriptFile {
    List(Vec<Edit>),
    Object { edits: Vec<Edit> },
}

impl From<ScriptFile> for EditScript {
    fn from(f: ScriptFile) -> Self {
        match f {
            ScriptFile::List(edits) | ScriptFile::Object { edits } => EditScript { edits },
        }
    }
}

fn frame_range(frames: Option<[usize; 2]>, n: usize) -> Result<std::ops::Range<usize>> {
    match frames {
        None => Ok(0..n),
        Some([s, e]) if s <= e && e <= n => Ok(s..e),
        Some([s, e]) => Err(Error::invalid(format!(
            "frame range [{s}, {e}) outside 0..{n}"
        ))),
    }
}

impl EditScript {
    pub fn validate(&self, scene: &SceneGraph) -> Result<()> {
        let known = |id: u32| -> Result<()> {
            scene
                .object(id)
                .map(|_| ())
                .ok_or_else(|| Error::invalid(format!("edit references unknown object {id}")))
        };
        for e in &self.edits {
            match e {
                Edit::Translate {
                    object,
                    delta,
                    frames,
                } => {
                    known(*object)?;
                    frame_range(*frames, scene.num_frames)?;
                    if delta.iter().any(|v| !v.is_finite()) {
                        return Err(Error::invalid("translation must be finite"));
                    }
                }
                Edit::RotateYaw {
                    object,
                    angle,
                    frames,
                } => {
                    known(*object)?;
                    frame_range(*frames, scene.num_frames)?;
                    if !angle.is_finite() {
                        return Err(Error::invalid("yaw angle must be finite"));
                    }
                }
                Edit::Swap { a, b } => {
                    known(*a)?;
                    known(*b)?;
                }
            }
        }
        Ok(())
    }
}

/// Returns an edited copy of `scene`; the input is left untouched.
pub fn apply_edit(scene: &SceneGraph, script: &EditScript) -> Result<SceneGraph> {
    script.validate(scene)?;
    let mut out = scene.clone();
    for e in &script.edits {
        match *e {
            Edit::Translate {
                object,
                delta,
                frames,
            } => {
                let obj = out.object_mut(object).expect("validated");
                for t in frame_range(frames, scene.num_frames)? {
                    obj.track.delta_translations[t] += Vec3::from(delta);
                }
            }
            Edit::RotateYaw {
                object,
                angle,
                frames,
            } => {
                let obj = out.object_mut(object).expect("validated");
                for t in frame_range(frames, scene.num_frames)? {
                    obj.track.delta_yaws[t] += angle;
                }
            }
            Edit::Swap { a, b } => {
                let ia = out
                    .objects
                    .iter()
                    .position(|o| o.id == a)
                    .expect("validated");
                let ib = out
                    .objects
                    .iter()
                    .position(|o| o.id == b)
                    .expect("validated");
                let (lo, hi) = (ia.min(ib), ia.max(ib));
                if lo != hi {
                    let (left, right) = out.objects.split_at_mut(hi);
                    std::mem::swap(&mut left[lo].gaussians, &mut right[0].gaussians);
                }
            }
        }
    }
    Ok(out)
}
