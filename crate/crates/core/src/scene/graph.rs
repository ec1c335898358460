use serde::{Deserialize, Serialize};

use super::{GaussianSet, ObjectModel, SemanticKind, SkyCubemap};
use crate::error::{Error, Result};
use crate::geometry::Camera;

pub const DEFAULT_NUM_CLASSES: usize = 8;
/// Index of "vehicle" in the default class list
/// (sky, road, vehicle, building, vegetation, pole, sign, other).
pub const DEFAULT_VEHICLE_CLASS: usize = 2;

/// A camera at a timestep, kept with the scene so renders can be requested
/// by index without the original dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct View {
    pub timestep: usize,
    pub camera: Camera,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    pub background: GaussianSet,
    pub objects: Vec<ObjectModel>,
    pub sky: SkyCubemap,
    pub num_classes: usize,
    pub vehicle_class: usize,
    pub num_frames: usize,
    pub views: Vec<View>,
}

impl SceneGraph {
    pub fn object(&self, id: u32) -> Option<&ObjectModel> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn object_mut(&mut self, id: u32) -> Option<&mut ObjectModel> {
        self.objects.iter_mut().find(|o| o.id == id)
    }

    pub fn total_points(&self) -> usize {
        self.background.len()
            + self
                .objects
                .iter()
                .map(|o| o.gaussians.len())
                .sum::<usize>()
    }

    pub fn sh_degree(&self) -> usize {
        self.background.appearance.sh_degree
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.vehicle_class >= self.num_classes {
            return Err(Error::invalid(format!(
                "vehicle class {} not below class count {}",
                self.vehicle_class, self.num_classes
            )));
        }
        self.background.validate("background")?;
        if self.background.semantic.kind != SemanticKind::BackgroundVector {
            return Err(Error::invalid(
                "background semantics must be a logit vector",
            ));
        }
        if self.background.semantic.num_classes != self.num_classes {
            return Err(Error::invalid(
                "background semantic width differs from the class count",
            ));
        }
        let mut ids: Vec<u32> = self.objects.iter().map(|o| o.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate object id"));
        }
        for o in &self.objects {
            let ctx = format!("object {}", o.id);
            o.gaussians.validate(&ctx)?;
            o.track.validate()?;
            if o.gaussians.semantic.kind != SemanticKind::ObjectScalar {
                return Err(Error::invalid(format!(
                    "{ctx}: semantics must be a scalar logit"
                )));
            }
            if o.gaussians.appearance.sh_degree != self.sh_degree() {
                return Err(Error::invalid(format!(
                    "{ctx}: SH degree differs from the background"
                )));
            }
            if o.track.frame_count() != self.num_frames {
                return Err(Error::ShapeMismatch {
                    context: format!("{ctx}: pose track frames"),
                    expected: self.num_frames,
                    found: o.track.frame_count(),
                });
            }
        }
        if self.sky.texels.len() != self.sky.texel_count() * 3 {
            return Err(Error::ShapeMismatch {
                context: "sky cubemap".into(),
                expected: self.sky.texel_count() * 3,
                found: self.sky.texels.len(),
            });
        }
        for v in &self.views {
            v.camera.validate()?;
            if v.timestep >= self.num_frames.max(1) {
                return Err(Error::invalid(format!(
                    "view timestep {} out of range",
                    v.timestep
                )));
            }
        }
        Ok(())
    }
}
