//! Persistent scene state: Gaussian sets, object tracks, the sky cubemap and
//! checkpoint serialization.

mod checkpoint;
mod gaussians;
mod graph;
mod sky;
mod track;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, Column, SCHEMA_VERSION};
pub use gaussians::{
    canonical_quat, AppearanceCoeffs, AppearanceMode, GaussianPoint, GaussianSet, SemanticField,
    SemanticKind,
};
pub use graph::{SceneGraph, View, DEFAULT_NUM_CLASSES, DEFAULT_VEHICLE_CLASS};
pub use sky::{SkyCubemap, SkyTaps, DEFAULT_SKY_RESOLUTION};
pub use track::{ObjectModel, PoseTrack, TrackRecord};
