//! Ground-truth synthetic scenes and datasets.

mod generate;
mod random;

pub use generate::{
    generate, perturb, pose_truth, synth_scene, write_synth, CameraPath, NoiseSpec,
    ObjectPoseNoise, PoseNoise, SynthSpec, Trajectory, GT_CHECKPOINT_DIR, POSE_NOISE_FILE,
    POSE_TRUTH_FILE,
};
pub use random::{random_camera, random_scene, RandomSceneSpec};
