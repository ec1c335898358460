//! Dataset loading and initial scene construction from LiDAR, SfM points
//! and tracklets.

mod dataset;
mod init;
mod pointcloud;

pub use dataset::{
    default_class_names, load_dataset, write_dataset, Dataset, FrameRecord, Tracklet, IGNORE_LABEL,
};
pub use init::{
    collect_object_points, colorize, colorize_with, gaussians_from_points, init_background,
    init_scene, knn_mean_distance, project_lidar_depth, voxel_downsample, InitConfig, SparseDepth,
    FALLBACK_OBJECT_SAMPLES, MIN_OBJECT_POINTS,
};
pub use pointcloud::{read_ply, write_ply, PointCloud};
