use std::collections::BTreeMap;

use kiddo::immutable::float::kdtree::ImmutableKdTree;
use kiddo::SquaredEuclidean;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, FrameRecord};
use super::pointcloud::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::{logit, Camera, RigidPose, Vec3, IDENTITY_QUAT, SH_C0, SH_COLOR_OFFSET};
use crate::scene::{
    AppearanceCoeffs, GaussianPoint, GaussianSet, ObjectModel, PoseTrack, SceneGraph,
    SemanticField, SkyCubemap, View, DEFAULT_SKY_RESOLUTION,
};

/// Objects with fewer aggregated LiDAR points than this are seeded from
/// uniform samples inside their box instead.
pub const MIN_OBJECT_POINTS: usize = 2000;
pub const FALLBACK_OBJECT_SAMPLES: usize = 8000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub voxel_size: f64,
    pub sh_degree: usize,
    pub object_fourier_k: usize,
    pub initial_opacity: f64,
    pub sky_resolution: usize,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.15,
            sh_degree: 1,
            object_fourier_k: 5,
            initial_opacity: 0.1,
            sky_resolution: DEFAULT_SKY_RESOLUTION,
            seed: 0,
        }
    }
}

/// LiDAR hits of one frame rasterized to pixels, `0` where there is none.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDepth {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
}

impl SparseDepth {
    pub fn hits(&self) -> usize {
        self.depth.iter().filter(|d| **d > 0.0).count()
    }
}

/// Nearest camera-frame depth of the frame's LiDAR per pixel.
pub fn project_lidar_depth(frame: &FrameRecord) -> SparseDepth {
    let cam = &frame.camera;
    let (w, h) = (cam.width as usize, cam.height as usize);
    let mut depth = vec![0.0; w * h];
    for p in &frame.lidar.positions {
        if let Some((x, y, z)) = cam.pixel_of(&Vec3::from(*p)) {
            let d = &mut depth[y * w + x];
            if *d == 0.0 || z < *d {
                *d = z;
            }
        }
    }
    SparseDepth {
        width: w,
        height: h,
        depth,
    }
}

/// Object-local LiDAR points inside the tracked box, aggregated over every
/// frame where the object is tracked. Falls back to seeded uniform samples
/// inside the box when too few points are found.
pub fn collect_object_points(ds: &Dataset, object_id: u32, seed: u64) -> Result<PointCloud> {
    let tracklet = ds
        .tracklet(object_id)
        .ok_or_else(|| Error::invalid(format!("unknown object id {object_id}")))?;
    let track = &tracklet.track;
    let mut out = Vec::new();
    for f in &ds.frames {
        if !track.is_valid(f.timestep) {
            continue;
        }
        let pose = track.base_pose(f.timestep)?;
        let inv = pose.rotation.transpose();
        for p in &f.lidar.positions {
            let local = inv * (Vec3::from(*p) - pose.translation);
            if track.contains_local(&local) {
                out.push(local.into());
            }
        }
    }
    if out.len() < MIN_OBJECT_POINTS {
        out = sample_in_box(
            &track.box_dims,
            FALLBACK_OBJECT_SAMPLES,
            seed ^ object_id as u64,
        );
    }
    Ok(PointCloud::from_positions(out))
}

fn sample_in_box(dims: &Vec3, n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            [
                rng.random_range(-0.5..=0.5) * dims.x,
                rng.random_range(-0.5..=0.5) * dims.y,
                rng.random_range(-0.5..=0.5) * dims.z,
            ]
        })
        .collect()
}

fn inside_any_box(ds: &Dataset, timestep: usize, p: &Vec3) -> bool {
    ds.tracklets.iter().any(|t| {
        t.track.is_valid(timestep) && {
            let pose = t.track.base_pose(timestep).expect("valid frame");
            t.track
                .contains_local(&(pose.rotation.transpose() * (p - pose.translation)))
        }
    })
}

/// One centroid per occupied voxel, ordered by voxel index.
pub fn voxel_downsample(points: &[[f64; 3]], voxel: f64) -> Vec<[f64; 3]> {
    let mut cells: BTreeMap<[i64; 3], ([f64; 3], usize)> = BTreeMap::new();
    for p in points {
        let key = p.map(|v| (v / voxel).floor() as i64);
        let e = cells.entry(key).or_insert(([0.0; 3], 0));
        for a in 0..3 {
            e.0[a] += p[a];
        }
        e.1 += 1;
    }
    cells
        .values()
        .map(|(s, n)| s.map(|v| v / *n as f64))
        .collect()
}

fn seen_by_any(cams: &[&Camera], p: &Vec3) -> bool {
    cams.iter().any(|c| c.pixel_of(p).is_some())
}

/// Static background points: LiDAR outside every tracked box, voxel
/// downsampled, restricted to what some camera sees, plus SfM points.
pub fn init_background(ds: &Dataset, voxel_size: f64) -> Result<PointCloud> {
    let mut raw = Vec::new();
    for f in &ds.frames {
        for p in &f.lidar.positions {
            if !inside_any_box(ds, f.timestep, &Vec3::from(*p)) {
                raw.push(*p);
            }
        }
    }
    let cams: Vec<&Camera> = ds.frames.iter().map(|f| &f.camera).collect();
    let mut points: Vec<[f64; 3]> = voxel_downsample(&raw, voxel_size)
        .into_iter()
        .filter(|p| seen_by_any(&cams, &Vec3::from(*p)))
        .collect();
    let mut colors = None;
    if let Some(sfm) = &ds.sfm_points {
        if let Some(c) = &sfm.colors {
            // Keep SfM colours; LiDAR points get looked up later.
            let mut all = vec![[f64::NAN; 3]; points.len()];
            all.extend_from_slice(c);
            colors = Some(all);
        }
        points.extend_from_slice(&sfm.positions);
    }
    if points.is_empty() {
        return Err(Error::invalid("no background points"));
    }
    Ok(PointCloud {
        positions: points,
        colors,
    })
}

/// Colour of each point from the first frame (in dataset order) whose
/// camera sees it under `pose_at(timestep)`, or mid-grey. Existing finite
/// colours are kept.
pub fn colorize_with(
    points: &PointCloud,
    ds: &Dataset,
    pose_at: impl Fn(usize) -> Option<RigidPose>,
) -> PointCloud {
    let poses: Vec<Option<RigidPose>> = ds.frames.iter().map(|f| pose_at(f.timestep)).collect();
    let colors = points
        .positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if let Some(c) = points.colors.as_ref().map(|c| c[i]) {
                if c.iter().all(|v| v.is_finite()) {
                    return c;
                }
            }
            for (f, pose) in ds.frames.iter().zip(&poses) {
                let Some(pose) = pose else { continue };
                if let Some((x, y, _)) = f.camera.pixel_of(&pose.apply(&Vec3::from(*p))) {
                    let px = f.image.pixel(x, y);
                    return [px[0], px[1], px[2]];
                }
            }
            [0.5; 3]
        })
        .collect();
    PointCloud {
        positions: points.positions.clone(),
        colors: Some(colors),
    }
}

/// [`colorize_with`] for world-frame points.
pub fn colorize(points: &PointCloud, ds: &Dataset) -> PointCloud {
    colorize_with(points, ds, |_| Some(RigidPose::identity()))
}

/// Mean distance to the three nearest other points, per point.
pub fn knn_mean_distance(points: &[[f64; 3]]) -> Vec<f64> {
    const FLOOR: f64 = 3.2e-4;
    if points.len() < 2 {
        return vec![0.01; points.len()];
    }
    let tree: ImmutableKdTree<f64, u64, 3, 32> = ImmutableKdTree::new_from_slice(points);
    let k = 4.min(points.len());
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let nn = tree.nearest_n::<SquaredEuclidean>(p, std::num::NonZero::new(k).unwrap());
            let mut sum = 0.0;
            let mut count = 0;
            let mut skipped_self = false;
            for n in nn {
                if !skipped_self && n.item as usize == i {
                    skipped_self = true;
                    continue;
                }
                if count == k - 1 {
                    break;
                }
                sum += n.distance.sqrt();
                count += 1;
            }
            (sum / count as f64).max(FLOOR)
        })
        .collect()
}

/// Isotropic Gaussians at the given coloured points.
pub fn gaussians_from_points(
    cloud: &PointCloud,
    appearance: AppearanceCoeffs,
    semantic: SemanticField,
    initial_opacity: f64,
) -> GaussianSet {
    let mut set = GaussianSet::empty(appearance, semantic);
    let scales = knn_mean_distance(&cloud.positions);
    let stride = set.appearance.stride();
    let width = set.semantic.width();
    let sem = vec![0.0; width];
    let mut app = vec![0.0; stride];
    let opacity_logit = logit(initial_opacity);
    for (i, p) in cloud.positions.iter().enumerate() {
        let c = cloud.colors.as_ref().map_or([0.5; 3], |c| c[i]);
        app.fill(0.0);
        for ch in 0..3 {
            app[ch] = (c[ch] - SH_COLOR_OFFSET) / SH_C0;
        }
        let ls = scales[i].ln();
        set.push(GaussianPoint {
            position: *p,
            log_scale: [ls; 3],
            rotation: IDENTITY_QUAT,
            opacity_logit,
            appearance: &app,
            semantic: &sem,
        });
    }
    set
}

/// Builds the initial scene graph from a dataset.
pub fn init_scene(ds: &Dataset, cfg: &InitConfig) -> Result<SceneGraph> {
    ds.validate()?;
    let m = ds.num_classes();
    let bg_points = colorize(&init_background(ds, cfg.voxel_size)?, ds);
    let background = gaussians_from_points(
        &bg_points,
        AppearanceCoeffs::static_sh(cfg.sh_degree),
        SemanticField::background(m),
        cfg.initial_opacity,
    );
    let mut objects = Vec::new();
    for t in &ds.tracklets {
        let local = collect_object_points(ds, t.id, cfg.seed)?;
        let track: &PoseTrack = &t.track;
        let colored = colorize_with(&local, ds, |ts| track.base_pose(ts).ok());
        let gaussians = gaussians_from_points(
            &colored,
            AppearanceCoeffs::fourier(cfg.sh_degree, cfg.object_fourier_k),
            SemanticField::object(m),
            cfg.initial_opacity,
        );
        objects.push(ObjectModel {
            id: t.id,
            gaussians,
            track: t.track.clone(),
        });
    }
    let scene = SceneGraph {
        background,
        objects,
        sky: SkyCubemap::constant(cfg.sky_resolution, [0.5; 3]),
        num_classes: m,
        vehicle_class: ds.vehicle_class,
        num_frames: ds.num_frames,
        views: ds
            .frames
            .iter()
            .map(|f| View {
                timestep: f.timestep,
                camera: f.camera.clone(),
            })
            .collect(),
    };
    scene.validate()?;
    Ok(scene)
}
