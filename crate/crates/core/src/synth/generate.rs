//! Textured ground plane, static boxes and moving boxes rendered into the
//! on-disk dataset layout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    logit, mat3_to_row_major, rot_z, Camera, Vec3, IDENTITY_QUAT, SH_C0, SH_COLOR_OFFSET,
};
use crate::ingest::{
    default_class_names, write_dataset, Dataset, FrameRecord, PointCloud, Tracklet,
};
use crate::metrics::{label_map, SKY_OPACITY};
use crate::raster::{render_reference, RenderConfig};
use crate::scene::{
    save_checkpoint, AppearanceCoeffs, GaussianPoint, GaussianSet, ObjectModel, PoseTrack,
    SceneGraph, SemanticField, SkyCubemap, View,
};
use crate::train::{ObjectPoseTruth, PoseTruth};

const ROAD: usize = 1;
const VEHICLE: usize = 2;
const BUILDING: usize = 3;
const SKY: u8 = 0;
const NOISE_SEED_SALT: u64 = 0x5eed_0f_a015e;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trajectory {
    Linear,
    Arc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CameraPath {
    /// Cameras on a circle around the origin looking at its centre.
    Orbit {
        radius: f64,
        height: f64,
        sweep_deg: f64,
    },
    /// Cameras driving along +x at a fixed height, looking ahead and down.
    EgoForward {
        start_x: f64,
        speed: f64,
        height: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub translation: f64,
    pub yaw: f64,
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub num_frames: usize,
    pub camera_path: CameraPath,
    pub ground_half_extent: f64,
    pub ground_spacing: f64,
    pub static_boxes: usize,
    pub objects: usize,
    pub object_dims: [f64; 3],
    pub trajectory: Trajectory,
    /// Distance covered by each object over the sequence.
    pub travel: f64,
    pub surface_spacing: f64,
    /// LiDAR ray grid (columns, rows) spanning the camera's field of view.
    pub lidar_rays: [u32; 2],
    pub sky_resolution: usize,
    pub sh_degree: usize,
    pub noise: NoiseSpec,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 96,
            height: 64,
            focal: 80.0,
            num_frames: 12,
            camera_path: CameraPath::Orbit {
                radius: 13.0,
                height: 6.0,
                sweep_deg: 360.0,
            },
            ground_half_extent: 10.0,
            ground_spacing: 0.5,
            static_boxes: 3,
            objects: 2,
            object_dims: [3.2, 1.6, 1.4],
            trajectory: Trajectory::Linear,
            travel: 6.0,
            surface_spacing: 0.25,
            lidar_rays: [32, 24],
            sky_resolution: 16,
            sh_degree: 1,
            noise: NoiseSpec::default(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.focal,
            self.ground_half_extent,
            self.ground_spacing,
            self.surface_spacing,
            self.object_dims[0],
            self.object_dims[1],
            self.object_dims[2],
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("synth spec sizes must be positive"));
        }
        if self.width == 0
            || self.height == 0
            || self.num_frames == 0
            || self.lidar_rays.contains(&0)
        {
            return Err(Error::invalid("synth spec counts must be positive"));
        }
        if self.sky_resolution == 0 || self.sh_degree > crate::geometry::MAX_SH_DEGREE {
            return Err(Error::invalid(
                "synth spec sky resolution or SH degree out of range",
            ));
        }
        let n = self.noise;
        if [n.translation, n.yaw, n.depth]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::invalid("noise levels must be non-negative"));
        }
        Ok(())
    }
}

/// Flat Gaussian patches covering a surface element.
struct SurfaceBuilder<'a> {
    set: &'a mut GaussianSet,
    semantic: Vec<f64>,
    opacity_logit: f64,
}

impl SurfaceBuilder<'_> {
    fn push(&mut self, p: Vec3, log_scale: [f64; 3], color: [f64; 3]) {
        let stride = self.set.appearance.stride();
        let mut app = vec![0.0; stride];
        for c in 0..3 {
            app[c] = (color[c] - SH_COLOR_OFFSET) / SH_C0;
        }
        self.set.push(GaussianPoint {
            position: p.into(),
            log_scale,
            rotation: IDENTITY_QUAT,
            opacity_logit: self.opacity_logit,
            appearance: &app,
            semantic: &self.semantic,
        });
    }

    /// Covers the five visible faces of an axis-aligned box centred at
    /// `center`. Patches are flat along the face normal.
    fn box_surface(
        &mut self,
        center: Vec3,
        dims: [f64; 3],
        spacing: f64,
        color: impl Fn(Vec3, usize) -> [f64; 3],
    ) {
        let half = Vec3::new(dims[0] / 2.0, dims[1] / 2.0, dims[2] / 2.0);
        let flat = -4.0;
        for axis in 0..3 {
            let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
            let na = (dims[a] / spacing).ceil().max(1.0) as usize;
            let nb = (dims[b] / spacing).ceil().max(1.0) as usize;
            let (sa, sb) = (dims[a] / na as f64, dims[b] / nb as f64);
            for side in [-1.0, 1.0] {
                if axis == 2 && side < 0.0 {
                    continue;
                }
                for i in 0..na {
                    for j in 0..nb {
                        let mut local = Vec3::zeros();
                        local[axis] = side * half[axis];
                        local[a] = -half[a] + (i as f64 + 0.5) * sa;
                        local[b] = -half[b] + (j as f64 + 0.5) * sb;
                        let mut ls = [0.0; 3];
                        ls[axis] = flat;
                        ls[a] = (0.6 * sa).ln();
                        ls[b] = (0.6 * sb).ln();
                        let face = axis * 2 + usize::from(side > 0.0);
                        self.push(center + local, ls, color(local, face));
                    }
                }
            }
        }
    }
}

fn ground_color(x: f64, y: f64) -> [f64; 3] {
    let s = (0.45 * x).sin() * (0.35 * y).cos();
    let t = (0.2 * (x + y)).sin();
    [0.42 + 0.12 * s, 0.40 + 0.08 * t, 0.36 + 0.1 * s * t]
}

fn background_set(
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
    m: usize,
) -> (GaussianSet, Vec<(Vec3, [f64; 3])>) {
    let mut set = GaussianSet::empty(
        AppearanceCoeffs::static_sh(spec.sh_degree),
        SemanticField::background(m),
    );
    let mut sem = vec![0.0; m];
    sem[ROAD] = 5.0;
    let mut b = SurfaceBuilder {
        set: &mut set,
        semantic: sem,
        opacity_logit: logit(0.98),
    };
    let e = spec.ground_half_extent;
    let n = (2.0 * e / spec.ground_spacing).round() as usize;
    let s = 2.0 * e / n as f64;
    for i in 0..n {
        for j in 0..n {
            let x = -e + (i as f64 + 0.5) * s;
            let y = -e + (j as f64 + 0.5) * s;
            b.push(
                Vec3::new(x, y, 0.0),
                [(0.6 * s).ln(), (0.6 * s).ln(), -4.0],
                ground_color(x, y),
            );
        }
    }
    let mut sem = vec![0.0; b.set.semantic.width()];
    sem[BUILDING] = 5.0;
    b.semantic = sem;
    let mut boxes = Vec::new();
    for k in 0..spec.static_boxes {
        let ang = std::f64::consts::TAU * (k as f64 + rng.random_range(0.2..0.8))
            / spec.static_boxes as f64;
        let r = e * rng.random_range(0.65..0.85);
        let dims = [
            rng.random_range(1.5..3.0),
            rng.random_range(1.5..3.0),
            rng.random_range(1.5..3.5),
        ];
        let center = Vec3::new(r * ang.cos(), r * ang.sin(), dims[2] / 2.0);
        let base = [
            rng.random_range(0.3..0.8),
            rng.random_range(0.3..0.8),
            rng.random_range(0.3..0.8),
        ];
        b.box_surface(center, dims, spec.surface_spacing, |_, face| {
            let shade = 0.75 + 0.05 * face as f64;
            base.map(|c| (c * shade).min(1.0))
        });
        boxes.push((center, dims));
    }
    (set, boxes)
}

fn object_set(spec: &SynthSpec, m: usize, color: [f64; 3]) -> GaussianSet {
    let mut set = GaussianSet::empty(
        AppearanceCoeffs::fourier(spec.sh_degree, 1),
        SemanticField::object(m),
    );
    let mut b = SurfaceBuilder {
        set: &mut set,
        semantic: vec![5.0],
        opacity_logit: logit(0.98),
    };
    b.box_surface(
        Vec3::zeros(),
        spec.object_dims,
        spec.surface_spacing,
        |local, face| {
            let stripe = if (local.x * 2.0).floor() as i64 % 2 == 0 {
                1.0
            } else {
                0.85
            };
            let shade = 0.8 + 0.04 * face as f64;
            color.map(|c| (c * shade * stripe).min(1.0))
        },
    );
    set
}

fn object_track(spec: &SynthSpec, k: usize) -> PoseTrack {
    let n = spec.num_frames;
    let lane = if spec.objects <= 1 {
        0.0
    } else {
        -2.5 + 5.0 * k as f64 / (spec.objects - 1) as f64
    };
    let dir = if k % 2 == 0 { 1.0 } else { -1.0 };
    let z = spec.object_dims[2] / 2.0;
    let mut rots = Vec::with_capacity(n);
    let mut trans = Vec::with_capacity(n);
    for t in 0..n {
        let s = if n > 1 {
            t as f64 / (n - 1) as f64 - 0.5
        } else {
            0.0
        };
        let (pos, yaw) = match spec.trajectory {
            Trajectory::Linear => {
                let yaw = if dir > 0.0 { 0.0 } else { std::f64::consts::PI };
                (Vec3::new(dir * s * spec.travel, lane, z), yaw)
            }
            Trajectory::Arc => {
                let r = 4.0 + lane.abs();
                let ang = dir * s * spec.travel / r;
                (
                    Vec3::new(r * ang.sin(), lane - r * (1.0 - ang.cos()), z),
                    ang,
                )
            }
        };
        rots.push(rot_z(yaw));
        trans.push(pos);
    }
    PoseTrack::new(rots, trans, Vec3::from(spec.object_dims), vec![true; n])
}

fn camera_at(spec: &SynthSpec, t: usize) -> Camera {
    let n = spec.num_frames as f64;
    let (eye, target) = match spec.camera_path {
        CameraPath::Orbit {
            radius,
            height,
            sweep_deg,
        } => {
            let a = sweep_deg.to_radians() * t as f64 / n;
            (
                Vec3::new(radius * a.cos(), radius * a.sin(), height),
                Vec3::zeros(),
            )
        }
        CameraPath::EgoForward {
            start_x,
            speed,
            height,
        } => {
            let x = start_x + speed * t as f64;
            (Vec3::new(x, 0.0, height), Vec3::new(x + 10.0, 0.0, 0.0))
        }
    };
    Camera::look_at(
        eye,
        target,
        Vec3::z(),
        spec.focal,
        spec.focal,
        spec.width,
        spec.height,
    )
}

fn sky_texture(res: usize) -> SkyCubemap {
    let mut sky = SkyCubemap::constant(res, [0.0; 3]);
    for face in 0..6 {
        for row in 0..res {
            for col in 0..res {
                let d = sky.texel_direction(face, row, col).normalize();
                let i = ((face * res + row) * res + col) * 3;
                let up = d.z.max(0.0);
                sky.texels[i..i + 3].copy_from_slice(&[
                    0.55 - 0.25 * up,
                    0.7 - 0.15 * up,
                    0.95 - 0.05 * up,
                ]);
            }
        }
    }
    sky
}

/// Ground-truth scene following `spec`, without rendering anything.
pub fn synth_scene(spec: &SynthSpec) -> Result<SceneGraph> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m = default_class_names().len();
    let (background, _) = background_set(spec, &mut rng, m);
    let palette = [
        [0.8, 0.15, 0.1],
        [0.1, 0.3, 0.8],
        [0.9, 0.8, 0.2],
        [0.2, 0.7, 0.3],
    ];
    let objects = (0..spec.objects)
        .map(|k| ObjectModel {
            id: k as u32 + 1,
            gaussians: object_set(spec, m, palette[k % palette.len()]),
            track: object_track(spec, k),
        })
        .collect();
    let views = (0..spec.num_frames)
        .map(|t| View {
            timestep: t,
            camera: camera_at(spec, t),
        })
        .collect();
    let scene = SceneGraph {
        background,
        objects,
        sky: sky_texture(spec.sky_resolution),
        num_classes: m,
        vehicle_class: VEHICLE,
        num_frames: spec.num_frames,
        views,
    };
    scene.validate()?;
    Ok(scene)
}

fn render_frame(
    scene: &SceneGraph,
    spec: &SynthSpec,
    t: usize,
    noise_seed: u64,
) -> Result<FrameRecord> {
    let cam = scene.views[t].camera.clone();
    let out = render_reference(scene, &cam, &RenderConfig::at(t))?;
    let sem = label_map(&out, scene.num_classes, Some(SKY));
    let sky: Vec<u8> = out
        .opacity
        .data
        .iter()
        .map(|&o| (o < SKY_OPACITY) as u8)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = Normal::new(0.0, spec.noise.depth.max(f64::MIN_POSITIVE)).unwrap();
    let [lw, lh] = spec.lidar_rays;
    let (sx, sy) = (lw as f64 / cam.width as f64, lh as f64 / cam.height as f64);
    let lcam = Camera {
        fx: cam.fx * sx,
        fy: cam.fy * sy,
        cx: cam.cx * sx,
        cy: cam.cy * sy,
        width: lw,
        height: lh,
        ..cam.clone()
    };
    let lout = render_reference(scene, &lcam, &RenderConfig::at(t))?;
    let mut lidar = Vec::new();
    for y in 0..lh as usize {
        for x in 0..lw as usize {
            let i = y * lw as usize + x;
            let o = lout.opacity.data[i];
            if o < 0.5 {
                continue;
            }
            let mut z = lout.depth.data[i] / o;
            if spec.noise.depth > 0.0 {
                z += noise.sample(&mut rng);
            }
            let p = lcam.center() + lcam.ray_direction(x as f64 + 0.5, y as f64 + 0.5) * z;
            lidar.push([p.x as f32 as f64, p.y as f32 as f64, p.z as f32 as f64]);
        }
    }
    Ok(FrameRecord {
        timestep: t,
        camera: cam,
        image: out.color.quantized_u8(),
        lidar: PointCloud::from_positions(lidar),
        sky_mask: Some(sky),
        semantic: Some(sem),
    })
}

/// Ground-truth scene and its clean dataset. Images go through the same
/// 8-bit quantization and LiDAR through the same f32 rounding as the disk
/// format, so writing and reloading the dataset is lossless.
pub fn generate(spec: &SynthSpec) -> Result<(SceneGraph, Dataset)> {
    let scene = synth_scene(spec)?;
    use rayon::prelude::*;
    let frames = (0..spec.num_frames)
        .into_par_iter()
        .map(|t| {
            render_frame(
                &scene,
                spec,
                t,
                spec.seed ^ (0xD1B5_4A32_D192_ED03u64.wrapping_mul(t as u64 + 1)),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = Dataset {
        num_frames: spec.num_frames,
        class_names: default_class_names(),
        vehicle_class: VEHICLE,
        frames,
        tracklets: scene
            .objects
            .iter()
            .map(|o| Tracklet {
                id: o.id,
                track: o.track.clone(),
            })
            .collect(),
        sfm_points: None,
    };
    ds.validate()?;
    Ok((scene, ds))
}

/// Per-object offsets that `perturb` added to the tracked poses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseNoise {
    pub objects: Vec<ObjectPoseNoise>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectPoseNoise {
    pub id: u32,
    /// Noisy minus clean translation per frame.
    pub translations: Vec<[f64; 3]>,
    /// Yaw composed onto the clean rotation, `R_noisy = R_clean · Rz(yaw)`.
    pub yaws: Vec<f64>,
}

/// Clean poses of every tracklet.
pub fn pose_truth(ds: &Dataset) -> PoseTruth {
    PoseTruth {
        objects: ds
            .tracklets
            .iter()
            .map(|t| ObjectPoseTruth {
                id: t.id,
                rotations: t.track.rotations.iter().map(mat3_to_row_major).collect(),
                translations: t
                    .track
                    .translations
                    .iter()
                    .map(|v| [v.x, v.y, v.z])
                    .collect(),
            })
            .collect(),
    }
}

/// Adds zero-mean Gaussian noise to the x/y translation (σ_T per axis) and
/// yaw (σ_θ) of every valid tracked pose.
pub fn perturb(
    ds: &Dataset,
    sigma_t: f64,
    sigma_yaw: f64,
    seed: u64,
) -> Result<(Dataset, PoseNoise)> {
    if !(sigma_t >= 0.0 && sigma_yaw >= 0.0 && sigma_t.is_finite() && sigma_yaw.is_finite()) {
        return Err(Error::invalid("noise levels must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ds.clone();
    let mut noise = PoseNoise {
        objects: Vec::new(),
    };
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    for t in &mut out.tracklets {
        let n = t.track.frame_count();
        let mut rec = ObjectPoseNoise {
            id: t.id,
            translations: vec![[0.0; 3]; n],
            yaws: vec![0.0; n],
        };
        for f in 0..n {
            let (dx, dy, dyaw): (f64, f64, f64) = (
                std_normal.sample(&mut rng) * sigma_t,
                std_normal.sample(&mut rng) * sigma_t,
                std_normal.sample(&mut rng) * sigma_yaw,
            );
            if !t.track.valid[f] {
                continue;
            }
            let clean = t.track.translations[f];
            let noisy = clean + Vec3::new(dx, dy, 0.0);
            rec.translations[f] = (noisy - clean).into();
            t.track.translations[f] = noisy;
            if dyaw != 0.0 {
                t.track.rotations[f] *= rot_z(dyaw);
            }
            rec.yaws[f] = dyaw;
        }
        noise.objects.push(rec);
    }
    Ok((out, noise))
}

/// Files written by [`write_synth`] next to the dataset.
pub const GT_CHECKPOINT_DIR: &str = "gt";
pub const POSE_TRUTH_FILE: &str = "pose_truth.json";
pub const POSE_NOISE_FILE: &str = "pose_noise.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value).expect("plain data serializes");
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Generates the scene of `spec`, applies its pose noise and writes the
/// dataset to `out`, plus the ground-truth checkpoint, the clean poses and
/// the applied noise. Returns the written (possibly noisy) dataset.
pub fn write_synth(spec: &SynthSpec, out: &Path) -> Result<Dataset> {
    let (gt, clean) = generate(spec)?;
    let (noisy, noise) = perturb(
        &clean,
        spec.noise.translation,
        spec.noise.yaw,
        spec.seed ^ NOISE_SEED_SALT,
    )?;
    write_dataset(&noisy, out)?;
    save_checkpoint(&gt, &out.join(GT_CHECKPOINT_DIR))?;
    write_json(&out.join(POSE_TRUTH_FILE), &pose_truth(&clean))?;
    write_json(&out.join(POSE_NOISE_FILE), &noise)?;
    Ok(noisy)
}
