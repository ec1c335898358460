use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::{quat_to_rotation, rot_z, Camera, Vec3};
use crate::scene::{
    AppearanceCoeffs, GaussianPoint, GaussianSet, ObjectModel, PoseTrack, SceneGraph,
    SemanticField, SkyCubemap, DEFAULT_NUM_CLASSES, DEFAULT_VEHICLE_CLASS,
};

/// Shape of a randomly generated test scene.
#[derive(Debug, Clone)]
pub struct RandomSceneSpec {
    pub background_points: usize,
    pub objects: usize,
    pub points_per_object: usize,
    pub num_frames: usize,
    pub sh_degree: usize,
    pub fourier_k: usize,
    pub num_classes: usize,
    pub sky_resolution: usize,
    /// Range of log-scales drawn per axis.
    pub log_scale_range: (f64, f64),
    /// Range of opacity logits.
    pub opacity_logit_range: (f64, f64),
    /// Half extent of the cube holding background points.
    pub extent: f64,
}

impl Default for RandomSceneSpec {
    fn default() -> Self {
        Self {
            background_points: 200,
            objects: 1,
            points_per_object: 50,
            num_frames: 8,
            sh_degree: 1,
            fourier_k: 5,
            num_classes: DEFAULT_NUM_CLASSES,
            sky_resolution: 8,
            log_scale_range: (-3.0, -1.2),
            opacity_logit_range: (-2.5, 2.5),
            extent: 2.0,
        }
    }
}

fn random_quat(rng: &mut impl Rng) -> [f64; 4] {
    let n = Normal::new(0.0, 1.0).unwrap();
    loop {
        let q = [n.sample(rng), n.sample(rng), n.sample(rng), n.sample(rng)];
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-3 {
            return q.map(|v| v / norm);
        }
    }
}

fn random_set(
    rng: &mut impl Rng,
    spec: &RandomSceneSpec,
    n: usize,
    appearance: AppearanceCoeffs,
    semantic: SemanticField,
    half: Vec3,
) -> GaussianSet {
    let mut set = GaussianSet::empty(appearance, semantic);
    let coeff = Normal::new(0.0, 0.25).unwrap();
    let stride = set.appearance.stride();
    let width = set.semantic.width();
    let per_k = set.appearance.basis_count() * 3;
    for _ in 0..n {
        let position = [
            rng.random_range(-half.x..=half.x),
            rng.random_range(-half.y..=half.y),
            rng.random_range(-half.z..=half.z),
        ];
        let (lo, hi) = spec.log_scale_range;
        let log_scale = [
            rng.random_range(lo..hi),
            rng.random_range(lo..hi),
            rng.random_range(lo..hi),
        ];
        let (olo, ohi) = spec.opacity_logit_range;
        let mut app: Vec<f64> = (0..stride).map(|_| coeff.sample(rng)).collect();
        // Keep the DC term well inside the positive range so colours stay
        // away from the clamp at zero.
        for ch in 0..3 {
            app[ch] = rng.random_range(-0.8..0.8);
        }
        for v in app.iter_mut().skip(per_k) {
            *v *= 0.3;
        }
        let sem: Vec<f64> = (0..width).map(|_| rng.random_range(-2.0..2.0)).collect();
        set.push(GaussianPoint {
            position,
            log_scale,
            rotation: random_quat(rng),
            opacity_logit: rng.random_range(olo..ohi),
            appearance: &app,
            semantic: &sem,
        });
    }
    set
}

/// Seeded random scene centred on the origin, for oracle and gradient tests.
pub fn random_scene(seed: u64, spec: &RandomSceneSpec) -> SceneGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = random_set(
        &mut rng,
        spec,
        spec.background_points,
        AppearanceCoeffs::static_sh(spec.sh_degree),
        SemanticField::background(spec.num_classes),
        Vec3::repeat(spec.extent),
    );
    let mut objects = Vec::new();
    for id in 0..spec.objects {
        let dims = Vec3::new(
            rng.random_range(1.0..2.0),
            rng.random_range(0.6..1.2),
            rng.random_range(0.5..1.0),
        );
        let gaussians = random_set(
            &mut rng,
            spec,
            spec.points_per_object,
            AppearanceCoeffs::fourier(spec.sh_degree, spec.fourier_k),
            SemanticField::object(spec.num_classes),
            dims * 0.5,
        );
        let start = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-0.3..0.3),
        );
        let vel = Vec3::new(
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.1..0.1),
            0.0,
        );
        let yaw0: f64 = rng.random_range(-3.0..3.0);
        let mut track = PoseTrack::new(
            (0..spec.num_frames)
                .map(|t| rot_z(yaw0 + 0.05 * t as f64))
                .collect(),
            (0..spec.num_frames)
                .map(|t| start + vel * t as f64)
                .collect(),
            dims,
            vec![true; spec.num_frames],
        );
        for t in 0..spec.num_frames {
            track.delta_yaws[t] = rng.random_range(-0.05..0.05);
            track.delta_translations[t] = Vec3::new(
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.02..0.02),
            );
        }
        objects.push(ObjectModel {
            id: id as u32 + 1,
            gaussians,
            track,
        });
    }
    let mut sky = SkyCubemap::constant(spec.sky_resolution, [0.5; 3]);
    for v in &mut sky.texels {
        *v = rng.random_range(0.0..1.0);
    }
    SceneGraph {
        background,
        objects,
        sky,
        num_classes: spec.num_classes,
        vehicle_class: DEFAULT_VEHICLE_CLASS.min(spec.num_classes - 1),
        num_frames: spec.num_frames,
        views: Vec::new(),
    }
}

/// Camera on a sphere of radius `distance` around the origin, looking at it.
pub fn random_camera(seed: u64, distance: f64, width: u32, height: u32) -> Camera {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let az = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let el: f64 = rng.random_range(0.1..0.6);
    let eye = Vec3::new(az.cos() * el.cos(), az.sin() * el.cos(), el.sin()) * distance;
    let f = 0.9 * width as f64;
    let mut cam = Camera::look_at(eye, Vec3::zeros(), Vec3::z(), f, f, width, height);
    // A small roll keeps the image axes from lining up with the world.
    let roll = quat_to_rotation([1.0, 0.0, 0.0, rng.random_range(-0.1..0.1)]);
    cam.rotation = roll * cam.rotation;
    cam.translation = roll * cam.translation;
    cam
}
