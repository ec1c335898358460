use crate::geometry::{fourier_basis, object_to_world, quat_to_rotation, Mat3, RigidPose, Vec3};
use crate::scene::{SceneGraph, SemanticKind};

/// Which models take part in a render.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IncludeFilter {
    pub background: bool,
    /// `None` keeps every object.
    pub objects: Option<Vec<u32>>,
}

impl Default for IncludeFilter {
    fn default() -> Self {
        Self::all()
    }
}

impl IncludeFilter {
    pub fn all() -> Self {
        Self {
            background: true,
            objects: None,
        }
    }

    pub fn background_only() -> Self {
        Self {
            background: true,
            objects: Some(Vec::new()),
        }
    }

    pub fn objects_only() -> Self {
        Self {
            background: false,
            objects: None,
        }
    }

    pub fn single_object(id: u32) -> Self {
        Self {
            background: false,
            objects: Some(vec![id]),
        }
    }

    fn keeps_object(&self, id: u32) -> bool {
        self.objects.as_ref().is_none_or(|ids| ids.contains(&id))
    }
}

/// Where a world-frame Gaussian came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Background(usize),
    /// `(position in scene.objects, point index)`.
    Object(usize, usize),
}

/// Flattened world-frame Gaussians for one timestep: background first, then
/// objects in scene order.
#[derive(Debug, Clone)]
pub struct WorldSet {
    pub positions: Vec<Vec3>,
    pub rotations: Vec<Mat3>,
    pub log_scales: Vec<Vec3>,
    pub opacities: Vec<f64>,
    /// SH coefficients `[basis][channel]` evaluated at the timestep.
    pub sh: Vec<f64>,
    pub sh_degree: usize,
    /// Semantic logits, `num_classes` per point.
    pub semantics: Vec<f64>,
    pub num_classes: usize,
    pub origins: Vec<Origin>,
    /// Effective pose of each object in scene order (identity when skipped).
    pub object_poses: Vec<Option<RigidPose>>,
}

impl WorldSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn sh_stride(&self) -> usize {
        crate::geometry::sh_basis_count(self.sh_degree) * 3
    }

    pub fn sh_of(&self, i: usize) -> &[f64] {
        let s = self.sh_stride();
        &self.sh[i * s..(i + 1) * s]
    }

    pub fn semantic_of(&self, i: usize) -> &[f64] {
        &self.semantics[i * self.num_classes..(i + 1) * self.num_classes]
    }
}

/// Concatenates the background with every included object that is tracked
/// at timestep `t`, moving object points into the world frame.
pub fn assemble_world_set(scene: &SceneGraph, t: usize, filter: &IncludeFilter) -> WorldSet {
    let m = scene.num_classes;
    let mut w = WorldSet {
        positions: Vec::new(),
        rotations: Vec::new(),
        log_scales: Vec::new(),
        opacities: Vec::new(),
        sh: Vec::new(),
        sh_degree: scene.sh_degree(),
        semantics: Vec::new(),
        num_classes: m,
        origins: Vec::new(),
        object_poses: vec![None; scene.objects.len()],
    };
    let tf = t as f64;
    let cap = scene.total_points();
    w.positions.reserve(cap);
    w.rotations.reserve(cap);
    w.log_scales.reserve(cap);
    w.opacities.reserve(cap);
    w.origins.reserve(cap);
    w.sh.reserve(cap * w.sh_stride());
    w.semantics.reserve(cap * m);
    if filter.background {
        let bg = &scene.background;
        let basis = fourier_basis(bg.appearance.fourier_k, tf, scene.num_frames);
        for i in 0..bg.len() {
            w.positions.push(Vec3::from(bg.positions[i]));
            w.rotations.push(quat_to_rotation(bg.rotations[i]));
            w.log_scales.push(Vec3::from(bg.log_scales[i]));
            w.opacities.push(bg.opacity(i));
            bg.appearance.eval_with_basis(i, &basis, &mut w.sh);
            match bg.semantic.kind {
                SemanticKind::BackgroundVector => {
                    w.semantics.extend_from_slice(bg.semantic.point(i))
                }
                SemanticKind::ObjectScalar => push_one_hot(
                    &mut w.semantics,
                    m,
                    scene.vehicle_class,
                    bg.semantic.point(i)[0],
                ),
            }
            w.origins.push(Origin::Background(i));
        }
    }
    for (k, obj) in scene.objects.iter().enumerate() {
        if !filter.keeps_object(obj.id) || !obj.track.is_valid(t) {
            continue;
        }
        let pose = obj.track.effective_pose(t).expect("frame checked valid");
        w.object_poses[k] = Some(pose);
        let g = &obj.gaussians;
        let basis = fourier_basis(g.appearance.fourier_k, tf, scene.num_frames);
        for i in 0..g.len() {
            let (mu, r) = object_to_world(&Vec3::from(g.positions[i]), g.rotations[i], &pose);
            w.positions.push(mu);
            w.rotations.push(r);
            w.log_scales.push(Vec3::from(g.log_scales[i]));
            w.opacities.push(g.opacity(i));
            g.appearance.eval_with_basis(i, &basis, &mut w.sh);
            match g.semantic.kind {
                SemanticKind::ObjectScalar => push_one_hot(
                    &mut w.semantics,
                    m,
                    scene.vehicle_class,
                    g.semantic.point(i)[0],
                ),
                SemanticKind::BackgroundVector => {
                    w.semantics.extend_from_slice(g.semantic.point(i))
                }
            }
            w.origins.push(Origin::Object(k, i));
        }
    }
    w
}

fn push_one_hot(out: &mut Vec<f64>, m: usize, class: usize, value: f64) {
    for c in 0..m {
        out.push(if c == class { value } else { 0.0 });
    }
}
