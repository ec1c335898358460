use rayon::prelude::*;

use super::assemble::Origin;
use super::forward::{gather_hot, render_with_state, splat_alpha, ForwardState, RenderConfig};
use crate::error::{Error, Result};
use crate::geometry::{
    covariance_from_rotation, covariance_from_rotation_backward, fourier_basis,
    project_gaussian_backward, quat_to_rotation, quat_to_rotation_backward, rot_z_derivative,
    sh_color_backward, Camera, CovGrad2, Mat3, Vec3,
};
use crate::image::Image;
use crate::scene::{GaussianSet, SceneGraph, SemanticKind};

/// dL/d(render output). Missing channels are treated as zero.
#[derive(Debug, Clone, Default)]
pub struct UpstreamGrads {
    pub color: Option<Image>,
    pub opacity: Option<Image>,
    pub depth: Option<Image>,
    pub semantic: Option<Image>,
}

/// Gradients shaped like the columns of a [`GaussianSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct SetGradients {
    pub positions: Vec<[f64; 3]>,
    pub log_scales: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub opacity_logits: Vec<f64>,
    pub appearance: Vec<f64>,
    pub semantic: Vec<f64>,
}

impl SetGradients {
    pub fn zeros_like(set: &GaussianSet) -> Self {
        let n = set.len();
        Self {
            positions: vec![[0.0; 3]; n],
            log_scales: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            opacity_logits: vec![0.0; n],
            appearance: vec![0.0; set.appearance.coeffs.len()],
            semantic: vec![0.0; set.semantic.logits.len()],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.positions.iter().flatten().all(|v| *v == 0.0)
            && self.log_scales.iter().flatten().all(|v| *v == 0.0)
            && self.rotations.iter().flatten().all(|v| *v == 0.0)
            && self.opacity_logits.iter().all(|v| *v == 0.0)
            && self.appearance.iter().all(|v| *v == 0.0)
            && self.semantic.iter().all(|v| *v == 0.0)
    }

    pub fn add_assign(&mut self, o: &SetGradients) {
        fn add<const N: usize>(a: &mut [[f64; N]], b: &[[f64; N]]) {
            for (x, y) in a.iter_mut().zip(b) {
                for k in 0..N {
                    x[k] += y[k];
                }
            }
        }
        add(&mut self.positions, &o.positions);
        add(&mut self.log_scales, &o.log_scales);
        add(&mut self.rotations, &o.rotations);
        for (x, y) in self.opacity_logits.iter_mut().zip(&o.opacity_logits) {
            *x += y;
        }
        for (x, y) in self.appearance.iter_mut().zip(&o.appearance) {
            *x += y;
        }
        for (x, y) in self.semantic.iter_mut().zip(&o.semantic) {
            *x += y;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectGradients {
    pub set: SetGradients,
    pub delta_translations: Vec<[f64; 3]>,
    pub delta_yaws: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGradients {
    pub background: SetGradients,
    pub objects: Vec<ObjectGradients>,
    pub sky: Vec<f64>,
}

impl SceneGradients {
    pub fn zeros_like(scene: &SceneGraph) -> Self {
        Self {
            background: SetGradients::zeros_like(&scene.background),
            objects: scene
                .objects
                .iter()
                .map(|o| ObjectGradients {
                    set: SetGradients::zeros_like(&o.gaussians),
                    delta_translations: vec![[0.0; 3]; o.track.frame_count()],
                    delta_yaws: vec![0.0; o.track.frame_count()],
                })
                .collect(),
            sky: vec![0.0; scene.sky.texels.len()],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.background.is_zero()
            && self.objects.iter().all(|o| {
                o.set.is_zero()
                    && o.delta_yaws.iter().all(|v| *v == 0.0)
                    && o.delta_translations.iter().flatten().all(|v| *v == 0.0)
            })
            && self.sky.iter().all(|v| *v == 0.0)
    }

    pub fn add_assign(&mut self, o: &SceneGradients) {
        self.background.add_assign(&o.background);
        for (a, b) in self.objects.iter_mut().zip(&o.objects) {
            a.set.add_assign(&b.set);
            for (x, y) in a.delta_translations.iter_mut().zip(&b.delta_translations) {
                for k in 0..3 {
                    x[k] += y[k];
                }
            }
            for (x, y) in a.delta_yaws.iter_mut().zip(&b.delta_yaws) {
                *x += y;
            }
        }
        for (x, y) in self.sky.iter_mut().zip(&o.sky) {
            *x += y;
        }
    }
}

/// Per-point view statistics used by densification.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PointStat {
    /// Norm of the screen-space mean gradient in normalized device units.
    pub grad_ndc: f64,
    /// Whether the point reached at least one tile in this view.
    pub visible: bool,
    /// Largest blend weight `α·T` it received at any pixel.
    pub max_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensifyStats {
    pub background: Vec<PointStat>,
    pub objects: Vec<Vec<PointStat>>,
}

impl DensifyStats {
    pub fn zeros_like(scene: &SceneGraph) -> Self {
        Self {
            background: vec![PointStat::default(); scene.background.len()],
            objects: scene
                .objects
                .iter()
                .map(|o| vec![PointStat::default(); o.gaussians.len()])
                .collect(),
        }
    }
}

/// Per-splat accumulated screen-space gradients.
#[derive(Clone)]
struct SplatGrad {
    color: [f64; 3],
    depth: f64,
    opacity: f64,
    mean: [f64; 2],
    /// Gradient w.r.t. the conic, symmetric per-entry convention.
    conic: [f64; 3],
    max_weight: f64,
}

impl SplatGrad {
    fn zero() -> Self {
        Self {
            color: [0.0; 3],
            depth: 0.0,
            opacity: 0.0,
            mean: [0.0; 2],
            conic: [0.0; 3],
            max_weight: 0.0,
        }
    }
}

fn check_shape(img: &Option<Image>, cam: &Camera, channels: usize, name: &str) -> Result<()> {
    if let Some(i) = img {
        let (w, h) = (cam.width as usize, cam.height as usize);
        if i.width != w || i.height != h || i.channels != channels {
            return Err(Error::ShapeMismatch {
                context: format!("upstream {name} gradient"),
                expected: w * h * channels,
                found: i.width * i.height * i.channels,
            });
        }
    }
    Ok(())
}

/// Forward render followed by the analytic reverse pass.
pub fn render_backward(
    scene: &SceneGraph,
    cam: &Camera,
    cfg: &RenderConfig,
    upstream: &UpstreamGrads,
) -> Result<(SceneGradients, DensifyStats)> {
    let (_, state) = render_with_state(scene, cam, cfg)?;
    render_backward_from_state(scene, &state, upstream)
}

struct Contribution {
    local: usize,
    alpha: f64,
    gauss: f64,
    clamped: bool,
    t_before: f64,
}

/// Reverse pass through blending, projection, appearance, pose and
/// covariance. The semantic upstream gradient only reaches semantic logits.
pub fn render_backward_from_state(
    scene: &SceneGraph,
    state: &ForwardState,
    upstream: &UpstreamGrads,
) -> Result<(SceneGradients, DensifyStats)> {
    let cam = &state.camera;
    let cfg = &state.config;
    let m = scene.num_classes;
    check_shape(&upstream.color, cam, 3, "color")?;
    check_shape(&upstream.opacity, cam, 1, "opacity")?;
    check_shape(&upstream.depth, cam, 1, "depth")?;
    check_shape(&upstream.semantic, cam, m, "semantic")?;

    let prepared = &state.prepared;
    let splats = &prepared.splats;
    let world = &prepared.world;
    let (w, h) = (cam.width as usize, cam.height as usize);
    let ts = cfg.tile_size;
    let tiles_x = w.div_ceil(ts);

    struct TileGrad {
        splat: Vec<SplatGrad>,
        semantic: Vec<f64>,
        sky: Vec<(usize, [f64; 3])>,
    }
    let tile_grads: Vec<TileGrad> = state
        .bins
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let mut out = TileGrad {
                splat: vec![SplatGrad::zero(); list.len()],
                semantic: vec![0.0; list.len() * m],
                sky: Vec::new(),
            };
            let (tx, ty) = (tile % tiles_x, tile / tiles_x);
            let hot = gather_hot(list, splats);
            let mut contribs: Vec<Contribution> = Vec::new();
            for y in ty * ts..((ty + 1) * ts).min(h) {
                for x in tx * ts..((tx + 1) * ts).min(w) {
                    let pix = y * w + x;
                    let g_c: [f64; 3] = match &upstream.color {
                        Some(img) => [
                            img.data[pix * 3],
                            img.data[pix * 3 + 1],
                            img.data[pix * 3 + 2],
                        ],
                        None => [0.0; 3],
                    };
                    let g_o = upstream.opacity.as_ref().map_or(0.0, |i| i.data[pix]);
                    let g_d = upstream.depth.as_ref().map_or(0.0, |i| i.data[pix]);
                    let g_s = upstream
                        .semantic
                        .as_ref()
                        .map(|i| &i.data[pix * m..(pix + 1) * m]);
                    let t_final = state.transmittance[pix];
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);

                    let mut g_t = -g_o;
                    if cfg.composite_sky {
                        let dir = cam.ray_direction(px, py);
                        let sky = scene.sky.sample(&dir);
                        g_t += g_c[0] * sky[0] + g_c[1] * sky[1] + g_c[2] * sky[2];
                        if g_c != [0.0; 3] {
                            for (idx, wt) in scene.sky.taps(&dir) {
                                let s = wt * t_final;
                                out.sky.push((idx, [s * g_c[0], s * g_c[1], s * g_c[2]]));
                            }
                        }
                    }

                    contribs.clear();
                    let mut t = 1.0;
                    for (local, s) in hot[..state.consumed[pix] as usize].iter().enumerate() {
                        if let Some((alpha, gauss, clamped)) = splat_alpha(s, px, py, cfg) {
                            contribs.push(Contribution {
                                local,
                                alpha,
                                gauss,
                                clamped,
                                t_before: t,
                            });
                            t *= 1.0 - alpha;
                        }
                    }

                    let mut r = 0.0;
                    for c in contribs.iter().rev() {
                        let s = &splats[list[c.local] as usize];
                        let sh = &hot[c.local];
                        let g = &mut out.splat[c.local];
                        let wgt = c.alpha * c.t_before;
                        g.max_weight = g.max_weight.max(wgt);
                        for ch in 0..3 {
                            g.color[ch] += g_c[ch] * wgt;
                        }
                        g.depth += g_d * wgt;
                        if let Some(gs) = g_s {
                            for (acc, v) in out.semantic[c.local * m..(c.local + 1) * m]
                                .iter_mut()
                                .zip(gs)
                            {
                                *acc += v * wgt;
                            }
                        }
                        let v = g_c[0] * s.color[0]
                            + g_c[1] * s.color[1]
                            + g_c[2] * s.color[2]
                            + g_d * s.depth;
                        let d_alpha = c.t_before * (v - r) - g_t * t_final / (1.0 - c.alpha);
                        r = c.alpha * v + (1.0 - c.alpha) * r;
                        if c.clamped {
                            continue;
                        }
                        g.opacity += d_alpha * c.gauss;
                        let d_power = d_alpha * sh.opacity * c.gauss;
                        let dx = px - sh.mean[0];
                        let dy = py - sh.mean[1];
                        let [a, b, cc] = sh.conic;
                        g.mean[0] += d_power * (a * dx + b * dy);
                        g.mean[1] += d_power * (b * dx + cc * dy);
                        g.conic[0] += -0.5 * d_power * dx * dx;
                        g.conic[1] += -0.5 * d_power * dx * dy;
                        g.conic[2] += -0.5 * d_power * dy * dy;
                    }
                }
            }
            out
        })
        .collect();

    let mut per_splat = vec![SplatGrad::zero(); splats.len()];
    let mut per_splat_sem = vec![0.0; splats.len() * m];
    let mut grads = SceneGradients::zeros_like(scene);
    for (tile, tg) in tile_grads.iter().enumerate() {
        for (local, &k) in state.bins[tile].iter().enumerate() {
            let k = k as usize;
            let src = &tg.splat[local];
            let dst = &mut per_splat[k];
            for ch in 0..3 {
                dst.color[ch] += src.color[ch];
                dst.conic[ch] += src.conic[ch];
            }
            dst.depth += src.depth;
            dst.opacity += src.opacity;
            dst.mean[0] += src.mean[0];
            dst.mean[1] += src.mean[1];
            dst.max_weight = dst.max_weight.max(src.max_weight);
            for c in 0..m {
                per_splat_sem[k * m + c] += tg.semantic[local * m + c];
            }
        }
        for (idx, g) in &tg.sky {
            for ch in 0..3 {
                grads.sky[idx * 3 + ch] += g[ch];
            }
        }
    }

    struct PointGrad {
        mu: Vec3,
        rot: Mat3,
        log_scale: Vec3,
        opacity_logit: f64,
        sh: Vec<f64>,
        grad_ndc: f64,
    }
    let center = cam.center();
    let point_grads: Vec<PointGrad> = splats
        .par_iter()
        .zip(per_splat.par_iter())
        .map(|(s, g)| {
            let i = s.source;
            let mu = world.positions[i];
            let cov = covariance_from_rotation(&world.rotations[i], &world.log_scales[i]);
            let [a, b, c] = s.hot.conic;
            let q = nalgebra::Matrix2::new(a, b, b, c);
            let dq = nalgebra::Matrix2::new(g.conic[0], g.conic[1], g.conic[1], g.conic[2]);
            let dsig = -(q * dq * q);
            let (mut d_mu, d_cov) = project_gaussian_backward(
                &mu,
                &cov,
                cam,
                g.mean,
                CovGrad2 {
                    xx: dsig[(0, 0)],
                    xy: 0.5 * (dsig[(0, 1)] + dsig[(1, 0)]),
                    yy: dsig[(1, 1)],
                },
                g.depth,
            );
            let (d_sh, d_dir) =
                sh_color_backward(world.sh_of(i), &(mu - center), world.sh_degree, &g.color)
                    .unwrap_or_else(|_| (vec![0.0; world.sh_stride()], Vec3::zeros()));
            d_mu += d_dir;
            let (d_rot, d_log) = covariance_from_rotation_backward(
                &world.rotations[i],
                &world.log_scales[i],
                &d_cov,
            );
            let o = world.opacities[i];
            PointGrad {
                mu: d_mu,
                rot: d_rot,
                log_scale: d_log,
                opacity_logit: g.opacity * o * (1.0 - o),
                sh: d_sh,
                grad_ndc: (g.mean[0] * 0.5 * w as f64).hypot(g.mean[1] * 0.5 * h as f64),
            }
        })
        .collect();

    let mut stats = DensifyStats::zeros_like(scene);
    let mut pose_rot = vec![Mat3::zeros(); scene.objects.len()];
    let mut pose_trans = vec![Vec3::zeros(); scene.objects.len()];
    let t = cfg.timestep;
    for ((s, pg), sg) in splats.iter().zip(&point_grads).zip(&per_splat) {
        let i = s.source;
        let stat = PointStat {
            grad_ndc: pg.grad_ndc,
            visible: s.tiles[0] != s.tiles[1],
            max_weight: sg.max_weight,
        };
        match world.origins[i] {
            Origin::Background(j) => {
                let set = &scene.background;
                let out = &mut grads.background;
                scatter_point(
                    set,
                    out,
                    j,
                    &pg.mu,
                    &pg.rot,
                    &pg.log_scale,
                    pg.opacity_logit,
                    &pg.sh,
                    t,
                    scene.num_frames,
                );
                stats.background[j] = stat;
            }
            Origin::Object(k, j) => {
                let obj = &scene.objects[k];
                let pose = world.object_poses[k].expect("assembled object has a pose");
                let r_o = quat_to_rotation(obj.gaussians.rotations[j]);
                let mu_o = Vec3::from(obj.gaussians.positions[j]);
                let d_mu_o = pose.rotation.transpose() * pg.mu;
                let d_rot_o = pose.rotation.transpose() * pg.rot;
                pose_rot[k] += pg.mu * mu_o.transpose() + pg.rot * r_o.transpose();
                pose_trans[k] += pg.mu;
                let out = &mut grads.objects[k].set;
                scatter_point(
                    &obj.gaussians,
                    out,
                    j,
                    &d_mu_o,
                    &d_rot_o,
                    &pg.log_scale,
                    pg.opacity_logit,
                    &pg.sh,
                    t,
                    scene.num_frames,
                );
                stats.objects[k][j] = stat;
            }
        }
    }
    for (k, s) in splats.iter().enumerate() {
        let sem = &per_splat_sem[k * m..(k + 1) * m];
        match world.origins[s.source] {
            Origin::Background(j) => add_semantic(
                &scene.background,
                &mut grads.background,
                j,
                sem,
                scene.vehicle_class,
            ),
            Origin::Object(o, j) => add_semantic(
                &scene.objects[o].gaussians,
                &mut grads.objects[o].set,
                j,
                sem,
                scene.vehicle_class,
            ),
        }
    }
    for (k, obj) in scene.objects.iter().enumerate() {
        if world.object_poses[k].is_none() {
            continue;
        }
        let base = obj.track.rotations[t];
        let d_rz = base * rot_z_derivative(obj.track.delta_yaws[t]);
        grads.objects[k].delta_yaws[t] += pose_rot[k].component_mul(&d_rz).sum();
        for a in 0..3 {
            grads.objects[k].delta_translations[t][a] += pose_trans[k][a];
        }
    }
    Ok((grads, stats))
}

fn add_semantic(set: &GaussianSet, out: &mut SetGradients, j: usize, sem: &[f64], vehicle: usize) {
    match set.semantic.kind {
        SemanticKind::BackgroundVector => {
            let m = sem.len();
            for c in 0..m {
                out.semantic[j * m + c] += sem[c];
            }
        }
        SemanticKind::ObjectScalar => out.semantic[j] += sem[vehicle],
    }
}

#[allow(clippy::too_many_arguments)]
fn scatter_point(
    set: &GaussianSet,
    out: &mut SetGradients,
    j: usize,
    d_mu: &Vec3,
    d_rot: &Mat3,
    d_log: &Vec3,
    d_logit: f64,
    d_sh: &[f64],
    t: usize,
    num_frames: usize,
) {
    for a in 0..3 {
        out.positions[j][a] += d_mu[a];
        out.log_scales[j][a] += d_log[a];
    }
    let dq = quat_to_rotation_backward(set.rotations[j], d_rot);
    for a in 0..4 {
        out.rotations[j][a] += dq[a];
    }
    out.opacity_logits[j] += d_logit;
    let k = set.appearance.fourier_k;
    let per_k = d_sh.len();
    let basis = fourier_basis(k, t as f64, num_frames);
    let base = j * set.appearance.stride();
    for (i, b) in basis.iter().enumerate() {
        for (q, g) in d_sh.iter().enumerate() {
            out.appearance[base + i * per_k + q] += g * b;
        }
    }
}
