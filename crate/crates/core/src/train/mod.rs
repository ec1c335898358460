//! Optimization loop: loss assembly, Adam with per-group schedules, adaptive
//! density control and pose refinement.

mod adam;
mod control;
mod loss;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{AdamState, ExpSchedule, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use control::{
    densify_and_prune, reset_opacity, sampled_mean, ControlParams, ControlResult, DensifyConfig,
    PointAccum,
};
pub use loss::{
    depth_keep_count, loss_color, loss_depth, loss_reg, loss_semantic, loss_sky, ssim,
    ssim_with_grad, LossGrad, LossWeights, PROB_EPS, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW,
};

use crate::error::{Error, Result};
use crate::geometry::{mat3_from_row_major, Mat3, Vec3};
use crate::image::Image;
use crate::ingest::{project_lidar_depth, Dataset, IGNORE_LABEL};
use crate::raster::{
    render_backward_from_state, render_with_state, DensifyStats, IncludeFilter, RenderConfig,
    SceneGradients, SetGradients, UpstreamGrads,
};
use crate::scene::{save_checkpoint, GaussianSet, SceneGraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    /// Multiplied by the model extent (20 m background, box diagonal for
    /// objects).
    pub position: ExpSchedule,
    pub log_scale: ExpSchedule,
    pub rotation: ExpSchedule,
    pub opacity: ExpSchedule,
    pub appearance: ExpSchedule,
    pub semantic: ExpSchedule,
    pub delta_translation: ExpSchedule,
    pub delta_yaw: ExpSchedule,
    pub sky: ExpSchedule,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: ExpSchedule::new(1.6e-4, 1.6e-6),
            log_scale: ExpSchedule::constant(5e-3),
            rotation: ExpSchedule::constant(1e-3),
            opacity: ExpSchedule::constant(0.05),
            appearance: ExpSchedule::constant(2.5e-3),
            semantic: ExpSchedule::constant(1e-2),
            delta_translation: ExpSchedule::new(5e-3, 5e-5),
            delta_yaw: ExpSchedule::new(1e-3, 1e-5),
            sky: ExpSchedule::new(1e-2, 1e-4),
        }
    }
}

impl LearningRates {
    fn validate(&self) -> Result<()> {
        self.position.validate("position")?;
        self.log_scale.validate("log_scale")?;
        self.rotation.validate("rotation")?;
        self.opacity.validate("opacity")?;
        self.appearance.validate("appearance")?;
        self.semantic.validate("semantic")?;
        self.delta_translation.validate("delta_translation")?;
        self.delta_yaw.validate("delta_yaw")?;
        self.sky.validate("sky")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub lr: LearningRates,
    pub optimize_poses: bool,
    pub densify: DensifyConfig,
    /// First iteration of the object entropy term; defaults to the end of
    /// densification.
    pub reg_start: Option<usize>,
    pub tile_size: usize,
    /// Write an intermediate checkpoint every this many iterations (0: off).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 30000,
            seed: 0,
            weights: LossWeights::default(),
            lr: LearningRates::default(),
            optimize_poses: true,
            densify: DensifyConfig::default(),
            reg_start: None,
            tile_size: 16,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be positive"));
        }
        if self.densify.interval == 0 || self.tile_size == 0 {
            return Err(Error::invalid(
                "densify interval and tile size must be positive",
            ));
        }
        self.weights.validate()?;
        self.lr.validate()
    }

    pub fn reg_start(&self) -> usize {
        self.reg_start.unwrap_or(self.densify.end)
    }
}

/// Clean per-frame object poses, for residual reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseTruth {
    pub objects: Vec<ObjectPoseTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectPoseTruth {
    pub id: u32,
    pub rotations: Vec<[f64; 9]>,
    pub translations: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseResidual {
    pub median_translation: f64,
    pub median_yaw_deg: f64,
    pub max_translation: f64,
    pub max_yaw_deg: f64,
    /// Same statistics after removing each object's mean error in its own
    /// frame. Shifting or turning an object model while moving all its
    /// poses the opposite way leaves every render unchanged, so that part
    /// of the error is not observable from images.
    pub aligned_median_translation: f64,
    pub aligned_median_yaw_deg: f64,
    pub samples: usize,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn wrap_angle(a: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let r = a.rem_euclid(tau);
    if r > std::f64::consts::PI {
        r - tau
    } else {
        r
    }
}

/// Error of each object's effective pose against the true pose over the
/// given timesteps.
pub fn pose_residual(
    scene: &SceneGraph,
    truth: &PoseTruth,
    timesteps: &[usize],
) -> Option<PoseResidual> {
    let mut dt = Vec::new();
    let mut da = Vec::new();
    let mut aligned_t = Vec::new();
    let mut aligned_a = Vec::new();
    for t in truth.objects.iter() {
        let Some(obj) = scene.object(t.id) else {
            continue;
        };
        // Error of the learned pose expressed in the true object frame.
        let mut local: Vec<(Vec3, f64)> = Vec::new();
        for &ts in timesteps {
            if !obj.track.is_valid(ts) || ts >= t.rotations.len() {
                continue;
            }
            let pose = obj.track.effective_pose(ts).ok()?;
            let r_true: Mat3 = mat3_from_row_major(&t.rotations[ts]);
            let t_true = Vec3::from(t.translations[ts]);
            dt.push((pose.translation - t_true).norm());
            let rel = r_true.transpose() * pose.rotation;
            let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
            da.push(c.acos().to_degrees());
            local.push((
                r_true.transpose() * (pose.translation - t_true),
                rel[(1, 0)].atan2(rel[(0, 0)]),
            ));
        }
        if local.is_empty() {
            continue;
        }
        let n = local.len() as f64;
        let mean_t = local.iter().fold(Vec3::zeros(), |a, (v, _)| a + v) / n;
        let (s, c) = local
            .iter()
            .fold((0.0, 0.0), |(s, c), (_, a)| (s + a.sin(), c + a.cos()));
        let mean_a = s.atan2(c);
        for (v, a) in &local {
            aligned_t.push((v - mean_t).norm());
            aligned_a.push(wrap_angle(a - mean_a).abs().to_degrees());
        }
    }
    if dt.is_empty() {
        return None;
    }
    let max_translation = dt.iter().cloned().fold(0.0, f64::max);
    let max_yaw_deg = da.iter().cloned().fold(0.0, f64::max);
    Some(PoseResidual {
        median_translation: median(&mut dt),
        median_yaw_deg: median(&mut da),
        max_translation,
        max_yaw_deg,
        aligned_median_translation: median(&mut aligned_t),
        aligned_median_yaw_deg: median(&mut aligned_a),
        samples: da.len(),
    })
}

/// Loss terms of one iteration; absent terms had no input or zero weight.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub color: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sky: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub semantic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub frame: usize,
    pub timestep: usize,
    #[serde(flatten)]
    pub loss: LossTerms,
    pub points: usize,
    pub background_points: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pose_residual: Option<PoseResidual>,
}

struct SetOptimizer {
    position: AdamState,
    log_scale: AdamState,
    rotation: AdamState,
    opacity: AdamState,
    appearance: AdamState,
    semantic: AdamState,
}

struct SetRates {
    position: f64,
    log_scale: f64,
    rotation: f64,
    opacity: f64,
    appearance: f64,
    semantic: f64,
}

impl SetOptimizer {
    fn new(set: &GaussianSet) -> Self {
        let n = set.len();
        Self {
            position: AdamState::new(3 * n),
            log_scale: AdamState::new(3 * n),
            rotation: AdamState::new(4 * n),
            opacity: AdamState::new(n),
            appearance: AdamState::new(set.appearance.coeffs.len()),
            semantic: AdamState::new(set.semantic.logits.len()),
        }
    }

    fn step(&mut self, set: &mut GaussianSet, g: &SetGradients, r: &SetRates) {
        self.position.update(
            set.positions.as_flattened_mut(),
            g.positions.as_flattened(),
            r.position,
        );
        self.log_scale.update(
            set.log_scales.as_flattened_mut(),
            g.log_scales.as_flattened(),
            r.log_scale,
        );
        self.rotation.update(
            set.rotations.as_flattened_mut(),
            g.rotations.as_flattened(),
            r.rotation,
        );
        self.opacity
            .update(&mut set.opacity_logits, &g.opacity_logits, r.opacity);
        self.appearance
            .update(&mut set.appearance.coeffs, &g.appearance, r.appearance);
        self.semantic
            .update(&mut set.semantic.logits, &g.semantic, r.semantic);
    }

    fn remap(&mut self, sources: &[Option<usize>], set: &GaussianSet) {
        self.position.remap(sources, 3);
        self.log_scale.remap(sources, 3);
        self.rotation.remap(sources, 4);
        self.opacity.remap(sources, 1);
        self.appearance.remap(sources, set.appearance.stride());
        self.semantic.remap(sources, set.semantic.width());
    }
}

struct PoseOptimizer {
    translation: AdamState,
    yaw: AdamState,
}

/// Iteration-by-iteration trainer over one dataset.
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    pub scene: SceneGraph,
    pub config: TrainConfig,
    pub truth: Option<PoseTruth>,
    depth_targets: Vec<Vec<f64>>,
    background_opt: SetOptimizer,
    object_opts: Vec<SetOptimizer>,
    pose_opts: Vec<PoseOptimizer>,
    sky_opt: AdamState,
    background_accum: PointAccum,
    object_accums: Vec<PointAccum>,
    order: Vec<usize>,
    iteration: usize,
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, scene: SceneGraph, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        dataset.validate()?;
        scene.validate()?;
        if dataset.frames.is_empty() {
            return Err(Error::invalid("dataset has no training frames"));
        }
        if scene.num_classes != dataset.num_classes() || scene.num_frames != dataset.num_frames {
            return Err(Error::invalid(
                "scene and dataset disagree on class or frame count",
            ));
        }
        for o in &scene.objects {
            if o.track.frame_count() != dataset.num_frames {
                return Err(Error::invalid(format!(
                    "object {} track length mismatch",
                    o.id
                )));
            }
        }
        let depth_targets = dataset
            .frames
            .iter()
            .map(|f| project_lidar_depth(f).depth)
            .collect();
        Ok(Self {
            dataset,
            background_opt: SetOptimizer::new(&scene.background),
            object_opts: scene
                .objects
                .iter()
                .map(|o| SetOptimizer::new(&o.gaussians))
                .collect(),
            pose_opts: scene
                .objects
                .iter()
                .map(|o| PoseOptimizer {
                    translation: AdamState::new(3 * o.track.frame_count()),
                    yaw: AdamState::new(o.track.frame_count()),
                })
                .collect(),
            sky_opt: AdamState::new(scene.sky.texels.len()),
            background_accum: PointAccum::new(scene.background.len()),
            object_accums: scene
                .objects
                .iter()
                .map(|o| PointAccum::new(o.gaussians.len()))
                .collect(),
            scene,
            config,
            truth: None,
            depth_targets,
            order: Vec::new(),
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    fn next_frame(&mut self) -> usize {
        let n = self.dataset.frames.len();
        let pos = self.iteration % n;
        if pos == 0 || self.order.len() != n {
            let epoch = (self.iteration / n) as u64;
            self.order = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.config.seed, epoch, 1));
            self.order.shuffle(&mut rng);
        }
        self.order[pos]
    }

    fn render_config(&self, timestep: usize) -> RenderConfig {
        RenderConfig {
            tile_size: self.config.tile_size,
            ..RenderConfig::at(timestep)
        }
    }

    /// Loss terms and gradients for one dataset frame at the current
    /// iteration, without touching any parameter.
    pub fn compute(&self, frame_index: usize) -> Result<(LossTerms, SceneGradients, DensifyStats)> {
        let frame = &self.dataset.frames[frame_index];
        let w = &self.config.weights;
        let cfg = self.render_config(frame.timestep);
        let (out, state) = render_with_state(&self.scene, &frame.camera, &cfg)?;
        let mut terms = LossTerms::default();

        let color = loss_color(&out.color, &frame.image, w.ssim)?;
        terms.color = color.value;
        let mut total = color.value;
        let mut up = UpstreamGrads {
            color: Some(color.grad),
            opacity: None,
            depth: None,
            semantic: None,
        };
        if w.depth > 0.0 {
            if let Some(d) = loss_depth(&out.depth, &self.depth_targets[frame_index])? {
                terms.depth = Some(d.value);
                total += w.depth * d.value;
                up.depth = Some(scaled(d.grad, w.depth));
            }
        }
        if let (true, Some(mask)) = (w.sky > 0.0, &frame.sky_mask) {
            let s = loss_sky(&out.opacity, mask)?;
            terms.sky = Some(s.value);
            total += w.sky * s.value;
            up.opacity = Some(scaled(s.grad, w.sky));
        }
        if let (true, Some(labels)) = (w.semantic > 0.0, &frame.semantic) {
            if let Some(s) = loss_semantic(&out.semantic, labels, IGNORE_LABEL)? {
                terms.semantic = Some(s.value);
                total += w.semantic * s.value;
                up.semantic = Some(scaled(s.grad, w.semantic));
            }
        }
        let (mut grads, stats) = render_backward_from_state(&self.scene, &state, &up)?;

        if w.reg > 0.0
            && self.iteration >= self.config.reg_start()
            && !self.scene.objects.is_empty()
        {
            let ocfg = RenderConfig {
                filter: IncludeFilter::objects_only(),
                composite_sky: false,
                ..cfg
            };
            let (oout, ostate) = render_with_state(&self.scene, &frame.camera, &ocfg)?;
            let r = loss_reg(&oout.opacity)?;
            terms.reg = Some(r.value);
            total += w.reg * r.value;
            let oup = UpstreamGrads {
                color: None,
                opacity: Some(scaled(r.grad, w.reg)),
                depth: None,
                semantic: None,
            };
            let (og, _) = render_backward_from_state(&self.scene, &ostate, &oup)?;
            grads.add_assign(&og);
        }
        terms.total = total;
        Ok((terms, grads, stats))
    }

    /// Runs one iteration and returns its log record.
    pub fn step(&mut self) -> Result<IterationLog> {
        let it = self.iteration;
        let frame_index = self.next_frame();
        let timestep = self.dataset.frames[frame_index].timestep;
        let (terms, grads, stats) = self.compute(frame_index)?;
        if !terms.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                detail: serde_json::to_string(&terms).unwrap_or_default(),
            });
        }
        self.apply(&grads, it);

        let dcfg = self.config.densify.clone();
        let number = it + 1;
        if dcfg.enabled && number <= dcfg.end {
            self.background_accum.add(&stats.background);
            for (a, s) in self.object_accums.iter_mut().zip(&stats.objects) {
                a.add(s);
            }
            if number > dcfg.start && number % dcfg.interval == 0 {
                self.adaptive_control(number);
            }
            if dcfg.opacity_reset && number % dcfg.opacity_reset_interval == 0 {
                self.reset_opacity();
            }
        }
        self.iteration += 1;
        let timesteps: Vec<usize> = self.dataset.frames.iter().map(|f| f.timestep).collect();
        Ok(IterationLog {
            iteration: it,
            frame: frame_index,
            timestep,
            loss: terms,
            points: self.scene.total_points(),
            background_points: self.scene.background.len(),
            pose_residual: self
                .truth
                .as_ref()
                .and_then(|t| pose_residual(&self.scene, t, &timesteps)),
        })
    }

    fn set_rates(&self, it: usize, extent: f64) -> SetRates {
        let lr = &self.config.lr;
        let n = self.config.iterations;
        SetRates {
            position: lr.position.at(it, n) * extent,
            log_scale: lr.log_scale.at(it, n),
            rotation: lr.rotation.at(it, n),
            opacity: lr.opacity.at(it, n),
            appearance: lr.appearance.at(it, n),
            semantic: lr.semantic.at(it, n),
        }
    }

    fn apply(&mut self, g: &SceneGradients, it: usize) {
        let n = self.config.iterations;
        let r = self.set_rates(it, self.config.densify.background_extent);
        self.background_opt
            .step(&mut self.scene.background, &g.background, &r);
        for k in 0..self.scene.objects.len() {
            let r = self.set_rates(it, self.scene.objects[k].track.box_diagonal());
            let obj = &mut self.scene.objects[k];
            self.object_opts[k].step(&mut obj.gaussians, &g.objects[k].set, &r);
            if self.config.optimize_poses {
                let p = &mut self.pose_opts[k];
                let mut flat: Vec<f64> = obj
                    .track
                    .delta_translations
                    .iter()
                    .flat_map(|v| [v.x, v.y, v.z])
                    .collect();
                p.translation.update(
                    &mut flat,
                    g.objects[k].delta_translations.as_flattened(),
                    self.config.lr.delta_translation.at(it, n),
                );
                for (v, c) in obj.track.delta_translations.iter_mut().zip(flat.chunks(3)) {
                    *v = Vec3::new(c[0], c[1], c[2]);
                }
                p.yaw.update(
                    &mut obj.track.delta_yaws,
                    &g.objects[k].delta_yaws,
                    self.config.lr.delta_yaw.at(it, n),
                );
            }
        }
        self.sky_opt.update(
            &mut self.scene.sky.texels,
            &g.sky,
            self.config.lr.sky.at(it, n),
        );
    }

    fn adaptive_control(&mut self, number: usize) {
        let dcfg = self.config.densify.clone();
        let prune_large = number > dcfg.opacity_reset_interval;
        let seed = self.config.seed;
        let r = densify_and_prune(
            &self.scene.background,
            &self.background_accum,
            &ControlParams {
                cfg: &dcfg,
                extent: dcfg.background_extent,
                prune_large,
                track: None,
            },
            mix_seed(seed, number as u64, 2),
        );
        self.background_opt.remap(&r.sources, &r.set);
        self.scene.background = r.set;
        self.background_accum = PointAccum::new(self.scene.background.len());
        for k in 0..self.scene.objects.len() {
            let obj = &self.scene.objects[k];
            let r = densify_and_prune(
                &obj.gaussians,
                &self.object_accums[k],
                &ControlParams {
                    cfg: &dcfg,
                    extent: obj.track.box_diagonal(),
                    prune_large,
                    track: Some(&obj.track),
                },
                mix_seed(seed, number as u64, 3 + obj.id as u64),
            );
            self.object_opts[k].remap(&r.sources, &r.set);
            self.scene.objects[k].gaussians = r.set;
            self.object_accums[k] = PointAccum::new(self.scene.objects[k].gaussians.len());
        }
    }

    fn reset_opacity(&mut self) {
        let v = self.config.densify.opacity_reset_value;
        reset_opacity(&mut self.scene.background, v);
        self.background_opt.opacity.reset_moments();
        for (o, opt) in self.scene.objects.iter_mut().zip(&mut self.object_opts) {
            reset_opacity(&mut o.gaussians, v);
            opt.opacity.reset_moments();
        }
    }
}

fn scaled(mut img: Image, s: f64) -> Image {
    if s != 1.0 {
        img.data.iter_mut().for_each(|v| *v *= s);
    }
    img
}

/// Runs the full schedule, handing each iteration's record to `sink`.
pub fn train(
    dataset: &Dataset,
    scene: SceneGraph,
    config: &TrainConfig,
    truth: Option<PoseTruth>,
    mut sink: impl FnMut(&IterationLog, &SceneGraph) -> Result<()>,
) -> Result<SceneGraph> {
    let mut t = Trainer::new(dataset, scene, config.clone())?;
    t.truth = truth;
    while !t.is_done() {
        let log = t.step()?;
        sink(&log, &t.scene)?;
    }
    Ok(t.scene)
}

/// [`train`] writing `log.jsonl`, optional periodic checkpoints under
/// `checkpoints/NNNNNN` and the final checkpoint into `out`. A non-finite
/// loss leaves `diagnostics.json` next to the log.
pub fn train_to_dir(
    dataset: &Dataset,
    scene: SceneGraph,
    config: &TrainConfig,
    truth: Option<PoseTruth>,
    out: &Path,
) -> Result<SceneGraph> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join("log.jsonl");
    let file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    let every = config.checkpoint_every;
    let result = train(dataset, scene, config, truth, |rec, scene| {
        let line = serde_json::to_string(rec).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        if every > 0 && (rec.iteration + 1) % every == 0 {
            let dir = out
                .join("checkpoints")
                .join(format!("{:06}", rec.iteration + 1));
            save_checkpoint(scene, &dir)?;
        }
        Ok(())
    });
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    match result {
        Ok(scene) => {
            save_checkpoint(&scene, out)?;
            Ok(scene)
        }
        Err(e @ Error::NonFiniteLoss { .. }) => {
            let p = out.join("diagnostics.json");
            let body = serde_json::json!({ "error": e.to_string() });
            std::fs::write(&p, serde_json::to_vec_pretty(&body).unwrap_or_default())
                .map_err(|e| Error::io(&p, e))?;
            Err(e)
        }
        Err(e) => Err(e),
    }
}
