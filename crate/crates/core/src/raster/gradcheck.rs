//! Central finite-difference checks of [`render_backward`] for every
//! learnable parameter class.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{render, render_backward, RenderConfig, RenderOutputs, SceneGradients, UpstreamGrads};
use crate::error::Result;
use crate::geometry::Camera;
use crate::image::Image;
use crate::scene::SceneGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamClass {
    Position,
    LogScale,
    Rotation,
    OpacityLogit,
    Appearance,
    Semantic,
    DeltaTranslation,
    DeltaYaw,
    Sky,
}

impl ParamClass {
    pub const ALL: [ParamClass; 9] = [
        ParamClass::Position,
        ParamClass::LogScale,
        ParamClass::Rotation,
        ParamClass::OpacityLogit,
        ParamClass::Appearance,
        ParamClass::Semantic,
        ParamClass::DeltaTranslation,
        ParamClass::DeltaYaw,
        ParamClass::Sky,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamClass::Position => "position",
            ParamClass::LogScale => "log-scale",
            ParamClass::Rotation => "quaternion",
            ParamClass::OpacityLogit => "opacity logit",
            ParamClass::Appearance => "SH/Fourier coefficients",
            ParamClass::Semantic => "semantic logits",
            ParamClass::DeltaTranslation => "pose translation delta",
            ParamClass::DeltaYaw => "pose yaw delta",
            ParamClass::Sky => "cubemap texels",
        }
    }
}

/// Mutable views of every scalar of a parameter class, background first.
pub fn param_slots(scene: &mut SceneGraph, class: ParamClass) -> Vec<&mut f64> {
    let mut out: Vec<&mut f64> = Vec::new();
    if class == ParamClass::Sky {
        out.extend(scene.sky.texels.iter_mut());
        return out;
    }
    let bg = &mut scene.background;
    match class {
        ParamClass::Position => out.extend(bg.positions.iter_mut().flatten()),
        ParamClass::LogScale => out.extend(bg.log_scales.iter_mut().flatten()),
        ParamClass::Rotation => out.extend(bg.rotations.iter_mut().flatten()),
        ParamClass::OpacityLogit => out.extend(bg.opacity_logits.iter_mut()),
        ParamClass::Appearance => out.extend(bg.appearance.coeffs.iter_mut()),
        ParamClass::Semantic => out.extend(bg.semantic.logits.iter_mut()),
        _ => {}
    }
    for o in &mut scene.objects {
        let g = &mut o.gaussians;
        match class {
            ParamClass::Position => out.extend(g.positions.iter_mut().flatten()),
            ParamClass::LogScale => out.extend(g.log_scales.iter_mut().flatten()),
            ParamClass::Rotation => out.extend(g.rotations.iter_mut().flatten()),
            ParamClass::OpacityLogit => out.extend(g.opacity_logits.iter_mut()),
            ParamClass::Appearance => out.extend(g.appearance.coeffs.iter_mut()),
            ParamClass::Semantic => out.extend(g.semantic.logits.iter_mut()),
            ParamClass::DeltaTranslation => out.extend(
                o.track
                    .delta_translations
                    .iter_mut()
                    .flat_map(|v| v.iter_mut()),
            ),
            ParamClass::DeltaYaw => out.extend(o.track.delta_yaws.iter_mut()),
            ParamClass::Sky => unreachable!(),
        }
    }
    out
}

/// Gradient values in the same order as [`param_slots`].
pub fn gradient_values(grads: &SceneGradients, class: ParamClass) -> Vec<f64> {
    if class == ParamClass::Sky {
        return grads.sky.clone();
    }
    let mut out = Vec::new();
    let bg = &grads.background;
    match class {
        ParamClass::Position => out.extend(bg.positions.iter().flatten()),
        ParamClass::LogScale => out.extend(bg.log_scales.iter().flatten()),
        ParamClass::Rotation => out.extend(bg.rotations.iter().flatten()),
        ParamClass::OpacityLogit => out.extend(&bg.opacity_logits),
        ParamClass::Appearance => out.extend(&bg.appearance),
        ParamClass::Semantic => out.extend(&bg.semantic),
        _ => {}
    }
    for o in &grads.objects {
        let g = &o.set;
        match class {
            ParamClass::Position => out.extend(g.positions.iter().flatten()),
            ParamClass::LogScale => out.extend(g.log_scales.iter().flatten()),
            ParamClass::Rotation => out.extend(g.rotations.iter().flatten()),
            ParamClass::OpacityLogit => out.extend(&g.opacity_logits),
            ParamClass::Appearance => out.extend(&g.appearance),
            ParamClass::Semantic => out.extend(&g.semantic),
            ParamClass::DeltaTranslation => out.extend(o.delta_translations.iter().flatten()),
            ParamClass::DeltaYaw => out.extend(&o.delta_yaws),
            ParamClass::Sky => unreachable!(),
        }
    }
    out
}

/// Random per-pixel weights making `L = Σ w·output` a scalar loss.
#[derive(Debug, Clone)]
pub struct LinearLoss {
    pub upstream: UpstreamGrads,
}

impl LinearLoss {
    /// Weights on every channel. The semantic channel only carries weight
    /// when `semantic` is set, since its gradient reaches semantic logits
    /// alone.
    pub fn random(seed: u64, cam: &Camera, num_classes: usize, semantic: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (cam.width as usize, cam.height as usize);
        let mut img = |c: usize| {
            let mut i = Image::new(w, h, c);
            for v in &mut i.data {
                *v = rng.random_range(-1.0..1.0);
            }
            i
        };
        let color = img(3);
        let opacity = img(1);
        let mut depth = img(1);
        depth.data.iter_mut().for_each(|v| *v *= 0.2);
        let sem = img(num_classes);
        Self {
            upstream: UpstreamGrads {
                color: Some(color),
                opacity: Some(opacity),
                depth: Some(depth),
                semantic: semantic.then_some(sem),
            },
        }
    }

    pub fn value(&self, out: &RenderOutputs) -> f64 {
        let dot = |a: &Option<Image>, b: &Image| {
            a.as_ref().map_or(0.0, |a| {
                a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum::<f64>()
            })
        };
        dot(&self.upstream.color, &out.color)
            + dot(&self.upstream.opacity, &out.opacity)
            + dot(&self.upstream.depth, &out.depth)
            + dot(&self.upstream.semantic, &out.semantic)
    }
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub class: ParamClass,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Whether every perturbation left the set of blended and clamped
    /// pixel/Gaussian pairs unchanged.
    pub smooth: bool,
}

impl GradCheck {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`, zero when both
    /// vanish.
    pub fn relative_error(&self) -> f64 {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = self
            .analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, b)| a - b)
            .collect();
        let scale = norm(&self.analytic).max(norm(&self.numeric));
        if scale == 0.0 {
            0.0
        } else {
            norm(&diff) / scale
        }
    }
}

/// Compares analytic gradients of `loss` for `class` against central
/// differences with step `h`.
pub fn check_gradients(
    scene: &SceneGraph,
    cam: &Camera,
    cfg: &RenderConfig,
    loss: &LinearLoss,
    class: ParamClass,
    h: f64,
) -> Result<GradCheck> {
    let (grads, _) = render_backward(scene, cam, cfg, &loss.upstream)?;
    let analytic = gradient_values(&grads, class);
    let base = render(scene, cam, cfg)?.stats;
    let mut work = scene.clone();
    let n = param_slots(&mut work, class).len();
    let mut numeric = Vec::with_capacity(n);
    let mut smooth = true;
    for i in 0..n {
        let orig = *param_slots(&mut work, class)[i];
        *param_slots(&mut work, class)[i] = orig + h;
        let plus = render(&work, cam, cfg)?;
        *param_slots(&mut work, class)[i] = orig - h;
        let minus = render(&work, cam, cfg)?;
        *param_slots(&mut work, class)[i] = orig;
        for s in [&plus.stats, &minus.stats] {
            smooth &= s.blended == base.blended
                && s.clamped == base.clamped
                && s.projected == base.projected;
        }
        numeric.push((loss.value(&plus) - loss.value(&minus)) / (2.0 * h));
    }
    Ok(GradCheck {
        class,
        analytic,
        numeric,
        smooth,
    })
}
