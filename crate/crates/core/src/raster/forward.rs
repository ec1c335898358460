use rayon::prelude::*;

use super::assemble::{assemble_world_set, IncludeFilter, Origin, WorldSet};
use crate::error::{Error, Result};
use crate::geometry::{covariance_from_rotation, eval_sh_color, project_gaussian, Camera};
use crate::image::Image;
use crate::scene::SceneGraph;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderConfig {
    pub tile_size: usize,
    pub alpha_threshold: f64,
    pub alpha_clamp: f64,
    /// Blending stops once transmittance drops below this.
    pub saturation_stop: f64,
    pub filter: IncludeFilter,
    pub composite_sky: bool,
    pub timestep: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            tile_size: 16,
            alpha_threshold: 1.0 / 255.0,
            alpha_clamp: 0.99,
            saturation_stop: 1e-4,
            filter: IncludeFilter::all(),
            composite_sky: true,
            timestep: 0,
        }
    }
}

impl RenderConfig {
    pub fn at(timestep: usize) -> Self {
        Self {
            timestep,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if self.tile_size == 0 {
            return Err(Error::invalid("tile size must be at least 1"));
        }
        if !unit(self.alpha_threshold) || !unit(self.alpha_clamp) || !unit(self.saturation_stop) {
            return Err(Error::invalid("render thresholds must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RenderStats {
    pub projected: usize,
    pub culled: usize,
    /// Projected Gaussians dropped for a near-singular screen covariance.
    pub degenerate: usize,
    /// `(object id, projected point count)` for every object in the scene.
    pub visible_per_object: Vec<(u32, usize)>,
    /// Pixel/Gaussian pairs that passed the alpha threshold.
    pub blended: usize,
    /// Of those, pairs whose alpha hit the clamp.
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutputs {
    pub color: Image,
    pub opacity: Image,
    pub depth: Image,
    pub semantic: Image,
    pub stats: RenderStats,
}

/// A projected Gaussian ready for blending.
#[derive(Debug, Clone)]
pub(crate) struct Splat {
    pub hot: SplatHot,
    pub depth: f64,
    pub color: [f64; 3],
    pub source: usize,
    /// Tile range `[x0, x1) × [y0, y1)`.
    pub tiles: [usize; 4],
}

/// The part of a splat read for every pixel it is tested against. Tiles
/// gather these into contiguous buffers.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SplatHot {
    pub mean: [f64; 2],
    /// Inverse screen covariance (xx, xy, yy).
    pub conic: [f64; 3],
    pub opacity: f64,
    /// Exponents below this cannot reach the alpha threshold; lets most
    /// misses skip the `exp`.
    pub min_power: f64,
}

pub(crate) struct Prepared {
    pub world: WorldSet,
    pub splats: Vec<Splat>,
    pub stats: RenderStats,
}

const DEGENERATE_DET: f64 = 1e-12;
/// Slack on the exponent pre-test so that the exact `o·exp(p) < threshold`
/// comparison alone decides near the boundary.
const POWER_MARGIN: f64 = 1e-6;

/// Screen-space half extent, in standard deviations, beyond which a
/// Gaussian of opacity `o` can no longer reach `threshold`. Never less
/// than 3.
fn cutoff_sigmas(o: f64, threshold: f64) -> Option<f64> {
    let ratio = o / threshold;
    if ratio < 1.0 {
        return None;
    }
    Some((2.0 * ratio.ln()).sqrt().max(3.0))
}

pub(crate) fn prepare(scene: &SceneGraph, cam: &Camera, cfg: &RenderConfig) -> Result<Prepared> {
    cfg.validate()?;
    cam.validate()?;
    let world = assemble_world_set(scene, cfg.timestep, &cfg.filter);
    let center = cam.center();
    let ts = cfg.tile_size;
    let tiles_x = (cam.width as usize).div_ceil(ts);
    let tiles_y = (cam.height as usize).div_ceil(ts);

    enum Outcome {
        Culled,
        Degenerate,
        Splat(Splat),
    }
    let outcomes: Vec<Outcome> = (0..world.len())
        .into_par_iter()
        .map(|i| {
            let cov = covariance_from_rotation(&world.rotations[i], &world.log_scales[i]);
            let Some(p) = project_gaussian(&world.positions[i], &cov, cam, i) else {
                return Outcome::Culled;
            };
            let [a, b, c] = p.cov2d;
            let det = a * c - b * b;
            if !(det > DEGENERATE_DET) {
                return Outcome::Degenerate;
            }
            let conic = [c / det, -b / det, a / det];
            let color = eval_sh_color(
                world.sh_of(i),
                &(world.positions[i] - center),
                world.sh_degree,
            )
            .unwrap_or([0.0; 3]);
            let o = world.opacities[i];
            let tiles = match cutoff_sigmas(o, cfg.alpha_threshold) {
                None => [0; 4],
                Some(k) => {
                    let rx = k * a.sqrt();
                    let ry = k * c.sqrt();
                    let range = |lo: f64, hi: f64, n: usize| -> (usize, usize) {
                        // Pixels whose centre x + 0.5 lies in [lo, hi].
                        let p0 = (lo - 0.5).ceil().max(0.0);
                        let p1 = (hi - 0.5).floor();
                        if p1 < p0 {
                            return (0, 0);
                        }
                        let t0 = (p0 as usize) / ts;
                        let t1 = ((p1 as usize) / ts + 1).min(n);
                        if t0 >= t1 {
                            (0, 0)
                        } else {
                            (t0, t1)
                        }
                    };
                    let (x0, x1) = range(p.mean2d[0] - rx, p.mean2d[0] + rx, tiles_x);
                    let (y0, y1) = range(p.mean2d[1] - ry, p.mean2d[1] + ry, tiles_y);
                    if x0 == x1 || y0 == y1 {
                        [0; 4]
                    } else {
                        [x0, x1, y0, y1]
                    }
                }
            };
            Outcome::Splat(Splat {
                hot: SplatHot {
                    mean: p.mean2d,
                    conic,
                    opacity: o,
                    min_power: (cfg.alpha_threshold / o).ln() - POWER_MARGIN,
                },
                depth: p.view_depth,
                color,
                source: i,
                tiles,
            })
        })
        .collect();

    let mut stats = RenderStats {
        visible_per_object: scene.objects.iter().map(|o| (o.id, 0)).collect(),
        ..Default::default()
    };
    let mut splats = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Culled => stats.culled += 1,
            Outcome::Degenerate => stats.degenerate += 1,
            Outcome::Splat(s) => {
                stats.projected += 1;
                if let Origin::Object(k, _) = world.origins[s.source] {
                    stats.visible_per_object[k].1 += 1;
                }
                splats.push(s);
            }
        }
    }
    // (depth, source) is unique, so an unstable sort is deterministic.
    splats.sort_unstable_by(|a, b| a.depth.total_cmp(&b.depth).then(a.source.cmp(&b.source)));
    Ok(Prepared {
        world,
        splats,
        stats,
    })
}

pub(crate) fn gather_hot(list: &[u32], splats: &[Splat]) -> Vec<SplatHot> {
    list.iter().map(|&k| splats[k as usize].hot).collect()
}

/// Splat indices touching each tile, front to back.
pub(crate) fn bin_tiles(splats: &[Splat], tiles_x: usize, tiles_y: usize) -> Vec<Vec<u32>> {
    let mut bins = vec![Vec::new(); tiles_x * tiles_y];
    for (k, s) in splats.iter().enumerate() {
        let [x0, x1, y0, y1] = s.tiles;
        for ty in y0..y1 {
            for tx in x0..x1 {
                bins[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    bins
}

/// Evaluates the blend weight of a splat at a pixel centre. Returns
/// `(alpha, gaussian, clamped)` or `None` when below threshold.
#[inline]
pub(crate) fn splat_alpha(
    s: &SplatHot,
    px: f64,
    py: f64,
    cfg: &RenderConfig,
) -> Option<(f64, f64, bool)> {
    let dx = px - s.mean[0];
    let dy = py - s.mean[1];
    let power = -0.5 * (s.conic[0] * dx * dx + s.conic[2] * dy * dy) - s.conic[1] * dx * dy;
    if power > 0.0 || power < s.min_power {
        return None;
    }
    let g = power.exp();
    let raw = s.opacity * g;
    if raw < cfg.alpha_threshold {
        return None;
    }
    if raw > cfg.alpha_clamp {
        Some((cfg.alpha_clamp, g, true))
    } else {
        Some((raw, g, false))
    }
}

/// Per-pixel blend result before sky compositing.
pub(crate) struct PixelBlend {
    pub color: [f64; 3],
    pub depth: f64,
    pub transmittance: f64,
    /// Number of list entries consumed (including skipped ones).
    pub consumed: usize,
    pub blended: usize,
    pub clamped: usize,
}

/// Front-to-back blend over `list` at pixel centre `(px, py)`.
#[inline]
pub(crate) fn blend_pixel(
    px: f64,
    py: f64,
    list: &[u32],
    hot: &[SplatHot],
    splats: &[Splat],
    world: &WorldSet,
    cfg: &RenderConfig,
    early_stop: bool,
    semantic: &mut [f64],
) -> PixelBlend {
    let mut t = 1.0;
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut consumed = list.len();
    let mut blended = 0;
    let mut clamped = 0;
    for (n, h) in hot.iter().enumerate() {
        let Some((alpha, _, hit_clamp)) = splat_alpha(h, px, py, cfg) else {
            continue;
        };
        let s = &splats[list[n] as usize];
        blended += 1;
        clamped += hit_clamp as usize;
        let w = alpha * t;
        for ch in 0..3 {
            color[ch] += s.color[ch] * w;
        }
        depth += s.depth * w;
        for (acc, b) in semantic.iter_mut().zip(world.semantic_of(s.source)) {
            *acc += b * w;
        }
        t *= 1.0 - alpha;
        if early_stop && t < cfg.saturation_stop {
            consumed = n + 1;
            break;
        }
    }
    PixelBlend {
        color,
        depth,
        transmittance: t,
        consumed,
        blended,
        clamped,
    }
}

/// Everything the backward pass needs from a forward render.
pub struct ForwardState {
    pub(crate) prepared: Prepared,
    pub(crate) bins: Vec<Vec<u32>>,
    /// Final transmittance per pixel.
    pub(crate) transmittance: Vec<f64>,
    /// Entries of the pixel's tile list consumed by the blend.
    pub(crate) consumed: Vec<u32>,
    pub(crate) camera: Camera,
    pub(crate) config: RenderConfig,
}

impl ForwardState {
    pub fn world(&self) -> &WorldSet {
        &self.prepared.world
    }
}

fn empty_outputs(cam: &Camera, m: usize, stats: RenderStats) -> RenderOutputs {
    let (w, h) = (cam.width as usize, cam.height as usize);
    RenderOutputs {
        color: Image::new(w, h, 3),
        opacity: Image::new(w, h, 1),
        depth: Image::new(w, h, 1),
        semantic: Image::new(w, h, m),
        stats,
    }
}

fn composite_sky(
    scene: &SceneGraph,
    cam: &Camera,
    x: usize,
    y: usize,
    t_final: f64,
    color: &mut [f64],
) {
    let dir = cam.ray_direction(x as f64 + 0.5, y as f64 + 0.5);
    let sky = scene.sky.sample(&dir);
    for ch in 0..3 {
        color[ch] += t_final * sky[ch];
    }
}

/// Tiled forward render that also returns the bookkeeping for
/// [`super::render_backward_from_state`].
pub fn render_with_state(
    scene: &SceneGraph,
    cam: &Camera,
    cfg: &RenderConfig,
) -> Result<(RenderOutputs, ForwardState)> {
    let prepared = prepare(scene, cam, cfg)?;
    let ts = cfg.tile_size;
    let (w, h) = (cam.width as usize, cam.height as usize);
    let tiles_x = w.div_ceil(ts);
    let tiles_y = h.div_ceil(ts);
    let bins = bin_tiles(&prepared.splats, tiles_x, tiles_y);
    let m = scene.num_classes;

    struct TileOut {
        color: Vec<f64>,
        depth: Vec<f64>,
        semantic: Vec<f64>,
        transmittance: Vec<f64>,
        consumed: Vec<u32>,
        blended: usize,
        clamped: usize,
    }
    let tile_outs: Vec<TileOut> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let (tx, ty) = (tile % tiles_x, tile / tiles_x);
            let xs = tx * ts..((tx + 1) * ts).min(w);
            let ys = ty * ts..((ty + 1) * ts).min(h);
            let n = xs.len() * ys.len();
            let mut out = TileOut {
                color: Vec::with_capacity(n * 3),
                depth: Vec::with_capacity(n),
                semantic: vec![0.0; n * m],
                transmittance: Vec::with_capacity(n),
                consumed: Vec::with_capacity(n),
                blended: 0,
                clamped: 0,
            };
            let list = &bins[tile];
            let hot = gather_hot(list, &prepared.splats);
            let mut p = 0;
            for y in ys.clone() {
                for x in xs.clone() {
                    let b = blend_pixel(
                        x as f64 + 0.5,
                        y as f64 + 0.5,
                        list,
                        &hot,
                        &prepared.splats,
                        &prepared.world,
                        cfg,
                        true,
                        &mut out.semantic[p * m..(p + 1) * m],
                    );
                    out.color.extend_from_slice(&b.color);
                    out.depth.push(b.depth);
                    out.transmittance.push(b.transmittance);
                    out.consumed.push(b.consumed as u32);
                    out.blended += b.blended;
                    out.clamped += b.clamped;
                    p += 1;
                }
            }
            out
        })
        .collect();

    let mut outputs = empty_outputs(cam, m, prepared.stats.clone());
    let mut transmittance = vec![1.0; w * h];
    let mut consumed = vec![0u32; w * h];
    for (tile, out) in tile_outs.iter().enumerate() {
        outputs.stats.blended += out.blended;
        outputs.stats.clamped += out.clamped;
        let (tx, ty) = (tile % tiles_x, tile / tiles_x);
        let mut p = 0;
        for y in ty * ts..((ty + 1) * ts).min(h) {
            for x in tx * ts..((tx + 1) * ts).min(w) {
                let pix = y * w + x;
                let t_final = out.transmittance[p];
                outputs.color.data[pix * 3..pix * 3 + 3]
                    .copy_from_slice(&out.color[p * 3..p * 3 + 3]);
                outputs.depth.data[pix] = out.depth[p];
                outputs.opacity.data[pix] = 1.0 - t_final;
                outputs.semantic.data[pix * m..(pix + 1) * m]
                    .copy_from_slice(&out.semantic[p * m..(p + 1) * m]);
                if cfg.composite_sky {
                    composite_sky(
                        scene,
                        cam,
                        x,
                        y,
                        t_final,
                        &mut outputs.color.data[pix * 3..pix * 3 + 3],
                    );
                }
                transmittance[pix] = t_final;
                consumed[pix] = out.consumed[p];
                p += 1;
            }
        }
    }
    let state = ForwardState {
        prepared,
        bins,
        transmittance,
        consumed,
        camera: cam.clone(),
        config: cfg.clone(),
    };
    Ok((outputs, state))
}

/// Tiled forward render of `scene` from `cam` at `cfg.timestep`.
pub fn render(scene: &SceneGraph, cam: &Camera, cfg: &RenderConfig) -> Result<RenderOutputs> {
    Ok(render_with_state(scene, cam, cfg)?.0)
}

/// Brute-force oracle: every pixel walks every projected Gaussian in sorted
/// order with no tiling and no early termination.
pub fn render_reference(
    scene: &SceneGraph,
    cam: &Camera,
    cfg: &RenderConfig,
) -> Result<RenderOutputs> {
    let prepared = prepare(scene, cam, cfg)?;
    let (w, h) = (cam.width as usize, cam.height as usize);
    let m = scene.num_classes;
    let all: Vec<u32> = (0..prepared.splats.len() as u32).collect();
    let hot = gather_hot(&all, &prepared.splats);
    let mut outputs = empty_outputs(cam, m, prepared.stats.clone());
    for y in 0..h {
        for x in 0..w {
            let pix = y * w + x;
            let b = blend_pixel(
                x as f64 + 0.5,
                y as f64 + 0.5,
                &all,
                &hot,
                &prepared.splats,
                &prepared.world,
                cfg,
                false,
                &mut outputs.semantic.data[pix * m..(pix + 1) * m],
            );
            outputs.color.data[pix * 3..pix * 3 + 3].copy_from_slice(&b.color);
            outputs.depth.data[pix] = b.depth;
            outputs.opacity.data[pix] = 1.0 - b.transmittance;
            outputs.stats.blended += b.blended;
            outputs.stats.clamped += b.clamped;
            if cfg.composite_sky {
                composite_sky(
                    scene,
                    cam,
                    x,
                    y,
                    b.transmittance,
                    &mut outputs.color.data[pix * 3..pix * 3 + 3],
                );
            }
        }
    }
    Ok(outputs)
}

/// Subset of the scene shown by [`render_decomposed`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecomposeTarget {
    All,
    Background,
    Object(u32),
}

/// Render restricted to `target`, together with the accumulated opacity of
/// an objects-only render of the same view.
pub fn render_decomposed(
    scene: &SceneGraph,
    cam: &Camera,
    cfg: &RenderConfig,
    target: DecomposeTarget,
) -> Result<(RenderOutputs, Image)> {
    let filter = match target {
        DecomposeTarget::All => cfg.filter.clone(),
        DecomposeTarget::Background => IncludeFilter::background_only(),
        DecomposeTarget::Object(id) => {
            if scene.object(id).is_none() {
                return Err(Error::invalid(format!("unknown object id {id}")));
            }
            IncludeFilter::single_object(id)
        }
    };
    let out = render(
        scene,
        cam,
        &RenderConfig {
            filter,
            ..cfg.clone()
        },
    )?;
    let objects = render(
        scene,
        cam,
        &RenderConfig {
            filter: IncludeFilter::objects_only(),
            composite_sky: false,
            ..cfg.clone()
        },
    )?;
    Ok((out, objects.opacity))
}
