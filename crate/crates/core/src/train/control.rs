//! Adaptive density control: clone, split and prune of Gaussians, plus the
//! Monte-Carlo box prune for object models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::geometry::{logit, normalize_quat, quat_to_rotation, Vec3, IDENTITY_QUAT};
use crate::raster::PointStat;
use crate::scene::{GaussianSet, PoseTrack};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    pub enabled: bool,
    pub start: usize,
    pub end: usize,
    pub interval: usize,
    pub grad_threshold: f64,
    /// Clone/split boundary as a fraction of the scene extent.
    pub percent_dense: f64,
    pub split_factor: f64,
    pub split_children: usize,
    pub min_opacity: f64,
    /// Points larger than this fraction of the extent are pruned once the
    /// first opacity reset has happened.
    pub max_scale_fraction: f64,
    pub opacity_reset: bool,
    pub opacity_reset_interval: usize,
    pub opacity_reset_value: f64,
    pub background_extent: f64,
    pub box_prune: bool,
    pub box_prune_samples: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            start: 500,
            end: 15000,
            interval: 100,
            grad_threshold: 2e-4,
            percent_dense: 0.01,
            split_factor: 1.6,
            split_children: 2,
            min_opacity: 0.005,
            max_scale_fraction: 0.1,
            opacity_reset: true,
            opacity_reset_interval: 3000,
            opacity_reset_value: 0.01,
            background_extent: 20.0,
            box_prune: true,
            box_prune_samples: 32,
        }
    }
}

/// Running per-point view statistics between two control steps.
#[derive(Debug, Clone, PartialEq)]
pub struct PointAccum {
    pub grad_sum: Vec<f64>,
    pub views: Vec<u32>,
    pub max_weight: Vec<f64>,
}

impl PointAccum {
    pub fn new(n: usize) -> Self {
        Self {
            grad_sum: vec![0.0; n],
            views: vec![0; n],
            max_weight: vec![0.0; n],
        }
    }

    pub fn add(&mut self, stats: &[PointStat]) {
        for (i, s) in stats.iter().enumerate() {
            if s.visible {
                self.grad_sum[i] += s.grad_ndc;
                self.views[i] += 1;
            }
            self.max_weight[i] = self.max_weight[i].max(s.max_weight);
        }
    }

    pub fn mean_grad(&self, i: usize) -> f64 {
        if self.views[i] == 0 {
            0.0
        } else {
            self.grad_sum[i] / self.views[i] as f64
        }
    }
}

/// Outcome of one control step on a set: the new set and, per new row, the
/// old row whose optimizer state it keeps.
#[derive(Debug, Clone)]
pub struct ControlResult {
    pub set: GaussianSet,
    pub sources: Vec<Option<usize>>,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

pub struct ControlParams<'a> {
    pub cfg: &'a DensifyConfig,
    pub extent: f64,
    pub prune_large: bool,
    /// Object track for the box prune; `None` for the background.
    pub track: Option<&'a PoseTrack>,
}

fn sample_offset(rng: &mut ChaCha8Rng, set: &GaussianSet, i: usize) -> Vec3 {
    let s = set.log_scales[i].map(f64::exp);
    let e = Vec3::new(
        rng.sample::<f64, _>(StandardNormal) * s[0],
        rng.sample::<f64, _>(StandardNormal) * s[1],
        rng.sample::<f64, _>(StandardNormal) * s[2],
    );
    let q = normalize_quat(set.rotations[i]).unwrap_or(IDENTITY_QUAT);
    quat_to_rotation(q) * e
}

/// Mean of `n` draws from the point's density, in the set's frame.
pub fn sampled_mean(rng: &mut ChaCha8Rng, set: &GaussianSet, i: usize, n: usize) -> Vec3 {
    let mut acc = Vec3::zeros();
    for _ in 0..n {
        acc += sample_offset(rng, set, i);
    }
    Vec3::from(set.positions[i]) + acc / n.max(1) as f64
}

pub fn densify_and_prune(
    set: &GaussianSet,
    accum: &PointAccum,
    p: &ControlParams<'_>,
    seed: u64,
) -> ControlResult {
    let cfg = p.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = set.len();
    let dense_limit = cfg.percent_dense * p.extent;
    let hot: Vec<bool> = (0..n)
        .map(|i| accum.mean_grad(i) >= cfg.grad_threshold)
        .collect();
    let split: Vec<bool> = (0..n)
        .map(|i| hot[i] && set.max_scale(i) > dense_limit)
        .collect();
    let clone: Vec<bool> = (0..n).map(|i| hot[i] && !split[i]).collect();

    let mut rows: Vec<usize> = Vec::new();
    let mut sources: Vec<Option<usize>> = Vec::new();
    for i in (0..n).filter(|&i| !split[i]) {
        rows.push(i);
        sources.push(Some(i));
    }
    let mut out = set.select(&rows);
    for i in (0..n).filter(|&i| clone[i]) {
        out.push(set.get(i));
        sources.push(None);
    }
    let shrink = cfg.split_factor.ln();
    for i in (0..n).filter(|&i| split[i]) {
        for _ in 0..cfg.split_children {
            let mut child = set.get(i);
            let pos = Vec3::from(child.position) + sample_offset(&mut rng, set, i);
            child.position = pos.into();
            child.log_scale = child.log_scale.map(|v| v - shrink);
            out.push(child);
            sources.push(None);
        }
    }

    let max_scale = cfg.max_scale_fraction * p.extent;
    let keep: Vec<bool> = (0..out.len())
        .map(|i| {
            if out.opacity(i) < cfg.min_opacity {
                return false;
            }
            if p.prune_large && out.max_scale(i) > max_scale {
                return false;
            }
            if let (Some(track), true) = (p.track, cfg.box_prune) {
                let m = sampled_mean(&mut rng, &out, i, cfg.box_prune_samples);
                if !track.contains_local(&m) {
                    return false;
                }
            }
            true
        })
        .collect();
    let pruned = keep.iter().filter(|k| !**k).count();
    out.retain(&keep);
    let sources = sources
        .into_iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(s, _)| s)
        .collect();
    ControlResult {
        set: out,
        sources,
        cloned: clone.iter().filter(|c| **c).count(),
        split: split.iter().filter(|c| **c).count(),
        pruned,
    }
}

/// Caps every opacity at `value`.
pub fn reset_opacity(set: &mut GaussianSet, value: f64) {
    let cap = logit(value);
    for l in &mut set.opacity_logits {
        *l = l.min(cap);
    }
}
