//! Scalar losses on rendered images together with their gradients w.r.t.
//! the rendered side.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Probability clamp used by both binary entropy style losses.
pub const PROB_EPS: f64 = 1e-6;
pub const DEPTH_KEEP_PERCENT: usize = 95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub ssim: f64,
    pub depth: f64,
    pub sky: f64,
    pub semantic: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ssim: 0.2,
            depth: 0.01,
            sky: 0.05,
            semantic: 0.1,
            reg: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.ssim, self.depth, self.sky, self.semantic, self.reg];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || self.ssim > 1.0 {
            return Err(Error::invalid(format!(
                "loss weights out of range: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Loss value and its gradient image (same shape as the rendered input).
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Image,
}

fn check_same(a: &Image, b: &Image, ctx: &str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch {
            context: ctx.to_string(),
            expected: a.data.len(),
            found: b.data.len(),
        });
    }
    Ok(())
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable zero-padded "same" convolution of a single plane. The kernel
/// is symmetric, so this is also its own adjoint.
fn blur(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let xx = x as isize + j as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    s += kv * plane[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let yy = y as isize + j as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    s += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn plane(img: &Image, c: usize) -> Vec<f64> {
    img.data
        .iter()
        .skip(c)
        .step_by(img.channels)
        .copied()
        .collect()
}

/// Mean SSIM over pixels and channels and, if requested, its gradient with
/// respect to `x`.
pub fn ssim_with_grad(x: &Image, y: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    check_same(x, y, "ssim input")?;
    let (w, h, ch) = (x.width, x.height, x.channels);
    let n = (w * h * ch) as f64;
    if n == 0.0 {
        return Err(Error::invalid("ssim of an empty image"));
    }
    let k = gaussian_kernel();
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(w, h, ch));
    for c in 0..ch {
        let px = plane(x, c);
        let py = plane(y, c);
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = blur(&px, w, h, &k);
        let my = blur(&py, w, h, &k);
        let exx = blur(&sq(&px, &px), w, h, &k);
        let eyy = blur(&sq(&py, &py), w, h, &k);
        let exy = blur(&sq(&px, &py), w, h, &k);
        let mut d_mx = vec![0.0; w * h];
        let mut d_exx = vec![0.0; w * h];
        let mut d_exy = vec![0.0; w * h];
        for i in 0..w * h {
            let (ux, uy) = (mx[i], my[i]);
            let sxx = exx[i] - ux * ux;
            let syy = eyy[i] - uy * uy;
            let sxy = exy[i] - ux * uy;
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * sxy + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = sxx + syy + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let ds_dux = 2.0 * uy * a2 / (b1 * b2) - s * 2.0 * ux / b1;
                let ds_dsxx = -s / b2;
                let ds_dsxy = 2.0 * a1 / (b1 * b2);
                // sxx = E[x²] − ux², sxy = E[xy] − ux·uy
                d_mx[i] = (ds_dux - 2.0 * ux * ds_dsxx - uy * ds_dsxy) / n;
                d_exx[i] = ds_dsxx / n;
                d_exy[i] = ds_dsxy / n;
            }
        }
        if let Some(g) = grad.as_mut() {
            let gm = blur(&d_mx, w, h, &k);
            let gxx = blur(&d_exx, w, h, &k);
            let gxy = blur(&d_exy, w, h, &k);
            for i in 0..w * h {
                g.data[i * ch + c] = gm[i] + 2.0 * px[i] * gxx[i] + py[i] * gxy[i];
            }
        }
    }
    Ok((total / n, grad))
}

pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    Ok(ssim_with_grad(x, y, false)?.0)
}

/// `(1 − λ)·L1 + λ·(1 − SSIM)`.
pub fn loss_color(render: &Image, target: &Image, lambda_ssim: f64) -> Result<LossGrad> {
    check_same(render, target, "color loss")?;
    let n = render.data.len() as f64;
    let mut grad = Image::new(render.width, render.height, render.channels);
    let mut l1 = 0.0;
    for ((g, r), t) in grad.data.iter_mut().zip(&render.data).zip(&target.data) {
        let d = r - t;
        l1 += d.abs();
        *g = (1.0 - lambda_ssim) * sign(d) / n;
    }
    l1 /= n;
    let mut value = (1.0 - lambda_ssim) * l1;
    if lambda_ssim > 0.0 {
        let (s, gs) = ssim_with_grad(render, target, true)?;
        value += lambda_ssim * (1.0 - s);
        for (g, d) in grad.data.iter_mut().zip(&gs.unwrap().data) {
            *g -= lambda_ssim * d;
        }
    }
    Ok(LossGrad { value, grad })
}

fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Running mean; exact when every sample is equal.
#[derive(Default)]
struct Mean {
    value: f64,
    count: usize,
}

impl Mean {
    fn add(&mut self, x: f64) {
        self.count += 1;
        self.value += (x - self.value) / self.count as f64;
    }
}

/// Number of hit pixels kept by the trimmed depth loss.
pub fn depth_keep_count(hits: usize) -> usize {
    (hits * DEPTH_KEEP_PERCENT).div_ceil(100)
}

/// Trimmed L1 between rendered depth and a sparse target where `0` marks a
/// pixel without a LiDAR hit. Returns `None` when there are no hits.
pub fn loss_depth(render: &Image, target: &[f64]) -> Result<Option<LossGrad>> {
    if render.channels != 1 || render.data.len() != target.len() {
        return Err(Error::ShapeMismatch {
            context: "depth loss".into(),
            expected: render.data.len(),
            found: target.len(),
        });
    }
    let mut hits: Vec<(f64, usize)> = target
        .iter()
        .enumerate()
        .filter(|(_, t)| **t > 0.0)
        .map(|(i, t)| ((render.data[i] - t).abs(), i))
        .collect();
    if hits.is_empty() {
        return Ok(None);
    }
    hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let keep = depth_keep_count(hits.len());
    let mut grad = Image::new(render.width, render.height, 1);
    let mut value = Mean::default();
    for &(e, i) in &hits[..keep] {
        value.add(e);
        grad.data[i] = sign(render.data[i] - target[i]) / keep as f64;
    }
    Ok(Some(LossGrad {
        value: value.value,
        grad,
    }))
}

/// Binary cross entropy pushing accumulated opacity to zero on sky pixels
/// (`mask == 1`) and to one elsewhere.
pub fn loss_sky(opacity: &Image, mask: &[u8]) -> Result<LossGrad> {
    if opacity.channels != 1 || opacity.data.len() != mask.len() {
        return Err(Error::ShapeMismatch {
            context: "sky loss".into(),
            expected: opacity.data.len(),
            found: mask.len(),
        });
    }
    let n = mask.len() as f64;
    let mut grad = Image::new(opacity.width, opacity.height, 1);
    let mut value = Mean::default();
    for (i, (&o, &m)) in opacity.data.iter().zip(mask).enumerate() {
        let oc = o.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let m = m as f64;
        value.add(-((1.0 - m) * oc.ln() + m * (1.0 - oc).ln()));
        if oc == o {
            grad.data[i] = -((1.0 - m) / oc - m / (1.0 - oc)) / n;
        }
    }
    Ok(LossGrad {
        value: value.value,
        grad,
    })
}

/// Softmax cross entropy over pixels whose label is not `ignore`.
pub fn loss_semantic(logits: &Image, labels: &[u8], ignore: u8) -> Result<Option<LossGrad>> {
    let m = logits.channels;
    if logits.width * logits.height != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "semantic loss".into(),
            expected: logits.width * logits.height,
            found: labels.len(),
        });
    }
    if let Some(bad) = labels.iter().find(|&&l| l != ignore && l as usize >= m) {
        return Err(Error::invalid(format!(
            "semantic label {bad} >= class count {m}"
        )));
    }
    let valid = labels.iter().filter(|&&l| l != ignore).count();
    if valid == 0 {
        return Ok(None);
    }
    let n = valid as f64;
    let mut grad = Image::new(logits.width, logits.height, m);
    let mut value = Mean::default();
    for (i, &l) in labels.iter().enumerate() {
        if l == ignore {
            continue;
        }
        let z = &logits.data[i * m..(i + 1) * m];
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - zmax).exp()).sum();
        let lse = zmax + sum.ln();
        value.add((zmax - z[l as usize]) + sum.ln());
        let g = &mut grad.data[i * m..(i + 1) * m];
        for c in 0..m {
            g[c] = ((z[c] - lse).exp() - if c == l as usize { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok(Some(LossGrad {
        value: value.value,
        grad,
    }))
}

/// Mean binary entropy of the objects-only accumulated opacity.
pub fn loss_reg(opacity: &Image) -> Result<LossGrad> {
    if opacity.channels != 1 {
        return Err(Error::invalid("entropy loss expects a single channel"));
    }
    let n = opacity.data.len().max(1) as f64;
    let mut grad = Image::new(opacity.width, opacity.height, 1);
    let mut value = Mean::default();
    for (i, &o) in opacity.data.iter().enumerate() {
        let oc = o.clamp(PROB_EPS, 1.0 - PROB_EPS);
        value.add(-(oc * oc.ln() + (1.0 - oc) * (1.0 - oc).ln()));
        if oc == o {
            grad.data[i] = -(oc.ln() - (1.0 - oc).ln()) / n;
        }
    }
    Ok(LossGrad {
        value: value.value,
        grad,
    })
}
