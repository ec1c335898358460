//! Real spherical harmonics without the Condon-Shortley phase, up to degree 3.

use super::Vec3;
use crate::error::{Error, Result};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 3] = [
    1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 4] = [
    0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
];
const SH_C3_HALF: f64 = 1.445_305_721_320_277;

/// Added to the SH sum so that a zero coefficient vector reads as mid-grey.
pub const SH_COLOR_OFFSET: f64 = 0.5;

pub const MAX_SH_DEGREE: usize = 3;

pub fn sh_basis_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Basis values at a unit direction, ordered by (l, m) with m from -l to l.
pub fn sh_basis(degree: usize, n: &Vec3) -> Vec<f64> {
    let mut out = vec![0.0; sh_basis_count(degree)];
    fill_basis(degree, n, &mut out, None);
    out
}

fn fill_basis(degree: usize, n: &Vec3, out: &mut [f64], mut grad: Option<&mut [[f64; 3]]>) {
    assert!(degree <= MAX_SH_DEGREE, "SH degree {degree} unsupported");
    let (x, y, z) = (n.x, n.y, n.z);
    let mut put = |i: usize, v: f64, g: [f64; 3]| {
        out[i] = v;
        if let Some(gr) = grad.as_deref_mut() {
            gr[i] = g;
        }
    };
    put(0, SH_C0, [0.0; 3]);
    if degree >= 1 {
        put(1, SH_C1 * y, [0.0, SH_C1, 0.0]);
        put(2, SH_C1 * z, [0.0, 0.0, SH_C1]);
        put(3, SH_C1 * x, [SH_C1, 0.0, 0.0]);
    }
    if degree >= 2 {
        let [a, b, c] = SH_C2;
        put(4, a * x * y, [a * y, a * x, 0.0]);
        put(5, a * y * z, [0.0, a * z, a * y]);
        put(
            6,
            b * (2.0 * z * z - x * x - y * y),
            [-2.0 * b * x, -2.0 * b * y, 4.0 * b * z],
        );
        put(7, a * x * z, [a * z, 0.0, a * x]);
        put(8, c * (x * x - y * y), [2.0 * c * x, -2.0 * c * y, 0.0]);
    }
    if degree >= 3 {
        let [p, q, r, s] = SH_C3;
        let h = SH_C3_HALF;
        let (xx, yy, zz) = (x * x, y * y, z * z);
        put(
            9,
            p * y * (3.0 * xx - yy),
            [6.0 * p * x * y, 3.0 * p * (xx - yy), 0.0],
        );
        put(10, q * x * y * z, [q * y * z, q * x * z, q * x * y]);
        put(
            11,
            r * y * (4.0 * zz - xx - yy),
            [
                -2.0 * r * x * y,
                r * (4.0 * zz - xx - 3.0 * yy),
                8.0 * r * y * z,
            ],
        );
        put(
            12,
            s * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            [
                -6.0 * s * x * z,
                -6.0 * s * y * z,
                s * (6.0 * zz - 3.0 * xx - 3.0 * yy),
            ],
        );
        put(
            13,
            r * x * (4.0 * zz - xx - yy),
            [
                r * (4.0 * zz - 3.0 * xx - yy),
                -2.0 * r * x * y,
                8.0 * r * x * z,
            ],
        );
        put(
            14,
            h * z * (xx - yy),
            [2.0 * h * x * z, -2.0 * h * y * z, h * (xx - yy)],
        );
        put(
            15,
            p * x * (xx - 3.0 * yy),
            [3.0 * p * (xx - yy), -6.0 * p * x * y, 0.0],
        );
    }
}

fn unit(dir: &Vec3) -> Result<(Vec3, f64)> {
    let len = dir.norm();
    if !(len.is_finite() && len > 0.0) {
        return Err(Error::invalid("zero or non-finite view direction"));
    }
    Ok((dir / len, len))
}

/// Pre-clamp colour `Σ z·Y(dir) + 0.5`; `coeffs` is `[basis][channel]`.
fn raw_color(coeffs: &[f64], basis: &[f64]) -> [f64; 3] {
    let mut c = [SH_COLOR_OFFSET; 3];
    for (b, y) in basis.iter().enumerate() {
        for ch in 0..3 {
            c[ch] += coeffs[b * 3 + ch] * y;
        }
    }
    c
}

/// View-dependent colour, clamped below at zero.
pub fn eval_sh_color(coeffs: &[f64], dir: &Vec3, degree: usize) -> Result<[f64; 3]> {
    let (n, _) = unit(dir)?;
    let mut basis = [0.0; 16];
    let nb = sh_basis_count(degree);
    fill_basis(degree, &n, &mut basis[..nb], None);
    let raw = raw_color(coeffs, &basis[..nb]);
    Ok(raw.map(|v| v.max(0.0)))
}

/// Gradients of [`eval_sh_color`] w.r.t. the coefficients (same layout as
/// `coeffs`) and w.r.t. the unnormalized direction.
pub fn sh_color_backward(
    coeffs: &[f64],
    dir: &Vec3,
    degree: usize,
    d_color: &[f64; 3],
) -> Result<(Vec<f64>, Vec3)> {
    let (n, len) = unit(dir)?;
    let nb = sh_basis_count(degree);
    let mut basis = vec![0.0; nb];
    let mut grad = vec![[0.0; 3]; nb];
    fill_basis(degree, &n, &mut basis, Some(&mut grad));
    let raw = raw_color(coeffs, &basis);
    let g: [f64; 3] = std::array::from_fn(|ch| if raw[ch] < 0.0 { 0.0 } else { d_color[ch] });
    let mut d_coeffs = vec![0.0; nb * 3];
    let mut d_n = Vec3::zeros();
    for b in 0..nb {
        let mut s = 0.0;
        for ch in 0..3 {
            d_coeffs[b * 3 + ch] = g[ch] * basis[b];
            s += g[ch] * coeffs[b * 3 + ch];
        }
        d_n += Vec3::from(grad[b]) * s;
    }
    let d_dir = (d_n - n * n.dot(&d_n)) / len;
    Ok((d_coeffs, d_dir))
}
