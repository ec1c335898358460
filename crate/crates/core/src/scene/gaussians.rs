use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
#[cfg(doc)]
use crate::geometry::eval_fourier;
use crate::geometry::{fourier_basis, sh_basis_count, sigmoid, Quat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AppearanceMode {
    Static,
    Fourier4D,
}

/// Per-point colour coefficients laid out `[point][k][basis][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceCoeffs {
    pub mode: AppearanceMode,
    pub sh_degree: usize,
    pub fourier_k: usize,
    pub coeffs: Vec<f64>,
}

impl AppearanceCoeffs {
    pub fn new(mode: AppearanceMode, sh_degree: usize, fourier_k: usize) -> Self {
        Self {
            mode,
            sh_degree,
            fourier_k,
            coeffs: Vec::new(),
        }
    }

    pub fn static_sh(sh_degree: usize) -> Self {
        Self::new(AppearanceMode::Static, sh_degree, 1)
    }

    pub fn fourier(sh_degree: usize, k: usize) -> Self {
        Self::new(AppearanceMode::Fourier4D, sh_degree, k)
    }

    pub fn basis_count(&self) -> usize {
        sh_basis_count(self.sh_degree)
    }

    /// Number of scalars stored per point.
    pub fn stride(&self) -> usize {
        self.fourier_k * self.basis_count() * 3
    }

    pub fn point(&self, i: usize) -> &[f64] {
        let s = self.stride();
        &self.coeffs[i * s..(i + 1) * s]
    }

    pub fn point_mut(&mut self, i: usize) -> &mut [f64] {
        let s = self.stride();
        &mut self.coeffs[i * s..(i + 1) * s]
    }

    /// SH coefficients `[basis][channel]` of point `i` at timestep `t`.
    pub fn eval_at(&self, i: usize, t: f64, num_frames: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.basis_count() * 3);
        self.eval_with_basis(i, &fourier_basis(self.fourier_k, t, num_frames), &mut out);
        out
    }

    /// Appends the coefficients of point `i` for a precomputed
    /// [`fourier_basis`] to `out`. Same arithmetic as [`eval_fourier`].
    pub fn eval_with_basis(&self, i: usize, basis: &[f64], out: &mut Vec<f64>) {
        let p = self.point(i);
        let per_k = self.basis_count() * 3;
        for j in 0..per_k {
            let mut z = p[j] * 1.0;
            for (k, b) in basis.iter().enumerate().skip(1) {
                z += p[k * per_k + j] * b;
            }
            out.push(z);
        }
    }

    fn validate(&self, count: usize) -> Result<()> {
        let k_ok = match self.mode {
            AppearanceMode::Static => self.fourier_k == 1,
            AppearanceMode::Fourier4D => self.fourier_k >= 1,
        };
        if !k_ok {
            return Err(Error::invalid(format!(
                "appearance mode {:?} incompatible with k = {}",
                self.mode, self.fourier_k
            )));
        }
        if self.sh_degree > crate::geometry::MAX_SH_DEGREE {
            return Err(Error::invalid(format!(
                "SH degree {} unsupported",
                self.sh_degree
            )));
        }
        if self.coeffs.len() != count * self.stride() {
            return Err(Error::ShapeMismatch {
                context: "appearance coefficients".into(),
                expected: count * self.stride(),
                found: self.coeffs.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SemanticKind {
    /// A full logit vector per point.
    BackgroundVector,
    /// One scalar per point, expanded to a one-hot on the vehicle class.
    ObjectScalar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticField {
    pub kind: SemanticKind,
    pub num_classes: usize,
    pub logits: Vec<f64>,
}

impl SemanticField {
    pub fn background(num_classes: usize) -> Self {
        Self {
            kind: SemanticKind::BackgroundVector,
            num_classes,
            logits: Vec::new(),
        }
    }

    pub fn object(num_classes: usize) -> Self {
        Self {
            kind: SemanticKind::ObjectScalar,
            num_classes,
            logits: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        match self.kind {
            SemanticKind::BackgroundVector => self.num_classes,
            SemanticKind::ObjectScalar => 1,
        }
    }

    pub fn point(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.logits[i * w..(i + 1) * w]
    }
}

/// Columnar storage for a set of Gaussians. Scales and opacities are kept
/// pre-activation.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    pub positions: Vec<[f64; 3]>,
    pub log_scales: Vec<[f64; 3]>,
    pub rotations: Vec<Quat>,
    pub opacity_logits: Vec<f64>,
    pub appearance: AppearanceCoeffs,
    pub semantic: SemanticField,
}

/// One point's worth of parameters, used to build sets incrementally.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPoint<'a> {
    pub position: [f64; 3],
    pub log_scale: [f64; 3],
    pub rotation: Quat,
    pub opacity_logit: f64,
    pub appearance: &'a [f64],
    pub semantic: &'a [f64],
}

/// Quaternions whose norm is already within this of one are left untouched,
/// so that values read back from a checkpoint stay bit-exact.
const QUAT_NORM_TOLERANCE: f64 = 1e-6;

pub fn canonical_quat(q: Quat) -> Quat {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if (n - 1.0).abs() <= QUAT_NORM_TOLERANCE {
        q
    } else {
        q.map(|v| v / n)
    }
}

impl GaussianSet {
    pub fn empty(appearance: AppearanceCoeffs, semantic: SemanticField) -> Self {
        Self {
            positions: Vec::new(),
            log_scales: Vec::new(),
            rotations: Vec::new(),
            opacity_logits: Vec::new(),
            appearance,
            semantic,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, p: GaussianPoint<'_>) {
        assert_eq!(p.appearance.len(), self.appearance.stride());
        assert_eq!(p.semantic.len(), self.semantic.width());
        self.positions.push(p.position);
        self.log_scales.push(p.log_scale);
        self.rotations.push(p.rotation);
        self.opacity_logits.push(p.opacity_logit);
        self.appearance.coeffs.extend_from_slice(p.appearance);
        self.semantic.logits.extend_from_slice(p.semantic);
    }

    pub fn get(&self, i: usize) -> GaussianPoint<'_> {
        GaussianPoint {
            position: self.positions[i],
            log_scale: self.log_scales[i],
            rotation: self.rotations[i],
            opacity_logit: self.opacity_logits[i],
            appearance: self.appearance.point(i),
            semantic: self.semantic.point(i),
        }
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn max_scale(&self, i: usize) -> f64 {
        self.log_scales[i]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
            .exp()
    }

    /// New set holding the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = Self::empty(
            AppearanceCoeffs {
                coeffs: Vec::with_capacity(indices.len() * self.appearance.stride()),
                ..self.appearance.clone_layout()
            },
            SemanticField {
                logits: Vec::with_capacity(indices.len() * self.semantic.width()),
                ..self.semantic.clone_layout()
            },
        );
        for &i in indices {
            out.push(self.get(i));
        }
        out
    }

    pub fn retain(&mut self, keep: &[bool]) {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep[i]).collect();
        *self = self.select(&idx);
    }

    pub fn append(&mut self, other: &GaussianSet) {
        for i in 0..other.len() {
            self.push(other.get(i));
        }
    }

    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rotations {
            *q = canonical_quat(*q);
        }
    }

    /// Checks column lengths, finiteness and activation ranges.
    pub fn validate(&self, context: &str) -> Result<()> {
        let n = self.len();
        for (name, len) in [
            ("log_scales", self.log_scales.len()),
            ("rotations", self.rotations.len()),
            ("opacity_logits", self.opacity_logits.len()),
        ] {
            if len != n {
                return Err(Error::ShapeMismatch {
                    context: format!("{context}: {name}"),
                    expected: n,
                    found: len,
                });
            }
        }
        self.appearance.validate(n)?;
        if self.semantic.logits.len() != n * self.semantic.width() {
            return Err(Error::ShapeMismatch {
                context: format!("{context}: semantic logits"),
                expected: n * self.semantic.width(),
                found: self.semantic.logits.len(),
            });
        }
        let finite = self.positions.iter().flatten().all(|v| v.is_finite())
            && self.opacity_logits.iter().all(|v| v.is_finite())
            && self.appearance.coeffs.iter().all(|v| v.is_finite())
            && self.semantic.logits.iter().all(|v| v.is_finite())
            && self.rotations.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite {
                context: context.to_string(),
            });
        }
        for s in self.log_scales.iter().flatten() {
            let e = s.exp();
            if !(e.is_finite() && e > 0.0) {
                return Err(Error::NonFinite {
                    context: format!("{context}: scale"),
                });
            }
        }
        for q in &self.rotations {
            if q.iter().map(|v| v * v).sum::<f64>() == 0.0 {
                return Err(Error::NonFinite {
                    context: format!("{context}: zero quaternion"),
                });
            }
        }
        for &o in &self.opacity_logits {
            let a = sigmoid(o);
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::invalid(format!(
                    "{context}: opacity logit {o} saturates"
                )));
            }
        }
        Ok(())
    }
}

impl AppearanceCoeffs {
    fn clone_layout(&self) -> Self {
        Self::new(self.mode, self.sh_degree, self.fourier_k)
    }
}

impl SemanticField {
    fn clone_layout(&self) -> Self {
        Self {
            kind: self.kind,
            num_classes: self.num_classes,
            logits: Vec::new(),
        }
    }
}
