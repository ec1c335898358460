use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Log-linear interpolation from `start` to `end` over `[0, steps]`,
/// constant afterwards. `constant(0.0)` freezes a parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpSchedule {
    pub start: f64,
    pub end: f64,
}

impl ExpSchedule {
    pub const fn constant(v: f64) -> Self {
        Self { start: v, end: v }
    }

    pub const fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn at(&self, step: usize, steps: usize) -> f64 {
        if self.start == self.end || steps == 0 {
            return self.start;
        }
        let s = (step as f64 / steps as f64).clamp(0.0, 1.0);
        (self.start.ln() * (1.0 - s) + self.end.ln() * s).exp()
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let frozen = self.start == 0.0 && self.end == 0.0;
        if !(frozen
            || (self.start > 0.0
                && self.end > 0.0
                && self.end <= self.start
                && self.start.is_finite()))
        {
            return Err(Error::invalid(format!(
                "learning rate schedule {name} must be positive and non-increasing, or zero"
            )));
        }
        Ok(())
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;

/// Adam moments for one flat parameter tensor. The step counter is shared by
/// all rows, so rows added later start from zero moments but the current
/// bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        let step_size = lr / bc1;
        let bc2_sqrt = bc2.sqrt();
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= step_size * *m / (v.sqrt() / bc2_sqrt + ADAM_EPS);
        }
    }

    /// Rebuilds moments after a row reordering: `sources[i]` is the old row
    /// that new row `i` inherits from, or `None` for a fresh row.
    pub fn remap(&mut self, sources: &[Option<usize>], row: usize) {
        let mut m = Vec::with_capacity(sources.len() * row);
        let mut v = Vec::with_capacity(sources.len() * row);
        for s in sources {
            match s {
                Some(i) => {
                    m.extend_from_slice(&self.m[i * row..(i + 1) * row]);
                    v.extend_from_slice(&self.v[i * row..(i + 1) * row]);
                }
                None => {
                    m.extend(std::iter::repeat_n(0.0, row));
                    v.extend(std::iter::repeat_n(0.0, row));
                }
            }
        }
        self.m = m;
        self.v = v;
    }

    pub fn reset_moments(&mut self) {
        self.m.fill(0.0);
        self.v.fill(0.0);
    }
}
