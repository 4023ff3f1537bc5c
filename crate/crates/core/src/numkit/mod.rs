//! Dense numerical kernels shared by the rest of the crate.

mod calculus;
mod linalg;
mod matrix;
mod ode;
mod rng;

pub use calculus::{central_diff, natural_cubic_spline, SplineSet};
pub use linalg::{householder_qr, least_squares, left_singular, random_orthogonal, thin_svd, Svd};
pub use matrix::{axpy, dot, norm2, Matrix};
pub use ode::rk4_integrate;
pub(crate) use ode::{diverged, rk4_step, Rk4Work};
pub use rng::Rng;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Uniform time grid: sample `i` sits at `t0 + i·dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t0: f64,
    dt: f64,
    count: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, count: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() || !t0.is_finite() {
            return Err(invalid(format!("time grid needs finite t0 and dt > 0 (dt = {dt})")));
        }
        if count < 2 {
            return Err(invalid(format!("time grid needs at least 2 samples (got {count})")));
        }
        Ok(Self { t0, dt, count })
    }

    /// Grid covering `[t0, t_end]` with step `dt`; the sample count is
    /// rounded to the nearest whole number of steps.
    pub fn spanning(t0: f64, t_end: f64, dt: f64) -> Result<Self> {
        if !(t_end > t0) {
            return Err(invalid(format!("t_end ({t_end}) must exceed t0 ({t0})")));
        }
        let steps = ((t_end - t0) / dt).round() as usize;
        Self::new(t0, dt, steps.max(1) + 1)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn count(&self) -> usize {
        self.count
    }

    #[inline]
    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.count - 1)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.time(i)).collect()
    }

    /// Same step, first `count` samples.
    pub fn truncated(&self, count: usize) -> Result<Self> {
        Self::new(self.t0, self.dt, count)
    }
}
