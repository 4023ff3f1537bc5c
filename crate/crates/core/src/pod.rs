//! Proper orthogonal decomposition: single-level and nested (local then
//! global) bases, energy-based truncation, projection and standardization.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::SnapshotSet;
use crate::error::{invalid, Result};
use crate::numkit::{left_singular, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TruncationRule {
    /// Smallest rank whose relative energy reaches `1 − delta`.
    EnergyTol(f64),
    /// Fixed number of modes, capped at the number available.
    FixedRank(usize),
}

impl TruncationRule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TruncationRule::EnergyTol(d) if !(d > 0.0 && d < 1.0) => {
                Err(invalid(format!("energy tolerance must lie in (0, 1), got {d}")))
            }
            TruncationRule::FixedRank(0) => Err(invalid("fixed rank must be at least 1")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PodLevel {
    Single,
    Nested,
}

/// Orthonormal spatial modes (one per column) with the spectrum they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PodBasis {
    modes: Matrix,
    #[serde(with = "crate::formats::b64")]
    singular_values: Vec<f64>,
    level: PodLevel,
    local_ranks: Vec<usize>,
}

impl PodBasis {
    /// Wraps externally computed modes, checking orthonormality.
    pub fn from_parts(
        modes: Matrix,
        singular_values: Vec<f64>,
        level: PodLevel,
        local_ranks: Vec<usize>,
    ) -> Result<Self> {
        let gram = modes.t_matmul(&modes)?;
        if gram.sub(&Matrix::identity(modes.cols()))?.max_abs() > 1e-10 {
            return Err(invalid("POD modes are not orthonormal"));
        }
        if singular_values.windows(2).any(|w| w[1] > w[0]) {
            return Err(invalid("singular values must be nonincreasing"));
        }
        Ok(Self {
            modes,
            singular_values,
            level,
            local_ranks,
        })
    }

    pub fn modes(&self) -> &Matrix {
        &self.modes
    }

    /// Full spectrum of the last decomposition, including discarded values.
    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn level(&self) -> PodLevel {
        self.level
    }

    pub fn local_ranks(&self) -> &[usize] {
        &self.local_ranks
    }

    pub fn rank(&self) -> usize {
        self.modes.cols()
    }

    pub fn n_h(&self) -> usize {
        self.modes.rows()
    }
}

/// Smallest `N` with `Σ_{i≤N} σᵢ² / Σ σᵢ² ≥ 1 − delta`.
pub fn truncation_rank(s: &[f64], delta: f64) -> Result<usize> {
    if s.iter().any(|v| !(*v >= 0.0)) {
        return Err(invalid("singular values must be nonnegative"));
    }
    let total: f64 = s.iter().map(|v| v * v).sum();
    if total == 0.0 {
        return Err(invalid("spectrum is identically zero"));
    }
    let target = 1.0 - delta;
    let mut acc = 0.0;
    for (i, v) in s.iter().enumerate() {
        acc += v * v;
        if acc / total >= target {
            return Ok(i + 1);
        }
    }
    Ok(s.len())
}

fn rank_for(rule: TruncationRule, s: &[f64]) -> Result<usize> {
    rule.validate()?;
    let n = match rule {
        TruncationRule::EnergyTol(delta) => {
            if s.iter().all(|&v| v == 0.0) {
                1
            } else {
                truncation_rank(s, delta)?
            }
        }
        TruncationRule::FixedRank(r) => r.min(s.len()),
    };
    Ok(n.max(1))
}

/// Makes the largest-magnitude entry of every column positive.
fn fix_signs(modes: &mut Matrix) {
    for j in 0..modes.cols() {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for i in 0..modes.rows() {
            let v = modes[(i, j)];
            if v.abs() > best {
                best = v.abs();
                sign = v.signum();
            }
        }
        if sign < 0.0 {
            for i in 0..modes.rows() {
                modes[(i, j)] = -modes[(i, j)];
            }
        }
    }
}

/// POD of a snapshot matrix whose columns are the snapshots (`N_h × N_s`).
pub fn pod(snapshots: &Matrix, rule: TruncationRule) -> Result<PodBasis> {
    if snapshots.rows() == 0 || snapshots.cols() == 0 {
        return Err(invalid("POD needs at least one snapshot"));
    }
    let (u, s) = left_singular(snapshots)?;
    let n = rank_for(rule, &s)?;
    let mut modes = u.leading_columns(n);
    fix_signs(&mut modes);
    Ok(PodBasis {
        modes,
        singular_values: s,
        level: PodLevel::Single,
        local_ranks: Vec::new(),
    })
}

/// Two-level POD: a local basis per parameter, then a POD of the
/// concatenated local bases. Each level is truncated against its own energy.
pub fn nested_pod(set: &SnapshotSet, local: TruncationRule, global: TruncationRule) -> Result<PodBasis> {
    local.validate()?;
    global.validate()?;
    let locals: Vec<PodBasis> = set
        .trajectories()
        .par_iter()
        .map(|traj| pod(&traj.transpose(), local))
        .collect::<Result<_>>()?;
    let blocks: Vec<&Matrix> = locals.iter().map(|b| b.modes()).collect();
    let concat = Matrix::hstack(&blocks)?;
    let mut basis = pod(&concat, global)?;
    basis.level = PodLevel::Nested;
    basis.local_ranks = locals.iter().map(|b| b.rank()).collect();
    Ok(basis)
}

/// Coefficients of each row of `x` (states as rows) in the basis.
pub fn project(basis: &PodBasis, x_rows: &Matrix) -> Result<Matrix> {
    if x_rows.cols() != basis.n_h() {
        return Err(invalid(format!(
            "states have {} entries but the basis has {} rows",
            x_rows.cols(),
            basis.n_h()
        )));
    }
    x_rows.matmul(&basis.modes)
}

/// Full-order states (as rows) from basis coefficients.
pub fn reconstruct(basis: &PodBasis, coeffs: &Matrix) -> Result<Matrix> {
    if coeffs.cols() != basis.rank() {
        return Err(invalid(format!(
            "coefficients have {} columns but the basis has {} modes",
            coeffs.cols(),
            basis.rank()
        )));
    }
    let mut out = Matrix::zeros(coeffs.rows(), basis.n_h());
    for (i, c) in coeffs.row_iter().enumerate() {
        out.row_mut(i).copy_from_slice(&basis.modes.matvec(c));
    }
    Ok(out)
}

/// Columns whose standard deviation is at most this are passed through.
pub const CONSTANT_COLUMN_STD: f64 = 1e-12;

/// Per-column standardization with the population (1/N) standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    #[serde(with = "crate::formats::b64")]
    mean: Vec<f64>,
    #[serde(with = "crate::formats::b64")]
    std: Vec<f64>,
    /// Constant columns, left untouched by apply and invert.
    passthrough: Vec<bool>,
}

impl Scaler {
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn passthrough(&self) -> &[bool] {
        &self.passthrough
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_row(&self, row: &mut [f64]) {
        for (j, v) in row.iter_mut().enumerate() {
            if !self.passthrough[j] {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
    }

    pub fn invert_row(&self, row: &mut [f64]) {
        for (j, v) in row.iter_mut().enumerate() {
            if !self.passthrough[j] {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
    }

    /// Scale factor mapping standardized derivatives back (`ẋ = std·ṡ`).
    pub fn derivative_scale(&self, j: usize) -> f64 {
        if self.passthrough[j] {
            1.0
        } else {
            self.std[j]
        }
    }
}

pub fn fit_scaler(data: &Matrix) -> Result<Scaler> {
    if data.rows() < 2 {
        return Err(invalid("scaler needs at least 2 samples"));
    }
    let n = data.rows() as f64;
    let mut mean = vec![0.0; data.cols()];
    for r in data.row_iter() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; data.cols()];
    for r in data.row_iter() {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();
    let passthrough = std.iter().map(|&s| s <= CONSTANT_COLUMN_STD).collect();
    Ok(Scaler { mean, std, passthrough })
}

fn check_width(scaler: &Scaler, data: &Matrix) -> Result<()> {
    if data.cols() != scaler.dim() {
        return Err(invalid(format!(
            "data has {} columns but the scaler was fit on {}",
            data.cols(),
            scaler.dim()
        )));
    }
    Ok(())
}

pub fn apply_scaler(scaler: &Scaler, data: &Matrix) -> Result<Matrix> {
    check_width(scaler, data)?;
    let mut out = data.clone();
    for i in 0..out.rows() {
        scaler.apply_row(out.row_mut(i));
    }
    Ok(out)
}

pub fn invert_scaler(scaler: &Scaler, data: &Matrix) -> Result<Matrix> {
    check_width(scaler, data)?;
    let mut out = data.clone();
    for i in 0..out.rows() {
        scaler.invert_row(out.row_mut(i));
    }
    Ok(out)
}
