//! Synthetic full-order datasets with known pitchfork and Hopf structure.
//!
//! A low-dimensional normal form is integrated with RK4 and then embedded in
//! `N_h` degrees of freedom through a [`LiftMap`], so downstream stages see
//! high-dimensional snapshots whose bifurcation behaviour is known exactly.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numkit::{diverged, norm2, random_orthogonal, rk4_step, Matrix, Rk4Work, Rng, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SystemKind {
    PitchforkNormalForm,
    HopfNormalForm,
    /// Lorenz with σ = 10, β = 8/3 and ρ = μ.
    Lorenz,
}

/// Latent normal form plus `transverse_dims` fast, linearly decaying modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FomSystem {
    pub kind: SystemKind,
    pub mu_star: f64,
    /// Angular frequency of the Hopf oscillation; unused otherwise.
    pub omega: f64,
    pub transverse_dims: usize,
    pub transverse_rate: f64,
}

const LORENZ_SIGMA: f64 = 10.0;
const LORENZ_BETA: f64 = 8.0 / 3.0;

impl FomSystem {
    pub fn pitchfork(mu_star: f64) -> Self {
        Self {
            kind: SystemKind::PitchforkNormalForm,
            mu_star,
            omega: 0.0,
            transverse_dims: 3,
            transverse_rate: 10.0,
        }
    }

    pub fn hopf(mu_star: f64, omega: f64) -> Self {
        Self {
            kind: SystemKind::HopfNormalForm,
            mu_star,
            omega,
            transverse_dims: 3,
            transverse_rate: 10.0,
        }
    }

    pub fn lorenz() -> Self {
        Self {
            kind: SystemKind::Lorenz,
            mu_star: 1.0,
            omega: 0.0,
            transverse_dims: 0,
            transverse_rate: 1.0,
        }
    }

    pub fn with_transverse(mut self, dims: usize, rate: f64) -> Self {
        self.transverse_dims = dims;
        self.transverse_rate = rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.transverse_rate > 0.0) {
            return Err(invalid("transverse_rate must be positive"));
        }
        if self.kind == SystemKind::HopfNormalForm && !(self.omega > 0.0) {
            return Err(invalid("Hopf system needs omega > 0"));
        }
        if !self.mu_star.is_finite() {
            return Err(invalid("mu_star must be finite"));
        }
        Ok(())
    }

    /// Dimension of the normal form without the transverse modes.
    pub fn core_dim(&self) -> usize {
        match self.kind {
            SystemKind::PitchforkNormalForm => 1,
            SystemKind::HopfNormalForm => 2,
            SystemKind::Lorenz => 3,
        }
    }

    pub fn dim(&self) -> usize {
        self.core_dim() + self.transverse_dims
    }

    fn rhs_into(&self, y: &[f64], mu: f64, out: &mut [f64]) {
        let c = self.core_dim();
        match self.kind {
            SystemKind::PitchforkNormalForm => {
                out[0] = (self.mu_star - mu) * y[0] - y[0] * y[0] * y[0];
            }
            SystemKind::HopfNormalForm => {
                let alpha = mu - self.mu_star;
                let r2 = y[0] * y[0] + y[1] * y[1];
                out[0] = alpha * y[0] - self.omega * y[1] - y[0] * r2;
                out[1] = self.omega * y[0] + alpha * y[1] - y[1] * r2;
            }
            SystemKind::Lorenz => {
                out[0] = LORENZ_SIGMA * (y[1] - y[0]);
                out[1] = y[0] * (mu - y[2]) - y[1];
                out[2] = y[0] * y[1] - LORENZ_BETA * y[2];
            }
        }
        for k in c..y.len() {
            out[k] = -self.transverse_rate * y[k];
        }
    }

    /// Initial state: a small seeded-sign kick along the first normal-form
    /// coordinate (this picks the pitchfork branch) plus seeded transverse
    /// content. Lorenz starts near its classical attractor.
    pub fn initial_state(&self, branch_sign: f64, rng: &mut Rng) -> Vec<f64> {
        let mut y0 = vec![0.0; self.dim()];
        match self.kind {
            SystemKind::PitchforkNormalForm | SystemKind::HopfNormalForm => {
                y0[0] = 0.01 * branch_sign;
            }
            SystemKind::Lorenz => {
                y0[..3].copy_from_slice(&[-8.0, 7.0, 27.0]);
            }
        }
        for v in &mut y0[self.core_dim()..] {
            *v = 0.1 * rng.normal();
        }
        y0
    }
}

/// Right-hand side of the latent system at `(t, y)` for parameter `mu`.
pub fn latent_rhs(system: &FomSystem, _t: f64, y: &[f64], mu: f64) -> Result<Vec<f64>> {
    if y.len() != system.dim() {
        return Err(invalid(format!(
            "state has length {} but the system has dimension {}",
            y.len(),
            system.dim()
        )));
    }
    if !mu.is_finite() || y.iter().any(|v| !v.is_finite()) {
        return Err(invalid("latent_rhs received non-finite input"));
    }
    let mut out = vec![0.0; y.len()];
    system.rhs_into(y, mu, &mut out);
    Ok(out)
}

/// Latent trajectory plus the row at which early stopping fired, if it did.
#[derive(Debug, Clone)]
pub struct FomRun {
    pub traj: Matrix,
    /// Index of the last computed row when the convergence test stopped the run.
    pub stop_index: Option<usize>,
}

/// Integrates the latent system. With `stop_tol = Some(τ)`, integration
/// ends at the first step whose relative increment `‖y⁺ − y‖ / ‖y‖` drops
/// below τ; the trajectory then ends at that accepted step.
pub fn simulate_fom(
    system: &FomSystem,
    mu: f64,
    grid: TimeGrid,
    y0: &[f64],
    stop_tol: Option<f64>,
) -> Result<FomRun> {
    system.validate()?;
    if y0.len() != system.dim() {
        return Err(invalid(format!(
            "initial state has length {} but the system has dimension {}",
            y0.len(),
            system.dim()
        )));
    }
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(invalid("initial state contains non-finite values"));
    }
    let mut traj = Matrix::zeros(grid.count(), y0.len());
    traj.row_mut(0).copy_from_slice(y0);
    let mut y = y0.to_vec();
    let mut work = Rk4Work::new(y.len());
    let mut f = |_: f64, s: &[f64], m: &f64, out: &mut [f64]| system.rhs_into(s, *m, out);
    for i in 1..grid.count() {
        rk4_step(&mut f, grid.time(i - 1), grid.dt(), &mut y, &mu, &mut work);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(diverged(&traj, i - 1));
        }
        traj.row_mut(i).copy_from_slice(&y);
        if let Some(tol) = stop_tol {
            let prev = traj.row(i - 1);
            let base = norm2(prev);
            if base > 0.0 {
                let step: f64 = prev.iter().zip(&y).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt();
                if step / base < tol {
                    return Ok(FomRun {
                        traj: traj.row_range(0, i + 1),
                        stop_index: Some(i),
                    });
                }
            }
        }
    }
    Ok(FomRun { traj, stop_index: None })
}

/// Named contiguous slice of the full-order state vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSlice {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl FieldSlice {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// Partition of `[0, N_h)` into named fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldLayout {
    fields: Vec<FieldSlice>,
}

impl FieldLayout {
    pub fn new(fields: Vec<FieldSlice>) -> Result<Self> {
        let mut next = 0;
        for f in &fields {
            if f.start != next || f.len == 0 {
                return Err(invalid(format!(
                    "field {:?} does not continue the partition at {next}",
                    f.name
                )));
            }
            next += f.len;
        }
        if fields.is_empty() {
            return Err(invalid("field layout is empty"));
        }
        Ok(Self { fields })
    }

    /// Two velocity analogs `u1`, `u2` (40% each) and a pressure analog `p`.
    pub fn flow(n_h: usize) -> Result<Self> {
        if n_h < 3 {
            return Err(invalid("flow layout needs at least 3 degrees of freedom"));
        }
        let u = (2 * n_h / 5).max(1);
        Self::new(vec![
            FieldSlice { name: "u1".into(), start: 0, len: u },
            FieldSlice { name: "u2".into(), start: u, len: u },
            FieldSlice { name: "p".into(), start: 2 * u, len: n_h - 2 * u },
        ])
    }

    pub fn total_len(&self) -> usize {
        self.fields.iter().map(|f| f.len).sum()
    }

    pub fn fields(&self) -> &[FieldSlice] {
        &self.fields
    }

    pub fn get(&self, name: &str) -> Result<&FieldSlice> {
        self.fields
            .iter()
            .find(|f| f.name == name)
            .ok_or_else(|| invalid(format!("unknown field {name:?}")))
    }
}

/// Embedding `x = q·y + gain·q₂·(y⊙y)` of latent states into `N_h` dofs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftMap {
    q: Matrix,
    q2: Matrix,
    nonlinear_gain: f64,
}

impl LiftMap {
    pub fn new(q: Matrix, q2: Matrix, nonlinear_gain: f64) -> Result<Self> {
        if q.shape() != q2.shape() {
            return Err(invalid("linear and quadratic lift blocks must share a shape"));
        }
        if q.rows() < q.cols() {
            return Err(invalid("lift needs N_h >= latent dimension"));
        }
        if !(nonlinear_gain >= 0.0) {
            return Err(invalid("nonlinear_gain must be nonnegative"));
        }
        for m in [&q, &q2] {
            let gram = m.t_matmul(m)?;
            if gram.sub(&Matrix::identity(m.cols()))?.max_abs() > 1e-10 {
                return Err(invalid("lift blocks must have orthonormal columns"));
            }
        }
        Ok(Self { q, q2, nonlinear_gain })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            q: Matrix::identity(d),
            q2: Matrix::identity(d),
            nonlinear_gain: 0.0,
        }
    }

    /// Random orthonormal linear block over the whole state. The quadratic
    /// block lives on the last field of `layout` (the pressure analog), so
    /// velocity fields respond linearly to the latent state.
    pub fn random(layout: &FieldLayout, d: usize, nonlinear_gain: f64, rng: &mut Rng) -> Result<Self> {
        let n_h = layout.total_len();
        let q = random_orthogonal(n_h, d, rng)?;
        let last = layout.fields().last().expect("layout is nonempty");
        if last.len < d {
            return Err(invalid(format!(
                "field {:?} has {} dofs, fewer than the latent dimension {d}",
                last.name, last.len
            )));
        }
        let block = random_orthogonal(last.len, d, rng)?;
        let mut q2 = Matrix::zeros(n_h, d);
        for i in 0..last.len {
            q2.row_mut(last.start + i).copy_from_slice(block.row(i));
        }
        Self::new(q, q2, nonlinear_gain)
    }

    pub fn n_h(&self) -> usize {
        self.q.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.q.cols()
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn q2(&self) -> &Matrix {
        &self.q2
    }

    pub fn nonlinear_gain(&self) -> f64 {
        self.nonlinear_gain
    }

    /// Lifts a single latent state.
    pub fn apply(&self, y: &[f64]) -> Vec<f64> {
        let mut x = self.q.matvec(y);
        if self.nonlinear_gain != 0.0 {
            let sq: Vec<f64> = y.iter().map(|v| v * v).collect();
            let quad = self.q2.matvec(&sq);
            for (xi, qi) in x.iter_mut().zip(quad) {
                *xi += self.nonlinear_gain * qi;
            }
        }
        x
    }
}

/// Lifts every row of a latent trajectory.
pub fn lift(latent_traj: &Matrix, map: &LiftMap) -> Result<Matrix> {
    if latent_traj.cols() != map.latent_dim() {
        return Err(invalid(format!(
            "latent trajectory has {} columns but the lift expects {}",
            latent_traj.cols(),
            map.latent_dim()
        )));
    }
    let mut out = Matrix::zeros(latent_traj.rows(), map.n_h());
    for (i, y) in latent_traj.row_iter().enumerate() {
        out.row_mut(i).copy_from_slice(&map.apply(y));
    }
    Ok(out)
}

/// Repeats the final row until the trajectory has `target_count` rows.
pub fn pad_to_final(traj: &Matrix, target_count: usize) -> Result<Matrix> {
    if traj.rows() == 0 {
        return Err(invalid("cannot pad an empty trajectory"));
    }
    if target_count < traj.rows() {
        return Err(invalid(format!(
            "target length {target_count} is shorter than the trajectory ({} rows)",
            traj.rows()
        )));
    }
    let mut out = Matrix::zeros(target_count, traj.cols());
    out.as_mut_slice()[..traj.as_slice().len()].copy_from_slice(traj.as_slice());
    let last = traj.row(traj.rows() - 1).to_vec();
    for i in traj.rows()..target_count {
        out.row_mut(i).copy_from_slice(&last);
    }
    Ok(out)
}

/// Provenance of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub system: FomSystem,
    pub seed: u64,
    pub nonlinear_gain: f64,
    pub stop_tol: Option<f64>,
}

/// Parameterized collection of full-order trajectories on a shared grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSet {
    params: Vec<f64>,
    grid: TimeGrid,
    trajectories: Vec<Matrix>,
    /// Last non-padded row of each trajectory.
    last_recorded: Vec<usize>,
    layout: FieldLayout,
    meta: Option<DatasetMeta>,
}

impl SnapshotSet {
    pub fn new(
        params: Vec<f64>,
        grid: TimeGrid,
        trajectories: Vec<Matrix>,
        last_recorded: Vec<usize>,
        layout: FieldLayout,
        meta: Option<DatasetMeta>,
    ) -> Result<Self> {
        if params.is_empty() {
            return Err(invalid("snapshot set needs at least one parameter"));
        }
        if params.len() != trajectories.len() || params.len() != last_recorded.len() {
            return Err(invalid("params, trajectories and stop indices must align"));
        }
        if params.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(invalid("params must be strictly increasing"));
        }
        let n_h = layout.total_len();
        for (m, (t, &last)) in trajectories.iter().zip(&last_recorded).enumerate() {
            if t.shape() != (grid.count(), n_h) {
                return Err(invalid(format!(
                    "trajectory {m} is {}x{}, expected {}x{n_h}",
                    t.rows(),
                    t.cols(),
                    grid.count()
                )));
            }
            if last >= grid.count() {
                return Err(invalid(format!("stop index {last} of trajectory {m} is past the grid")));
            }
        }
        Ok(Self {
            params,
            grid,
            trajectories,
            last_recorded,
            layout,
            meta,
        })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn trajectories(&self) -> &[Matrix] {
        &self.trajectories
    }

    pub fn last_recorded(&self) -> &[usize] {
        &self.last_recorded
    }

    pub fn layout(&self) -> &FieldLayout {
        &self.layout
    }

    pub fn meta(&self) -> Option<&DatasetMeta> {
        self.meta.as_ref()
    }

    pub fn n_h(&self) -> usize {
        self.layout.total_len()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

/// Simulates, pads and lifts one trajectory per parameter.
///
/// One branch sign is drawn from `rng` and shared by every parameter; the
/// transverse initial content of parameter `m` comes from `rng.fork(m)`.
pub fn generate_dataset(
    system: &FomSystem,
    params: &[f64],
    grid: TimeGrid,
    lift_map: &LiftMap,
    layout: &FieldLayout,
    rng: &Rng,
    stop_tol: Option<f64>,
) -> Result<SnapshotSet> {
    system.validate()?;
    if params.is_empty() {
        return Err(invalid("generate_dataset needs at least one parameter"));
    }
    if lift_map.latent_dim() != system.dim() {
        return Err(invalid(format!(
            "lift expects latent dimension {} but the system has {}",
            lift_map.latent_dim(),
            system.dim()
        )));
    }
    if lift_map.n_h() != layout.total_len() {
        return Err(invalid("lift output width does not match the field layout"));
    }
    let branch_sign = rng.clone().sign();
    let runs: Vec<(Matrix, usize)> = params
        .par_iter()
        .enumerate()
        .map(|(m, &mu)| {
            let y0 = system.initial_state(branch_sign, &mut rng.fork(m as u64));
            let run = simulate_fom(system, mu, grid, &y0, stop_tol)?;
            let last = run.traj.rows() - 1;
            let padded = pad_to_final(&run.traj, grid.count())?;
            Ok((lift(&padded, lift_map)?, last))
        })
        .collect::<Result<_>>()?;
    let (trajectories, last_recorded) = runs.into_iter().unzip();
    SnapshotSet::new(
        params.to_vec(),
        grid,
        trajectories,
        last_recorded,
        layout.clone(),
        Some(DatasetMeta {
            system: *system,
            seed: rng.seed(),
            nonlinear_gain: lift_map.nonlinear_gain(),
            stop_tol,
        }),
    )
}

/// `count` equispaced values covering `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![lo],
        _ => (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::thin_svd;

    #[test]
    fn pitchfork_origin_and_branch_are_equilibria() {
        let sys = FomSystem::pitchfork(0.96);
        assert_eq!(latent_rhs(&sys, 0.0, &[0.0, 0.0, 0.0, 0.0], 0.5).unwrap()[0], 0.0);
        let r = latent_rhs(&sys, 0.0, &[1.0, 0.0, 0.0, 0.0], 0.96 - 1.0).unwrap();
        assert!(r[0].abs() < 1e-15);
    }

    #[test]
    fn hopf_limit_cycle_radius_has_zero_radial_speed() {
        let sys = FomSystem::hopf(1.0, 2.0).with_transverse(0, 1.0);
        let y = [0.3, 0.4]; // r = 0.5
        let r = latent_rhs(&sys, 0.0, &y, 1.25).unwrap();
        let radial = (y[0] * r[0] + y[1] * r[1]) / 0.5;
        assert!(radial.abs() < 1e-14, "{radial}");
    }

    #[test]
    fn rhs_rejects_wrong_length_and_nan() {
        let sys = FomSystem::pitchfork(0.96);
        assert!(latent_rhs(&sys, 0.0, &[0.0], 0.5).is_err());
        assert!(latent_rhs(&sys, 0.0, &[f64::NAN, 0.0, 0.0, 0.0], 0.5).is_err());
    }

    #[test]
    fn pitchfork_converges_to_origin_above_critical() {
        let sys = FomSystem::pitchfork(0.96);
        let grid = TimeGrid::new(0.0, 0.05, 4001).unwrap();
        let y0 = [0.01, 0.1, -0.1, 0.05];
        let run = simulate_fom(&sys, 1.05, grid, &y0, None).unwrap();
        assert!(run.traj[(grid.count() - 1, 0)].abs() < 1e-6);
    }

    #[test]
    fn pitchfork_settles_on_square_root_branch() {
        let sys = FomSystem::pitchfork(0.96);
        let grid = TimeGrid::new(0.0, 0.05, 2001).unwrap();
        let run = simulate_fom(&sys, 0.96 - 0.64, grid, &[0.01, 0.0, 0.0, 0.0], None).unwrap();
        assert!((run.traj[(2000, 0)] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn hopf_trailing_amplitude_matches_radius() {
        let sys = FomSystem::hopf(1.0, 2.0);
        let grid = TimeGrid::new(0.0, 0.01, 20001).unwrap();
        let run = simulate_fom(&sys, 1.25, grid, &[0.01, 0.0, 0.1, 0.1, 0.1], None).unwrap();
        let tail = run.traj.column(0)[15000..].to_vec();
        let amp = tail.iter().cloned().fold(f64::MIN, f64::max) - tail.iter().cloned().fold(f64::MAX, f64::min);
        assert!((amp - 1.0).abs() < 0.02, "{amp}");
    }

    #[test]
    fn early_stop_fires_on_every_branch_run() {
        let sys = FomSystem::pitchfork(0.96);
        for mu in linspace(0.75, 0.93, 7) {
            // 20 time constants of the slowest decay toward the branch
            let horizon = 20.0 / (2.0 * (0.96 - mu)).min(10.0);
            let grid = TimeGrid::spanning(0.0, horizon, 0.01).unwrap();
            let run = simulate_fom(&sys, mu, grid, &[0.01, 0.1, 0.1, 0.1], Some(1e-7)).unwrap();
            let stop = run.stop_index.expect("early stop should fire");
            assert!(stop < grid.count() - 1);
            assert_eq!(run.traj.rows(), stop + 1);
        }
    }

    #[test]
    fn identity_lift_and_isometry() {
        let y = Matrix::from_rows(&[[1.0, 2.0], [-0.5, 0.25]]).unwrap();
        assert_eq!(lift(&y, &LiftMap::identity(2)).unwrap(), y);
        let layout = FieldLayout::flow(20).unwrap();
        let map = LiftMap::random(&layout, 2, 0.0, &mut Rng::new(5)).unwrap();
        let x = lift(&y, &map).unwrap();
        for i in 0..2 {
            assert!((norm2(x.row(i)) - norm2(y.row(i))).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_lift_by_hand() {
        let q = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]).unwrap();
        let q2 = Matrix::from_rows(&[[0.0, 1.0], [0.6, 0.0], [0.8, 0.0]]).unwrap();
        let map = LiftMap::new(q, q2, 0.1).unwrap();
        let x = map.apply(&[2.0, -3.0]);
        // q·y = (2, -3, 0); q2·(4, 9) = (9, 2.4, 3.2)
        let expect = [2.0 + 0.9, -3.0 + 0.24, 0.32];
        for (a, b) in x.iter().zip(expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn lift_rejects_dimension_mismatch() {
        assert!(lift(&Matrix::zeros(3, 3), &LiftMap::identity(2)).is_err());
    }

    #[test]
    fn padding_repeats_last_row() {
        let t = Matrix::from_rows(&[[1.0], [2.0], [3.0]]).unwrap();
        assert_eq!(pad_to_final(&t, 3).unwrap(), t);
        let p = pad_to_final(&t, 5).unwrap();
        assert_eq!(p.row(3), p.row(2));
        assert_eq!(p.row(4)[0].to_bits(), 3.0f64.to_bits());
        assert!(pad_to_final(&t, 2).is_err());
        let d = crate::numkit::central_diff(&pad_to_final(&t, 8).unwrap(), 0.1).unwrap();
        assert!((4..8).all(|i| d[(i, 0)] == 0.0));
    }

    #[test]
    fn dataset_shapes_determinism_and_rank() {
        let sys = FomSystem::pitchfork(0.96);
        let layout = FieldLayout::flow(40).unwrap();
        let rng = Rng::new(11);
        let map = LiftMap::random(&layout, sys.dim(), 0.0, &mut rng.fork(99)).unwrap();
        let grid = TimeGrid::new(0.0, 0.1, 200).unwrap();
        let params = linspace(0.75, 1.05, 20);
        let a = generate_dataset(&sys, &params, grid, &map, &layout, &rng, Some(1e-7)).unwrap();
        let b = generate_dataset(&sys, &params, grid, &map, &layout, &rng, Some(1e-7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        assert!((a.params()[19] - 1.05).abs() < 1e-15);
        let stacked = Matrix::vstack(&a.trajectories().iter().collect::<Vec<_>>()).unwrap();
        let s = thin_svd(&stacked).unwrap().s;
        assert!(s[sys.dim()] < 1e-10 * s[0]);

        let tiny = generate_dataset(&sys, &[1.0], TimeGrid::new(0.0, 0.1, 2).unwrap(), &map, &layout, &rng, None).unwrap();
        assert_eq!(tiny.trajectories()[0].shape(), (2, 40));
    }

    #[test]
    fn layout_partitions_state() {
        let l = FieldLayout::flow(200).unwrap();
        assert_eq!(l.get("u2").unwrap().range(), 80..160);
        assert_eq!(l.get("p").unwrap().len, 40);
        assert!(l.get("w").is_err());
        assert!(FieldLayout::new(vec![FieldSlice { name: "a".into(), start: 1, len: 2 }]).is_err());
    }
}
