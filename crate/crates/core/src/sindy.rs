//! Sparse identification of latent dynamics: polynomial libraries, STLSQ,
//! bagged/library-dropping ensembles, simulation and equation printing.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numkit::{least_squares, rk4_integrate, Matrix, Rng, TimeGrid};

/// Candidate functions `{monomials in z of total degree ≤ state_degree} × {μ^k, k ≤ param_degree}`.
///
/// Column order: z-monomials in graded lexicographic order (degree
/// ascending; within a degree, higher powers of earlier variables first),
/// and for each monomial the μ powers in ascending order. Without a bias the
/// whole z-degree-0 block (1, μ, μ², …) is left out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LibrarySpec {
    pub state_dim: usize,
    /// 0 (nonparametric) or 1.
    pub param_dim: usize,
    pub state_degree: u32,
    pub param_degree: u32,
    pub include_bias: bool,
}

/// One library column: exponents of z and of μ.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Term {
    pub z_powers: Vec<u32>,
    pub mu_power: u32,
}

/// Exponent vectors of length `n` summing to `d`, earlier variables first.
fn compositions(n: usize, d: u32) -> Vec<Vec<u32>> {
    if n == 0 {
        return if d == 0 { vec![vec![]] } else { vec![] };
    }
    let mut out = Vec::new();
    for first in (0..=d).rev() {
        for rest in compositions(n - 1, d - first) {
            let mut v = Vec::with_capacity(n);
            v.push(first);
            v.extend(rest);
            out.push(v);
        }
    }
    out
}

impl LibrarySpec {
    pub fn new(state_dim: usize, param_dim: usize, state_degree: u32, param_degree: u32, include_bias: bool) -> Result<Self> {
        let spec = Self {
            state_dim,
            param_dim,
            state_degree,
            param_degree,
            include_bias,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 {
            return Err(invalid("library needs at least one state variable"));
        }
        if self.param_dim > 1 {
            return Err(invalid("libraries support at most one parameter"));
        }
        if self.terms().is_empty() {
            return Err(invalid("library has no terms"));
        }
        Ok(())
    }

    fn mu_degree(&self) -> u32 {
        if self.param_dim == 0 {
            0
        } else {
            self.param_degree
        }
    }

    pub fn terms(&self) -> Vec<Term> {
        let lowest = if self.include_bias { 0 } else { 1 };
        let mut out = Vec::new();
        for d in lowest..=self.state_degree {
            for z_powers in compositions(self.state_dim, d) {
                for k in 0..=self.mu_degree() {
                    out.push(Term {
                        z_powers: z_powers.clone(),
                        mu_power: k,
                    });
                }
            }
        }
        out
    }

    pub fn n_terms(&self) -> usize {
        self.terms().len()
    }

    /// Readable names such as `1`, `z0`, `z0^2 z1`, `z1 mu^2`.
    pub fn term_names(&self) -> Vec<String> {
        self.terms()
            .iter()
            .map(|t| {
                let mut parts = Vec::new();
                for (i, &p) in t.z_powers.iter().enumerate() {
                    match p {
                        0 => {}
                        1 => parts.push(format!("z{i}")),
                        _ => parts.push(format!("z{i}^{p}")),
                    }
                }
                match t.mu_power {
                    0 => {}
                    1 => parts.push("mu".to_string()),
                    k => parts.push(format!("mu^{k}")),
                }
                if parts.is_empty() {
                    "1".to_string()
                } else {
                    parts.join(" ")
                }
            })
            .collect()
    }

    /// Compiled form for repeated row evaluation.
    pub fn compile(&self) -> Library {
        let terms = self.terms();
        Library {
            n: self.state_dim,
            z_powers: terms.iter().map(|t| t.z_powers.clone()).collect(),
            mu_powers: terms.iter().map(|t| t.mu_power as i32).collect(),
            max_power: self.state_degree as usize,
        }
    }
}

/// Exponent tables of a [`LibrarySpec`], evaluated row by row.
#[derive(Debug, Clone)]
pub struct Library {
    n: usize,
    z_powers: Vec<Vec<u32>>,
    mu_powers: Vec<i32>,
    max_power: usize,
}

impl Library {
    pub fn n_terms(&self) -> usize {
        self.z_powers.len()
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    /// Power table `pw[i][p] = z_i^p`.
    fn powers(&self, z: &[f64]) -> Vec<Vec<f64>> {
        z.iter()
            .map(|&v| {
                let mut row = Vec::with_capacity(self.max_power + 1);
                let mut acc = 1.0;
                for _ in 0..=self.max_power {
                    row.push(acc);
                    acc *= v;
                }
                row
            })
            .collect()
    }

    /// `θ(z; μ)` into `out` (length `n_terms`).
    pub fn eval(&self, z: &[f64], mu: f64, out: &mut [f64]) {
        let pw = self.powers(z);
        for (k, (zp, &mp)) in self.z_powers.iter().zip(&self.mu_powers).enumerate() {
            let mut v = mu.powi(mp);
            for (i, &p) in zp.iter().enumerate() {
                v *= pw[i][p as usize];
            }
            out[k] = v;
        }
    }

    /// `θ` and its Jacobian `∂θ_k/∂z_j`, stored row-major as `jac[k·n + j]`.
    pub fn eval_with_jacobian(&self, z: &[f64], mu: f64, out: &mut [f64], jac: &mut [f64]) {
        let pw = self.powers(z);
        let n = self.n;
        for (k, (zp, &mp)) in self.z_powers.iter().zip(&self.mu_powers).enumerate() {
            let m = mu.powi(mp);
            let mut v = m;
            for (i, &p) in zp.iter().enumerate() {
                v *= pw[i][p as usize];
            }
            out[k] = v;
            for j in 0..n {
                let pj = zp[j];
                if pj == 0 {
                    jac[k * n + j] = 0.0;
                    continue;
                }
                let mut d = m * pj as f64;
                for (i, &p) in zp.iter().enumerate() {
                    let e = if i == j { p - 1 } else { p };
                    d *= pw[i][e as usize];
                }
                jac[k * n + j] = d;
            }
        }
    }
}

/// Library matrix with one row per sample.
pub fn build_library(z: &Matrix, mu_per_row: &[f64], spec: &LibrarySpec) -> Result<Matrix> {
    spec.validate()?;
    if z.cols() != spec.state_dim {
        return Err(invalid(format!(
            "states have {} columns but the library expects {}",
            z.cols(),
            spec.state_dim
        )));
    }
    if spec.param_dim == 1 && mu_per_row.len() != z.rows() {
        return Err(invalid(format!(
            "{} parameter values for {} samples",
            mu_per_row.len(),
            z.rows()
        )));
    }
    if !z.is_finite() || mu_per_row.iter().any(|v| !v.is_finite()) {
        return Err(invalid("library input contains non-finite values"));
    }
    let lib = spec.compile();
    let mut theta = Matrix::zeros(z.rows(), lib.n_terms());
    for i in 0..z.rows() {
        let mu = if spec.param_dim == 1 { mu_per_row[i] } else { 0.0 };
        lib.eval(z.row(i), mu, theta.row_mut(i));
    }
    Ok(theta)
}

/// Result of a sparse regression.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFit {
    /// `r × n` coefficients.
    pub xi: Matrix,
    /// Output columns whose support thresholded away entirely.
    pub empty_columns: Vec<usize>,
}

fn solve_column(theta: &Matrix, rhs: &Matrix, support: &[usize], ridge: f64) -> Result<Vec<f64>> {
    let sub = theta.select_columns(support);
    Ok(least_squares(&sub, rhs, ridge)?.into_vec())
}

/// Sequentially thresholded least squares, column by column.
///
/// Each pass re-solves on the surviving support and drops entries below
/// `tau`; the loop ends when the support stops changing or after
/// `max_iter` passes. A final hard threshold guarantees every nonzero
/// coefficient has magnitude at least `tau`.
pub fn stlsq(theta: &Matrix, zdot: &Matrix, tau: f64, ridge: f64, max_iter: usize) -> Result<SparseFit> {
    if theta.rows() != zdot.rows() {
        return Err(invalid(format!(
            "library has {} rows but derivatives have {}",
            theta.rows(),
            zdot.rows()
        )));
    }
    if !(tau >= 0.0) || !(ridge >= 0.0) {
        return Err(invalid("threshold and ridge must be nonnegative"));
    }
    let r = theta.cols();
    let mut xi = Matrix::zeros(r, zdot.cols());
    let mut empty_columns = Vec::new();
    let all: Vec<usize> = (0..r).collect();
    for k in 0..zdot.cols() {
        let rhs = Matrix::from_vec(zdot.rows(), 1, zdot.column(k))?;
        let mut support = all.clone();
        let mut coef = solve_column(theta, &rhs, &support, ridge)?;
        for _ in 0..max_iter {
            let kept: Vec<usize> = (0..support.len()).filter(|&i| coef[i].abs() >= tau).collect();
            if kept.len() == support.len() {
                break;
            }
            support = kept.iter().map(|&i| support[i]).collect();
            if support.is_empty() {
                break;
            }
            coef = solve_column(theta, &rhs, &support, ridge)?;
        }
        let mut any = false;
        for (&j, &c) in support.iter().zip(&coef) {
            if c.abs() >= tau {
                xi[(j, k)] = c;
                any = true;
            }
        }
        if !any {
            empty_columns.push(k);
        }
    }
    Ok(SparseFit { xi, empty_columns })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    Median,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub n_models: usize,
    /// Fraction of rows drawn (without replacement) for each member.
    pub sample_fraction: f64,
    /// Library columns removed per member.
    pub library_drop_count: usize,
    pub aggregation: Aggregation,
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_models: 20,
            sample_fraction: 0.8,
            library_drop_count: 1,
            aggregation: Aggregation::Median,
            seed: 0,
        }
    }
}

impl EnsembleConfig {
    pub fn single() -> Self {
        Self {
            n_models: 1,
            sample_fraction: 1.0,
            library_drop_count: 0,
            aggregation: Aggregation::Median,
            seed: 0,
        }
    }

    pub fn validate(&self, rows: usize, terms: usize) -> Result<()> {
        if self.n_models == 0 {
            return Err(invalid("ensemble needs at least one model"));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(invalid("sample_fraction must lie in (0, 1]"));
        }
        if self.library_drop_count >= terms {
            return Err(invalid(format!(
                "cannot drop {} of {terms} library terms",
                self.library_drop_count
            )));
        }
        if rows == 0 {
            return Err(invalid("ensemble needs data rows"));
        }
        Ok(())
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// STLSQ on row subsamples with library columns dropped at random,
/// aggregated entrywise and hard-thresholded at `tau`.
///
/// Member `b` draws from `Rng::new(cfg.seed).fork(b)`; dropped columns
/// count as zero coefficients. Subsampled rows keep their original order, so
/// a single member using every row and every column equals [`stlsq`].
pub fn ensemble_stlsq(
    theta: &Matrix,
    zdot: &Matrix,
    tau: f64,
    ridge: f64,
    max_iter: usize,
    cfg: &EnsembleConfig,
) -> Result<SparseFit> {
    if theta.rows() != zdot.rows() {
        return Err(invalid("library and derivative row counts differ"));
    }
    let (rows, r) = (theta.rows(), theta.cols());
    cfg.validate(rows, r)?;
    let base = Rng::new(cfg.seed);
    let take = ((cfg.sample_fraction * rows as f64).round() as usize).clamp(1, rows);
    let members: Vec<Matrix> = (0..cfg.n_models)
        .into_par_iter()
        .map(|b| {
            let mut rng = base.fork(b as u64);
            let sel = rng.sample_without_replacement(rows, take);
            let dropped = rng.sample_without_replacement(r, cfg.library_drop_count);
            let keep: Vec<usize> = (0..r).filter(|j| dropped.binary_search(j).is_err()).collect();
            let th = theta.select_rows(&sel).select_columns(&keep);
            let zd = zdot.select_rows(&sel);
            let fit = stlsq(&th, &zd, tau, ridge, max_iter)?;
            let mut full = Matrix::zeros(r, zdot.cols());
            for (row, &j) in keep.iter().enumerate() {
                full.row_mut(j).copy_from_slice(fit.xi.row(row));
            }
            Ok(full)
        })
        .collect::<Result<_>>()?;
    let mut xi = Matrix::zeros(r, zdot.cols());
    let mut buf = vec![0.0; members.len()];
    for i in 0..r {
        for k in 0..zdot.cols() {
            for (slot, m) in buf.iter_mut().zip(&members) {
                *slot = m[(i, k)];
            }
            let v = match cfg.aggregation {
                Aggregation::Median => median(&mut buf),
                Aggregation::Mean => buf.iter().sum::<f64>() / buf.len() as f64,
            };
            xi[(i, k)] = if v.abs() >= tau { v } else { 0.0 };
        }
    }
    let empty_columns = (0..zdot.cols())
        .filter(|&k| (0..r).all(|i| xi[(i, k)] == 0.0))
        .collect();
    Ok(SparseFit { xi, empty_columns })
}

/// Identified latent system `ż = θ(z; μ)·Ξ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SindyModel {
    pub spec: LibrarySpec,
    /// `r × n`.
    pub xi: Matrix,
    pub threshold: f64,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl SindyModel {
    pub fn new(spec: LibrarySpec, xi: Matrix, threshold: f64) -> Result<Self> {
        spec.validate()?;
        if xi.shape() != (spec.n_terms(), spec.state_dim) {
            return Err(invalid(format!(
                "coefficient matrix is {}x{}, library needs {}x{}",
                xi.rows(),
                xi.cols(),
                spec.n_terms(),
                spec.state_dim
            )));
        }
        if !xi.is_finite() {
            return Err(invalid("coefficients must be finite"));
        }
        Ok(Self {
            spec,
            xi,
            threshold,
            notes: Vec::new(),
        })
    }

    pub fn state_dim(&self) -> usize {
        self.spec.state_dim
    }

    /// Right-hand side evaluator reusable across calls.
    pub fn rhs(&self) -> impl Fn(&[f64], f64, &mut [f64]) + '_ {
        let lib = self.spec.compile();
        let theta = vec![0.0; lib.n_terms()];
        let cell = std::cell::RefCell::new((lib, theta));
        move |z: &[f64], mu: f64, out: &mut [f64]| {
            let (lib, theta) = &mut *cell.borrow_mut();
            lib.eval(z, mu, theta);
            out.iter_mut().for_each(|o| *o = 0.0);
            for (k, &t) in theta.iter().enumerate() {
                if t != 0.0 {
                    for (o, &x) in out.iter_mut().zip(self.xi.row(k)) {
                        *o += t * x;
                    }
                }
            }
        }
    }

    /// Number of nonzero coefficients.
    pub fn active_terms(&self) -> usize {
        self.xi.as_slice().iter().filter(|v| **v != 0.0).count()
    }
}

/// Integrates the identified model with RK4.
pub fn simulate(model: &SindyModel, z0: &[f64], mu: f64, grid: TimeGrid) -> Result<Matrix> {
    if z0.len() != model.state_dim() {
        return Err(invalid(format!(
            "initial state has length {} but the model has {} variables",
            z0.len(),
            model.state_dim()
        )));
    }
    let rhs = model.rhs();
    rk4_integrate(|_, z, m: &f64, out| rhs(z, *m, out), z0, grid, &mu)
}

/// One line per latent variable, e.g. `z0' = -0.111 z0 - 0.992 z1`.
pub fn equations_to_text(model: &SindyModel) -> String {
    let names = model.spec.term_names();
    let mut lines = Vec::new();
    for k in 0..model.state_dim() {
        let mut line = format!("z{k}' =");
        let mut first = true;
        for (i, name) in names.iter().enumerate() {
            let c = model.xi[(i, k)];
            if c == 0.0 {
                continue;
            }
            let mag = format!("{:.3}", c.abs());
            let body = if name == "1" { mag } else { format!("{mag} {name}") };
            if first {
                let sign = if c < 0.0 { "-" } else { "" };
                line.push_str(&format!(" {sign}{body}"));
                first = false;
            } else {
                let sign = if c < 0.0 { '-' } else { '+' };
                line.push_str(&format!(" {sign} {body}"));
            }
        }
        if first {
            line.push_str(" 0");
        }
        lines.push(line);
    }
    lines.join("\n")
}

/// Nonzero coefficients per latent variable as a JSON document.
pub fn equations_to_json(model: &SindyModel) -> String {
    let names = model.spec.term_names();
    let equations: Vec<serde_json::Value> = (0..model.state_dim())
        .map(|k| {
            let terms: serde_json::Map<String, serde_json::Value> = names
                .iter()
                .enumerate()
                .filter(|&(i, _)| model.xi[(i, k)] != 0.0)
                .map(|(i, n)| (n.clone(), model.xi[(i, k)].into()))
                .collect();
            serde_json::json!({ "lhs": format!("z{k}'"), "terms": terms })
        })
        .collect();
    let doc = serde_json::json!({
        "state_dim": model.spec.state_dim,
        "param_dim": model.spec.param_dim,
        "threshold": model.threshold,
        "equations": equations,
        "notes": model.notes,
    });
    serde_json::to_string_pretty(&doc).expect("equations serialize")
}
