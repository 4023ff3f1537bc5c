use serde::{Deserialize, Serialize};

use super::{Matrix, TimeGrid};
use crate::error::{invalid, Error, Result};

/// Time derivative of each column of `x` (rows are time samples).
///
/// Interior rows use the second-order central stencil; the first and last rows
/// use second-order one-sided stencils so no samples are lost.
pub fn central_diff(x: &Matrix, dt: f64) -> Result<Matrix> {
    let n = x.rows();
    if n < 3 {
        return Err(invalid(format!("central_diff needs at least 3 samples (got {n})")));
    }
    if !(dt > 0.0) {
        return Err(invalid("central_diff needs dt > 0"));
    }
    let inv2 = 1.0 / (2.0 * dt);
    let mut d = Matrix::zeros(n, x.cols());
    for j in 0..x.cols() {
        d[(0, j)] = (-3.0 * x[(0, j)] + 4.0 * x[(1, j)] - x[(2, j)]) * inv2;
        for i in 1..n - 1 {
            d[(i, j)] = (x[(i + 1, j)] - x[(i - 1, j)]) * inv2;
        }
        d[(n - 1, j)] = (3.0 * x[(n - 1, j)] - 4.0 * x[(n - 2, j)] + x[(n - 3, j)]) * inv2;
    }
    Ok(d)
}

/// Natural cubic splines through every column of a uniformly sampled signal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplineSet {
    grid: TimeGrid,
    knots: Matrix,
    /// Second derivatives at the knots; zero in the first and last rows.
    curvature: Matrix,
}

/// Fits one natural cubic spline per column of `y` (rows are the grid samples).
pub fn natural_cubic_spline(grid: TimeGrid, y: &Matrix) -> Result<SplineSet> {
    let n = grid.count();
    if n < 3 {
        return Err(invalid("natural spline needs at least 3 knots"));
    }
    if y.rows() != n {
        return Err(invalid(format!(
            "spline data has {} rows but the grid has {n} samples",
            y.rows()
        )));
    }
    if !y.is_finite() {
        return Err(invalid("spline data contains non-finite values"));
    }
    let h = grid.dt();
    let m = n - 2; // interior unknowns
    // Uniform spacing: M_{i-1} + 4 M_i + M_{i+1} = 6 (y_{i+1} - 2 y_i + y_{i-1}) / h²
    // solved by the Thomas algorithm with a shared factorization.
    let mut c_prime = vec![0.0; m];
    let mut denom = vec![0.0; m];
    for i in 0..m {
        let sub = if i == 0 { 0.0 } else { 1.0 };
        let prev = if i == 0 { 0.0 } else { c_prime[i - 1] };
        denom[i] = 4.0 - sub * prev;
        c_prime[i] = 1.0 / denom[i];
    }
    let mut curvature = Matrix::zeros(n, y.cols());
    let scale = 6.0 / (h * h);
    let mut d = vec![0.0; m];
    for col in 0..y.cols() {
        for i in 0..m {
            let rhs = scale * (y[(i + 2, col)] - 2.0 * y[(i + 1, col)] + y[(i, col)]);
            let prev = if i == 0 { 0.0 } else { d[i - 1] };
            d[i] = (rhs - prev) / denom[i];
        }
        for i in (0..m).rev() {
            let next = if i + 1 < m { curvature[(i + 2, col)] } else { 0.0 };
            curvature[(i + 1, col)] = d[i] - c_prime[i] * next;
        }
    }
    Ok(SplineSet {
        grid,
        knots: y.clone(),
        curvature,
    })
}

impl SplineSet {
    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.knots.cols()
    }

    /// Evaluates every spline at `t`. Knot times return the knot values exactly.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let (t0, h, n) = (self.grid.t0(), self.grid.dt(), self.grid.count());
        let t_end = self.grid.t_end();
        // accept round-off overshoot from grids built by repeated addition
        let slack = 1e-9 * h;
        if !(t >= t0 - slack && t <= t_end + slack) {
            return Err(Error::OutOfRange { t, lo: t0, hi: t_end });
        }
        let nearest = ((t - t0) / h).round().clamp(0.0, (n - 1) as f64) as usize;
        if self.grid.time(nearest) == t {
            return Ok(self.knots.row(nearest).to_vec());
        }
        let i = (((t - t0) / h).floor().max(0.0) as usize).min(n - 2);
        let a = self.grid.time(i + 1) - t;
        let b = t - self.grid.time(i);
        let mut out = Vec::with_capacity(self.dim());
        for col in 0..self.dim() {
            let (mi, mj) = (self.curvature[(i, col)], self.curvature[(i + 1, col)]);
            let (yi, yj) = (self.knots[(i, col)], self.knots[(i + 1, col)]);
            let v = mi * a * a * a / (6.0 * h)
                + mj * b * b * b / (6.0 * h)
                + (yi - mi * h * h / 6.0) * a / h
                + (yj - mj * h * h / 6.0) * b / h;
            out.push(v);
        }
        Ok(out)
    }

    /// Evaluates on every sample of `target`, one row per sample.
    pub fn resample(&self, target: TimeGrid) -> Result<Matrix> {
        let mut out = Matrix::zeros(target.count(), self.dim());
        for i in 0..target.count() {
            let row = self.eval(target.time(i))?;
            out.row_mut(i).copy_from_slice(&row);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sampled(grid: TimeGrid, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_fn(grid.count(), 1, |i, _| f(grid.time(i)))
    }

    #[test]
    fn derivative_of_linear_signal() {
        let grid = TimeGrid::new(0.0, 0.1, 30).unwrap();
        let d = central_diff(&sampled(grid, |t| t), 0.1).unwrap();
        assert!(d.as_slice().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn derivative_exact_for_quadratics() {
        let grid = TimeGrid::new(0.0, 0.01, 101).unwrap();
        let d = central_diff(&sampled(grid, |t| t * t), 0.01).unwrap();
        for i in 0..grid.count() {
            assert!((d[(i, 0)] - 2.0 * grid.time(i)).abs() < 1e-11, "row {i}");
        }
    }

    #[test]
    fn derivative_of_sine_against_cosine() {
        let grid = TimeGrid::new(0.0, 1e-3, 6284).unwrap();
        let d = central_diff(&sampled(grid, f64::sin), 1e-3).unwrap();
        let err = (0..grid.count())
            .map(|i| (d[(i, 0)] - grid.time(i).cos()).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn derivative_needs_three_rows() {
        assert!(central_diff(&Matrix::zeros(2, 1), 0.1).is_err());
    }

    #[test]
    fn spline_reproduces_linear_function() {
        let grid = TimeGrid::new(1.0, 0.5, 9).unwrap();
        let s = natural_cubic_spline(grid, &sampled(grid, |t| 3.0 * t - 2.0)).unwrap();
        for k in 0..80 {
            let t = 1.0 + 4.0 * k as f64 / 79.0;
            assert!((s.eval(t).unwrap()[0] - (3.0 * t - 2.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn spline_knots_are_bitwise() {
        let grid = TimeGrid::new(0.0, 0.3, 11).unwrap();
        let y = sampled(grid, |t| (2.0 * t).sin() + t * t);
        let s = natural_cubic_spline(grid, &y).unwrap();
        for i in 0..grid.count() {
            assert_eq!(s.eval(grid.time(i)).unwrap()[0].to_bits(), y[(i, 0)].to_bits());
        }
    }

    #[test]
    fn spline_sine_midpoints() {
        let grid = TimeGrid::new(0.0, std::f64::consts::TAU / 100.0, 101).unwrap();
        let s = natural_cubic_spline(grid, &sampled(grid, f64::sin)).unwrap();
        let err = (0..100)
            .map(|i| {
                let t = grid.time(i) + 0.5 * grid.dt();
                (s.eval(t).unwrap()[0] - t.sin()).abs()
            })
            .fold(0.0, f64::max);
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn spline_is_natural_and_rejects_out_of_range() {
        let grid = TimeGrid::new(0.0, 0.1, 20).unwrap();
        let s = natural_cubic_spline(grid, &sampled(grid, f64::exp)).unwrap();
        assert_eq!(s.curvature[(0, 0)], 0.0);
        assert_eq!(s.curvature[(19, 0)], 0.0);
        assert!(matches!(s.eval(-0.1), Err(Error::OutOfRange { .. })));
        assert!(matches!(s.eval(2.0), Err(Error::OutOfRange { .. })));
    }
}
