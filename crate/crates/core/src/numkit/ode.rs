use super::{Matrix, TimeGrid};
use crate::error::{invalid, Error, Result};

/// Scratch buffers for [`rk4_step`].
pub(crate) struct Rk4Work {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl Rk4Work {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            k: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            tmp: vec![0.0; n],
        }
    }
}

/// Advances `y` in place by one RK4 step of size `h` from time `t`.
pub(crate) fn rk4_step<P: ?Sized, F>(f: &mut F, t: f64, h: f64, y: &mut [f64], param: &P, w: &mut Rk4Work)
where
    F: FnMut(f64, &[f64], &P, &mut [f64]),
{
    let n = y.len();
    let [k1, k2, k3, k4] = &mut w.k;
    let tmp = &mut w.tmp;
    f(t, y, param, k1);
    for j in 0..n {
        tmp[j] = y[j] + 0.5 * h * k1[j];
    }
    f(t + 0.5 * h, tmp, param, k2);
    for j in 0..n {
        tmp[j] = y[j] + 0.5 * h * k2[j];
    }
    f(t + 0.5 * h, tmp, param, k3);
    for j in 0..n {
        tmp[j] = y[j] + h * k3[j];
    }
    f(t + h, tmp, param, k4);
    for j in 0..n {
        y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
    }
}

/// Classical fourth-order Runge–Kutta on a uniform grid.
///
/// `f(t, y, param, out)` writes dy/dt into `out`. Row `i` of the result is the
/// state at `grid.time(i)`; row 0 is `y0`. A non-finite state aborts with
/// [`Error::DivergedTrajectory`] carrying the rows computed so far.
pub fn rk4_integrate<P: ?Sized, F>(mut f: F, y0: &[f64], grid: TimeGrid, param: &P) -> Result<Matrix>
where
    F: FnMut(f64, &[f64], &P, &mut [f64]),
{
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(invalid("initial state contains non-finite values"));
    }
    let mut out = Matrix::zeros(grid.count(), y0.len());
    out.row_mut(0).copy_from_slice(y0);
    let mut y = y0.to_vec();
    let mut work = Rk4Work::new(y0.len());
    for i in 1..grid.count() {
        rk4_step(&mut f, grid.time(i - 1), grid.dt(), &mut y, param, &mut work);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(diverged(&out, i - 1));
        }
        out.row_mut(i).copy_from_slice(&y);
    }
    Ok(out)
}

/// Divergence error keeping rows `0..=last_valid` of `traj`.
pub(crate) fn diverged(traj: &Matrix, last_valid: usize) -> Error {
    Error::DivergedTrajectory {
        last_valid,
        partial: Box::new(traj.row_range(0, last_valid + 1)),
    }
}
