//! Dense factorizations: Householder QR, one-sided Jacobi SVD, least squares.
//!
//! The SVD reduces a tall matrix to its `n×n` triangular factor with a
//! Householder QR and then runs one-sided (Hestenes) Jacobi rotations on the
//! columns of that factor. Wide matrices are handled through their transpose.
//! Jacobi converges to high relative accuracy, which the projection-error
//! identities downstream rely on.

use super::matrix::{axpy, dot, norm2, Matrix};
use super::rng::Rng;
use crate::error::{invalid, Error, Result};

const MAX_SWEEPS: usize = 80;

/// Thin singular value decomposition `a = u · diag(s) · vt`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `m × k` with orthonormal columns, `k = min(m, n)`.
    pub u: Matrix,
    /// Nonincreasing, nonnegative.
    pub s: Vec<f64>,
    /// `k × n` with orthonormal rows.
    pub vt: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in self.s.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        us.matmul(&self.vt).expect("svd factors are conformant")
    }
}

/// Householder QR of a tall matrix (`rows ≥ cols`).
///
/// Returns the `cols × cols` upper-triangular factor and, if requested, the
/// thin `rows × cols` orthonormal factor.
pub fn householder_qr(a: &Matrix, want_q: bool) -> (Option<Matrix>, Matrix) {
    let (m, n) = a.shape();
    debug_assert!(m >= n);
    // Work column-major so each reflector touches contiguous memory.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut reflectors: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n);

    for k in 0..n {
        let x = &cols[k][k..];
        let alpha = norm2(x);
        if alpha == 0.0 {
            reflectors.push((Vec::new(), 0.0));
            continue;
        }
        let sign = if x[0] >= 0.0 { 1.0 } else { -1.0 };
        let mut v = x.to_vec();
        v[0] += sign * alpha;
        let vnorm2 = dot(&v, &v);
        let beta = 2.0 / vnorm2;
        for col in cols.iter_mut().skip(k) {
            let tail = &mut col[k..];
            let proj = beta * dot(&v, tail);
            axpy(-proj, &v, tail);
        }
        // exact zeros below the diagonal
        cols[k][k] = -sign * alpha;
        for v in &mut cols[k][k + 1..] {
            *v = 0.0;
        }
        reflectors.push((v, beta));
    }

    let r = Matrix::from_fn(n, n, |i, j| if i <= j { cols[j][i] } else { 0.0 });
    if !want_q {
        return (None, r);
    }

    // Q = H_0 H_1 ... H_{n-1} applied to the first n columns of I.
    let mut q_cols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            e
        })
        .collect();
    for (k, (v, beta)) in reflectors.iter().enumerate().rev() {
        if v.is_empty() {
            continue;
        }
        for col in q_cols.iter_mut() {
            let tail = &mut col[k..];
            let proj = beta * dot(v, tail);
            axpy(-proj, v, tail);
        }
    }
    let q = Matrix::from_fn(m, n, |i, j| q_cols[j][i]);
    (Some(q), r)
}

/// One-sided Jacobi on the columns of a square matrix `w`.
///
/// On return the columns of `w` are mutually orthogonal and `v` holds the
/// accumulated rotations, so that `w_in · v = w_out`.
fn jacobi_orthogonalize(w: &mut [Vec<f64>], v: &mut [Vec<f64>]) -> Result<()> {
    let n = w.len();
    let eps = f64::EPSILON;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(w, p, q, c, s);
                rotate(v, p, q, c, s);
            }
        }
        if !rotated {
            return Ok(());
        }
    }
    Err(Error::NumericalFailure(format!(
        "Jacobi SVD did not converge in {MAX_SWEEPS} sweeps"
    )))
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Replaces columns whose singular value is negligible with unit vectors
/// completing an orthonormal set (modified Gram–Schmidt, applied twice).
fn complete_orthonormal(cols: &mut [Vec<f64>], valid: &[bool]) {
    let m = cols.first().map_or(0, Vec::len);
    let mut done = valid.to_vec();
    let mut unit = 0usize;
    for j in 0..cols.len() {
        if done[j] {
            continue;
        }
        while unit < m {
            let mut cand = vec![0.0; m];
            cand[unit] = 1.0;
            unit += 1;
            for _ in 0..2 {
                for (k, other) in cols.iter().enumerate() {
                    if done[k] {
                        let proj = dot(other, &cand);
                        axpy(-proj, other, &mut cand);
                    }
                }
            }
            let nrm = norm2(&cand);
            // some unit vector always keeps a residual of at least 1/sqrt(m)
            if nrm > 1e-3 {
                cand.iter_mut().for_each(|x| *x /= nrm);
                cols[j] = cand;
                done[j] = true;
                break;
            }
        }
    }
}

/// SVD of a tall matrix (`rows ≥ cols`). Left vectors are formed only if asked.
fn svd_tall(a: &Matrix, want_u: bool) -> Result<(Option<Matrix>, Vec<f64>, Matrix)> {
    let (m, n) = a.shape();
    let (q, r) = householder_qr(a, want_u);
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| r.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    jacobi_orthogonalize(&mut w, &mut v)?;

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = w.iter().map(|c| norm2(c)).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let vt = Matrix::from_fn(n, n, |i, j| v[order[i]][j]);

    let u = if want_u {
        let smax = s.first().copied().unwrap_or(0.0);
        let tol = smax * f64::EPSILON * (m.max(n) as f64);
        let mut ur: Vec<Vec<f64>> = order
            .iter()
            .zip(&s)
            .map(|(&j, &sj)| {
                if sj > tol && sj > 0.0 {
                    w[j].iter().map(|x| x / sj).collect()
                } else {
                    w[j].clone()
                }
            })
            .collect();
        let valid: Vec<bool> = s.iter().map(|&sj| sj > tol && sj > 0.0).collect();
        complete_orthonormal(&mut ur, &valid);
        let ur = Matrix::from_fn(n, n, |i, j| ur[j][i]);
        Some(q.expect("Q requested").matmul(&ur)?)
    } else {
        None
    };
    Ok((u, s, vt))
}

fn check_finite(a: &Matrix) -> Result<()> {
    if !a.is_finite() {
        return Err(invalid("matrix contains non-finite entries"));
    }
    if a.rows() == 0 || a.cols() == 0 {
        return Err(invalid("matrix has an empty dimension"));
    }
    Ok(())
}

/// Thin SVD: `a ≈ u · diag(s) · vt` with `k = min(rows, cols)` singular values.
pub fn thin_svd(a: &Matrix) -> Result<Svd> {
    check_finite(a)?;
    if a.rows() >= a.cols() {
        let (u, s, vt) = svd_tall(a, true)?;
        Ok(Svd {
            u: u.expect("requested"),
            s,
            vt,
        })
    } else {
        // aᵀ = U' S V'ᵀ  ⇒  a = V' S U'ᵀ
        let (u_t, s, vt_t) = svd_tall(&a.transpose(), true)?;
        Ok(Svd {
            u: vt_t.transpose(),
            s,
            vt: u_t.expect("requested").transpose(),
        })
    }
}

/// Singular values and left singular vectors only. Cheaper than [`thin_svd`]
/// for wide matrices such as snapshot matrices with many time samples.
pub fn left_singular(a: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    check_finite(a)?;
    if a.rows() >= a.cols() {
        let (u, s, _) = svd_tall(a, true)?;
        Ok((u.expect("requested"), s))
    } else {
        let (_, s, vt_t) = svd_tall(&a.transpose(), false)?;
        Ok((vt_t.transpose(), s))
    }
}

/// Minimizes `‖a·x − b‖²_F + ridge·‖x‖²_F`.
///
/// Solved through the SVD of `a`. With `ridge = 0`, singular values below
/// `max(rows, cols)·ε·σ_max` are treated as zero, which yields the
/// minimum-norm solution for rank-deficient systems.
pub fn least_squares(a: &Matrix, b: &Matrix, ridge: f64) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(invalid(format!(
            "least squares: a has {} rows but b has {}",
            a.rows(),
            b.rows()
        )));
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(invalid("ridge must be a finite nonnegative number"));
    }
    check_finite(a)?;
    if !b.is_finite() {
        return Err(invalid("right-hand side contains non-finite entries"));
    }
    let svd = thin_svd(a)?;
    let smax = svd.s.first().copied().unwrap_or(0.0);
    let cutoff = smax * f64::EPSILON * (a.rows().max(a.cols()) as f64);
    let utb = svd.u.t_matmul(b)?;
    let k = svd.s.len();
    let mut scaled = Matrix::zeros(k, b.cols());
    for i in 0..k {
        let s = svd.s[i];
        let f = if ridge > 0.0 {
            s / (s * s + ridge)
        } else if s > cutoff && s > 0.0 {
            1.0 / s
        } else {
            0.0
        };
        for j in 0..b.cols() {
            scaled[(i, j)] = f * utb[(i, j)];
        }
    }
    svd.vt.t_matmul(&scaled)
}

/// Random matrix with orthonormal columns: Gaussian fill, then Householder QR
/// with the signs of `R`'s diagonal folded into `Q`.
pub fn random_orthogonal(rows: usize, cols: usize, rng: &mut Rng) -> Result<Matrix> {
    if cols > rows {
        return Err(invalid(format!(
            "random_orthogonal: cols ({cols}) exceeds rows ({rows})"
        )));
    }
    if cols == 0 {
        return Ok(Matrix::zeros(rows, 0));
    }
    let g = Matrix::from_fn(rows, cols, |_, _| rng.normal());
    let (q, r) = householder_qr(&g, true);
    let mut q = q.expect("requested");
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            for i in 0..rows {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = Rng::new(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.normal())
    }

    fn orthonormality_error(q: &Matrix) -> f64 {
        let g = q.t_matmul(q).unwrap();
        g.sub(&Matrix::identity(q.cols())).unwrap().max_abs()
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let svd = thin_svd(&Matrix::identity(3)).unwrap();
        assert_eq!(svd.s.len(), 3);
        for s in &svd.s {
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn diagonal_spectrum_is_sorted() {
        let a = Matrix::from_diag(&[1.0, 3.0, 2.0]);
        let svd = thin_svd(&a).unwrap();
        assert_eq!(svd.s, vec![3.0, 2.0, 1.0]);
        // u and vt are signed permutations
        for m in [&svd.u, &svd.vt] {
            for r in m.row_iter() {
                let nz: Vec<_> = r.iter().filter(|v| v.abs() > 1e-14).collect();
                assert_eq!(nz.len(), 1);
                assert!((nz[0].abs() - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn reconstruction_tall_and_wide() {
        for (m, n, seed) in [(20, 5, 1), (5, 20, 2), (37, 37, 3), (1, 4, 4), (6, 1, 5)] {
            let a = random(m, n, seed);
            let svd = thin_svd(&a).unwrap();
            let err = svd.reconstruct().sub(&a).unwrap().frobenius_norm();
            assert!(err <= 1e-12 * a.frobenius_norm(), "{m}x{n}: {err}");
            assert!(orthonormality_error(&svd.u) < 1e-12);
            assert!(orthonormality_error(&svd.vt.transpose()) < 1e-12);
            assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn rank_deficient_factors_stay_orthonormal() {
        let x = random(30, 2, 9);
        let y = random(2, 12, 10);
        let a = x.matmul(&y).unwrap(); // rank 2
        let svd = thin_svd(&a).unwrap();
        assert!(svd.s[2] < 1e-12 * svd.s[0]);
        assert!(orthonormality_error(&svd.u) < 1e-12);
        assert!(orthonormality_error(&svd.vt.transpose()) < 1e-12);
        let (u, s) = left_singular(&a.transpose()).unwrap();
        assert!(orthonormality_error(&u) < 1e-12);
        assert!((s[0] - svd.s[0]).abs() < 1e-12 * svd.s[0]);
    }

    #[test]
    fn svd_rejects_non_finite() {
        let mut a = Matrix::identity(2);
        a[(0, 1)] = f64::NAN;
        assert!(matches!(thin_svd(&a), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn least_squares_hand_cases() {
        let x = least_squares(
            &Matrix::identity(2),
            &Matrix::from_rows(&[[1.0], [2.0]]).unwrap(),
            0.0,
        )
        .unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-15 && (x[(1, 0)] - 2.0).abs() < 1e-15);

        // normal equations: 2x = 6
        let x = least_squares(
            &Matrix::from_rows(&[[1.0], [1.0]]).unwrap(),
            &Matrix::from_rows(&[[2.0], [4.0]]).unwrap(),
            0.0,
        )
        .unwrap();
        assert!((x[(0, 0)] - 3.0).abs() < 1e-14);

        // (1 + 1)x = 1
        let x = least_squares(
            &Matrix::identity(1),
            &Matrix::from_rows(&[[1.0]]).unwrap(),
            1.0,
        )
        .unwrap();
        assert!((x[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn least_squares_minimum_norm() {
        // two identical columns: any split of 2 works, min-norm is (1, 1)
        let a = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let b = Matrix::from_rows(&[[2.0], [2.0]]).unwrap();
        let x = least_squares(&a, &b, 0.0).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-14 && (x[(1, 0)] - 1.0).abs() < 1e-14);
        assert!(least_squares(&a, &Matrix::zeros(3, 1), 0.0).is_err());
    }

    #[test]
    fn least_squares_satisfies_normal_equations() {
        let a = random(60, 7, 21);
        let b = random(60, 2, 22);
        let x = least_squares(&a, &b, 0.0).unwrap();
        let ata_x = a.t_matmul(&a.matmul(&x).unwrap()).unwrap();
        let atb = a.t_matmul(&b).unwrap();
        let res = ata_x.sub(&atb).unwrap().frobenius_norm() / atb.frobenius_norm();
        assert!(res < 1e-8, "{res}");
    }

    #[test]
    fn random_orthogonal_contract() {
        let mut rng = Rng::new(5);
        let q = random_orthogonal(4, 4, &mut rng).unwrap();
        assert!(orthonormality_error(&q) < 1e-12);
        let c = random_orthogonal(7, 1, &mut rng).unwrap();
        assert!((c.frobenius_norm() - 1.0).abs() < 1e-14);
        let a = random_orthogonal(10, 3, &mut Rng::new(11)).unwrap();
        let b = random_orthogonal(10, 3, &mut Rng::new(11)).unwrap();
        assert_eq!(a, b);
        assert!(random_orthogonal(2, 3, &mut rng).is_err());
    }
}
