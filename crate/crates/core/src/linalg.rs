//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};

/// `Σ a_k b_k` with four interleaved accumulators, so the loop vectorizes.
/// The summation order depends only on the length.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn sum_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Result of a minimum-norm least-squares solve.
#[derive(Debug, Clone)]
pub struct LstsqSolution {
    pub coef: DVector<f64>,
    /// Numerical rank of the design.
    pub rank: usize,
}

fn rank_tol(rows: usize, cols: usize, s_max: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * s_max
}

/// Minimum-norm solution of `min ||x * coef - y||`.
///
/// Householder QR reduces the problem to the `min(m, k) x k` triangle `R`; an
/// SVD of `R` then yields the pseudo-inverse solution, so rank-deficient
/// designs (duplicated columns, thin groups) are handled without a ridge.
pub fn min_norm_lstsq(x: &DMatrix<f64>, y: &DVector<f64>) -> LstsqSolution {
    let (m, k) = x.shape();
    assert_eq!(m, y.len(), "design/response length mismatch");
    if m == 0 || k == 0 {
        return LstsqSolution {
            coef: DVector::zeros(k),
            rank: 0,
        };
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let mut qty = y.clone();
    qr.q_tr_mul(&mut qty);
    let d = m.min(k);
    let qty = qty.rows(0, d).into_owned();
    pinv_apply(&r, &qty, rank_tol(m, k, 1.0))
}

fn pinv_apply(r: &DMatrix<f64>, rhs: &DVector<f64>, rel_tol: f64) -> LstsqSolution {
    let svd = r.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let s_max = svd.singular_values.max();
    let tol = rel_tol * s_max;
    let mut coef = DVector::zeros(r.ncols());
    let mut rank = 0;
    for (idx, &s) in svd.singular_values.iter().enumerate() {
        if s > tol && s > 0.0 {
            rank += 1;
            let proj = u.column(idx).dot(rhs) / s;
            coef.axpy(proj, &v_t.row(idx).transpose(), 1.0);
        }
    }
    LstsqSolution { coef, rank }
}

/// Moore-Penrose inverse of a symmetric positive semidefinite matrix together
/// with its numerical rank.
pub fn sym_pinv(a: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let k = a.nrows();
    if k == 0 {
        return (DMatrix::zeros(0, 0), 0);
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let lmax = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let tol = rank_tol(k, k, lmax);
    let mut out = DMatrix::zeros(k, k);
    let mut rank = 0;
    for (idx, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > tol && lam > 0.0 {
            rank += 1;
            let v = eig.eigenvectors.column(idx);
            out += (v * v.transpose()) / lam;
        }
    }
    (out, rank)
}

/// Smallest admissible `λ_min / λ_max` of a Gram matrix for [`gram_solve`].
pub const GRAM_MIN_RCOND: f64 = 1e-6;

/// Solves the normal equations `a * x = b` by Cholesky when `a` is well
/// conditioned (`λ_min ≥ GRAM_MIN_RCOND λ_max`); `None` otherwise, in which
/// case the caller should fall back to [`min_norm_lstsq`] on the design.
pub fn gram_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if a.nrows() == 0 {
        return None;
    }
    let eig = a.clone().symmetric_eigenvalues();
    let lmax = eig.max();
    let lmin = eig.min();
    // also rejects NaN spectra
    let well_conditioned = lmax > 0.0 && lmin >= GRAM_MIN_RCOND * lmax;
    if !well_conditioned {
        return None;
    }
    a.clone().cholesky().map(|ch| ch.solve(b))
}

/// Solve `a * x = b` for symmetric positive definite `a`, falling back to the
/// pseudo-inverse if Cholesky fails.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    match a.clone().cholesky() {
        Some(ch) => ch.solve(b),
        None => sym_pinv(a).0 * b,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn dot_matches_naive_sum() {
        for n in 0..11 {
            let a: Vec<f64> = (0..n).map(|k| k as f64 * 0.5 - 1.0).collect();
            let b: Vec<f64> = (0..n).map(|k| 2.0 - k as f64).collect();
            let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            assert_relative_eq!(dot(&a, &b), naive, epsilon = 1e-12);
        }
    }

    #[test]
    fn identity_design_returns_rhs() {
        let x = DMatrix::<f64>::identity(4, 4);
        let y = DVector::from_vec(vec![1.0, -2.0, 3.5, 0.25]);
        let sol = min_norm_lstsq(&x, &y);
        assert_eq!(sol.rank, 4);
        assert_relative_eq!(sol.coef, y, epsilon = 1e-14);
    }

    #[test]
    fn full_rank_matches_normal_equations() {
        let x = DMatrix::from_row_slice(5, 2, &[1.0, 0.5, 1.0, -1.0, 1.0, 2.0, 1.0, 0.0, 1.0, 3.0]);
        let y = DVector::from_vec(vec![0.3, -1.2, 2.2, 0.1, 3.9]);
        let sol = min_norm_lstsq(&x, &y);
        let xtx = x.transpose() * &x;
        let direct = xtx.try_inverse().unwrap() * x.transpose() * &y;
        assert_relative_eq!(sol.coef, direct, epsilon = 1e-12);
    }

    #[test]
    fn duplicated_column_gives_minimum_norm() {
        // Columns 0 and 1 are identical: the min-norm solution splits the
        // reduced coefficient evenly between them.
        let base = [1.0, 2.0, -1.0, 0.5, 3.0, 1.5];
        let other = [0.2, -0.4, 1.0, 2.0, 0.0, -1.0];
        let mut data = Vec::new();
        for i in 0..6 {
            data.extend_from_slice(&[base[i], base[i], other[i]]);
        }
        let x = DMatrix::from_row_slice(6, 3, &data);
        let y = DVector::from_vec(vec![1.0, 0.0, 2.0, -1.0, 0.5, 0.7]);
        let sol = min_norm_lstsq(&x, &y);
        assert_eq!(sol.rank, 2);

        // reduced-QR oracle on the two distinct columns
        let mut red = Vec::new();
        for i in 0..6 {
            red.extend_from_slice(&[base[i], other[i]]);
        }
        let xr = DMatrix::from_row_slice(6, 2, &red);
        let qr = xr.clone().qr();
        let reduced = qr.r().solve_upper_triangular(&(qr.q().transpose() * &y)).unwrap();
        assert_relative_eq!(sol.coef[0], reduced[0] / 2.0, epsilon = 1e-12);
        assert_relative_eq!(sol.coef[1], reduced[0] / 2.0, epsilon = 1e-12);
        assert_relative_eq!(sol.coef[2], reduced[1], epsilon = 1e-12);
        let res_full = (&x * &sol.coef - &y).norm();
        let res_red = (&xr * &reduced - &y).norm();
        assert_relative_eq!(res_full, res_red, epsilon = 1e-12);
    }

    #[test]
    fn underdetermined_system() {
        let x = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        let y = DVector::from_vec(vec![5.0]);
        let sol = min_norm_lstsq(&x, &y);
        assert_relative_eq!(sol.coef[0], 0.6, epsilon = 1e-14);
        assert_relative_eq!(sol.coef[1], 0.8, epsilon = 1e-14);
    }

    #[test]
    fn gram_solve_agrees_with_qr_and_rejects_collinear() {
        let x = DMatrix::from_row_slice(5, 2, &[1.0, 0.5, 1.0, -1.0, 1.0, 2.0, 1.0, 0.0, 1.0, 3.0]);
        let y = DVector::from_vec(vec![0.3, -1.2, 2.2, 0.1, 3.9]);
        let g = gram_solve(&x.tr_mul(&x), &x.tr_mul(&y)).unwrap();
        assert_relative_eq!(g, min_norm_lstsq(&x, &y).coef, epsilon = 1e-12);
        let dup = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        assert!(gram_solve(&dup.tr_mul(&dup), &DVector::from_vec(vec![1.0, 1.0])).is_none());
        assert!(gram_solve(&DMatrix::zeros(2, 2), &DVector::zeros(2)).is_none());
    }

    #[test]
    fn sym_pinv_of_singular_matrix() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (p, rank) = sym_pinv(&a);
        assert_eq!(rank, 1);
        assert_relative_eq!(p, DMatrix::from_element(2, 2, 0.25), epsilon = 1e-14);
    }
}
