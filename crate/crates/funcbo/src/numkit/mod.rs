//! Dense numerics: vectors as `Vec<f64>`, row-major matrices, a Cholesky
//! solver, matrix-free conjugate gradients, and central finite differences.
//!
//! Everything here is deliberately small and dense — the toolkit's problems
//! live in feature spaces of tens of dimensions, so there is no sparse or
//! blocked path. Public operations keep the invariant that returned values
//! are finite; solvers report trouble through [`crate::Error`] or explicit
//! result flags instead of emitting NaNs.

mod rng;

pub use rng::Rng;

use crate::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Mat {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Wraps an existing row-major buffer; `data.len()` must be `rows*cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Mat> {
        if data.len() != rows * cols {
            return Err(Error::Dim {
                op: "Mat::from_vec",
                expected: format!("{}x{}={} entries", rows, cols, rows * cols),
                got: format!("{} entries", data.len()),
            });
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::Dim {
                    op: "Mat::from_rows",
                    expected: format!("row of length {c}"),
                    got: format!("row {i} of length {}", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Mat { rows: r, cols: c, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `A x` for a vector `x` of length `cols`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::Dim {
                op: "matvec",
                expected: format!("vector of length {}", self.cols),
                got: format!("length {}", x.len()),
            });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `A^T x` for a vector `x` of length `rows`.
    pub fn tr_matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::Dim {
                op: "tr_matvec",
                expected: format!("vector of length {}", self.rows),
                got: format!("length {}", x.len()),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            axpy(&mut out, xi, self.row(i));
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::Dim {
                op: "matmul",
                expected: format!("{} inner rows", self.cols),
                got: format!("{}x{}", other.rows, other.cols),
            });
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = out.row_mut(i);
                axpy(out_row, a, orow);
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// Gram matrix `A^T A` (cols x cols).
    pub fn gram(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.cols);
        for i in 0..self.rows {
            let r = self.row(i);
            for j in 0..self.cols {
                let rj = r[j];
                if rj == 0.0 {
                    continue;
                }
                let out_row = out.row_mut(j);
                axpy(out_row, rj, r);
            }
        }
        out
    }

    /// `A += s * I`; requires a square matrix.
    pub fn add_scaled_identity(&mut self, s: f64) {
        debug_assert_eq!(self.rows, self.cols);
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self.data[i * self.cols + i] += s;
        }
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Euclidean inner product; panics on length mismatch (internal hot path).
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale(x: &mut [f64], alpha: f64) {
    for v in x.iter_mut() {
        *v *= alpha;
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Relative L2 distance `|a - b| / max(|b|, floor)`; the floor guards the
/// all-zero reference case.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let denom = norm2(b).max(1e-300);
    norm2(&sub(a, b)) / denom
}

/// Cholesky factor of a symmetric positive definite matrix.
///
/// Factor once, solve many right-hand sides. Symmetry is checked up to
/// `1e-10 * max(1, max|A_ij|)`; a non-positive pivot reports its index.
pub struct Cholesky {
    l: Mat,
}

impl Cholesky {
    pub fn new(a: &Mat) -> Result<Cholesky> {
        if a.rows != a.cols {
            return Err(Error::Dim {
                op: "Cholesky::new",
                expected: "square matrix".into(),
                got: format!("{}x{}", a.rows, a.cols),
            });
        }
        let n = a.rows;
        let scale = max_abs(&a.data).max(1.0);
        for i in 0..n {
            for j in (i + 1)..n {
                if (a.get(i, j) - a.get(j, i)).abs() > 1e-10 * scale {
                    return Err(Error::InvalidArg {
                        op: "Cholesky::new",
                        reason: format!(
                            "matrix is not symmetric: |A[{i}][{j}] - A[{j}][{i}]| = {:.3e}",
                            (a.get(i, j) - a.get(j, i)).abs()
                        ),
                    });
                }
            }
        }
        let mut l = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(Error::NotSpd { pivot: i, value: s });
                    }
                    l.set(i, j, s.sqrt());
                } else {
                    l.set(i, j, s / l.get(j, j));
                }
            }
        }
        Ok(Cholesky { l })
    }

    /// Solves `A x = b` using the stored factor.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.l.rows;
        if b.len() != n {
            return Err(Error::Dim {
                op: "Cholesky::solve",
                expected: format!("rhs of length {n}"),
                got: format!("length {}", b.len()),
            });
        }
        // forward: L y = b
        let mut y = vec![0.0; n];
        for i in 0..n {
            let s = b[i] - dot(&self.l.row(i)[..i], &y[..i]);
            y[i] = s / self.l.get(i, i);
        }
        // backward: L^T x = y (column access, so the inner loop stays indexed)
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for (k, &xk) in x.iter().enumerate().skip(i + 1) {
                s -= self.l.get(k, i) * xk;
            }
            x[i] = s / self.l.get(i, i);
        }
        Ok(x)
    }
}

/// Solves `A x = b` for symmetric positive definite `A` by Cholesky.
pub fn spd_solve(a: &Mat, b: &[f64]) -> Result<Vec<f64>> {
    Cholesky::new(a)?.solve(b)
}

/// Solves a general square system by Gaussian elimination with partial
/// pivoting. For symmetric positive-definite systems prefer [`spd_solve`].
pub fn solve_linear(a: &Mat, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return Err(Error::Dim {
            op: "solve_linear",
            expected: format!("{n}x{n} matrix with rhs {n}"),
            got: format!("{}x{} with rhs {}", a.rows(), a.cols(), b.len()),
        });
    }
    let mut m = a.clone();
    let mut x = b.to_vec();
    let scale = m.data().iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| {
                m.get(i, col)
                    .abs()
                    .partial_cmp(&m.get(j, col).abs())
                    .expect("non-finite pivot")
            })
            .unwrap();
        let pivot = m.get(pivot_row, col);
        if pivot.abs() <= 1e-14 * scale.max(1.0) {
            return Err(Error::InvalidArg {
                op: "solve_linear",
                reason: format!("matrix is singular at column {col}"),
            });
        }
        if pivot_row != col {
            for k in 0..n {
                let tmp = m.get(col, k);
                m.set(col, k, m.get(pivot_row, k));
                m.set(pivot_row, k, tmp);
            }
            x.swap(col, pivot_row);
        }
        for i in col + 1..n {
            let factor = m.get(i, col) / pivot;
            if factor != 0.0 {
                for k in col..n {
                    let v = m.get(i, k) - factor * m.get(col, k);
                    m.set(i, k, v);
                }
                x[i] -= factor * x[col];
            }
        }
    }
    for i in (0..n).rev() {
        let s = x[i] - dot(&m.row(i)[i + 1..], &x[i + 1..]);
        x[i] = s / m.get(i, i);
    }
    Ok(x)
}

/// Outcome of a conjugate-gradient solve. Non-convergence is reported here,
/// not as an error: callers decide whether a loose solve is acceptable.
#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iters: usize,
    pub residual_norm: f64,
    pub converged: bool,
}

/// Matrix-free conjugate gradients for `A x = b` with SPD operator `A`.
///
/// Stops when `|r| <= tol * |b|` or after `maxit` iterations. On an SPD
/// system of dimension `n` with exact arithmetic it converges within `n`
/// steps; on singular-but-consistent systems it still reduces the residual
/// and reports `converged` honestly.
pub fn conjugate_gradient(
    mut op: impl FnMut(&[f64]) -> Vec<f64>,
    b: &[f64],
    tol: f64,
    maxit: usize,
) -> CgOutcome {
    let n = b.len();
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return CgOutcome {
            x: vec![0.0; n],
            iters: 0,
            residual_norm: 0.0,
            converged: true,
        };
    }
    let threshold = tol * bnorm;
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rsold = dot(&r, &r);
    let mut iters = 0;
    while iters < maxit {
        if rsold.sqrt() <= threshold {
            break;
        }
        let ap = op(&p);
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            // operator is not PD along p (or overflowed); stop with what we have
            break;
        }
        let alpha = rsold / pap;
        axpy(&mut x, alpha, &p);
        axpy(&mut r, -alpha, &ap);
        let rsnew = dot(&r, &r);
        iters += 1;
        let beta = rsnew / rsold;
        rsold = rsnew;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
    }
    let residual_norm = rsold.sqrt();
    CgOutcome {
        converged: residual_norm <= threshold,
        x,
        iters,
        residual_norm,
    }
}

/// Default relative tolerance for [`conjugate_gradient`].
pub const CG_DEFAULT_TOL: f64 = 1e-8;

/// Default iteration cap for [`conjugate_gradient`]: `10 * dim`.
pub fn cg_default_maxit(dim: usize) -> usize {
    10 * dim
}

/// Central finite difference of a vector-valued map along direction `v`:
/// `(f(x + eps v) - f(x - eps v)) / (2 eps)`.
///
/// Exact (to rounding) for maps whose components are quadratic in `x`.
pub fn fd_directional(
    mut f: impl FnMut(&[f64]) -> Vec<f64>,
    x: &[f64],
    v: &[f64],
    eps: f64,
) -> Vec<f64> {
    debug_assert_eq!(x.len(), v.len());
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    axpy(&mut xp, eps, v);
    axpy(&mut xm, -eps, v);
    let fp = f(&xp);
    let fm = f(&xm);
    debug_assert_eq!(fp.len(), fm.len());
    fp.iter()
        .zip(&fm)
        .map(|(p, m)| (p - m) / (2.0 * eps))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_spd(n: usize, seed: u64) -> Mat {
        // A = B^T B + n*I is comfortably SPD
        let mut rng = Rng::new(seed);
        let mut b = Mat::zeros(n, n);
        for v in b.data_mut() {
            *v = rng.normal();
        }
        let mut a = b.gram();
        a.add_scaled_identity(n as f64);
        a
    }

    #[test]
    fn matvec_and_transpose_agree() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(a.matvec(&[1.0, 0.0, -1.0]).unwrap(), vec![-2.0, -2.0]);
        assert_eq!(
            a.tr_matvec(&[1.0, 1.0]).unwrap(),
            a.transpose().matvec(&[1.0, 1.0]).unwrap()
        );
        assert!(a.matvec(&[1.0]).is_err());
    }

    #[test]
    fn matmul_matches_manual() {
        let a = Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Mat::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn spd_solve_recovers_solution() {
        let a = test_spd(8, 7);
        let mut rng = Rng::new(11);
        let x_true: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let b = a.matvec(&x_true).unwrap();
        let x = spd_solve(&a, &b).unwrap();
        assert!(rel_err(&x, &x_true) < 1e-12, "rel err {}", rel_err(&x, &x_true));
    }

    #[test]
    fn solve_linear_handles_nonsymmetric_systems() {
        // requires pivoting (zero leading entry) and is not symmetric
        let a = Mat::from_vec(3, 3, vec![0.0, 2.0, 1.0, 1.0, -1.0, 0.5, 3.0, 0.0, -2.0]).unwrap();
        let x_true = vec![1.5, -2.0, 0.25];
        let b = a.matvec(&x_true).unwrap();
        let x = solve_linear(&a, &b).unwrap();
        assert!(rel_err(&x, &x_true) < 1e-12);
        let singular = Mat::from_vec(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(solve_linear(&singular, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn spd_solve_rejects_indefinite_with_pivot_index() {
        // diag(1, -1): pivot 1 fails
        let a = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, -1.0]).unwrap();
        match spd_solve(&a, &[1.0, 1.0]) {
            Err(Error::NotSpd { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("expected NotSpd, got {other:?}"),
        }
    }

    #[test]
    fn spd_solve_rejects_asymmetric() {
        let a = Mat::from_vec(2, 2, vec![1.0, 0.5, 0.0, 1.0]).unwrap();
        assert!(spd_solve(&a, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn cg_converges_within_dim_iters_on_spd() {
        let n = 12;
        let a = test_spd(n, 3);
        let mut rng = Rng::new(5);
        let x_true: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let b = a.matvec(&x_true).unwrap();
        let out = conjugate_gradient(|v| a.matvec(v).unwrap(), &b, 1e-12, n + 2);
        assert!(out.converged, "cg did not converge: residual {}", out.residual_norm);
        assert!(out.iters <= n + 2);
        assert!(rel_err(&out.x, &x_true) < 1e-9, "rel err {}", rel_err(&out.x, &x_true));
    }

    #[test]
    fn cg_reports_nonconvergence_on_tiny_budget() {
        let n = 16;
        let a = test_spd(n, 9);
        let b = vec![1.0; n];
        let out = conjugate_gradient(|v| a.matvec(v).unwrap(), &b, 1e-14, 1);
        assert!(!out.converged);
        assert_eq!(out.iters, 1);
    }

    #[test]
    fn cg_handles_singular_consistent_system() {
        // duplicated feature -> rank-deficient Gram; rhs in the range space
        let phi = Mat::from_vec(3, 2, vec![1.0, 1.0, 2.0, 2.0, -1.0, -1.0]).unwrap();
        let g = phi.gram(); // rank 1
        let b = g.matvec(&[1.0, 0.0]).unwrap();
        let out = conjugate_gradient(|v| g.matvec(v).unwrap(), &b, 1e-10, 40);
        // residual still driven down on the consistent system
        let r = sub(&g.matvec(&out.x).unwrap(), &b);
        assert!(norm2(&r) <= 1e-8 * norm2(&b).max(1.0), "residual {}", norm2(&r));
    }

    #[test]
    fn fd_directional_exact_on_quadratic() {
        // f(x) = x^T M x (as 1-vector); grad along v is ((M + M^T) x) . v
        let m = Mat::from_vec(3, 3, vec![2.0, 1.0, 0.0, 0.5, 3.0, 1.0, 0.0, 1.0, 4.0]).unwrap();
        let x = [0.3, -0.7, 1.1];
        let v = [1.0, 0.5, -2.0];
        let f = |z: &[f64]| vec![dot(&m.matvec(z).unwrap(), z)];
        let got = fd_directional(f, &x, &v, 1e-4)[0];
        let mpmt = add(&m.matvec(&x).unwrap(), &m.tr_matvec(&x).unwrap());
        let want = dot(&mpmt, &v);
        assert!((got - want).abs() < 1e-10, "got {got}, want {want}");
    }
}
