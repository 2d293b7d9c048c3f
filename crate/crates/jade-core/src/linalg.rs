//! Small dense linear-algebra helpers shared across modules.
//!
//! ndarray is the data container everywhere; nalgebra supplies the
//! factorizations. Conversions are confined to this module.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

fn to_na(a: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

enum Factor {
    Chol(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl Factor {
    fn of(na: DMatrix<f64>) -> Option<Self> {
        match na.clone().cholesky() {
            Some(c) => Some(Factor::Chol(c)),
            None => {
                let lu = na.lu();
                if lu.is_invertible() {
                    Some(Factor::Lu(lu))
                } else {
                    None
                }
            }
        }
    }

    fn solve(&self, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        match self {
            Factor::Chol(c) => Some(c.solve(b)),
            Factor::Lu(lu) => lu.solve(b),
        }
    }
}

/// Factor once, solve, then apply one pass of iterative refinement: the
/// stiffer penalized systems (huge smoothing parameters) are ill enough
/// conditioned that a raw factored solve loses ~7 digits.
fn solve_refined(a: ArrayView2<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let na = to_na(a);
    let factor = Factor::of(na.clone())?;
    let mut x = factor.solve(b)?;
    let resid = b - &na * &x;
    if let Some(corr) = factor.solve(&resid) {
        x += corr;
    }
    Some(x)
}

/// Solve `a x = b` for symmetric positive definite `a`, falling back to LU
/// when the Cholesky factorization fails. Returns None for singular systems.
pub fn solve_sym(a: ArrayView2<f64>, b: ArrayView1<f64>) -> Option<Array1<f64>> {
    let nb = DMatrix::from_iterator(b.len(), 1, b.iter().copied());
    let x = solve_refined(a, &nb)?;
    Some(Array1::from_iter(x.iter().copied()))
}

/// Solve `a X = B` column-wise for a matrix right-hand side.
pub fn solve_sym_many(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Option<Array2<f64>> {
    let nb = to_na(b);
    let x = solve_refined(a, &nb)?;
    Some(Array2::from_shape_fn((b.nrows(), b.ncols()), |(i, j)| {
        x[(i, j)]
    }))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: ArrayView2<f64>) -> f64 {
    let eig = to_na(a).symmetric_eigen();
    eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix by power
/// iteration with a deterministic start vector.
pub fn max_eigenvalue_power(a: ArrayView2<f64>, max_iter: usize, tol: f64) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = Array1::from_elem(n, (n as f64).sqrt().recip());
    let mut lambda = 0.0_f64;
    for _ in 0..max_iter {
        let w = a.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm <= f64::MIN_POSITIVE {
            return 0.0;
        }
        let next = w.dot(&v);
        v = &w / norm;
        if (next - lambda).abs() <= tol * next.abs().max(1.0) {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Uniform nodes and composite-trapezoid weights over `[lo, hi]`.
///
/// `m >= 2` nodes; the endpoints carry half weight.
pub fn trapezoid_rule(lo: f64, hi: f64, m: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(m >= 2, "trapezoid rule needs at least two nodes");
    let h = (hi - lo) / (m - 1) as f64;
    let nodes: Vec<f64> = (0..m)
        .map(|i| if i + 1 == m { hi } else { lo + h * i as f64 })
        .collect();
    let mut weights = vec![h; m];
    weights[0] = 0.5 * h;
    weights[m - 1] = 0.5 * h;
    (nodes, weights)
}

/// Three-point Gauss-Legendre nodes and weights on `[a, b]`, exact for
/// polynomials up to degree five.
pub fn gauss_legendre_3(a: f64, b: f64) -> [(f64, f64); 3] {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let r = (0.6_f64).sqrt();
    [
        (mid - half * r, half * 5.0 / 9.0),
        (mid, half * 8.0 / 9.0),
        (mid + half * r, half * 5.0 / 9.0),
    ]
}
