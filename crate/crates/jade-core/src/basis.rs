//! Function bases: clamped B-splines, cubic monomials, and the logistic-warped
//! spline basis used for additive ODE components.
//!
//! B-spline values come from the Cox-de Boor triangle on the knot span of the
//! query point; derivatives use the standard derivative triangle. Both are
//! evaluated only on nonzero-width spans, so repeated boundary knots are safe.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute slack allowed when a query point sits just outside the support.
pub const SUPPORT_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum BasisError {
    #[error("degree must be at least 1, got {0}")]
    InvalidDegree(usize),
    #[error("support must satisfy lo < hi with finite endpoints, got ({0}, {1})")]
    InvalidSupport(f64, f64),
    #[error("interior knots must be finite, nondecreasing, and strictly inside the support")]
    InvalidKnots,
    #[error("interior knot repeated more than degree times")]
    KnotMultiplicity,
    #[error("x = {x} lies outside the support [{lo}, {hi}]")]
    OutOfSupport { x: f64, lo: f64, hi: f64 },
    #[error("derivative order {0} not supported (max 2)")]
    UnsupportedDerivativeOrder(usize),
    #[error("need at least {needed} observation points for knot placement, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("warped basis requires inner support [0, 1], got ({0}, {1})")]
    NotUnitSupport(f64, f64),
}

/// Overflow-safe logistic map.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative of the logistic map.
pub fn dlogistic(x: f64) -> f64 {
    let s = logistic(x);
    s * (1.0 - s)
}

/// Clamped (open) B-spline basis on a closed support interval.
///
/// The boundary knots are repeated `degree + 1` times, so the basis sums to
/// one everywhere on the support and the number of functions equals
/// `interior knots + degree + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineBasis {
    degree: usize,
    knots: Vec<f64>,
    support: (f64, f64),
}

impl BSplineBasis {
    pub fn new(degree: usize, interior: &[f64], support: (f64, f64)) -> Result<Self, BasisError> {
        if degree == 0 {
            return Err(BasisError::InvalidDegree(degree));
        }
        let (lo, hi) = support;
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(BasisError::InvalidSupport(lo, hi));
        }
        let inside = interior
            .iter()
            .all(|k| k.is_finite() && *k > lo && *k < hi);
        let sorted = interior.windows(2).all(|w| w[0] <= w[1]);
        if !inside || !sorted {
            return Err(BasisError::InvalidKnots);
        }
        let mut run = 1usize;
        for w in interior.windows(2) {
            run = if w[0] == w[1] { run + 1 } else { 1 };
            if run > degree {
                return Err(BasisError::KnotMultiplicity);
            }
        }
        let mut knots = Vec::with_capacity(interior.len() + 2 * (degree + 1));
        knots.extend(std::iter::repeat(lo).take(degree + 1));
        knots.extend_from_slice(interior);
        knots.extend(std::iter::repeat(hi).take(degree + 1));
        Ok(Self {
            degree,
            knots,
            support,
        })
    }

    /// Equally spaced interior knots.
    pub fn uniform(degree: usize, n_interior: usize, support: (f64, f64)) -> Result<Self, BasisError> {
        let (lo, hi) = support;
        let step = (hi - lo) / (n_interior + 1) as f64;
        let interior: Vec<f64> = (1..=n_interior).map(|i| lo + step * i as f64).collect();
        Self::new(degree, &interior, support)
    }

    /// Interior knots at empirical quantiles of `points`, falling back to
    /// uniform placement when the quantiles collide or touch the boundary.
    pub fn with_quantile_knots(
        degree: usize,
        n_interior: usize,
        points: &[f64],
        support: (f64, f64),
    ) -> Result<Self, BasisError> {
        if points.len() < 2 {
            return Err(BasisError::TooFewPoints {
                needed: 2,
                got: points.len(),
            });
        }
        let mut sorted: Vec<f64> = points.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut interior = Vec::with_capacity(n_interior);
        for i in 1..=n_interior {
            let q = i as f64 / (n_interior + 1) as f64;
            let pos = q * (sorted.len() - 1) as f64;
            let base = pos.floor() as usize;
            let frac = pos - base as f64;
            let v = if base + 1 < sorted.len() {
                sorted[base] * (1.0 - frac) + sorted[base + 1] * frac
            } else {
                sorted[base]
            };
            interior.push(v);
        }
        let ok = interior.iter().all(|k| *k > support.0 && *k < support.1)
            && interior.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Self::new(degree, &interior, support)
        } else {
            Self::uniform(degree, n_interior, support)
        }
    }

    /// Number of basis functions.
    pub fn len(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn support(&self) -> (f64, f64) {
        self.support
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    fn clamp(&self, x: f64) -> Result<f64, BasisError> {
        let (lo, hi) = self.support;
        if x < lo {
            if lo - x <= SUPPORT_CLAMP {
                return Ok(lo);
            }
            return Err(BasisError::OutOfSupport { x, lo, hi });
        }
        if x > hi {
            if x - hi <= SUPPORT_CLAMP {
                return Ok(hi);
            }
            return Err(BasisError::OutOfSupport { x, lo, hi });
        }
        Ok(x)
    }

    /// Knot span index `i` with `knots[i] <= x < knots[i+1]` restricted to
    /// nonzero-width spans; the right endpoint maps to the last span.
    fn find_span(&self, x: f64) -> usize {
        let n = self.len();
        let p = self.degree;
        if x >= self.knots[n] {
            return n - 1;
        }
        if x <= self.knots[p] {
            return p;
        }
        let (mut lo, mut hi) = (p, n);
        let mut mid = (lo + hi) / 2;
        while x < self.knots[mid] || x >= self.knots[mid + 1] {
            if x < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
            mid = (lo + hi) / 2;
        }
        mid
    }

    /// Values of every basis function at `x`, written into `out`.
    pub fn eval_into(&self, x: f64, out: &mut [f64]) -> Result<(), BasisError> {
        assert_eq!(out.len(), self.len(), "output buffer length mismatch");
        let x = self.clamp(x)?;
        out.fill(0.0);
        let p = self.degree;
        let span = self.find_span(x);
        let mut vals = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        vals[0] = 1.0;
        for j in 1..=p {
            left[j] = x - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = vals[r] / (right[r + 1] + left[j - r]);
                vals[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            vals[j] = saved;
        }
        out[span - p..=span].copy_from_slice(&vals);
        Ok(())
    }

    pub fn eval(&self, x: f64) -> Result<Vec<f64>, BasisError> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(x, &mut out)?;
        Ok(out)
    }

    /// Order-`order` derivatives of every basis function at `x` (order 0, 1, 2).
    pub fn eval_deriv_into(&self, x: f64, order: usize, out: &mut [f64]) -> Result<(), BasisError> {
        assert_eq!(out.len(), self.len(), "output buffer length mismatch");
        if order > 2 {
            return Err(BasisError::UnsupportedDerivativeOrder(order));
        }
        if order == 0 {
            return self.eval_into(x, out);
        }
        let x = self.clamp(x)?;
        out.fill(0.0);
        let p = self.degree;
        if order > p {
            return Ok(());
        }
        let span = self.find_span(x);
        let ders = self.derivative_triangle(x, span, order);
        for (j, d) in ders[order].iter().enumerate() {
            out[span - p + j] = *d;
        }
        Ok(())
    }

    pub fn eval_deriv(&self, x: f64, order: usize) -> Result<Vec<f64>, BasisError> {
        let mut out = vec![0.0; self.len()];
        self.eval_deriv_into(x, order, &mut out)?;
        Ok(out)
    }

    /// Derivatives 0..=n of the `degree + 1` local functions at `x`.
    ///
    /// Standard derivative computation over the Cox-de Boor triangle; all
    /// divisors are widths of knot intervals containing the current nonzero
    /// span, hence strictly positive.
    fn derivative_triangle(&self, x: f64, span: usize, n: usize) -> Vec<Vec<f64>> {
        let p = self.degree;
        let u = &self.knots;
        let mut ndu = vec![vec![0.0; p + 1]; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = x - u[span + 1 - j];
            right[j] = u[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }
        let mut ders = vec![vec![0.0; p + 1]; n + 1];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }
        let mut a = vec![vec![0.0; p + 1]; 2];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = 1.0;
            for k in 1..=n {
                let mut d = 0.0;
                let rk = r as isize - k as isize;
                let pk = p - k;
                if r >= k {
                    a[s2][0] = a[s1][0] / ndu[pk + 1][rk as usize];
                    d = a[s2][0] * ndu[rk as usize][pk];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if r as isize - 1 <= pk as isize { k - 1 } else { p - r };
                for j in j1..=j2 {
                    a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][(rk + j as isize) as usize];
                    d += a[s2][j] * ndu[(rk + j as isize) as usize][pk];
                }
                if r as isize <= pk as isize {
                    a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                    d += a[s2][k] * ndu[r][pk];
                }
                ders[k][r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut factor = p as f64;
        for k in 1..=n {
            for j in 0..=p {
                ders[k][j] *= factor;
            }
            factor *= (p - k) as f64;
        }
        ders
    }

    /// Rows of basis (or derivative) values at each point.
    pub fn design_matrix(&self, points: &[f64], order: usize) -> Result<Array2<f64>, BasisError> {
        let mut out = Array2::zeros((points.len(), self.len()));
        let mut row = vec![0.0; self.len()];
        for (i, x) in points.iter().enumerate() {
            self.eval_deriv_into(*x, order, &mut row)?;
            for (j, v) in row.iter().enumerate() {
                out[[i, j]] = *v;
            }
        }
        Ok(out)
    }

    /// Exact cross-product matrix of second derivatives over the support,
    /// integrated with three-point Gauss-Legendre on each nonzero knot span.
    pub fn second_derivative_penalty(&self) -> Array2<f64> {
        let m = self.len();
        let mut omega = Array2::zeros((m, m));
        let mut buf = vec![0.0; m];
        for w in self.knots.windows(2) {
            if w[1] <= w[0] {
                continue;
            }
            for (x, weight) in crate::linalg::gauss_legendre_3(w[0], w[1]) {
                self.eval_deriv_into(x, 2, &mut buf)
                    .expect("quadrature node inside support");
                for i in 0..m {
                    if buf[i] == 0.0 {
                        continue;
                    }
                    for j in 0..m {
                        omega[[i, j]] += weight * buf[i] * buf[j];
                    }
                }
            }
        }
        omega
    }

    /// Greville abscissae; the coefficients `a + b * greville_i` reproduce the
    /// linear function `a + b x` exactly.
    pub fn greville(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                self.knots[i + 1..i + 1 + self.degree].iter().sum::<f64>() / self.degree as f64
            })
            .collect()
    }
}

/// Cubic monomial basis `(x, x^2, x^3)` used by the ground-truth systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonomialBasis;

impl MonomialBasis {
    pub fn eval(x: f64) -> [f64; 3] {
        [x, x * x, x * x * x]
    }

    pub fn eval_deriv(x: f64, order: usize) -> [f64; 3] {
        match order {
            0 => Self::eval(x),
            1 => [1.0, 2.0 * x, 3.0 * x * x],
            2 => [0.0, 2.0, 6.0 * x],
            _ => [0.0, 0.0, if order == 3 { 6.0 } else { 0.0 }],
        }
    }
}

/// Spline basis composed with the logistic map: `phi(logistic(theta))`.
///
/// The warp keeps every real `theta` inside the inner support, so evaluation
/// never fails; saturation far in the tails is the expected behavior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformedBasis {
    inner: BSplineBasis,
}

impl TransformedBasis {
    pub fn new(inner: BSplineBasis) -> Result<Self, BasisError> {
        let (lo, hi) = inner.support();
        if lo != 0.0 || hi != 1.0 {
            return Err(BasisError::NotUnitSupport(lo, hi));
        }
        Ok(Self { inner })
    }

    pub fn len(&self) -> usize {
        self.inner.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn inner(&self) -> &BSplineBasis {
        &self.inner
    }

    pub fn eval_into(&self, theta: f64, out: &mut [f64]) {
        self.inner
            .eval_into(logistic(theta), out)
            .expect("logistic output lies in [0, 1]");
    }

    pub fn eval(&self, theta: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(theta, &mut out);
        out
    }

    /// Values and d/d theta of each warped basis function.
    pub fn eval_with_chain_into(&self, theta: f64, values: &mut [f64], chain: &mut [f64]) {
        let s = logistic(theta);
        self.inner
            .eval_into(s, values)
            .expect("logistic output lies in [0, 1]");
        self.inner
            .eval_deriv_into(s, 1, chain)
            .expect("logistic output lies in [0, 1]");
        let ds = s * (1.0 - s);
        for c in chain.iter_mut() {
            *c *= ds;
        }
    }
}
