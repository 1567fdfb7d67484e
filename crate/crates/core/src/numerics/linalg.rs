//! Reference solvers: dense LU, Thomas, banded Cholesky and conjugate gradient.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Pivots at or below this magnitude are treated as singular.
pub const PIVOT_EPS: f64 = 1e-12;

/// Gaussian elimination with partial pivoting.
pub fn solve_dense(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::dims("solve_dense", format!("{:?} is not square", a.shape())));
    }
    if b.len() != n {
        return Err(Error::dims(
            "solve_dense",
            format!("rhs length {} for {n}x{n} system", b.len()),
        ));
    }
    let mut m = a.clone();
    let mut x = b.to_vec();
    for col in 0..n {
        let (piv, mag) = (col..n)
            .map(|r| (r, m[(r, col)].abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if mag.is_nan() || mag <= PIVOT_EPS {
            return Err(Error::Singular {
                index: col,
                magnitude: mag.max(0.0),
            });
        }
        if piv != col {
            for j in 0..n {
                m.data_mut().swap(col * n + j, piv * n + j);
            }
            x.swap(col, piv);
        }
        let d = m[(col, col)];
        for r in col + 1..n {
            let f = m[(r, col)] / d;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                let v = m[(col, j)];
                m[(r, j)] -= f * v;
            }
            x[r] -= f * x[col];
        }
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for j in i + 1..n {
            s -= m[(i, j)] * x[j];
        }
        x[i] = s / m[(i, i)];
    }
    Ok(x)
}

/// Thomas algorithm for a tridiagonal system.
///
/// `lower[i]` couples row `i + 1` to row `i`, `upper[i]` couples row `i` to
/// row `i + 1`; both have length `n - 1`. A vanishing pivot yields
/// [`Error::ZeroPivot`], the caller's cue to fall back to [`solve_dense`]
/// (see [`solve_tridiagonal_or_dense`]).
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    if b.len() != n || (n > 0 && (lower.len() != n - 1 || upper.len() != n - 1)) {
        return Err(Error::dims(
            "solve_tridiagonal",
            format!(
                "diag {n}, lower {}, upper {}, rhs {}",
                lower.len(),
                upper.len(),
                b.len()
            ),
        ));
    }
    let mut x = vec![0.0; n];
    let mut c = vec![0.0; n];
    thomas_in_place(lower, diag, upper, b, &mut c, &mut x)?;
    Ok(x)
}

/// Allocation-free Thomas kernel; `scratch` and `x` must have length `n`.
pub(crate) fn thomas_in_place(
    lower: &[f64],
    diag: &[f64],
    upper: &[f64],
    b: &[f64],
    scratch: &mut [f64],
    x: &mut [f64],
) -> Result<()> {
    let n = diag.len();
    if n == 0 {
        return Ok(());
    }
    let mut beta = diag[0];
    if beta == 0.0 || !beta.is_finite() {
        return Err(Error::ZeroPivot { index: 0 });
    }
    x[0] = b[0] / beta;
    for i in 1..n {
        scratch[i] = upper[i - 1] / beta;
        beta = diag[i] - lower[i - 1] * scratch[i];
        if beta == 0.0 || !beta.is_finite() {
            return Err(Error::ZeroPivot { index: i });
        }
        x[i] = (b[i] - lower[i - 1] * x[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        x[i] -= scratch[i + 1] * x[i + 1];
    }
    Ok(())
}

/// Thomas solve, retried with pivoted dense elimination on a zero pivot.
pub fn solve_tridiagonal_or_dense(lower: &[f64], diag: &[f64], upper: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    match solve_tridiagonal(lower, diag, upper, b) {
        Err(Error::ZeroPivot { .. }) => {
            let n = diag.len();
            let a = Matrix::from_fn(n, n, |i, j| {
                if i == j {
                    diag[i]
                } else if i == j + 1 {
                    lower[j]
                } else if j == i + 1 {
                    upper[i]
                } else {
                    0.0
                }
            });
            solve_dense(&a, b)
        }
        other => other,
    }
}

/// Dense Cholesky factorization `a = L Lᵀ`; fails if `a` is not SPD.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::dims("cholesky", format!("{:?} is not square", a.shape())));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { index: j });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Symmetric band matrix storing the lower band row by row.
///
/// Entry `(i, j)` with `i - bandwidth <= j <= i` lives at
/// `data[i * (bandwidth + 1) + (j + bandwidth - i)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymBandMatrix {
    n: usize,
    bandwidth: usize,
    data: Vec<f64>,
}

impl SymBandMatrix {
    pub fn zeros(n: usize, bandwidth: usize) -> Self {
        Self {
            n,
            bandwidth,
            data: vec![0.0; n * (bandwidth + 1)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        (i - j <= self.bandwidth).then(|| i * (self.bandwidth + 1) + (j + self.bandwidth - i))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |s| self.data[s])
    }

    /// Adds `v` to the symmetric pair `(i, j)` / `(j, i)`.
    ///
    /// Panics if the entry lies outside the band.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let s = self
            .slot(i, j)
            .unwrap_or_else(|| panic!("({i}, {j}) outside bandwidth {}", self.bandwidth));
        self.data[s] += v;
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        let w = self.bandwidth;
        for i in 0..self.n {
            let row = &self.data[i * (w + 1)..(i + 1) * (w + 1)];
            let j0 = i.saturating_sub(w);
            for j in j0..=i {
                let a = row[j + w - i];
                if a == 0.0 {
                    continue;
                }
                y[i] += a * x[j];
                if j != i {
                    y[j] += a * x[i];
                }
            }
        }
        y
    }

    pub fn to_dense(&self) -> Matrix {
        Matrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// Direct solve by banded Cholesky; exact elimination restricted to the band.
    pub fn solve_spd(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        if b.len() != n {
            return Err(Error::dims("SymBandMatrix::solve_spd", format!("rhs {} vs n {n}", b.len())));
        }
        let w = self.bandwidth;
        let stride = w + 1;
        let mut l = self.data.clone();
        for i in 0..n {
            let j0 = i.saturating_sub(w);
            for j in j0..=i {
                let k0 = j0.max(j.saturating_sub(w));
                let mut s = l[i * stride + j + w - i];
                for k in k0..j {
                    s -= l[i * stride + k + w - i] * l[j * stride + k + w - j];
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(Error::NotPositiveDefinite { index: i });
                    }
                    l[i * stride + w] = s.sqrt();
                } else {
                    l[i * stride + j + w - i] = s / l[j * stride + w];
                }
            }
        }
        let mut y = b.to_vec();
        for i in 0..n {
            let j0 = i.saturating_sub(w);
            let mut s = y[i];
            for j in j0..i {
                s -= l[i * stride + j + w - i] * y[j];
            }
            y[i] = s / l[i * stride + w];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in i + 1..(i + w + 1).min(n) {
                s -= l[j * stride + i + w - j] * y[j];
            }
            y[i] = s / l[i * stride + w];
        }
        Ok(y)
    }
}

/// Result of a conjugate-gradient run.
#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    /// Relative recurrence residual `‖r_k‖ / ‖b‖` after each iteration.
    pub history: Vec<f64>,
    pub converged: bool,
    /// Set when a non-finite or non-positive curvature term stopped the run.
    pub breakdown: bool,
}

impl CgOutcome {
    pub fn iterations(&self) -> usize {
        self.history.len()
    }

    /// First iteration (1-based) whose residual is at or below `tol`.
    pub fn iterations_to(&self, tol: f64) -> Option<usize> {
        self.history.iter().position(|&r| r <= tol).map(|p| p + 1)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate gradient from `x0 = 0` for an SPD operator given as a matvec.
///
/// Stops at the first iterate with relative residual `<= tol` or after
/// `max_iter` iterations. Non-convergence and breakdown are reported through
/// the returned flags rather than as errors, so the history is always kept.
pub fn conjugate_gradient<F>(mut apply_a: F, b: &[f64], tol: f64, max_iter: usize) -> Result<CgOutcome>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if !(tol > 0.0) {
        return Err(Error::param("tol", "must be > 0"));
    }
    let n = b.len();
    let b_norm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok(CgOutcome {
            x,
            history: Vec::new(),
            converged: true,
            breakdown: false,
        });
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut history = Vec::new();
    let mut converged = false;
    let mut breakdown = false;
    for _ in 0..max_iter {
        let ap = apply_a(&p)?;
        if ap.len() != n {
            return Err(Error::dims("conjugate_gradient", format!("operator returned {} of {n}", ap.len())));
        }
        let pap = dot(&p, &ap);
        if !(pap > 0.0) || !pap.is_finite() {
            breakdown = true;
            break;
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let rel = rr_new.sqrt() / b_norm;
        history.push(rel);
        if !rel.is_finite() {
            breakdown = true;
            break;
        }
        if rel <= tol {
            converged = true;
            break;
        }
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    Ok(CgOutcome {
        x,
        history,
        converged,
        breakdown,
    })
}
