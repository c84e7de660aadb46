//! Dense helpers shared by the tape and the value-level code paths.
//!
//! Everything here works on `DMatrix<f64>`. Cholesky factors are lower
//! triangular and only the lower triangle of the input is read.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// First jitter tried after a failed factorization, relative to the mean diagonal.
pub const JITTER_START: f64 = 1e-8;
/// Largest relative jitter before giving up.
pub const JITTER_MAX: f64 = 1e-4;

/// Plain Cholesky factorization `A = L Lᵀ`.
///
/// On failure the error carries the 1-based index of the leading minor
/// that was not positive.
pub fn cholesky(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    cholesky_shifted(a, 0.0)
}

fn cholesky_shifted(a: &DMatrix<f64>, shift: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::ShapeMismatch {
            op: "cholesky",
            lhs: a.shape(),
            rhs: (n, n),
        });
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)] + shift;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite {
                minor: j + 1,
                jitter: shift,
            });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Cholesky with the jitter ladder: on failure add `1e-8 * mean(diag)` to the
/// diagonal and double it until `1e-4 * mean(diag)` is exceeded.
///
/// Returns the factor together with the absolute jitter that was added.
pub fn cholesky_jittered(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    match cholesky_shifted(a, 0.0) {
        Ok(l) => Ok((l, 0.0)),
        Err(Error::NotPositiveDefinite { minor, .. }) => {
            let n = a.nrows().max(1);
            let mean_diag = (a.diagonal().sum() / n as f64).abs().max(f64::MIN_POSITIVE);
            let mut rel = JITTER_START;
            let mut last_minor = minor;
            while rel <= JITTER_MAX * (1.0 + 1e-12) {
                let shift = rel * mean_diag;
                match cholesky_shifted(a, shift) {
                    Ok(l) => return Ok((l, shift)),
                    Err(Error::NotPositiveDefinite { minor, .. }) => last_minor = minor,
                    Err(e) => return Err(e),
                }
                rel *= 2.0;
            }
            Err(Error::NotPositiveDefinite {
                minor: last_minor,
                jitter: JITTER_MAX * mean_diag,
            })
        }
        Err(e) => Err(e),
    }
}

/// Solves `L X = B` for lower-triangular `L`.
pub fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for c in 0..b.ncols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// Solves `Lᵀ X = B` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for c in 0..b.ncols() {
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// `A⁻¹ B` for symmetric positive definite `A`, through the jittered Cholesky.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (l, _) = cholesky_jittered(a)?;
    Ok(solve_lower_transpose(&l, &solve_lower(&l, b)))
}

pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (l, _) = cholesky_jittered(a)?;
    Ok(inverse_from_cholesky(&l))
}

pub fn inverse_from_cholesky(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let linv = solve_lower(l, &DMatrix::identity(n, n));
    let inv = linv.transpose() * &linv;
    symmetrize(&inv)
}

/// `log|A|` via Cholesky.
pub fn logdet_spd(a: &DMatrix<f64>) -> Result<f64> {
    let (l, _) = cholesky_jittered(a)?;
    Ok(logdet_from_cholesky(&l))
}

pub fn logdet_from_cholesky(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Lower triangle including the diagonal.
pub fn tril(a: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| if j <= i { a[(i, j)] } else { 0.0 })
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    DMatrix::from_fn(ar * br, ac * bc, |i, j| {
        a[(i / br, j / bc)] * b[(i % br, j % bc)]
    })
}

/// Block-diagonal matrix from square blocks.
pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let m: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(n, m);
    let (mut r0, mut c0) = (0, 0);
    for b in blocks {
        out.view_mut((r0, c0), b.shape()).copy_from(b);
        r0 += b.nrows();
        c0 += b.ncols();
    }
    out
}

/// Largest singular value by power iteration on `WᵀW`.
///
/// Starts from the normalized all-ones vector so the result is deterministic.
/// Stops after `max_iters` steps or when the estimate moves by less than
/// `tol` (relative).
pub fn spectral_norm(w: &DMatrix<f64>, max_iters: usize, tol: f64) -> f64 {
    power_iteration(w, max_iters, tol).0
}

/// As [`spectral_norm`], also reporting whether the tolerance was met
/// within the step budget.
pub fn power_iteration(w: &DMatrix<f64>, max_iters: usize, tol: f64) -> (f64, bool) {
    let c = w.ncols();
    if c == 0 || w.nrows() == 0 {
        return (0.0, true);
    }
    let mut v = nalgebra::DVector::from_element(c, 1.0 / (c as f64).sqrt());
    let mut sigma = 0.0;
    for _ in 0..max_iters {
        let u = w * &v;
        let un = u.norm();
        if un == 0.0 {
            // ones vector in the null space
            return (w.singular_values().max(), true);
        }
        let next = w.transpose() * (u / un);
        let s = next.norm();
        v = next / s;
        let done = (s - sigma).abs() <= tol * s.max(f64::MIN_POSITIVE);
        sigma = s;
        if done {
            return (sigma, true);
        }
    }
    (sigma, false)
}

pub fn all_finite(a: &DMatrix<f64>) -> bool {
    a.iter().all(|x| x.is_finite())
}
