//! Matrix-normal sampling and the Kronecker-structured KL between the
//! inducing-value posterior and its prior.
//!
//! The prior over the inducing values of one factor is
//! `vec(X(v)) ~ N(0, Σ_X ⊗ Σvv)`; the posterior factorizes over time as
//! `N(μ_t, S_t)`. The KL is evaluated through per-block traces and two
//! triangular solves, never forming the `nK × nK` product.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg;

/// `X ~ MN(M₀, U, V)`: `vec(X) ~ N(vec(M₀), V ⊗ U)`.
#[derive(Debug, Clone)]
pub struct MatrixNormal {
    pub mean: DMatrix<f64>,
    /// L×L row covariance.
    pub row_cov: DMatrix<f64>,
    /// n×n column covariance.
    pub col_cov: DMatrix<f64>,
}

/// Separable prior `Σ_X ⊗ Σvv` over the inducing values of a single factor.
#[derive(Debug, Clone)]
pub struct KroneckerGaussian {
    /// n×n temporal covariance.
    pub temporal: DMatrix<f64>,
    /// K×K spatial covariance at the inducing points.
    pub spatial: DMatrix<f64>,
}

/// An r×c matrix of independent standard normals, filled in column-major order.
pub fn standard_normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_iterator(
        rows,
        cols,
        (0..rows * cols).map(|_| StandardNormal.sample(rng)),
    )
}

/// Lower factor of a PSD matrix; the all-zero matrix factors to zero.
pub fn psd_factor(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.iter().all(|&x| x == 0.0) {
        return Ok(DMatrix::zeros(a.nrows(), a.ncols()));
    }
    Ok(linalg::cholesky_jittered(a)?.0)
}

/// `M₀ + chol(U) · E · chol(V)ᵀ` with `E` drawn by [`standard_normal_matrix`].
pub fn sample_matrix_normal<R: Rng + ?Sized>(dist: &MatrixNormal, rng: &mut R) -> Result<DMatrix<f64>> {
    let (l, n) = dist.mean.shape();
    if dist.row_cov.shape() != (l, l) {
        return Err(Error::ShapeMismatch {
            op: "sample_matrix_normal",
            lhs: dist.row_cov.shape(),
            rhs: (l, l),
        });
    }
    if dist.col_cov.shape() != (n, n) {
        return Err(Error::ShapeMismatch {
            op: "sample_matrix_normal",
            lhs: dist.col_cov.shape(),
            rhs: (n, n),
        });
    }
    let lu = psd_factor(&dist.row_cov)?;
    let lv = psd_factor(&dist.col_cov)?;
    let e = standard_normal_matrix(l, n, rng);
    Ok(&dist.mean + lu * e * lv.transpose())
}

/// Summed KL over `factors` independent factors on the tape.
///
/// * `mu`: K × (F·n), column `r·n + t` holds `μ_tr`.
/// * `s_chol`: K × (F·n·K), block `(r, t)` at columns `(r·n + t)·K ..` holds
///   the lower factor of `S_tr`.
/// * `logdet_s`: 1×1 node with `Σ_{r,t} log|S_tr|`.
/// * `lx`, `lv`: lower Cholesky factors of `Σ_X` (n×n) and `Σvv` (K×K).
pub fn kl_inducing_tape(
    t: &mut Tape,
    mu: Var,
    s_chol: Var,
    logdet_s: Var,
    lx: Var,
    lv: Var,
    factors: usize,
) -> Result<Var> {
    let n = t.shape(lx).0;
    let k = t.shape(lv).0;
    if t.shape(mu) != (k, factors * n) {
        return Err(Error::ShapeMismatch {
            op: "kl_inducing",
            lhs: t.shape(mu),
            rhs: (k, factors * n),
        });
    }
    if t.shape(s_chol) != (k, factors * n * k) {
        return Err(Error::ShapeMismatch {
            op: "kl_inducing",
            lhs: t.shape(s_chol),
            rhs: (k, factors * n * k),
        });
    }

    // Σ_t (Σ_X⁻¹)_tt · tr(Σvv⁻¹ S_tr), with tr(Σvv⁻¹ L Lᵀ) = ‖Lv⁻¹ L‖²_F
    let lx_inv = t.tri_inverse(lx)?;
    let lx_inv_sq = t.square(lx_inv)?;
    let q_diag = t.col_sums(lx_inv_sq)?;
    let q_tiled = if factors == 1 {
        q_diag
    } else {
        let copies = vec![q_diag; factors];
        t.concat(&copies, crate::autodiff::Axis::Cols)?
    };
    let w = t.tri_solve(lv, s_chol, false)?;
    let w_sq = t.square(w)?;
    let w_cols = t.col_sums(w_sq)?;
    let tr_blocks = t.block_col_sum(w_cols, k)?;
    let weighted = t.mul(tr_blocks, q_tiled)?;
    let trace_term = t.sum(weighted)?;

    // Σ_r tr(μ_rᵀ Σvv⁻¹ μ_r Σ_X⁻¹) = ‖Lx⁻¹ V‖²_F with V[t, r·K + k] = (Lv⁻¹ μ)[k, r·n + t]
    let z = t.tri_solve(lv, mu, false)?;
    let mut index = Vec::with_capacity(n * factors * k);
    for r in 0..factors {
        for kk in 0..k {
            for tt in 0..n {
                index.push((r * n + tt) * k + kk);
            }
        }
    }
    let v = t.gather(z, n, factors * k, index)?;
    let lv_v = t.tri_solve(lx, v, false)?;
    let mean_term = t.sum_squares(lv_v)?;

    let logdet_x = t.logdet_from_chol(lx)?;
    let logdet_v = t.logdet_from_chol(lv)?;
    let ldx = t.scale(logdet_x, (factors * k) as f64)?;
    let ldv = t.scale(logdet_v, (factors * n) as f64)?;

    let a = t.add(trace_term, mean_term)?;
    let b = t.add(a, ldx)?;
    let c = t.add(b, ldv)?;
    let d = t.sub(c, logdet_s)?;
    let e = t.add_const(d, -((factors * n * k) as f64))?;
    t.scale(e, 0.5)
}

/// KL between `∏_t N(μ_t, S_t)` and the Kronecker prior for one factor.
///
/// `mu` is K×n (column t is `μ_t`) and `s` holds the n K×K covariances.
pub fn kl_inducing(mu: &DMatrix<f64>, s: &[DMatrix<f64>], prior: &KroneckerGaussian) -> Result<f64> {
    let (k, n) = mu.shape();
    if n == 0 || k == 0 {
        return Err(Error::invalid("kl_inducing", "needs n ≥ 1 and K ≥ 1"));
    }
    if s.len() != n {
        return Err(Error::ShapeMismatch {
            op: "kl_inducing",
            lhs: (s.len(), 1),
            rhs: (n, 1),
        });
    }
    if prior.temporal.shape() != (n, n) || prior.spatial.shape() != (k, k) {
        return Err(Error::ShapeMismatch {
            op: "kl_inducing",
            lhs: prior.temporal.shape(),
            rhs: prior.spatial.shape(),
        });
    }
    let mut chol = DMatrix::zeros(k, n * k);
    let mut logdet_s = 0.0;
    for (i, st) in s.iter().enumerate() {
        if st.shape() != (k, k) {
            return Err(Error::ShapeMismatch {
                op: "kl_inducing",
                lhs: st.shape(),
                rhs: (k, k),
            });
        }
        let l = linalg::cholesky(st)?;
        logdet_s += linalg::logdet_from_cholesky(&l);
        chol.view_mut((0, i * k), (k, k)).copy_from(&l);
    }
    let mut t = Tape::new();
    let mu_v = t.leaf(mu.clone());
    let chol_v = t.leaf(chol);
    let ld_v = t.scalar(logdet_s);
    let lx = t.leaf(linalg::cholesky_jittered(&prior.temporal)?.0);
    let lv = t.leaf(linalg::cholesky_jittered(&prior.spatial)?.0);
    let kl = kl_inducing_tape(&mut t, mu_v, chol_v, ld_v, lx, lv, 1)?;
    Ok(t.scalar_value(kl))
}
