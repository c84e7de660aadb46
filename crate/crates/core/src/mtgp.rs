//! Sparse variational multi-task GP over the factor curves.
//!
//! Each factor `r` has inducing values `X_tr(v)` at K shared points `v` for
//! every time `t`, with posterior `N(μ_tr, S_tr)`. With the projection
//! `P = Σuv Σvv⁻¹` the posterior of the curve on the observation grid `u`
//! has mean `P μ_tr` and covariance
//! `(I ⊗ P) blockdiag(S_tr) (I ⊗ P)ᵀ + Σ_X ⊗ (Σuu − P Σuvᵀ)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::gauss;
use crate::kernels::SpatialKernel;
use crate::linalg;

/// Inducing locations shared across factors and time.
#[derive(Debug, Clone, PartialEq)]
pub struct InducingGrid {
    pub v: Vec<f64>,
}

impl InducingGrid {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.len() < 2 {
            return Err(Error::invalid("inducing grid", "needs at least 2 points"));
        }
        if v.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("inducing grid", "must be strictly increasing"));
        }
        Ok(Self { v })
    }

    /// K points spread uniformly over [0, 1] including the endpoints.
    pub fn uniform(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid("inducing grid", "needs at least 2 points"));
        }
        Self::new((0..k).map(|i| i as f64 / (k - 1) as f64).collect())
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }
}

/// Variational posterior over inducing values, stored factor-major:
/// column `r·n + t` of `mu` is `μ_tr`, and `S_tr = L Lᵀ` with `L` the K×K
/// block at columns `(r·n + t)·K ..` of `s_chol`.
#[derive(Debug, Clone, PartialEq)]
pub struct InducingPosterior {
    pub n: usize,
    pub factors: usize,
    pub mu: DMatrix<f64>,
    pub s_chol: DMatrix<f64>,
}

impl InducingPosterior {
    pub fn new(n: usize, factors: usize, mu: DMatrix<f64>, s_chol: DMatrix<f64>) -> Result<Self> {
        let k = mu.nrows();
        if mu.ncols() != n * factors || s_chol.shape() != (k, n * factors * k) {
            return Err(Error::ShapeMismatch {
                op: "inducing posterior",
                lhs: mu.shape(),
                rhs: s_chol.shape(),
            });
        }
        Ok(Self { n, factors, mu, s_chol })
    }

    /// Zero means and `S = scale·I` everywhere.
    pub fn isotropic(n: usize, factors: usize, k: usize, scale: f64) -> Self {
        let block = DMatrix::<f64>::identity(k, k) * scale.sqrt();
        let mut s_chol = DMatrix::zeros(k, n * factors * k);
        for b in 0..n * factors {
            s_chol.view_mut((0, b * k), (k, k)).copy_from(&block);
        }
        Self {
            n,
            factors,
            mu: DMatrix::zeros(k, n * factors),
            s_chol,
        }
    }

    pub fn k(&self) -> usize {
        self.mu.nrows()
    }

    pub fn col(&self, t: usize, r: usize) -> usize {
        r * self.n + t
    }

    pub fn mu_tr(&self, t: usize, r: usize) -> DVector<f64> {
        self.mu.column(self.col(t, r)).into_owned()
    }

    pub fn chol_tr(&self, t: usize, r: usize) -> DMatrix<f64> {
        let k = self.k();
        linalg::tril(&self.s_chol.view((0, self.col(t, r) * k), (k, k)).into_owned())
    }

    pub fn s_tr(&self, t: usize, r: usize) -> DMatrix<f64> {
        let l = self.chol_tr(t, r);
        &l * l.transpose()
    }

    /// K×n matrix of means for factor `r`.
    pub fn mu_r(&self, r: usize) -> DMatrix<f64> {
        self.mu.columns(r * self.n, self.n).into_owned()
    }

    fn check(&self, t: usize, r: usize) -> Result<()> {
        if t >= self.n || r >= self.factors {
            return Err(Error::invalid(
                "index",
                format!("(t={t}, r={r}) outside n={} M={}", self.n, self.factors),
            ));
        }
        Ok(())
    }
}

/// Spatial blocks `Σuu`, `Σuv`, `Σvv` and the projection `P = Σuv Σvv⁻¹`.
#[derive(Debug, Clone)]
pub struct SpatialBlocks {
    pub uu: DMatrix<f64>,
    pub uv: DMatrix<f64>,
    pub vv: DMatrix<f64>,
    pub projection: DMatrix<f64>,
}

impl SpatialBlocks {
    pub fn new(kernel: &SpatialKernel, grid: &InducingGrid, u: &[f64]) -> Result<Self> {
        let uu = kernel.gram(u, u)?;
        let uv = kernel.gram(u, &grid.v)?;
        let vv = kernel.gram(&grid.v, &grid.v)?;
        let projection = linalg::spd_solve(&vv, &uv.transpose())?.transpose();
        Ok(Self {
            uu,
            uv,
            vv,
            projection,
        })
    }

    /// `Σuu − P Σuvᵀ`.
    pub fn schur(&self) -> DMatrix<f64> {
        linalg::symmetrize(&(&self.uu - &self.projection * self.uv.transpose()))
    }
}

/// `E[X_tr(u)] = P μ_tr`.
pub fn posterior_mean_at(
    q: &InducingPosterior,
    grid: &InducingGrid,
    u: &[f64],
    spatial: &SpatialKernel,
    t: usize,
    r: usize,
) -> Result<DVector<f64>> {
    q.check(t, r)?;
    let blocks = SpatialBlocks::new(spatial, grid, u)?;
    Ok(&blocks.projection * q.mu_tr(t, r))
}

/// The two structured parts of the nL×nL posterior covariance of factor `r`
/// (time-major: index `t·L + k`).
#[derive(Debug, Clone)]
pub struct PosteriorCov {
    pub part1: DMatrix<f64>,
    pub part2: DMatrix<f64>,
    pub total: DMatrix<f64>,
}

pub fn posterior_cov_at(
    q: &InducingPosterior,
    grid: &InducingGrid,
    u: &[f64],
    spatial: &SpatialKernel,
    sigma_x: &DMatrix<f64>,
    r: usize,
) -> Result<PosteriorCov> {
    q.check(0, r)?;
    let n = q.n;
    if sigma_x.shape() != (n, n) {
        return Err(Error::ShapeMismatch {
            op: "posterior_cov_at",
            lhs: sigma_x.shape(),
            rhs: (n, n),
        });
    }
    let blocks = SpatialBlocks::new(spatial, grid, u)?;
    let p = &blocks.projection;
    let parts: Vec<DMatrix<f64>> = (0..n).map(|t| p * q.s_tr(t, r) * p.transpose()).collect();
    let part1 = linalg::block_diag(&parts);
    let part2 = linalg::kron(sigma_x, &blocks.schur());
    let total = &part1 + &part2;
    Ok(PosteriorCov { part1, part2, total })
}

/// One reparameterized draw `P (μ_tr + L_tr ε)` from the proxy posterior.
pub fn sample_proxy<R: Rng + ?Sized>(
    q: &InducingPosterior,
    grid: &InducingGrid,
    u: &[f64],
    spatial: &SpatialKernel,
    rng: &mut R,
    t: usize,
    r: usize,
) -> Result<DVector<f64>> {
    q.check(t, r)?;
    let blocks = SpatialBlocks::new(spatial, grid, u)?;
    let eps = gauss::standard_normal_matrix(q.k(), 1, rng);
    let inducing = q.mu_tr(t, r) + q.chol_tr(t, r) * eps.column(0);
    Ok(&blocks.projection * inducing)
}

/// `(1/2σ²) · E‖Z⊙A‖²_F · tr(Σ_X) · tr(Σuu − P Σuvᵀ)`.
pub fn prop3_constant(beta_f2: f64, sigma_eps: f64, sigma_x: &DMatrix<f64>, blocks: &SpatialBlocks) -> Result<f64> {
    if !(sigma_eps > 0.0) {
        return Err(Error::invalid("sigma_eps", "must be positive"));
    }
    Ok(beta_f2 * sigma_x.trace() * blocks.schur().trace() / (2.0 * sigma_eps * sigma_eps))
}

/// Predictive inducing mean `μ_r Σ_X⁻¹ k*ᵀ` for one factor (`mu_r` is K×n,
/// `k_star` holds `κ(h_{n+1}, h_s)` for s = 1..n).
pub fn predict_inducing(mu_r: &DMatrix<f64>, sigma_x: &DMatrix<f64>, k_star: &DVector<f64>) -> Result<DVector<f64>> {
    let n = sigma_x.nrows();
    if mu_r.ncols() != n || k_star.len() != n {
        return Err(Error::ShapeMismatch {
            op: "predict_inducing",
            lhs: mu_r.shape(),
            rhs: (k_star.len(), n),
        });
    }
    let w = linalg::spd_solve(sigma_x, &DMatrix::from_column_slice(n, 1, k_star.as_slice()))?;
    Ok(mu_r * w.column(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelKind;

    fn kernel() -> SpatialKernel {
        SpatialKernel::new(KernelKind::SquaredExponential, 0.3, 1.0).unwrap()
    }

    #[test]
    fn mean_interpolates_at_inducing_points() {
        let grid = InducingGrid::uniform(3).unwrap();
        let mut q = InducingPosterior::isotropic(2, 1, 3, 0.1);
        q.mu[(0, 1)] = 0.4;
        q.mu[(1, 1)] = -1.2;
        q.mu[(2, 1)] = 2.0;
        let m = posterior_mean_at(&q, &grid, &grid.v.clone(), &kernel(), 1, 0).unwrap();
        assert!((m - q.mu_tr(1, 0)).abs().max() < 1e-9);
        let z = posterior_mean_at(&q, &grid, &[0.1, 0.7], &kernel(), 0, 0).unwrap();
        assert_eq!(z, DVector::zeros(2));
    }

    #[test]
    fn deterministic_inducing_values_leave_only_schur_part() {
        let grid = InducingGrid::uniform(3).unwrap();
        let mut q = InducingPosterior::isotropic(2, 1, 3, 0.0);
        q.s_chol.fill(0.0);
        let sx = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]);
        let c = posterior_cov_at(&q, &grid, &[0.2, 0.9], &kernel(), &sx, 0).unwrap();
        assert_eq!(c.total, c.part2);
    }

    #[test]
    fn schur_vanishes_on_inducing_points() {
        let grid = InducingGrid::uniform(4).unwrap();
        let b = SpatialBlocks::new(&kernel(), &grid, &grid.v).unwrap();
        assert!(b.schur().abs().max() < 1e-8);
        let c = prop3_constant(3.0, 0.5, &DMatrix::identity(3, 3), &b).unwrap();
        assert!(c.abs() < 1e-6);
        let b2 = SpatialBlocks::new(&kernel(), &grid, &[0.15, 0.5]).unwrap();
        assert_eq!(prop3_constant(0.0, 0.5, &DMatrix::identity(3, 3), &b2).unwrap(), 0.0);
    }

    #[test]
    fn scalar_temporal_prediction() {
        let mu = DMatrix::from_column_slice(2, 1, &[1.5, -0.5]);
        let x = predict_inducing(&mu, &DMatrix::identity(1, 1), &DVector::from_element(1, 0.7)).unwrap();
        assert!((x - DVector::from_column_slice(&[1.05, -0.35])).abs().max() < 1e-15);
    }

    #[test]
    fn grid_validation() {
        assert!(InducingGrid::new(vec![0.0]).is_err());
        assert!(InducingGrid::new(vec![0.0, 0.5, 0.5]).is_err());
        assert_eq!(InducingGrid::uniform(3).unwrap().v, vec![0.0, 0.5, 1.0]);
    }
}
