//! Dense oracles for the sparse MTGP posterior with a fixed SE kernel.

use df2m::kernels::{KernelKind, SpatialKernel};
use df2m::mtgp::InducingPosterior;
use nalgebra::{DMatrix, DVector};
use rand::RngExt;
use rand_distr::{Distribution, Normal};

use super::{block_diag, conditional_gaussian_oracle, random_matrix};

pub const LS: f64 = 0.35;
pub const VAR: f64 = 1.3;

pub fn se(a: f64, b: f64) -> f64 {
    VAR * (-(a - b).powi(2) / (2.0 * LS * LS)).exp()
}

pub fn kernel() -> SpatialKernel {
    SpatialKernel::new(KernelKind::SquaredExponential, LS, VAR).unwrap()
}

pub fn obs_grid(l: usize) -> Vec<f64> {
    (0..l).map(|k| 0.05 + 0.9 * k as f64 / (l - 1) as f64).collect()
}

/// Posterior with random means and random lower factors for `factors` factors.
pub fn posterior(n: usize, factors: usize, k: usize, seed: u64) -> InducingPosterior {
    let mu = random_matrix(k, n * factors, seed) * 1.5;
    let mut s_chol = random_matrix(k, n * factors * k, seed + 1) * 0.5;
    for b in 0..n * factors {
        for i in 0..k {
            for j in 0..k {
                if j > i {
                    s_chol[(i, b * k + j)] = 0.0;
                } else if i == j {
                    s_chol[(i, b * k + j)] = s_chol[(i, b * k + j)].abs() + 0.2;
                }
            }
        }
    }
    InducingPosterior::new(n, factors, mu, s_chol).unwrap()
}

/// Dense prior over `[X_t(u) for t] ++ [X_t(v) for t]` of one factor, built
/// entry by entry from `Σ_X[t, s] κ(a, b)`.
pub fn dense_joint(sigma_x: &DMatrix<f64>, u: &[f64], v: &[f64]) -> DMatrix<f64> {
    let n = sigma_x.nrows();
    let (l, k) = (u.len(), v.len());
    let point = |i: usize| {
        if i < n * l {
            (i / l, u[i % l])
        } else {
            let j = i - n * l;
            (j / k, v[j % k])
        }
    };
    let d = n * (l + k);
    DMatrix::from_fn(d, d, |a, b| {
        let (t, x) = point(a);
        let (s, y) = point(b);
        sigma_x[(t, s)] * se(x, y)
    })
}

/// Mean and covariance of `X(u)` for one factor obtained by conditioning the
/// dense joint on the inducing values and averaging over `q`.
pub fn oracle_moments(
    q: &InducingPosterior,
    sigma_x: &DMatrix<f64>,
    u: &[f64],
    v: &[f64],
    r: usize,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = q.n;
    let (l, k) = (u.len(), v.len());
    let joint = dense_joint(sigma_x, u, v);
    let mean = DVector::zeros(joint.nrows());
    let observed: Vec<usize> = (n * l..n * (l + k)).collect();
    let mu = DVector::from_iterator(n * k, (0..n).flat_map(|t| q.mu_tr(t, r).iter().copied().collect::<Vec<_>>()));
    let (cm, cc) = conditional_gaussian_oracle(&mean, &joint, &observed, &mu);
    // the conditional mean is linear in the observed values; recover the gain column by column
    let (base, _) = conditional_gaussian_oracle(&mean, &joint, &observed, &DVector::zeros(n * k));
    let mut gain = DMatrix::zeros(n * l, n * k);
    for j in 0..n * k {
        let mut e = DVector::zeros(n * k);
        e[j] = 1.0;
        let (col, _) = conditional_gaussian_oracle(&mean, &joint, &observed, &e);
        gain.set_column(j, &(col - &base));
    }
    let s = block_diag(&(0..n).map(|t| q.s_tr(t, r)).collect::<Vec<_>>());
    let total = cc + &gain * s * gain.transpose();
    (cm, total)
}

pub struct Loadings {
    pub m: DMatrix<f64>,
    pub eta: DMatrix<f64>,
    pub sigma_q: DMatrix<f64>,
}

impl Loadings {
    pub fn new(p: usize, factors: usize, seed: u64) -> Self {
        Self {
            m: random_matrix(p, factors, seed).map(|x| 0.5 + 0.45 * x),
            eta: random_matrix(p, factors, seed + 1),
            sigma_q: random_matrix(p, factors, seed + 2).map(|x| 0.3 + 0.2 * x.abs()),
        }
    }

    pub fn beta_f2(&self) -> f64 {
        self.m.zip_map(&self.eta.zip_map(&self.sigma_q, |e, s| e * e + s * s), |m, v| m * v).sum()
    }

    pub fn draw<R: rand::Rng>(&self, rng: &mut R) -> DMatrix<f64> {
        DMatrix::from_fn(self.m.nrows(), self.m.ncols(), |i, r| {
            let z = if rng.random::<f64>() < self.m[(i, r)] { 1.0 } else { 0.0 };
            let a = Normal::new(self.eta[(i, r)], self.sigma_q[(i, r)]).unwrap().sample(rng);
            z * a
        })
    }
}

pub fn mean_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
