//! Spatial kernels on the (normalized) observation grid and the deep
//! temporal kernel built on encoder features.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg;

/// Power-iteration budget for spectral normalization.
pub const SPECTRAL_ITERS: usize = 30;
pub const SPECTRAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    /// `σ² exp(-d² / 2ℓ²)`
    SquaredExponential,
    /// `σ² exp(-d / ℓ)`
    OrnsteinUhlenbeck,
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "se" | "squared-exponential" => Ok(KernelKind::SquaredExponential),
            "ou" | "ornstein-uhlenbeck" => Ok(KernelKind::OrnsteinUhlenbeck),
            other => Err(Error::invalid("kernel", format!("unknown kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialKernel {
    pub kind: KernelKind,
    pub lengthscale: f64,
    pub variance: f64,
}

impl SpatialKernel {
    pub fn new(kind: KernelKind, lengthscale: f64, variance: f64) -> Result<Self> {
        let k = Self {
            kind,
            lengthscale,
            variance,
        };
        k.validate()?;
        Ok(k)
    }

    fn validate(&self) -> Result<()> {
        if !(self.lengthscale > 0.0) || !self.lengthscale.is_finite() {
            return Err(Error::invalid("lengthscale", "must be positive and finite"));
        }
        if !(self.variance > 0.0) || !self.variance.is_finite() {
            return Err(Error::invalid("variance", "must be positive and finite"));
        }
        Ok(())
    }

    pub fn eval(&self, d: f64) -> f64 {
        match self.kind {
            KernelKind::SquaredExponential => {
                self.variance * (-(d * d) / (2.0 * self.lengthscale * self.lengthscale)).exp()
            }
            KernelKind::OrnsteinUhlenbeck => self.variance * (-d.abs() / self.lengthscale).exp(),
        }
    }

    /// Gram matrix between two point sets on the grid.
    pub fn gram(&self, a: &[f64], b: &[f64]) -> Result<DMatrix<f64>> {
        self.validate()?;
        Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| self.eval(a[i] - b[j])))
    }

    /// Gram matrix between rows of two feature matrices.
    pub fn gram_rows(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.validate()?;
        if a.ncols() != b.ncols() {
            return Err(Error::ShapeMismatch {
                op: "gram_rows",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        Ok(DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
            let d = (a.row(i) - b.row(j)).norm();
            self.eval(d)
        }))
    }
}

/// Gram matrix on the tape with trainable positive `lengthscale` and
/// `variance` (both 1×1 nodes).
pub fn gram_tape(
    t: &mut Tape,
    kind: KernelKind,
    a: &[f64],
    b: &[f64],
    lengthscale: Var,
    variance: Var,
) -> Result<Var> {
    let dist = DMatrix::from_fn(a.len(), b.len(), |i, j| match kind {
        KernelKind::SquaredExponential => (a[i] - b[j]).powi(2),
        KernelKind::OrnsteinUhlenbeck => (a[i] - b[j]).abs(),
    });
    let d = t.constant(dist);
    scaled_kernel(t, kind, d, lengthscale, variance)
}

fn scaled_kernel(t: &mut Tape, kind: KernelKind, dist: Var, lengthscale: Var, variance: Var) -> Result<Var> {
    let one = t.scalar(1.0);
    let inv = match kind {
        KernelKind::SquaredExponential => {
            let l2 = t.square(lengthscale)?;
            let l2 = t.scale(l2, 2.0)?;
            t.div(one, l2)?
        }
        KernelKind::OrnsteinUhlenbeck => t.div(one, lengthscale)?,
    };
    let neg = t.neg(inv)?;
    let arg = t.mul_scalar(dist, neg)?;
    let e = t.exp(arg)?;
    t.mul_scalar(e, variance)
}

/// Temporal kernel acting on encoder features `h_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalKernel {
    pub base: SpatialKernel,
    /// Spectral normalization of the encoder weights.
    pub normalize: bool,
}

impl TemporalKernel {
    /// Squared-exponential on `d`-dimensional features with `ℓ = √d`.
    pub fn default_for(dim: usize) -> Self {
        Self {
            base: SpatialKernel {
                kind: KernelKind::SquaredExponential,
                lengthscale: (dim.max(1) as f64).sqrt(),
                variance: 1.0,
            },
            normalize: true,
        }
    }
}

/// `Σ_X[t, s] = κ(h_t, h_s)` from an n×d feature matrix.
pub fn temporal_gram(features: &DMatrix<f64>, kernel: &TemporalKernel) -> Result<DMatrix<f64>> {
    if !linalg::all_finite(features) {
        return Err(Error::non_finite("temporal features"));
    }
    let g = kernel.base.gram_rows(features, features)?;
    Ok(linalg::symmetrize(&g))
}

/// Tape version of [`temporal_gram`]: cross Gram between feature rows of
/// `a` and `b` (pass the same node twice for `Σ_X`). The lengthscale is a
/// 1×1 node so it can be trained; the variance is taken from `kernel`.
pub fn temporal_gram_tape(t: &mut Tape, a: Var, b: Var, kernel: &TemporalKernel, lengthscale: Var) -> Result<Var> {
    if !linalg::all_finite(t.value(a)) || !linalg::all_finite(t.value(b)) {
        return Err(Error::non_finite("temporal features"));
    }
    kernel.base.validate()?;
    let squared = kernel.base.kind == KernelKind::SquaredExponential;
    let d = t.pair_dist(a, b, squared)?;
    let var = t.scalar(kernel.base.variance);
    scaled_kernel(t, kernel.base.kind, d, lengthscale, var)
}

/// Divide each matrix by its spectral norm (zero matrices pass through).
///
/// Power iteration is used when it settles within [`SPECTRAL_ITERS`] steps;
/// otherwise (close leading singular values) the norm comes from an SVD.
pub fn spectral_normalize(weights: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    weights
        .iter()
        .map(|w| {
            let s = match linalg::power_iteration(w, SPECTRAL_ITERS, SPECTRAL_TOL) {
                (s, true) => s,
                (_, false) => w.singular_values().max(),
            };
            if s > 0.0 {
                w / s
            } else {
                w.clone()
            }
        })
        .collect()
}
