//! Synthetic panels drawn from the generative model with known ground truth.
//!
//! Factor paths are sampled one time step at a time from the conditional of
//! the separable prior `Σ_X ⊗ Σ_𝒰`, so that history-dependent temporal
//! kernels can be evaluated on the already drawn past.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngExt};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::FunctionalPanel;
use crate::error::{Error, Result};
use crate::gauss;
use crate::kernels::{KernelKind, SpatialKernel};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Dynamics {
    /// `Σ_X[t, s] = ρ^|t−s|`.
    MarkovLinear { rho: f64 },
    /// `κ(t, s) = a1⟨X_{t−1}, X_{s−1}⟩ + a2⟨X_{t−2}, X_{s−2}⟩ + nugget·1[t=s]`,
    /// with ⟨·,·⟩ the grid average of the factor inner product.
    TwoLag { a1: f64, a2: f64, nugget: f64 },
    /// SE kernel on the state of a fixed random tanh RNN fed with the
    /// grid-averaged factors of the previous step.
    NonlinearRecurrent {
        hidden: usize,
        memory: f64,
        lengthscale: f64,
        nugget: f64,
    },
}

impl Dynamics {
    pub fn name(&self) -> &'static str {
        match self {
            Dynamics::MarkovLinear { .. } => "markov-linear",
            Dynamics::TwoLag { .. } => "two-lag",
            Dynamics::NonlinearRecurrent { .. } => "nonlinear-recurrent",
        }
    }

    /// Defaults for each named dynamic.
    pub fn named(name: &str) -> Result<Self> {
        match name {
            "markov-linear" => Ok(Dynamics::MarkovLinear { rho: 0.8 }),
            "two-lag" => Ok(Dynamics::TwoLag {
                a1: 0.6,
                a2: 0.3,
                nugget: 0.1,
            }),
            "nonlinear-recurrent" => Ok(Dynamics::NonlinearRecurrent {
                hidden: 8,
                memory: 0.9,
                lengthscale: 1.0,
                nugget: 1e-2,
            }),
            other => Err(Error::invalid("dynamics", format!("unknown dynamic `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoadingMode {
    /// Stick-breaking IBP mask with Gaussian weights.
    Ibp,
    /// `Z = 1`, `A = 1`.
    Ones,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub p: usize,
    pub n: usize,
    pub l: usize,
    /// True factor count M₀.
    pub factors: usize,
    pub alpha: f64,
    pub sigma_a: f64,
    pub sigma_eps: f64,
    pub spatial: SpatialKernel,
    pub dynamics: Dynamics,
    pub loadings: LoadingMode,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            p: 20,
            n: 40,
            l: 12,
            factors: 3,
            alpha: 3.0,
            sigma_a: 1.0,
            sigma_eps: 0.1,
            spatial: SpatialKernel {
                kind: KernelKind::SquaredExponential,
                lengthscale: 0.2,
                variance: 1.0,
            },
            dynamics: Dynamics::MarkovLinear { rho: 0.8 },
            loadings: LoadingMode::Ibp,
        }
    }
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.n == 0 || self.l == 0 || self.factors == 0 {
            return Err(Error::invalid("simulate", "p, n, L and M₀ must be positive"));
        }
        if !(self.alpha > 0.0) || !(self.sigma_a > 0.0) || !(self.sigma_eps >= 0.0) {
            return Err(Error::invalid("simulate", "alpha, sigma_a must be positive and sigma_eps nonnegative"));
        }
        SpatialKernel::new(self.spatial.kind, self.spatial.lengthscale, self.spatial.variance)?;
        match self.dynamics {
            Dynamics::MarkovLinear { rho } if !(rho.abs() < 1.0) => {
                Err(Error::invalid("rho", "must satisfy |rho| < 1"))
            }
            Dynamics::TwoLag { a1, a2, nugget } if a1 < 0.0 || a2 < 0.0 || !(nugget > 0.0) => {
                Err(Error::invalid("two-lag", "weights must be nonnegative and nugget positive"))
            }
            Dynamics::NonlinearRecurrent {
                hidden,
                lengthscale,
                nugget,
                ..
            } if hidden == 0 || !(lengthscale > 0.0) || !(nugget > 0.0) => {
                Err(Error::invalid("nonlinear-recurrent", "hidden, lengthscale and nugget must be positive"))
            }
            _ => Ok(()),
        }
    }

    pub fn grid(&self) -> Vec<f64> {
        if self.l == 1 {
            return vec![0.0];
        }
        (0..self.l).map(|k| k as f64 / (self.l - 1) as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// p × M₀ binary mask.
    pub z: DMatrix<f64>,
    /// p × M₀ weights.
    pub a: DMatrix<f64>,
    /// M₀ × L factor values per time step.
    pub factors: Vec<DMatrix<f64>>,
    /// Realized n × n temporal covariance.
    pub sigma_x: DMatrix<f64>,
    pub spatial: SpatialKernel,
}

impl GroundTruth {
    pub fn loadings(&self) -> DMatrix<f64> {
        self.z.component_mul(&self.a)
    }
}

fn ibp_mask<R: Rng + ?Sized>(p: usize, m: usize, alpha: f64, rng: &mut R) -> DMatrix<f64> {
    let mut w = 1.0;
    let mut z = DMatrix::zeros(p, m);
    for r in 0..m {
        let v: f64 = rng.random::<f64>().powf(1.0 / alpha);
        w *= v;
        for i in 0..p {
            if rng.random::<f64>() < w {
                z[(i, r)] = 1.0;
            }
        }
        if z.column(r).iter().all(|&x| x == 0.0) {
            z[(rng.random_range(0..p), r)] = 1.0;
        }
    }
    z
}

/// Grid average of `⟨X_a, X_b⟩` summed over factors.
fn functional_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.dot(b) / a.ncols() as f64
}

struct Recurrent {
    w_h: DMatrix<f64>,
    w_x: DMatrix<f64>,
    states: Vec<DVector<f64>>,
}

/// Temporal kernel evaluator that may look at the drawn past.
struct Temporal {
    dynamics: Dynamics,
    rnn: Option<Recurrent>,
}

impl Temporal {
    fn new<R: Rng + ?Sized>(dynamics: Dynamics, m0: usize, rng: &mut R) -> Self {
        let rnn = match dynamics {
            Dynamics::NonlinearRecurrent { hidden, memory, .. } => {
                let g = gauss::standard_normal_matrix(hidden, hidden, rng);
                let norm = linalg::spectral_norm(&g, 100, 1e-10);
                let w_h = g * (memory / norm.max(1e-12));
                let w_x = gauss::standard_normal_matrix(hidden, m0, rng) / (m0 as f64).sqrt();
                Some(Recurrent {
                    w_h,
                    w_x,
                    states: Vec::new(),
                })
            }
            _ => None,
        };
        Self { dynamics, rnn }
    }

    /// Register step t (its history `past[..t]` is complete).
    fn advance(&mut self, past: &[DMatrix<f64>]) {
        if let Some(rnn) = self.rnn.as_mut() {
            let hidden = rnn.w_h.nrows();
            let state = match past.last() {
                None => DVector::zeros(hidden),
                Some(x) => {
                    let summary = DVector::from_iterator(x.nrows(), x.row_iter().map(|r| r.mean()));
                    let prev = rnn.states.last().cloned().unwrap_or_else(|| DVector::zeros(hidden));
                    (&rnn.w_h * prev + &rnn.w_x * summary).map(f64::tanh)
                }
            };
            rnn.states.push(state);
        }
    }

    fn kernel(&self, t: usize, s: usize, past: &[DMatrix<f64>]) -> f64 {
        match self.dynamics {
            Dynamics::MarkovLinear { rho } => rho.powi((t as i32 - s as i32).abs()),
            Dynamics::TwoLag { a1, a2, nugget } => {
                let lag = |d: usize| {
                    if t >= d && s >= d {
                        functional_inner(&past[t - d], &past[s - d])
                    } else {
                        0.0
                    }
                };
                a1 * lag(1) + a2 * lag(2) + if t == s { nugget } else { 0.0 }
            }
            Dynamics::NonlinearRecurrent {
                lengthscale, nugget, ..
            } => {
                let states = &self.rnn.as_ref().expect("recurrent state").states;
                let d2 = (&states[t] - &states[s]).norm_squared();
                (-d2 / (2.0 * lengthscale * lengthscale)).exp() + if t == s { nugget } else { 0.0 }
            }
        }
    }
}

/// Draw factor paths (M₀ × L per step) and the realized `Σ_X`.
pub fn sample_factors<R: Rng + ?Sized>(
    spec: &SimSpec,
    rng: &mut R,
) -> Result<(Vec<DMatrix<f64>>, DMatrix<f64>)> {
    let (n, m0) = (spec.n, spec.factors);
    let grid = spec.grid();
    let lu = gauss::psd_factor(&spec.spatial.gram(&grid, &grid)?)?;
    let mut temporal = Temporal::new(spec.dynamics, m0, rng);
    let mut sigma_x = DMatrix::zeros(n, n);
    let mut past: Vec<DMatrix<f64>> = Vec::with_capacity(n);
    for t in 0..n {
        temporal.advance(&past);
        for s in 0..=t {
            let k = temporal.kernel(t, s, &past);
            sigma_x[(t, s)] = k;
            sigma_x[(s, t)] = k;
        }
        let (mean, var) = if t == 0 {
            (DMatrix::zeros(m0, spec.l), sigma_x[(0, 0)])
        } else {
            let prev = sigma_x.view((0, 0), (t, t)).into_owned();
            let cross = sigma_x.view((0, t), (t, 1)).into_owned();
            let w = linalg::spd_solve(&prev, &cross)?;
            let mut mean = DMatrix::zeros(m0, spec.l);
            for (s, xs) in past.iter().enumerate() {
                mean += xs * w[(s, 0)];
            }
            (mean, sigma_x[(t, t)] - (cross.transpose() * &w)[(0, 0)])
        };
        let e = gauss::standard_normal_matrix(m0, spec.l, rng);
        past.push(mean + e * lu.transpose() * var.max(0.0).sqrt());
    }
    Ok((past, sigma_x))
}

/// Panel and ground truth for `spec`.
pub fn simulate_panel<R: Rng + ?Sized>(spec: &SimSpec, rng: &mut R) -> Result<(FunctionalPanel, GroundTruth)> {
    spec.validate()?;
    let (p, m0) = (spec.p, spec.factors);
    let (z, a) = match spec.loadings {
        LoadingMode::Ibp => {
            let z = ibp_mask(p, m0, spec.alpha, rng);
            let a = DMatrix::from_fn(p, m0, |_, _| spec.sigma_a * rng.sample::<f64, _>(StandardNormal));
            (z, a)
        }
        LoadingMode::Ones => (DMatrix::from_element(p, m0, 1.0), DMatrix::from_element(p, m0, 1.0)),
    };
    let (factors, sigma_x) = sample_factors(spec, rng)?;
    let beta = z.component_mul(&a);
    let values = factors
        .iter()
        .map(|x| {
            let noise = gauss::standard_normal_matrix(p, spec.l, rng) * spec.sigma_eps;
            &beta * x + noise
        })
        .collect();
    let panel = FunctionalPanel::from_values(values, spec.grid())?;
    Ok((
        panel,
        GroundTruth {
            z,
            a,
            factors,
            sigma_x,
            spatial: spec.spatial,
        },
    ))
}
