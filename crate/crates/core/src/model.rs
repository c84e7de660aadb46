//! The composed factor model: parameter layout, initialization, the ELBO
//! graph, and point forecasts.
//!
//! Unconstrained ("raw") tensors are what the optimizer sees. Positive
//! quantities are `softplus(raw) + floor`, Bernoulli means are
//! `sigmoid(logit)`, and each `S_tr` factor is the strict lower part of its
//! raw block plus a softplus diagonal.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngExt};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::FunctionalPanel;
use crate::error::{Error, Result};
use crate::gauss;
use crate::ibp::{self, LoadingPosterior};
use crate::kernels::{self, KernelKind, SpatialKernel, TemporalKernel};
use crate::linalg;
use crate::mtgp::{InducingGrid, InducingPosterior, SpatialBlocks};
use crate::rng::{self, Stream};
use crate::seqnets::{layer_norm, EncoderConfig, EncoderKind, EncoderParams, NamedTensor};

/// Fixed diagonal jitter on `Σvv`.
pub const VV_JITTER: f64 = 1e-6;

const TAU_FLOOR: f64 = 1e-3;
const SIGMA_FLOOR: f64 = 1e-6;
const LS_FLOOR: f64 = 1e-3;
const DIAG_FLOOR: f64 = 1e-6;

pub const MU: &str = "q.mu";
pub const S_RAW: &str = "q.s_raw";
pub const TAU1: &str = "ibp.tau1_raw";
pub const TAU0: &str = "ibp.tau0_raw";
pub const M_LOGIT: &str = "ibp.m_logit";
pub const ETA: &str = "load.eta";
pub const SIGMA_Q: &str = "load.sigma_q_raw";
pub const SIGMA_A: &str = "prior.sigma_a_raw";
pub const SIGMA_EPS: &str = "noise.sigma_eps_raw";
pub const SPATIAL_LS: &str = "spatial.ls_raw";
pub const SPATIAL_VAR: &str = "spatial.var_raw";
pub const TEMPORAL_LS: &str = "temporal.ls_raw";

/// Variational tensors in storage order.
pub const PARAM_NAMES: [&str; 11] = [
    MU, S_RAW, TAU1, TAU0, M_LOGIT, ETA, SIGMA_Q, SIGMA_A, SIGMA_EPS, SPATIAL_LS, SPATIAL_VAR,
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Truncation level M.
    pub factors: usize,
    /// Inducing points K.
    pub inducing: usize,
    pub hidden_size: usize,
    pub encoder: EncoderKind,
    pub alpha: f64,
    pub spatial_kind: KernelKind,
    pub temporal_kind: KernelKind,
    /// Diagonal added to `Σ_X`.
    pub nugget: f64,
    /// Uniform draws per step for `E[log(1 - w)]`.
    pub mc_draws: usize,
    pub spectral_norm: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            factors: 8,
            inducing: 10,
            hidden_size: 15,
            encoder: EncoderKind::Lin,
            alpha: 1.0,
            spatial_kind: KernelKind::SquaredExponential,
            temporal_kind: KernelKind::SquaredExponential,
            nugget: 1e-2,
            mc_draws: ibp::DEFAULT_MC_DRAWS,
            spectral_norm: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, message: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config {
                    field: field.to_string(),
                    message: message.to_string(),
                })
            }
        };
        check(self.factors >= 1, "factors", "must be at least 1")?;
        check(self.inducing >= 2, "inducing", "must be at least 2")?;
        check(self.hidden_size >= 1, "hidden_size", "must be at least 1")?;
        check(self.alpha > 0.0 && self.alpha.is_finite(), "alpha", "must be positive")?;
        check(self.nugget > 0.0 && self.nugget.is_finite(), "nugget", "must be positive")?;
        check(self.mc_draws >= 1, "mc_draws", "must be at least 1")
    }
}

/// Which tensors are differentiable leaves in an ELBO graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Variational tensors; `Σ_X` enters as a constant.
    Variational,
    /// Encoder weights; variational tensors are constants.
    Encoder,
    /// Everything (used for gradient checks).
    Joint,
}

/// Sampling noise of one ELBO estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboNoise {
    /// K × (M·n) standard normals for the proxy draw.
    pub eps: DMatrix<f64>,
    /// S × M uniforms for the stick fractions.
    pub sticks: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ElboTerms {
    pub elbo: f64,
    pub likelihood: f64,
    pub prop3: f64,
    pub kl_inducing: f64,
    pub kl_ibp: f64,
    pub kl_loadings: f64,
}

impl ElboTerms {
    /// `likelihood − prop3 − Σ KL` recomputed from the parts.
    pub fn recombined(&self) -> f64 {
        self.likelihood - self.prop3 - self.kl_inducing - self.kl_ibp - self.kl_loadings
    }
}

/// A recorded ELBO with handles to its leaves.
pub struct ElboGraph {
    pub tape: Tape,
    pub elbo: Var,
    pub terms: ElboTerms,
    /// Leaves in [`PARAM_NAMES`] order (constants in the encoder phase).
    pub variational: Vec<Var>,
    /// Leaves in encoder tensor order followed by the temporal lengthscale
    /// (constants in the variational phase).
    pub encoder: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Df2mModel {
    pub config: ModelConfig,
    pub grid: InducingGrid,
    /// Observation grid.
    pub u: Vec<f64>,
    pub n: usize,
    pub p: usize,
    pub params: Vec<NamedTensor>,
    pub encoder: EncoderParams,
    /// Raw temporal lengthscale, trained with the encoder.
    pub temporal_ls: NamedTensor,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn inv_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn positive_raw(value: f64, floor: f64) -> f64 {
    inv_softplus((value - floor).max(1e-12))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Linear interpolation of `(xs, ys)` at `x` (flat beyond the ends).
fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if xs.len() == 1 || x <= xs[0] {
        return ys[0];
    }
    let last = xs.len() - 1;
    if x >= xs[last] {
        return ys[last];
    }
    let j = xs.partition_point(|&g| g <= x).min(last).max(1);
    let w = (x - xs[j - 1]) / (xs[j] - xs[j - 1]);
    ys[j - 1] * (1.0 - w) + ys[j] * w
}

impl Df2mModel {
    /// Data-driven initialization (deterministic given `config.seed`).
    pub fn init(panel: &FunctionalPanel, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (n, p) = (panel.n(), panel.p());
        let (mm, k) = (config.factors, config.inducing);
        let std = panel.std();
        if !(std > 0.0) {
            return Err(Error::DegenerateData("data has zero variance".into()));
        }
        let mut rng = rng::stream(config.seed, Stream::Init);
        let grid = InducingGrid::uniform(k)?;
        let mu = Self::pca_inducing_means(panel, &grid, mm)?;

        let mut s_raw = DMatrix::zeros(k, mm * n * k);
        let diag = positive_raw(0.1f64.sqrt(), DIAG_FLOOR);
        for b in 0..mm * n {
            for j in 0..k {
                s_raw[(j, b * k + j)] = diag;
            }
        }
        let tau1 = DMatrix::from_element(1, mm, positive_raw(config.alpha, TAU_FLOOR));
        let tau0 = DMatrix::from_element(1, mm, positive_raw(1.0, TAU_FLOOR));
        let eta = DMatrix::from_fn(p, mm, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal));
        let scalar = |v: f64| DMatrix::from_element(1, 1, v);
        let values = vec![
            mu,
            s_raw,
            tau1,
            tau0,
            DMatrix::zeros(p, mm),
            eta,
            DMatrix::from_element(p, mm, positive_raw(0.1, SIGMA_FLOOR)),
            scalar(positive_raw(1.0, SIGMA_FLOOR)),
            scalar(positive_raw(0.1 * std, SIGMA_FLOOR)),
            scalar(positive_raw(0.2, LS_FLOOR)),
            scalar(positive_raw(1.0, SIGMA_FLOOR)),
        ];
        let params = PARAM_NAMES
            .iter()
            .zip(values)
            .map(|(name, value)| NamedTensor {
                name: name.to_string(),
                value,
                is_weight: false,
            })
            .collect();
        let enc_config = EncoderConfig::new(config.encoder, mm * k, config.hidden_size, rng.next_u64())?;
        let mut encoder = EncoderParams::init(enc_config);
        if config.spectral_norm {
            encoder.spectral_normalize();
        }
        Ok(Self {
            config,
            grid,
            u: panel.grid.clone(),
            n,
            p,
            params,
            encoder,
            temporal_ls: NamedTensor {
                name: TEMPORAL_LS.into(),
                value: DMatrix::from_element(1, 1, positive_raw((config.hidden_size as f64).sqrt(), LS_FLOOR)),
                is_weight: false,
            },
        })
    }

    /// Top-M right singular paths of the stacked data, scaled so the leading
    /// one has unit RMS, read off at the inducing points.
    fn pca_inducing_means(panel: &FunctionalPanel, grid: &InducingGrid, mm: usize) -> Result<DMatrix<f64>> {
        let (n, l) = (panel.n(), panel.l());
        let k = grid.len();
        let y = panel.stacked();
        let svd = y.svd(false, true);
        let v_t = svd.v_t.ok_or_else(|| Error::DegenerateData("SVD failed".into()))?;
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let top = svd.singular_values[order[0]];
        if !(top > 0.0) {
            return Err(Error::DegenerateData("data is identically zero".into()));
        }
        let scale = top / ((n * l) as f64).sqrt();
        let mut mu = DMatrix::zeros(k, mm * n);
        for (r, &idx) in order.iter().take(mm).enumerate() {
            let s = svd.singular_values[idx];
            for t in 0..n {
                let path: Vec<f64> = (0..l).map(|kk| s * v_t[(idx, t * l + kk)] / scale).collect();
                for (j, &v) in grid.v.iter().enumerate() {
                    mu[(j, r * n + t)] = interp(&panel.grid, &path, v);
                }
            }
        }
        Ok(mu)
    }

    pub fn m(&self) -> usize {
        self.config.factors
    }

    pub fn k(&self) -> usize {
        self.config.inducing
    }

    pub fn param(&self, name: &str) -> &DMatrix<f64> {
        &self
            .params
            .iter()
            .find(|t| t.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn param_mut(&mut self, name: &str) -> &mut DMatrix<f64> {
        &mut self
            .params
            .iter_mut()
            .find(|t| t.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    fn positive(&self, name: &str, floor: f64) -> DMatrix<f64> {
        self.param(name).map(|x| softplus(x) + floor)
    }

    pub fn sigma_eps(&self) -> f64 {
        self.positive(SIGMA_EPS, SIGMA_FLOOR)[(0, 0)]
    }

    pub fn spatial_kernel(&self) -> SpatialKernel {
        SpatialKernel {
            kind: self.config.spatial_kind,
            lengthscale: self.positive(SPATIAL_LS, LS_FLOOR)[(0, 0)],
            variance: self.positive(SPATIAL_VAR, SIGMA_FLOOR)[(0, 0)],
        }
    }

    pub fn temporal_kernel(&self) -> TemporalKernel {
        let mut k = TemporalKernel::default_for(self.config.hidden_size);
        k.base.kind = self.config.temporal_kind;
        k.normalize = self.config.spectral_norm;
        k.base.lengthscale = softplus(self.temporal_ls.value[(0, 0)]) + LS_FLOOR;
        k
    }

    pub fn loading_posterior(&self) -> LoadingPosterior {
        LoadingPosterior {
            tau1: self.positive(TAU1, TAU_FLOOR).iter().copied().collect(),
            tau0: self.positive(TAU0, TAU_FLOOR).iter().copied().collect(),
            m: self.param(M_LOGIT).map(sigmoid),
            eta: self.param(ETA).clone(),
            sigma_q: self.positive(SIGMA_Q, SIGMA_FLOOR),
            alpha: self.config.alpha,
            sigma_a: self.positive(SIGMA_A, SIGMA_FLOOR)[(0, 0)],
        }
    }

    /// Lower Cholesky factors of all `S_tr`, laid out as in [`InducingPosterior`].
    pub fn s_chol(&self) -> DMatrix<f64> {
        let k = self.k();
        DMatrix::from_fn(k, self.param(S_RAW).ncols(), |i, c| {
            let j = c % k;
            let x = self.param(S_RAW)[(i, c)];
            match i.cmp(&j) {
                std::cmp::Ordering::Greater => x,
                std::cmp::Ordering::Equal => softplus(x) + DIAG_FLOOR,
                std::cmp::Ordering::Less => 0.0,
            }
        })
    }

    pub fn inducing_posterior(&self) -> InducingPosterior {
        InducingPosterior {
            n: self.n,
            factors: self.m(),
            mu: self.param(MU).clone(),
            s_chol: self.s_chol(),
        }
    }

    pub fn spatial_blocks(&self) -> Result<SpatialBlocks> {
        let mut b = SpatialBlocks::new(&self.spatial_kernel(), &self.grid, &self.u)?;
        for i in 0..self.k() {
            b.vv[(i, i)] += VV_JITTER;
        }
        b.projection = linalg::spd_solve(&b.vv, &b.uv.transpose())?.transpose();
        Ok(b)
    }

    /// Inducing means at time t as a K×M matrix (column r).
    pub fn mu_at(&self, t: usize) -> DMatrix<f64> {
        let mu = self.param(MU);
        DMatrix::from_fn(self.k(), self.m(), |j, r| mu[(j, r * self.n + t)])
    }

    /// Time-ordered inducing means (K×M each).
    pub fn mu_history(&self) -> Vec<DMatrix<f64>> {
        (0..self.n).map(|t| self.mu_at(t)).collect()
    }

    /// Encoder input rows before normalization: row 0 is zero and row t ≥ 1
    /// is the flattened history entry t − 1. Returns `history.len() + 1` rows
    /// when `extra` is set.
    pub fn encoder_inputs(history: &[DMatrix<f64>], extra: bool) -> DMatrix<f64> {
        let rows = history.len() + usize::from(extra);
        let d = history.first().map(|h| h.len()).unwrap_or(0);
        DMatrix::from_fn(rows, d, |t, j| if t == 0 { 0.0 } else { history[t - 1].as_slice()[j] })
    }

    /// Encoder features `h_t` for the training history.
    pub fn temporal_features(&self) -> Result<DMatrix<f64>> {
        self.encoder.features(&Self::encoder_inputs(&self.mu_history(), false))
    }

    /// `Σ_X` (with nugget) over the training period.
    pub fn sigma_x(&self) -> Result<DMatrix<f64>> {
        let h = self.temporal_features()?;
        let mut g = kernels::temporal_gram(&h, &self.temporal_kernel())?;
        for i in 0..self.n {
            g[(i, i)] += self.config.nugget;
        }
        Ok(g)
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> ElboNoise {
        ElboNoise {
            eps: gauss::standard_normal_matrix(self.k(), self.m() * self.n, rng),
            sticks: ibp::uniform_draws(self.config.mc_draws, self.m(), rng),
        }
    }

    fn check_panel(&self, panel: &FunctionalPanel) -> Result<()> {
        if panel.n() != self.n || panel.p() != self.p || panel.grid != self.u {
            return Err(Error::ShapeMismatch {
                op: "elbo",
                lhs: (panel.n(), panel.p() * panel.l()),
                rhs: (self.n, self.p * self.u.len()),
            });
        }
        Ok(())
    }

    /// Record the single-draw ELBO estimate with the model's own encoder inputs.
    pub fn elbo_graph(&self, panel: &FunctionalPanel, noise: &ElboNoise, phase: Phase) -> Result<ElboGraph> {
        let inputs = Self::encoder_inputs(&self.mu_history(), false);
        self.elbo_graph_at(panel, noise, phase, &inputs)
    }

    /// As [`Self::elbo_graph`] with explicit encoder inputs.
    pub fn elbo_graph_at(
        &self,
        panel: &FunctionalPanel,
        noise: &ElboNoise,
        phase: Phase,
        inputs: &DMatrix<f64>,
    ) -> Result<ElboGraph> {
        self.check_panel(panel)?;
        let (n, p, l, mm, k) = (self.n, self.p, self.u.len(), self.m(), self.k());
        if noise.eps.shape() != (k, mm * n) || noise.sticks.ncols() != mm {
            return Err(Error::ShapeMismatch {
                op: "elbo noise",
                lhs: noise.eps.shape(),
                rhs: (k, mm * n),
            });
        }
        let mut t = Tape::new();
        let var_leaf = phase != Phase::Encoder;
        let enc_leaf = phase != Phase::Variational;
        let variational: Vec<Var> = self
            .params
            .iter()
            .map(|x| if var_leaf { t.leaf(x.value.clone()) } else { t.constant(x.value.clone()) })
            .collect();
        let [mu, s_raw, tau1_raw, tau0_raw, m_logit, eta, sigma_q_raw, sigma_a_raw, sigma_eps_raw, ls_raw, var_raw] =
            variational[..]
        else {
            unreachable!()
        };

        let pos = |t: &mut Tape, x: Var, floor: f64| -> Result<Var> {
            let s = t.softplus(x)?;
            t.add_const(s, floor)
        };
        let tau1 = pos(&mut t, tau1_raw, TAU_FLOOR)?;
        let tau0 = pos(&mut t, tau0_raw, TAU_FLOOR)?;
        let sigma_q = pos(&mut t, sigma_q_raw, SIGMA_FLOOR)?;
        let sigma_a = pos(&mut t, sigma_a_raw, SIGMA_FLOOR)?;
        let sigma_eps = pos(&mut t, sigma_eps_raw, SIGMA_FLOOR)?;
        let ls = pos(&mut t, ls_raw, LS_FLOOR)?;
        let kvar = pos(&mut t, var_raw, SIGMA_FLOOR)?;
        let m = t.sigmoid(m_logit)?;
        let log_m = t.log_sigmoid(m_logit)?;
        let neg_logit = t.neg(m_logit)?;
        let log_1m = t.log_sigmoid(neg_logit)?;

        // S factors: strict lower part of the raw blocks plus a softplus diagonal.
        let cols = mm * n * k;
        let lower_mask = t.constant(DMatrix::from_fn(k, cols, |i, c| if i > c % k { 1.0 } else { 0.0 }));
        let diag_mask = DMatrix::from_fn(k, cols, |i, c| if i == c % k { 1.0 } else { 0.0 });
        let diag_floor = t.constant(&diag_mask * DIAG_FLOOR);
        let diag_mask = t.constant(diag_mask);
        let lower = t.mul(s_raw, lower_mask)?;
        let sp = t.softplus(s_raw)?;
        let diag = t.mul(sp, diag_mask)?;
        let s_chol = t.add(lower, diag)?;
        let s_chol = t.add(s_chol, diag_floor)?;
        let diag_index: Vec<usize> = (0..mm * n * k).map(|c| c * k + c % k).collect();
        let diag_vals = t.gather(s_chol, 1, mm * n * k, diag_index)?;
        let log_diag = t.log(diag_vals)?;
        let sum_log_diag = t.sum(log_diag)?;
        let logdet_s = t.scale(sum_log_diag, 2.0)?;

        // Spatial blocks.
        let kind = self.config.spatial_kind;
        let uu = kernels::gram_tape(&mut t, kind, &self.u, &self.u, ls, kvar)?;
        let uv = kernels::gram_tape(&mut t, kind, &self.u, &self.grid.v, ls, kvar)?;
        let vv = kernels::gram_tape(&mut t, kind, &self.grid.v, &self.grid.v, ls, kvar)?;
        let jitter = t.constant(DMatrix::identity(k, k) * VV_JITTER);
        let vv = t.add(vv, jitter)?;
        let lv = t.cholesky(vv)?;
        let vu = t.transpose(uv)?;
        let w = t.tri_solve(lv, vu, false)?;
        let pt = t.tri_solve(lv, w, true)?;
        let proj = t.transpose(pt)?;

        // Temporal covariance.
        let enc_vars = self.encoder.to_tape(&mut t);
        let mut encoder: Vec<Var> = if enc_leaf {
            enc_vars.all()
        } else {
            let consts: Vec<Var> = self.encoder.tensors.iter().map(|x| t.constant(x.value.clone())).collect();
            consts
        };
        let tls_raw = if enc_leaf {
            t.leaf(self.temporal_ls.value.clone())
        } else {
            t.constant(self.temporal_ls.value.clone())
        };
        encoder.push(tls_raw);
        let lx = if enc_leaf {
            let x = t.constant(layer_norm(inputs));
            let h = enc_vars.features(&mut t, x)?;
            let tls = pos(&mut t, tls_raw, LS_FLOOR)?;
            let g = kernels::temporal_gram_tape(&mut t, h, h, &self.temporal_kernel(), tls)?;
            let nug = t.constant(DMatrix::identity(n, n) * self.config.nugget);
            let sx = t.add(g, nug)?;
            t.cholesky(sx)?
        } else {
            let h = self.encoder.features(inputs)?;
            let mut g = kernels::temporal_gram(&h, &self.temporal_kernel())?;
            for i in 0..n {
                g[(i, i)] += self.config.nugget;
            }
            let (lx, _) = linalg::cholesky_jittered(&g)?;
            t.constant(lx)
        };

        // Proxy draw B = μ + L ε per (r, t), then X = P B on the grid.
        let eps_tiled = t.constant(DMatrix::from_fn(k, cols, |_, c| noise.eps[(c % k, c / k)]));
        let le = t.mul(s_chol, eps_tiled)?;
        let le = t.block_col_sum(le, k)?;
        let b = t.add(mu, le)?;
        let x1 = t.matmul(proj, b)?;
        let xr_index: Vec<usize> = (0..mm * n * l)
            .map(|j| {
                let (r, col) = (j % mm, j / mm);
                let (tt, kk) = (col / l, col % l);
                (r * n + tt) * l + kk
            })
            .collect();
        let xr = t.gather(x1, mm, n * l, xr_index)?;

        // Expected log-likelihood with β moments in closed form.
        let (e1, e2) = ibp::beta_moments_tape(&mut t, m, eta, sigma_q)?;
        let y = t.constant(panel.stacked());
        let pred = t.matmul(e1, xr)?;
        let resid = t.sub(y, pred)?;
        let ss = t.sum_squares(resid)?;
        let e1_sq = t.square(e1)?;
        let var_beta = t.sub(e2, e1_sq)?;
        let xr_sq = t.square(xr)?;
        let var_pred = t.matmul(var_beta, xr_sq)?;
        let var_sum = t.sum(var_pred)?;
        let sq_total = t.add(ss, var_sum)?;
        let s2 = t.square(sigma_eps)?;
        let two_s2 = t.scale(s2, 2.0)?;
        let quad = t.div(sq_total, two_s2)?;
        let log_s2 = t.log(s2)?;
        let count = (n * l * p) as f64;
        let norm = t.scale(log_s2, 0.5 * count)?;
        let norm = t.add_const(norm, 0.5 * count * (2.0 * std::f64::consts::PI).ln())?;
        let neg_quad = t.neg(quad)?;
        let likelihood = t.sub(neg_quad, norm)?;

        // Prop. 3 correction.
        let beta_f2 = t.sum(e2)?;
        let tr_uu = t.trace(uu)?;
        let w_sq = t.sum_squares(w)?;
        let schur = t.sub(tr_uu, w_sq)?;
        let lx_sq = t.sum_squares(lx)?;
        let c = t.mul(beta_f2, lx_sq)?;
        let c = t.mul(c, schur)?;
        let prop3 = t.div(c, two_s2)?;

        let kl_ind = gauss::kl_inducing_tape(&mut t, mu, s_chol, logdet_s, lx, lv, mm)?;
        let kb = ibp::kl_beta_tape(&mut t, tau1, tau0, self.config.alpha)?;
        let kz = ibp::kl_bernoulli_tape(&mut t, tau1, tau0, m, log_m, log_1m, &noise.sticks)?;
        let kl_ibp = t.add(kb, kz)?;
        let kl_load = ibp::kl_loadings_tape(&mut t, eta, sigma_q, sigma_a)?;

        let elbo = t.sub(likelihood, prop3)?;
        let elbo = t.sub(elbo, kl_ind)?;
        let elbo = t.sub(elbo, kl_ibp)?;
        let elbo = t.sub(elbo, kl_load)?;

        let terms = ElboTerms {
            elbo: t.scalar_value(elbo),
            likelihood: t.scalar_value(likelihood),
            prop3: t.scalar_value(prop3),
            kl_inducing: t.scalar_value(kl_ind),
            kl_ibp: t.scalar_value(kl_ibp),
            kl_loadings: t.scalar_value(kl_load),
        };
        Ok(ElboGraph {
            tape: t,
            elbo,
            terms,
            variational,
            encoder,
        })
    }

    /// Posterior mean factor curves on the observation grid, M × (n·L) with
    /// column `t·L + k`.
    pub fn factor_paths(&self) -> Result<DMatrix<f64>> {
        let proj = self.spatial_blocks()?.projection;
        let (n, l) = (self.n, self.u.len());
        let x = &proj * self.param(MU);
        Ok(DMatrix::from_fn(self.m(), n * l, |r, c| x[(c % l, r * n + c / l)]))
    }

    /// Fitted curves `E[β] X̄_t(u)` for every training step.
    pub fn fitted(&self) -> Result<Vec<DMatrix<f64>>> {
        let (e1, _) = self.loading_posterior().beta_moments();
        let paths = self.factor_paths()?;
        let l = self.u.len();
        Ok((0..self.n)
            .map(|t| &e1 * paths.columns(t * l, l))
            .collect())
    }

    /// `(Σ_X, k*)` for a history of length s: `Σ_X` over the s steps (with
    /// nugget) and `k*_j = κ(h_{s+1}, h_j)`.
    pub fn temporal_extension(&self, history: &[DMatrix<f64>]) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let s = history.len();
        let feats = self.encoder.features(&Self::encoder_inputs(history, true))?;
        let g = kernels::temporal_gram(&feats, &self.temporal_kernel())?;
        let mut sx = g.view((0, 0), (s, s)).into_owned();
        for i in 0..s {
            sx[(i, i)] += self.config.nugget;
        }
        let k_star = DVector::from_iterator(s, (0..s).map(|j| g[(s, j)]));
        Ok((sx, k_star))
    }

    /// Predicted inducing means (K×M) for steps n+1 … n+h, feeding each
    /// prediction back into the history.
    pub fn forecast_inducing(&self, h: usize) -> Result<Vec<DMatrix<f64>>> {
        let mut history = self.mu_history();
        let mut out = Vec::with_capacity(h);
        for _ in 0..h {
            let (sx, k_star) = self.temporal_extension(&history)?;
            let w = linalg::spd_solve(&sx, &DMatrix::from_column_slice(k_star.len(), 1, k_star.as_slice()))?;
            let mut next = DMatrix::zeros(self.k(), self.m());
            for (j, hj) in history.iter().enumerate() {
                next += hj * w[(j, 0)];
            }
            history.push(next.clone());
            out.push(next);
        }
        Ok(out)
    }

    /// Point forecasts `E[β] P X̄_{n+j}(v)`, p × L each, for j = 1..h.
    pub fn predict(&self, h: usize) -> Result<Vec<DMatrix<f64>>> {
        let proj = self.spatial_blocks()?.projection;
        let (e1, _) = self.loading_posterior().beta_moments();
        Ok(self
            .forecast_inducing(h)?
            .into_iter()
            .map(|xv| &e1 * (&proj * xv).transpose())
            .collect())
    }

    /// Columns with `max_i m_ir > threshold`.
    pub fn active_columns(&self, threshold: f64) -> Vec<usize> {
        let m = self.loading_posterior().m;
        (0..self.m())
            .filter(|&r| m.column(r).iter().any(|&x| x > threshold))
            .collect()
    }

    /// Tensors moved by encoder steps: the encoder weights, then the temporal lengthscale.
    pub fn encoder_group(&self) -> impl Iterator<Item = &NamedTensor> {
        self.encoder.tensors.iter().chain(std::iter::once(&self.temporal_ls))
    }

    pub fn encoder_group_mut(&mut self) -> impl Iterator<Item = &mut NamedTensor> {
        self.encoder.tensors.iter_mut().chain(std::iter::once(&mut self.temporal_ls))
    }

    /// Apply spectral normalization to the encoder if enabled.
    pub fn normalize_encoder(&mut self) {
        if self.config.spectral_norm {
            self.encoder.spectral_normalize();
        }
    }

    /// Verify that every tensor has the shape implied by (n, p, M, K).
    pub fn check_shapes(&self) -> Result<()> {
        self.config.validate()?;
        let (n, p, mm, k) = (self.n, self.p, self.m(), self.k());
        if self.grid.len() != k {
            return Err(Error::invalid("inducing grid", format!("{} points for K = {k}", self.grid.len())));
        }
        let expected = [
            (k, mm * n),
            (k, mm * n * k),
            (1, mm),
            (1, mm),
            (p, mm),
            (p, mm),
            (p, mm),
            (1, 1),
            (1, 1),
            (1, 1),
            (1, 1),
        ];
        for ((t, name), shape) in self.params.iter().zip(PARAM_NAMES).zip(expected) {
            if t.name != name || t.value.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "model tensor",
                    lhs: t.value.shape(),
                    rhs: shape,
                });
            }
        }
        if self.params.len() != PARAM_NAMES.len() || self.temporal_ls.value.shape() != (1, 1) {
            return Err(Error::invalid("model", "wrong tensor count"));
        }
        if self.encoder.config.input_dim != mm * k || self.encoder.config.hidden_size != self.config.hidden_size {
            return Err(Error::invalid("encoder", "input or hidden size does not match the model"));
        }
        Ok(())
    }

    /// Parameters for a new training window whose first period is `shift`
    /// periods after this model's first period. Time-indexed posterior
    /// tensors are realigned (periods past the old end repeat the last one);
    /// everything else is reused. A different variable count or grid
    /// initializes afresh.
    pub fn warm_start(&self, panel: &FunctionalPanel, shift: usize) -> Result<Self> {
        if panel.p() != self.p || panel.grid != self.u {
            return Self::init(panel, self.config);
        }
        let (n_old, n_new, mm, k) = (self.n, panel.n(), self.m(), self.k());
        let source = |t: usize| (t + shift).min(n_old - 1);
        let mut out = self.clone();
        out.n = n_new;
        let mu = self.param(MU);
        *out.param_mut(MU) = DMatrix::from_fn(k, mm * n_new, |j, c| {
            let (r, t) = (c / n_new, c % n_new);
            mu[(j, r * n_old + source(t))]
        });
        let s_raw = self.param(S_RAW);
        *out.param_mut(S_RAW) = DMatrix::from_fn(k, mm * n_new * k, |i, c| {
            let (block, j) = (c / k, c % k);
            let (r, t) = (block / n_new, block % n_new);
            s_raw[(i, (r * n_old + source(t)) * k + j)]
        });
        Ok(out)
    }
}
