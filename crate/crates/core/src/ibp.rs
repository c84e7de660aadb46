//! Variational stick-breaking IBP posterior for the loading structure.
//!
//! Loadings are `β = Z ⊙ A` with `Z_{ir} ~ Bernoulli(w_r)`,
//! `w_r = ∏_{j≤r} v_j`, `v_j ~ Beta(α, 1)` and `A_{ir} ~ N(0, σ_A²)`.
//! The mean-field posterior is `q(v_j) = Beta(τ¹_j, τ⁰_j)`,
//! `q(Z_{ir}) = Bernoulli(m_{ir})`, `q(A_{ir}) = N(η_{ir}, σ_{q,ir}²)`.
//! Rows are variables, columns are factors (truncation M).

use nalgebra::DMatrix;
use rand::{Rng, RngExt};
use statrs::function::beta::{beta_reg, inv_beta_reg, ln_beta};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Monte Carlo draws used for `E_q[log(1 - w_r)]`.
pub const DEFAULT_MC_DRAWS: usize = 16;

/// Largest stick fraction a reparameterized draw may take.
const V_MAX: f64 = 1.0 - 1e-12;

/// Trigamma `ψ'(x)` for `x > 0`: recurrence up to 10, then the asymptotic series.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    acc + 1.0 / x
        + x2 / 2.0
        + (1.0 / x) * x2 * (1.0 / 6.0 - x2 * (1.0 / 30.0 - x2 * (1.0 / 42.0 - x2 / 30.0)))
}

/// Beta(a, b) density.
pub fn beta_pdf(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    ((a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_beta(a, b)).exp()
}

/// Inverse of the regularized incomplete beta function, polished by Newton steps.
pub fn beta_quantile(u: f64, a: f64, b: f64) -> f64 {
    let mut x = inv_beta_reg(a, b, u).clamp(0.0, 1.0);
    for _ in 0..3 {
        let f = beta_pdf(x, a, b);
        if !(f > 0.0) || !f.is_finite() {
            break;
        }
        let next = x - (beta_reg(a, b, x) - u) / f;
        if !(next > 0.0 && next < 1.0) {
            break;
        }
        x = next;
    }
    x
}

/// Implicit reparameterization gradients `(∂v/∂a, ∂v/∂b)` of a draw
/// `v = F⁻¹(u; a, b)`, using `∂v/∂θ = -∂_θ F(v; a, b) / f(v; a, b)` with the
/// parameter derivatives of `F` taken by central differences.
pub fn beta_draw_grad(v: f64, a: f64, b: f64) -> (f64, f64) {
    let f = beta_pdf(v, a, b);
    if !(f > 1e-300) || !f.is_finite() {
        return (0.0, 0.0);
    }
    let ha = 1e-6 * a.max(1.0);
    let hb = 1e-6 * b.max(1.0);
    let dfa = (beta_reg(a + ha, b, v) - beta_reg(a - ha, b, v)) / (2.0 * ha);
    let dfb = (beta_reg(a, b + hb, v) - beta_reg(a, b - hb, v)) / (2.0 * hb);
    (-dfa / f, -dfb / f)
}

/// `w_k = ∏_{j≤k} v_j`.
pub fn stick_weights(v: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = v.iter().find(|&&x| !(x > 0.0 && x <= 1.0)) {
        return Err(Error::invalid("v", format!("stick fraction {bad} outside (0, 1]")));
    }
    let mut acc = 1.0;
    Ok(v.iter()
        .map(|&x| {
            acc *= x;
            acc
        })
        .collect())
}

/// `KL[Beta(t1, t0) ‖ Beta(alpha, 1)]`.
pub fn kl_beta(t1: f64, t0: f64, alpha: f64) -> f64 {
    -alpha.ln() - ln_beta(t1, t0)
        + (t1 - alpha) * digamma(t1)
        + (t0 - 1.0) * digamma(t0)
        + (alpha - t1 + 1.0 - t0) * digamma(t1 + t0)
}

/// `KL[Bernoulli(m) ‖ Bernoulli(w)]` with the `0·log 0 = 0` convention.
pub fn kl_bernoulli(m: f64, w: f64) -> f64 {
    let xlogy = |x: f64, y: f64| if x == 0.0 { 0.0 } else { x * (x / y).ln() };
    xlogy(m, w) + xlogy(1.0 - m, 1.0 - w)
}

/// Point estimates of the loading posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadingPosterior {
    pub tau1: Vec<f64>,
    pub tau0: Vec<f64>,
    /// p×M Bernoulli means.
    pub m: DMatrix<f64>,
    /// p×M Gaussian means.
    pub eta: DMatrix<f64>,
    /// p×M Gaussian standard deviations.
    pub sigma_q: DMatrix<f64>,
    pub alpha: f64,
    pub sigma_a: f64,
}

impl LoadingPosterior {
    pub fn truncation(&self) -> usize {
        self.tau1.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mm = self.truncation();
        let p = self.m.nrows();
        if self.tau0.len() != mm || self.m.ncols() != mm {
            return Err(Error::ShapeMismatch {
                op: "loading posterior",
                lhs: (self.tau1.len(), self.tau0.len()),
                rhs: self.m.shape(),
            });
        }
        for (name, x) in [("eta", &self.eta), ("sigma_q", &self.sigma_q)] {
            if x.shape() != (p, mm) {
                return Err(Error::ShapeMismatch {
                    op: if name == "eta" { "eta" } else { "sigma_q" },
                    lhs: x.shape(),
                    rhs: (p, mm),
                });
            }
        }
        if self.tau1.iter().chain(&self.tau0).any(|&x| !(x > 0.0)) {
            return Err(Error::invalid("tau", "must be positive"));
        }
        if self.m.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::invalid("m", "must lie in [0, 1]"));
        }
        if self.sigma_q.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::invalid("sigma_q", "must be positive"));
        }
        if !(self.alpha > 0.0) || !(self.sigma_a > 0.0) {
            return Err(Error::invalid("prior", "alpha and sigma_a must be positive"));
        }
        Ok(())
    }

    /// `E_q[w_r] = ∏_{j≤r} τ¹_j / (τ¹_j + τ⁰_j)`.
    pub fn expected_weights(&self) -> Vec<f64> {
        let mut acc = 1.0;
        self.tau1
            .iter()
            .zip(&self.tau0)
            .map(|(a, b)| {
                acc *= a / (a + b);
                acc
            })
            .collect()
    }

    /// `(E[β], E[β²])` entrywise.
    pub fn beta_moments(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let e1 = self.m.component_mul(&self.eta);
        let e2 = self
            .m
            .zip_zip_map(&self.eta, &self.sigma_q, |m, e, s| m * (e * e + s * s));
        (e1, e2)
    }

    pub fn kl_loadings(&self) -> Result<f64> {
        self.validate()?;
        let va = self.sigma_a * self.sigma_a;
        Ok(self
            .eta
            .zip_map(&self.sigma_q, |e, s| {
                let vq = s * s;
                0.5 * ((e * e + vq) / va - 1.0 + (va / vq).ln())
            })
            .sum())
    }

    /// Beta plus expected Bernoulli KL, with `E[log(1 - w_r)]` by Monte Carlo.
    pub fn kl_ibp<R: Rng + ?Sized>(&self, draws: usize, rng: &mut R) -> Result<f64> {
        self.validate()?;
        let mm = self.truncation();
        let mut t = Tape::new();
        let tau1 = t.leaf(DMatrix::from_row_slice(1, mm, &self.tau1));
        let tau0 = t.leaf(DMatrix::from_row_slice(1, mm, &self.tau0));
        let m = t.leaf(self.m.clone());
        let log_m = t.leaf(self.m.map(|x| if x > 0.0 { x.ln() } else { 0.0 }));
        let log_1m = t.leaf(self.m.map(|x| if x < 1.0 { (1.0 - x).ln() } else { 0.0 }));
        let u = uniform_draws(draws, mm, rng);
        let kb = kl_beta_tape(&mut t, tau1, tau0, self.alpha)?;
        let kz = kl_bernoulli_tape(&mut t, tau1, tau0, m, log_m, log_1m, &u)?;
        let total = t.add(kb, kz)?;
        Ok(t.scalar_value(total))
    }
}

/// `S × M` matrix of Uniform(0, 1) draws for the stick fractions.
pub fn uniform_draws<R: Rng + ?Sized>(draws: usize, m: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(draws.max(1), m, |_, _| rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12))
}

fn ln_gamma_tape(t: &mut Tape, x: Var) -> Result<Var> {
    t.map(x, ln_gamma, digamma)
}

fn digamma_tape(t: &mut Tape, x: Var) -> Result<Var> {
    t.map(x, digamma, trigamma)
}

/// `Σ_j KL[Beta(τ¹_j, τ⁰_j) ‖ Beta(α, 1)]` for 1×M nodes `tau1`, `tau0`.
pub fn kl_beta_tape(t: &mut Tape, tau1: Var, tau0: Var, alpha: f64) -> Result<Var> {
    let sum = t.add(tau1, tau0)?;
    let lg1 = ln_gamma_tape(t, tau1)?;
    let lg0 = ln_gamma_tape(t, tau0)?;
    let lgs = ln_gamma_tape(t, sum)?;
    // -ln B(τ1, τ0) = lnΓ(τ1+τ0) - lnΓ(τ1) - lnΓ(τ0)
    let a = t.sub(lgs, lg1)?;
    let neg_lnb = t.sub(a, lg0)?;
    let d1 = digamma_tape(t, tau1)?;
    let d0 = digamma_tape(t, tau0)?;
    let ds = digamma_tape(t, sum)?;
    let c1 = t.add_const(tau1, -alpha)?;
    let term1 = t.mul(c1, d1)?;
    let c0 = t.add_const(tau0, -1.0)?;
    let term0 = t.mul(c0, d0)?;
    let cs = t.neg(sum)?;
    let cs = t.add_const(cs, alpha + 1.0)?;
    let terms = t.mul(cs, ds)?;
    let x = t.add(neg_lnb, term1)?;
    let x = t.add(x, term0)?;
    let x = t.add(x, terms)?;
    let x = t.add_const(x, -alpha.ln())?;
    t.sum(x)
}

/// Upper-triangular ones: `(x U)_r = Σ_{j≤r} x_j` for row vectors.
fn cumsum_matrix(m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, m, |j, r| if j <= r { 1.0 } else { 0.0 })
}

/// `E_q[log w_r]` in closed form, 1×M.
pub fn expected_log_weights_tape(t: &mut Tape, tau1: Var, tau0: Var) -> Result<Var> {
    let mm = t.shape(tau1).1;
    let sum = t.add(tau1, tau0)?;
    let d1 = digamma_tape(t, tau1)?;
    let ds = digamma_tape(t, sum)?;
    let diff = t.sub(d1, ds)?;
    let u = t.constant(cumsum_matrix(mm));
    t.matmul(diff, u)
}

/// Monte Carlo `E_q[log(1 - w_r)]`, 1×M, from fixed uniforms `u` (S×M)
/// through implicitly reparameterized Beta draws.
pub fn expected_log1m_weights_tape(t: &mut Tape, tau1: Var, tau0: Var, u: &DMatrix<f64>) -> Result<Var> {
    let (s, mm) = u.shape();
    if t.shape(tau1) != (1, mm) || t.shape(tau0) != (1, mm) {
        return Err(Error::ShapeMismatch {
            op: "expected_log1m_weights",
            lhs: t.shape(tau1),
            rhs: (1, mm),
        });
    }
    let a = t.value(tau1).clone();
    let b = t.value(tau0).clone();
    let mut v = DMatrix::zeros(s, mm);
    let mut da = DMatrix::zeros(s, mm);
    let mut db = DMatrix::zeros(s, mm);
    for j in 0..mm {
        for i in 0..s {
            let x = beta_quantile(u[(i, j)], a[(0, j)], b[(0, j)]);
            let clamped = x.clamp(1e-300, V_MAX);
            v[(i, j)] = clamped;
            if clamped == x {
                let (ga, gb) = beta_draw_grad(x, a[(0, j)], b[(0, j)]);
                da[(i, j)] = ga;
                db[(i, j)] = gb;
            }
        }
    }
    let a_b = t.broadcast_rows(tau1, s)?;
    let b_b = t.broadcast_rows(tau0, s)?;
    let draws = t.map2_with(a_b, b_b, v, da, db)?;
    let logv = t.log(draws)?;
    let cum = t.constant(cumsum_matrix(mm));
    let logw = t.matmul(logv, cum)?;
    let w = t.exp(logw)?;
    let negw = t.neg(w)?;
    let one_minus = t.add_const(negw, 1.0)?;
    let l = t.log(one_minus)?;
    let sums = t.col_sums(l)?;
    t.scale(sums, 1.0 / s as f64)
}

/// `Σ_{i,r} E_q KL[Bernoulli(m_ir) ‖ Bernoulli(w_r)]`.
///
/// `m`, `log_m`, `log_1m` are p×M; the latter two are passed separately so
/// the caller can compute them stably from logits.
pub fn kl_bernoulli_tape(
    t: &mut Tape,
    tau1: Var,
    tau0: Var,
    m: Var,
    log_m: Var,
    log_1m: Var,
    u: &DMatrix<f64>,
) -> Result<Var> {
    let p = t.shape(m).0;
    let elogw = expected_log_weights_tape(t, tau1, tau0)?;
    let elog1mw = expected_log1m_weights_tape(t, tau1, tau0, u)?;
    let ew = t.broadcast_rows(elogw, p)?;
    let e1w = t.broadcast_rows(elog1mw, p)?;
    let neg_m = t.neg(m)?;
    let one_m = t.add_const(neg_m, 1.0)?;
    let a = t.sub(log_m, ew)?;
    let a = t.mul(m, a)?;
    let b = t.sub(log_1m, e1w)?;
    let b = t.mul(one_m, b)?;
    let s = t.add(a, b)?;
    t.sum(s)
}

/// `Σ ½[(η² + σ_q²)/σ_A² − 1 + ln(σ_A²/σ_q²)]` with a 1×1 node `sigma_a`.
pub fn kl_loadings_tape(t: &mut Tape, eta: Var, sigma_q: Var, sigma_a: Var) -> Result<Var> {
    let count = t.value(eta).len() as f64;
    let e2 = t.sum_squares(eta)?;
    let s2 = t.sum_squares(sigma_q)?;
    let num = t.add(e2, s2)?;
    let va = t.square(sigma_a)?;
    let ratio = t.div(num, va)?;
    let log_sa = t.log(sigma_a)?;
    let log_va_total = t.scale(log_sa, 2.0 * count)?;
    let log_sq = t.log(sigma_q)?;
    let log_sq_sum = t.sum(log_sq)?;
    let log_vq_total = t.scale(log_sq_sum, 2.0)?;
    let x = t.add(ratio, log_va_total)?;
    let x = t.sub(x, log_vq_total)?;
    let x = t.add_const(x, -count)?;
    t.scale(x, 0.5)
}

/// `(E1, E2) = (m η, m (η² + σ_q²))` on the tape.
pub fn beta_moments_tape(t: &mut Tape, m: Var, eta: Var, sigma_q: Var) -> Result<(Var, Var)> {
    let e1 = t.mul(m, eta)?;
    let eta2 = t.square(eta)?;
    let sq2 = t.square(sigma_q)?;
    let s = t.add(eta2, sq2)?;
    let e2 = t.mul(m, s)?;
    Ok((e1, e2))
}
