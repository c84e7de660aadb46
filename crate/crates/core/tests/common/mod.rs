//! Independent reference computations shared by the integration tests.
//!
//! Nothing here calls into the library's numerical paths except to read
//! plain values back out; every formula is recomputed densely.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

pub mod elbo;
pub mod forecast;
pub mod mtgp;
pub mod pipeline;
pub mod simulate;

/// Central finite-difference gradient of `f` at every entry of every matrix in `params`.
pub fn finite_diff<F>(params: &[DMatrix<f64>], step: f64, mut f: F) -> Vec<DMatrix<f64>>
where
    F: FnMut(&[DMatrix<f64>]) -> f64,
{
    let mut out = Vec::with_capacity(params.len());
    let mut work: Vec<DMatrix<f64>> = params.to_vec();
    for p in 0..params.len() {
        let (r, c) = params[p].shape();
        let mut g = DMatrix::zeros(r, c);
        for i in 0..r {
            for j in 0..c {
                let orig = work[p][(i, j)];
                work[p][(i, j)] = orig + step;
                let up = f(&work);
                work[p][(i, j)] = orig - step;
                let down = f(&work);
                work[p][(i, j)] = orig;
                g[(i, j)] = (up - down) / (2.0 * step);
            }
        }
        out.push(g);
    }
    out
}

/// Mismatch between an adjoint and its finite-difference estimate, measured
/// per parameter: `max|a-b| / max|b|`. When the whole adjoint is below
/// `floor` the absolute gap is reported instead. Returns (relative, absolute).
pub fn grad_mismatch(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> (f64, f64) {
    let gap = (a - b).abs().max();
    let scale = a.abs().max().max(b.abs().max());
    if scale < floor {
        (0.0, gap)
    } else {
        (gap / scale, 0.0)
    }
}

fn dense_chol(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().cholesky().expect("oracle matrix must be SPD").l()
}

fn dense_logdet(a: &DMatrix<f64>) -> f64 {
    2.0 * dense_chol(a).diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

fn dense_inv(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().try_inverse().expect("oracle matrix must be invertible")
}

/// KL[N(m0, S0) || N(m1, S1)] on dense inputs.
pub fn kl_mvn_oracle(m0: &DVector<f64>, s0: &DMatrix<f64>, m1: &DVector<f64>, s1: &DMatrix<f64>) -> f64 {
    let k = m0.len() as f64;
    let s1inv = dense_inv(s1);
    let d = m1 - m0;
    let quad = (d.transpose() * &s1inv * &d)[(0, 0)];
    0.5 * ((&s1inv * s0).trace() - k + quad + dense_logdet(s1) - dense_logdet(s0))
}

/// Gaussian conditioning of a dense joint on `observed` indices taking `values`.
pub fn conditional_gaussian_oracle(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    observed: &[usize],
    values: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = mean.len();
    let free: Vec<usize> = (0..n).filter(|i| !observed.contains(i)).collect();
    let sub = |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |i, j| cov[(rows[i], cols[j])]);
    let s_ff = sub(&free, &free);
    let s_fo = sub(&free, observed);
    let s_oo = sub(observed, observed);
    let m_f = DVector::from_fn(free.len(), |i, _| mean[free[i]]);
    let m_o = DVector::from_fn(observed.len(), |i, _| mean[observed[i]]);
    let s_oo_inv = dense_inv(&s_oo);
    let gain = &s_fo * &s_oo_inv;
    let cm = m_f + &gain * (values - m_o);
    let cc = s_ff - &gain * s_fo.transpose();
    (cm, cc)
}

/// Kronecker product built entry by entry.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k, j * bc + l)] = a[(i, j)] * b[(k, l)];
                }
            }
        }
    }
    out
}

pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut o = 0;
    for b in blocks {
        for i in 0..b.nrows() {
            for j in 0..b.ncols() {
                out[(o + i, o + j)] = b[(i, j)];
            }
        }
        o += b.nrows();
    }
    out
}

/// Random SPD matrix `G Gᵀ + shift·I` from a deterministic LCG-style stream.
pub fn random_spd(n: usize, seed: u64, shift: f64) -> DMatrix<f64> {
    let g = random_matrix(n, n, seed);
    &g * g.transpose() + DMatrix::identity(n, n) * shift
}

/// Uniform(-1, 1) entries from a splitmix64 stream.
pub fn random_matrix(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
    DMatrix::from_fn(r, c, |_, _| {
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    })
}

/// Composite Simpson rule on [a, b] with `n` (even) panels.
pub fn simpson(a: f64, b: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    let n = if n % 2 == 1 { n + 1 } else { n };
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let x = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    s * h / 3.0
}

/// Mean absolute prediction error over all entries.
pub fn mape_oracle(truth: &[f64], pred: &[f64]) -> f64 {
    let n = truth.len() as f64;
    truth.iter().zip(pred).map(|(y, p)| (y - p).abs()).sum::<f64>() / n
}

/// Mean squared prediction error over all entries.
pub fn mspe_oracle(truth: &[f64], pred: &[f64]) -> f64 {
    let n = truth.len() as f64;
    truth.iter().zip(pred).map(|(y, p)| (y - p).powi(2)).sum::<f64>() / n
}
