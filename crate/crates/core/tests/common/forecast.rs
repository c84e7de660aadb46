//! Dense one-step forecast oracle for fitted models.

use df2m::data::FunctionalPanel;
use df2m::model::{Df2mModel, ModelConfig, VV_JITTER};
use df2m::seqnets::EncoderKind;
use nalgebra::{DMatrix, DVector};

use super::{conditional_gaussian_oracle, random_matrix};

pub fn panel(n: usize, p: usize, l: usize, seed: u64) -> FunctionalPanel {
    let grid = (0..l).map(|k| k as f64 / (l - 1) as f64).collect();
    FunctionalPanel::from_values((0..n).map(|t| random_matrix(p, l, seed + t as u64)).collect(), grid).unwrap()
}

pub fn model(kind: EncoderKind, seed: u64) -> (Df2mModel, FunctionalPanel) {
    let data = panel(4, 3, 5, 100 * seed);
    let config = ModelConfig {
        factors: 2,
        inducing: 3,
        hidden_size: 4,
        encoder: kind,
        seed,
        ..ModelConfig::default()
    };
    let mut m = Df2mModel::init(&data, config).unwrap();
    let shapes: Vec<_> = m.params.iter().map(|t| t.value.shape()).collect();
    for (i, (r, c)) in shapes.into_iter().enumerate() {
        m.params[i].value += random_matrix(r, c, seed * 31 + i as u64) * 0.3;
    }
    (m, data)
}

pub fn se(ls: f64, var: f64, d2: f64) -> f64 {
    var * (-d2 / (2.0 * ls * ls)).exp()
}

/// One-step forecast from the dense joint of all inducing values at times
/// 1..n and the curve at time n+1, conditioned on the posterior means.
pub fn dense_forecast(m: &Df2mModel) -> DMatrix<f64> {
    let (n, k, mm, l) = (m.n, m.k(), m.m(), m.u.len());
    // encoder inputs: zeros, then the flattened means of every step
    let d = k * mm;
    let mut inputs = DMatrix::zeros(n + 1, d);
    for t in 1..=n {
        let mu = m.mu_at(t - 1);
        for j in 0..d {
            inputs[(t, j)] = mu[(j % k, j / k)];
        }
    }
    let h = m.encoder.features(&inputs).unwrap();
    let tls = m.temporal_kernel().base.lengthscale;
    let sx = DMatrix::from_fn(n + 1, n + 1, |a, b| {
        se(tls, 1.0, (h.row(a) - h.row(b)).norm_squared()) + if a == b && a < n { m.config.nugget } else { 0.0 }
    });
    let sp = m.spatial_kernel();
    let kappa = |a: f64, b: f64, jitter: bool| {
        se(sp.lengthscale, sp.variance, (a - b).powi(2)) + if jitter { VV_JITTER } else { 0.0 }
    };
    // joint order: X_t(v) for t < n (t·K + j), then X_{n+1}(u)
    let dim = n * k + l;
    let point = |i: usize| if i < n * k { (i / k, m.grid.v[i % k], true) } else { (n, m.u[i - n * k], false) };
    let cov = DMatrix::from_fn(dim, dim, |a, b| {
        let (t, x, ia) = point(a);
        let (s, y, ib) = point(b);
        sx[(t, s)] * kappa(x, y, ia && ib && a % k == b % k)
    });
    let observed: Vec<usize> = (0..n * k).collect();
    let (e1, _) = m.loading_posterior().beta_moments();
    let mut x_next = DMatrix::zeros(mm, l);
    for r in 0..mm {
        let values = DVector::from_iterator(n * k, (0..n).flat_map(|t| m.mu_at(t).column(r).iter().copied().collect::<Vec<_>>()));
        let (mean, _) = conditional_gaussian_oracle(&DVector::zeros(dim), &cov, &observed, &values);
        x_next.set_row(r, &mean.transpose());
    }
    e1 * x_next
}
