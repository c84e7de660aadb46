mod common;

use df2m::checkpoint::Checkpoint;
use df2m::data::FunctionalPanel;
use df2m::ibp::kl_beta;
use df2m::model::{Df2mModel, ModelConfig, Phase, ETA, MU, M_LOGIT, SIGMA_EPS, S_RAW, TAU0, TAU1};
use df2m::rng::{stream, Stream};
use df2m::seqnets::EncoderKind;
use df2m::trainer::{fit, TrainConfig};
use df2m::Error;
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use statrs::function::gamma::digamma;

use common::{kl_mvn_oracle, kron, random_matrix};

fn panel(n: usize, p: usize, l: usize, seed: u64) -> FunctionalPanel {
    let grid = (0..l).map(|k| k as f64 / (l - 1) as f64).collect();
    FunctionalPanel::from_values((0..n).map(|t| random_matrix(p, l, seed * 100 + t as u64)).collect(), grid).unwrap()
}

fn small_config(factors: usize, inducing: usize) -> ModelConfig {
    ModelConfig {
        factors,
        inducing,
        hidden_size: 3,
        encoder: EncoderKind::Lin,
        ..ModelConfig::default()
    }
}

fn train(max_iters: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        max_iters,
        window: 5,
        seed,
        ..TrainConfig::default()
    }
}

fn bits(m: &DMatrix<f64>) -> Vec<u64> {
    m.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn zero_iterations_return_the_initial_model() {
    let data = panel(6, 2, 4, 1);
    let model = Df2mModel::init(&data, small_config(2, 3)).unwrap();
    let out = fit(model.clone(), &data, &train(0, 0)).unwrap();
    assert_eq!(out.model, model);
    assert!(out.trace.rows.is_empty());
    assert_eq!(out.best_block, None);
}

#[test]
fn each_phase_moves_only_its_own_tensors() {
    let data = panel(6, 2, 4, 2);
    let model = Df2mModel::init(&data, small_config(2, 3)).unwrap();
    // iteration 0 is variational, iteration 1 is an encoder step
    let one = fit(model.clone(), &data, &train(1, 5)).unwrap().model;
    let two = fit(model.clone(), &data, &train(2, 5)).unwrap().model;
    for (a, b) in model.encoder_group().zip(one.encoder_group()) {
        assert_eq!(bits(&a.value), bits(&b.value), "{} moved in a variational step", a.name);
    }
    assert!(model.params.iter().zip(&one.params).any(|(a, b)| a.value != b.value));
    for (a, b) in one.params.iter().zip(&two.params) {
        assert_eq!(bits(&a.value), bits(&b.value), "{} moved in an encoder step", a.name);
    }
    assert!(one.encoder_group().zip(two.encoder_group()).any(|(a, b)| a.value != b.value));
}

#[test]
fn same_seed_gives_identical_traces() {
    let data = panel(6, 2, 4, 3);
    let model = Df2mModel::init(&data, small_config(2, 3)).unwrap();
    let a = fit(model.clone(), &data, &train(30, 9)).unwrap();
    let b = fit(model.clone(), &data, &train(30, 9)).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.trace.to_csv(), b.trace.to_csv());
    assert_eq!(a.model, b.model);
    let c = fit(model, &data, &train(30, 10)).unwrap();
    assert_ne!(a.trace.elbo(), c.trace.elbo());
}

#[test]
fn logged_terms_recombine_to_the_elbo() {
    let data = panel(8, 3, 5, 4);
    let model = Df2mModel::init(&data, small_config(3, 4)).unwrap();
    let out = fit(model, &data, &train(60, 1)).unwrap();
    assert_eq!(out.trace.rows.len(), 60);
    for row in &out.trace.rows {
        let t = &row.terms;
        assert!((t.recombined() - t.elbo).abs() <= 1e-10 * t.elbo.abs().max(1.0), "iteration {}", row.iteration);
        assert!(t.kl_inducing >= 0.0 && t.kl_loadings >= 0.0 && t.prop3 >= 0.0);
    }
    assert_eq!(out.trace.block_means.len(), 12);
    for (b, mean) in out.trace.block_means.iter().enumerate() {
        let e = &out.trace.elbo()[b * 5..(b + 1) * 5];
        assert!((mean - e.iter().sum::<f64>() / 5.0).abs() <= 1e-9 * mean.abs());
    }
    let best = out.best_block.unwrap();
    assert!(out.trace.block_means.iter().all(|&m| m <= out.trace.block_means[best]));
}

/// Least-squares residual of the data on the init factor paths.
fn reconstruction_error(data: &FunctionalPanel, factors: usize) -> f64 {
    let l = data.l();
    let model = Df2mModel::init(data, small_config(factors, l)).unwrap();
    let paths = model.factor_paths().unwrap();
    let y = data.stacked();
    let gram = &paths * paths.transpose();
    let coef = gram.lu().solve(&(&paths * y.transpose())).unwrap();
    (y - coef.transpose() * &paths).norm_squared()
}

#[test]
fn pca_init_reconstruction_improves_with_rank() {
    for seed in 0..4 {
        let data = panel(10, 5, 5, 10 + seed);
        let y = data.stacked();
        let mut sv: Vec<f64> = y.clone().svd(false, false).singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        let mut last = f64::INFINITY;
        for m in 1..=4 {
            let err = reconstruction_error(&data, m);
            assert!(err <= last * (1.0 + 1e-9), "seed {seed}: rank {m} {err} > {last}");
            // inducing points on the data grid: the paths span the top-m right singular vectors
            let tail: f64 = sv[m..].iter().map(|s| s * s).sum();
            assert!((err - tail).abs() <= 1e-4 * y.norm_squared(), "seed {seed} rank {m}: {err} vs {tail}");
            last = err;
        }
    }
}

#[test]
fn checkpoint_roundtrip_and_rejections() {
    let data = panel(6, 2, 4, 5);
    let fitted = fit(Df2mModel::init(&data, small_config(2, 3)).unwrap(), &data, &train(12, 2)).unwrap();
    let ck = Checkpoint {
        model: fitted.model,
        train: Some(train(12, 2)),
        variables: data.variables.clone(),
    };
    let mut buf = Vec::new();
    ck.write(&mut buf).unwrap();
    let back = Checkpoint::read(buf.as_slice()).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.model.predict(2).unwrap(), ck.model.predict(2).unwrap());

    let mut bad_magic = buf.clone();
    bad_magic[0] = b'X';
    assert!(matches!(Checkpoint::read(bad_magic.as_slice()), Err(Error::Checkpoint(_))));
    let mut bad_version = buf.clone();
    bad_version[8] = 99;
    assert!(matches!(Checkpoint::read(bad_version.as_slice()), Err(Error::Checkpoint(_))));
    for cut in [4, 10, 20, buf.len() / 2, buf.len() - 1] {
        assert!(Checkpoint::read(&buf[..cut]).is_err(), "cut at {cut}");
    }
    let mut trailing = buf.clone();
    trailing.push(0);
    assert!(matches!(Checkpoint::read(trailing.as_slice()), Err(Error::Checkpoint(_))));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
}

#[test]
fn warm_start_realigns_time_indexed_tensors() {
    let data = panel(8, 2, 4, 6);
    let model = Df2mModel::init(&data.slice(0, 6).unwrap(), small_config(2, 3)).unwrap();
    let next = data.slice(2, 8).unwrap();
    let warm = model.warm_start(&next, 2).unwrap();
    assert_eq!(warm.n, 6);
    warm.check_shapes().unwrap();
    for t in 0..6 {
        let src = (t + 2).min(5);
        assert_eq!(warm.mu_at(t), model.mu_at(src));
        for r in 0..2 {
            let (a, b) = ((r * 6 + t) * 3, (r * 6 + src) * 3);
            assert_eq!(
                warm.param(S_RAW).columns(a, 3).into_owned(),
                model.param(S_RAW).columns(b, 3).into_owned()
            );
        }
    }
    assert_eq!(warm.param(ETA), model.param(ETA));
    assert_eq!(warm.encoder, model.encoder);
    // a different variable count starts afresh
    let other = panel(6, 3, 4, 7);
    assert_eq!(model.warm_start(&other, 0).unwrap(), Df2mModel::init(&other, small_config(2, 3)).unwrap());
}

/// Running mean and standard error.
#[derive(Default)]
struct Acc {
    n: f64,
    s: f64,
    s2: f64,
}

impl Acc {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        self.s += x;
        self.s2 += x * x;
    }
    fn mean(&self) -> f64 {
        self.s / self.n
    }
    fn se(&self) -> f64 {
        let m = self.mean();
        ((self.s2 / self.n - m * m) / (self.n - 1.0)).sqrt()
    }
}

/// Symmetric square root of a PSD matrix (negative eigenvalues clipped).
fn psd_sqrt(c: &DMatrix<f64>) -> DMatrix<f64> {
    let e = c.clone().symmetric_eigen();
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|x| x.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// n = 2, p = 2, M = 1, K = 2, L = 3 with non-default variational parameters.
fn brute_force_model() -> (Df2mModel, FunctionalPanel) {
    let data = panel(2, 2, 3, 8);
    let mut model = Df2mModel::init(&data, small_config(1, 2)).unwrap();
    *model.param_mut(MU) += random_matrix(2, 2, 40) * 0.3;
    *model.param_mut(S_RAW) += random_matrix(2, 4, 41) * 0.3;
    *model.param_mut(ETA) = random_matrix(2, 1, 42) + DMatrix::from_element(2, 1, 0.8);
    *model.param_mut(M_LOGIT) = DMatrix::from_column_slice(2, 1, &[0.9, -0.4]);
    model.param_mut(TAU1)[(0, 0)] = 0.7;
    model.param_mut(TAU0)[(0, 0)] = 0.2;
    model.param_mut(SIGMA_EPS)[(0, 0)] = 0.3;
    (model, data)
}

#[test]
fn elbo_estimate_matches_brute_force_expectation() {
    let (model, data) = brute_force_model();
    let (n, p, l, k) = (2, 2, 3, 2);
    let q = model.loading_posterior();
    let sigma = model.sigma_eps();
    let sigma_x = model.sigma_x().unwrap();
    let blocks = model.spatial_blocks().unwrap();
    let cond = &blocks.uu - &blocks.projection * blocks.uv.transpose();
    let (lx, lc) = (psd_sqrt(&sigma_x), psd_sqrt(&cond));
    let s_chol = model.s_chol();
    let mu = model.param(MU).clone();

    // KL of the inducing values against the dense Kronecker prior, time-major index t·K + j
    let q_mean = DVector::from_fn(n * k, |i, _| mu[(i % k, i / k)]);
    let mut q_cov = DMatrix::zeros(n * k, n * k);
    for t in 0..n {
        let lt = s_chol.columns(t * k, k);
        q_cov.view_mut((t * k, t * k), (k, k)).copy_from(&(lt * lt.transpose()));
    }
    let kl_ind = kl_mvn_oracle(&q_mean, &q_cov, &DVector::zeros(n * k), &kron(&sigma_x, &blocks.vv));

    // KL of sticks and masks: with one factor w = v and every expectation is a digamma
    let (a, b) = (q.tau1[0], q.tau0[0]);
    let e_log_v = digamma(a) - digamma(a + b);
    let e_log_1mv = digamma(b) - digamma(a + b);
    let mut kl_ibp = kl_beta(a, b, q.alpha);
    for i in 0..p {
        let m = q.m[(i, 0)];
        kl_ibp += m * m.ln() + (1.0 - m) * (1.0 - m).ln() - m * e_log_v - (1.0 - m) * e_log_1mv;
    }
    let kl_a = q.kl_loadings().unwrap();

    // E_q log p(Y | Z⊙A, X(u)): Z enumerated, A, X(v) and X(u) | X(v) sampled
    let mut rng = stream(77, Stream::Sampling);
    let mut std = || -> f64 { StandardNormal.sample(&mut rng) };
    let count = (n * p * l) as f64;
    let norm = -0.5 * count * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
    let mut lik = Acc::default();
    for _ in 0..100_000 {
        let amp = DVector::from_fn(p, |i, _| q.eta[(i, 0)] + q.sigma_q[(i, 0)] * std());
        let mut x = DMatrix::zeros(n, l);
        for t in 0..n {
            let xi = DVector::from_fn(k, |_, _| std());
            let bv = mu.column(t) + s_chol.columns(t * k, k) * xi;
            x.row_mut(t).copy_from(&(&blocks.projection * bv).transpose());
        }
        let white = DMatrix::from_fn(n, l, |_, _| std());
        x += &lx * white * &lc;
        let mut value = 0.0;
        for mask in 0..1 << p {
            let mut weight = 1.0;
            let mut ss = 0.0;
            for i in 0..p {
                let z = (mask >> i) & 1 == 1;
                let m = q.m[(i, 0)];
                weight *= if z { m } else { 1.0 - m };
                let beta = if z { amp[i] } else { 0.0 };
                for t in 0..n {
                    for kk in 0..l {
                        ss += (data.values[t][(i, kk)] - beta * x[(t, kk)]).powi(2);
                    }
                }
            }
            value += weight * (norm - ss / (2.0 * sigma * sigma));
        }
        lik.push(value);
    }

    let mut est = Acc::default();
    let mut est_lik = Acc::default();
    let mut noise_rng = stream(78, Stream::Sampling);
    for _ in 0..20_000 {
        let noise = model.sample_noise(&mut noise_rng);
        let terms = model.elbo_graph(&data, &noise, Phase::Variational).unwrap().terms;
        assert!((terms.kl_inducing - kl_ind).abs() <= 1e-8 * kl_ind.max(1.0));
        assert!((terms.kl_loadings - kl_a).abs() <= 1e-10);
        est.push(terms.elbo);
        est_lik.push(terms.likelihood - terms.prop3);
    }

    let se = (lik.se().powi(2) + est_lik.se().powi(2)).sqrt();
    assert!((est_lik.mean() - lik.mean()).abs() <= 3.0 * se, "likelihood {} vs {} (se {se})", est_lik.mean(), lik.mean());
    let oracle = lik.mean() - kl_ind - kl_ibp - kl_a;
    let se = (lik.se().powi(2) + est.se().powi(2)).sqrt();
    assert!((est.mean() - oracle).abs() <= 3.0 * se, "elbo {} vs {oracle} (se {se})", est.mean());
}
