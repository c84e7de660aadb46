//! Replicated draws of the generator against its separable covariance.

use df2m::kernels::{KernelKind, SpatialKernel};
use df2m::rng::{stream, Stream};
use df2m::simulate::{simulate_panel, Dynamics, LoadingMode, SimSpec};

pub const REPS: usize = 10_000;

pub fn spec() -> SimSpec {
    SimSpec {
        p: 2,
        n: 4,
        l: 5,
        factors: 2,
        sigma_eps: 0.0,
        spatial: SpatialKernel::new(KernelKind::SquaredExponential, 0.3, 1.5).unwrap(),
        dynamics: Dynamics::MarkovLinear { rho: 0.7 },
        loadings: LoadingMode::Ones,
        ..SimSpec::default()
    }
}

fn se_kernel(a: f64, b: f64) -> f64 {
    1.5 * (-(a - b).powi(2) / (2.0 * 0.3 * 0.3)).exp()
}

/// Sample covariance of paired draws and the standard error of that estimate
/// under Gaussianity, given the true variances and covariance.
fn cov_and_se(x: &[f64], y: &[f64], vx: f64, vy: f64, cxy: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let c = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1.0);
    (c, ((vx * vy + cxy * cxy) / n).sqrt())
}

/// Every covariance check as `(label, estimate, expected, standard error)`.
pub fn separable_covariance_checks() -> Vec<(String, f64, f64, f64)> {
    let spec = spec();
    let grid = spec.grid();
    let mut rng = stream(12, Stream::Sampling);
    // draws[rep][t] is the M₀ × L factor matrix
    let mut draws = Vec::with_capacity(REPS);
    let mut sigma_x = None;
    for _ in 0..REPS {
        let (_, truth) = simulate_panel(&spec, &mut rng).unwrap();
        sigma_x.get_or_insert(truth.sigma_x.clone());
        draws.push(truth.factors);
    }
    let sigma_x = sigma_x.unwrap();
    for t in 0..spec.n {
        for s in 0..spec.n {
            assert!((sigma_x[(t, s)] - 0.7f64.powi((t as i32 - s as i32).abs())).abs() < 1e-15);
        }
    }
    let series = |t: usize, r: usize, k: usize| -> Vec<f64> { draws.iter().map(|d| d[t][(r, k)]).collect() };

    let t = 2;
    let mut checks = Vec::new();
    for r in 0..spec.factors {
        for (a, b) in [(0, 0), (0, 1), (1, 3), (2, 4), (4, 4)] {
            let expect = sigma_x[(t, t)] * se_kernel(grid[a], grid[b]);
            let va = sigma_x[(t, t)] * se_kernel(grid[a], grid[a]);
            let vb = sigma_x[(t, t)] * se_kernel(grid[b], grid[b]);
            let (c, se) = cov_and_se(&series(t, r, a), &series(t, r, b), va, vb, expect);
            checks.push((format!("same time r={r} ({a},{b})"), c, expect, se));
        }
    }
    // across time for one factor: Σ_X[t, s] κ(u, v)
    for (s, a, b) in [(0, 1, 1), (1, 2, 3), (3, 0, 2)] {
        let expect = sigma_x[(t, s)] * se_kernel(grid[a], grid[b]);
        let va = sigma_x[(t, t)] * se_kernel(grid[a], grid[a]);
        let vb = sigma_x[(s, s)] * se_kernel(grid[b], grid[b]);
        let (c, se) = cov_and_se(&series(t, 0, a), &series(s, 0, b), va, vb, expect);
        checks.push((format!("t={t} s={s} ({a},{b})"), c, expect, se));
    }
    // distinct factors are uncorrelated at the same (t, u)
    for k in [0, 2, 4] {
        let v = sigma_x[(t, t)] * se_kernel(grid[k], grid[k]);
        let (c, se) = cov_and_se(&series(t, 0, k), &series(t, 1, k), v, v, 0.0);
        checks.push((format!("cross-factor k={k}"), c, 0.0, se));
    }
    checks
}
