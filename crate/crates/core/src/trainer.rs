//! Alternating stochastic gradient ascent on the ELBO.
//!
//! Variational steps move the posterior tensors with `Σ_X` held fixed;
//! encoder steps move the encoder weights with the posterior held fixed and
//! are followed by spectral normalization. Convergence is judged on the
//! means of consecutive non-overlapping blocks of `window` iterations.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::FunctionalPanel;
use crate::error::{Error, Result};
use crate::model::{Df2mModel, ElboTerms, Phase};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_variational: f64,
    pub lr_encoder: f64,
    /// Adam second-moment decay. Shorter memory than the usual 0.999 so the
    /// large gradients of the first iterations stop damping the step size
    /// once the fit has settled.
    pub beta2: f64,
    pub max_iters: usize,
    /// Block length W of the moving average.
    pub window: usize,
    /// Relative tolerance δ.
    pub tolerance: f64,
    /// Consecutive block comparisons that must agree before stopping.
    pub patience: usize,
    /// Consecutive variational steps per cycle.
    pub variational_steps: usize,
    /// Consecutive encoder steps per cycle.
    pub encoder_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_variational: 1e-2,
            lr_encoder: 1e-3,
            beta2: 0.99,
            max_iters: 5000,
            window: 20,
            tolerance: 1e-3,
            patience: 3,
            variational_steps: 1,
            encoder_steps: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: field.into(),
                message: message.into(),
            })
        };
        if !(self.lr_variational > 0.0) || !self.lr_variational.is_finite() {
            return bad("lr_variational", "must be positive");
        }
        if !(self.lr_encoder > 0.0) || !self.lr_encoder.is_finite() {
            return bad("lr_encoder", "must be positive");
        }
        if !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("beta2", "must lie in (0, 1)");
        }
        if self.window < 5 {
            return bad("window", "must be at least 5");
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance", "must be positive");
        }
        if self.patience == 0 {
            return bad("patience", "must be at least 1");
        }
        if self.variational_steps == 0 {
            return bad("variational_steps", "must be at least 1");
        }
        Ok(())
    }

    fn phase(&self, iteration: usize) -> Phase {
        let cycle = self.variational_steps + self.encoder_steps;
        if iteration % cycle < self.variational_steps {
            Phase::Variational
        } else {
            Phase::Encoder
        }
    }
}

/// Adam on a list of tensors, ascending.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
    steps: i32,
}

impl Adam {
    pub fn new(lr: f64, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = shapes
            .into_iter()
            .map(|(r, c)| (DMatrix::zeros(r, c), DMatrix::zeros(r, c)))
            .unzip();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m,
            v,
            steps: 0,
        }
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut DMatrix<f64>>, grads: &[DMatrix<f64>]) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for (i, x) in params.into_iter().enumerate() {
            let g = &grads[i];
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            self.m[i].zip_apply(g, |m, g| *m = b1 * *m + (1.0 - b1) * g);
            self.v[i].zip_apply(g, |v, g| *v = b2 * *v + (1.0 - b2) * g * g);
            let (m, v) = (&self.m[i], &self.v[i]);
            for j in 0..x.len() {
                x[j] += lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub encoder_step: bool,
    pub terms: ElboTerms,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitStatus {
    Converged,
    MaxIters,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ElboTrace {
    pub rows: Vec<TraceRow>,
    /// Mean ELBO of each completed block.
    pub block_means: Vec<f64>,
    /// Standard error of each block mean.
    pub block_errors: Vec<f64>,
}

impl ElboTrace {
    pub fn elbo(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.terms.elbo).collect()
    }

    /// Trailing moving average of width `w` (defined from index w−1 on).
    pub fn moving_average(&self, w: usize) -> Vec<f64> {
        let e = self.elbo();
        e.windows(w).map(|x| x.iter().sum::<f64>() / w as f64).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,phase,elbo,likelihood,prop3,kl_inducing,kl_ibp,kl_loadings\n");
        for r in &self.rows {
            let t = &r.terms;
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.iteration,
                if r.encoder_step { "encoder" } else { "variational" },
                t.elbo,
                t.likelihood,
                t.prop3,
                t.kl_inducing,
                t.kl_ibp,
                t.kl_loadings
            ));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct Fit {
    pub model: Df2mModel,
    pub trace: ElboTrace,
    pub status: FitStatus,
    /// Block index of the returned checkpoint, if any block completed.
    pub best_block: Option<usize>,
}

fn divergence(iteration: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { context } => Error::Divergence {
            iteration,
            reason: format!("non-finite value in {context}"),
        },
        other => other,
    }
}

fn mean_and_error(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Half-width of the "no change" band between two block means: the relative
/// tolerance, widened to two standard errors of the difference.
pub fn band(tolerance: f64, mean: f64, se_a: f64, se_b: f64) -> f64 {
    (tolerance * mean.abs()).max(2.0 * (se_a * se_a + se_b * se_b).sqrt())
}

/// Run the alternating optimizer from `model` and return the best block checkpoint.
pub fn fit(model: Df2mModel, panel: &FunctionalPanel, config: &TrainConfig) -> Result<Fit> {
    config.validate()?;
    let mut model = model;
    let mut rng = rng::stream(config.seed, Stream::Training);
    let mut opt_var = Adam::new(config.lr_variational, model.params.iter().map(|x| x.value.shape()));
    let mut opt_enc = Adam::new(config.lr_encoder, model.encoder_group().map(|x| x.value.shape()));
    opt_var.beta2 = config.beta2;
    opt_enc.beta2 = config.beta2;
    let mut trace = ElboTrace::default();
    let mut best: Option<(f64, usize, Df2mModel)> = None;
    let mut decreases = 0;
    let mut flat = 0;
    let mut status = FitStatus::MaxIters;

    for iteration in 0..config.max_iters {
        let phase = config.phase(iteration);
        let noise = model.sample_noise(&mut rng);
        let graph = model
            .elbo_graph(panel, &noise, phase)
            .map_err(|e| divergence(iteration, e))?;
        let leaves = match phase {
            Phase::Encoder => graph.encoder.clone(),
            _ => graph.variational.clone(),
        };
        let grads = graph
            .tape
            .backward(graph.elbo, &leaves)
            .map_err(|e| divergence(iteration, e))?;
        let grads: Vec<DMatrix<f64>> = leaves
            .iter()
            .map(|&v| grads.get(v).cloned().unwrap_or_else(|| DMatrix::zeros(0, 0)))
            .collect();
        if let Some(i) = grads.iter().position(|g| g.iter().any(|x| !x.is_finite())) {
            let name = match phase {
                Phase::Encoder => model.encoder_group().nth(i).map(|x| x.name.clone()).unwrap_or_default(),
                _ => model.params[i].name.clone(),
            };
            return Err(Error::Divergence {
                iteration,
                reason: format!("non-finite gradient for {name}"),
            });
        }
        match phase {
            Phase::Encoder => {
                opt_enc.step(model.encoder_group_mut().map(|x| &mut x.value), &grads);
                model.normalize_encoder();
            }
            _ => opt_var.step(model.params.iter_mut().map(|x| &mut x.value), &grads),
        }
        trace.rows.push(TraceRow {
            iteration,
            encoder_step: phase == Phase::Encoder,
            terms: graph.terms,
        });

        if (iteration + 1) % config.window != 0 {
            continue;
        }
        let block: Vec<f64> = trace.rows[iteration + 1 - config.window..]
            .iter()
            .map(|r| r.terms.elbo)
            .collect();
        let (mean, se) = mean_and_error(&block);
        let index = trace.block_means.len();
        trace.block_means.push(mean);
        trace.block_errors.push(se);
        if best.as_ref().is_none_or(|(b, _, _)| mean > *b) {
            best = Some((mean, index, model.clone()));
        }
        if index == 0 {
            continue;
        }
        let delta = mean - trace.block_means[index - 1];
        let band = band(config.tolerance, mean, se, trace.block_errors[index - 1]);
        flat = if delta.abs() < band { flat + 1 } else { 0 };
        decreases = if delta < -band { decreases + 1 } else { 0 };
        if flat >= config.patience {
            status = FitStatus::Converged;
            break;
        }
        if decreases >= 3 {
            return Err(Error::Divergence {
                iteration,
                reason: format!(
                    "block mean ELBO fell 3 times in a row beyond ±{band:.3e} (last {} -> {mean})",
                    trace.block_means[index - 1]
                ),
            });
        }
    }

    let (model, best_block) = match best {
        Some((_, i, m)) => (m, Some(i)),
        None => (model, None),
    };
    Ok(Fit {
        model,
        trace,
        status,
        best_block,
    })
}
