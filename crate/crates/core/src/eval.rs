//! Rolling-window forecasting, error metrics, and the comparison predictors.
//!
//! Window `i` trains on the periods ending at `n1 + i` and forecasts the
//! next `h` periods. MAPE and MSPE average absolute and squared errors over
//! every variable, grid point and window; the standard deviations spread
//! the per-window averages with a `1/(windows − 1)` normalizer.

use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::FunctionalPanel;
use crate::error::{Error, Result};
use crate::model::{Df2mModel, ModelConfig};
use crate::seqnets::{layer_norm, EncoderConfig, EncoderKind, EncoderParams};
use crate::trainer::{self, Adam, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowMode {
    /// Fixed-length window moved forward one period at a time.
    #[default]
    Sliding,
    /// Window grows from the first period.
    Expanding,
}

impl FromStr for WindowMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sliding" => Ok(Self::Sliding),
            "expanding" => Ok(Self::Expanding),
            other => Err(Error::invalid("window_mode", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RollingConfig {
    /// Length of the first training window.
    pub n1: usize,
    pub horizons: Vec<usize>,
    pub mode: WindowMode,
}

impl RollingConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |field: &str, message: String| Err(Error::Config {
            field: field.into(),
            message,
        });
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return bad("horizons", "need at least one positive horizon".into());
        }
        if self.n1 < 2 {
            return bad("n1", "training window must hold at least 2 periods".into());
        }
        let h = self.horizons.iter().max().copied().unwrap_or(1);
        if self.n1 + h > n {
            return bad("n1", format!("n1 + max horizon = {} exceeds n = {n}", self.n1 + h));
        }
        Ok(())
    }
}

/// One training window of the rolling harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub index: usize,
    /// First training period.
    pub start: usize,
    /// One past the last training period.
    pub end: usize,
}

/// Anything that can be refit on a window and forecast ahead.
pub trait Forecaster {
    fn name(&self) -> String;

    /// Fit on `train` and return forecasts for the next `h` periods (p×L each).
    fn fit_predict(&mut self, window: Window, train: &FunctionalPanel, h: usize) -> Result<Vec<DMatrix<f64>>>;
}

/// Mean absolute and mean squared error over every cell.
pub fn cell_errors(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> (f64, f64) {
    let count = truth.len() as f64;
    let (a, s) = pred
        .iter()
        .zip(truth.iter())
        .fold((0.0, 0.0), |(a, s), (p, y)| (a + (p - y).abs(), s + (p - y).powi(2)));
    (a / count, s / count)
}

/// Averages of per-window errors: `(MAPE, MSPE)`.
pub fn aggregate(abs: &[f64], sq: &[f64]) -> (f64, f64) {
    let n = abs.len() as f64;
    (abs.iter().sum::<f64>() / n, sq.iter().sum::<f64>() / n)
}

/// `(MAPE-STD, MSPE-STD)` of per-window errors.
pub fn metric_std(abs: &[f64], sq: &[f64]) -> Result<(f64, f64)> {
    if abs.len() < 2 || abs.len() != sq.len() {
        return Err(Error::invalid("metric_std", "need at least two windows"));
    }
    let (ma, ms) = aggregate(abs, sq);
    let norm = (abs.len() - 1) as f64;
    let spread = |x: &[f64], m: f64| (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / norm).sqrt();
    Ok((spread(abs, ma), spread(sq, ms)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowError {
    pub window: usize,
    /// Forecast target period.
    pub target: usize,
    pub abs: f64,
    pub sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub h: usize,
    pub windows: usize,
    pub mape: f64,
    pub mspe: f64,
    pub mape_std: Option<f64>,
    pub mspe_std: Option<f64>,
    pub per_window: Vec<WindowError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedWindow {
    pub window: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub window: usize,
    pub h: usize,
    pub target: usize,
    pub values: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub model: String,
    pub mode: WindowMode,
    pub n1: usize,
    pub n2: usize,
    pub horizons: Vec<HorizonReport>,
    pub skipped: Vec<SkippedWindow>,
    #[serde(skip)]
    pub predictions: Vec<Prediction>,
}

impl ForecastReport {
    pub fn horizon(&self, h: usize) -> Option<&HorizonReport> {
        self.horizons.iter().find(|r| r.h == h)
    }

    /// Long table of every forecast next to the observed value.
    pub fn predictions_csv(&self, panel: &FunctionalPanel) -> String {
        let mut s = String::from("model,window,h,time,variable,gridpoint,predicted,observed\n");
        for p in &self.predictions {
            let truth = &panel.values[p.target];
            for i in 0..truth.nrows() {
                for k in 0..truth.ncols() {
                    s.push_str(&format!(
                        "{},{},{},{},{},{},{},{}\n",
                        self.model,
                        p.window,
                        p.h,
                        panel.times[p.target],
                        panel.variables[i],
                        panel.grid[k],
                        p.values[(i, k)],
                        truth[(i, k)]
                    ));
                }
            }
        }
        s
    }

    /// One row per (horizon, window) with the window's mean errors.
    pub fn windows_csv(&self) -> String {
        let mut s = String::from("model,h,window,target,abs,sq\n");
        for h in &self.horizons {
            for w in &h.per_window {
                s.push_str(&format!("{},{},{},{},{},{}\n", self.model, h.h, w.window, w.target, w.abs, w.sq));
            }
        }
        s
    }
}

/// Refit `forecaster` on every window and score its forecasts. Windows whose
/// fit diverges are skipped and listed in the report.
pub fn rolling_forecast(
    panel: &FunctionalPanel,
    config: &RollingConfig,
    forecaster: &mut dyn Forecaster,
) -> Result<ForecastReport> {
    let n = panel.n();
    config.validate(n)?;
    let n1 = config.n1;
    let n2 = n - n1;
    let h_min = config.horizons.iter().min().copied().unwrap_or(1);
    let h_max = config.horizons.iter().max().copied().unwrap_or(1);
    let mut predictions = Vec::new();
    let mut skipped = Vec::new();
    for index in 0..=(n2 - h_min) {
        let end = n1 + index;
        let start = match config.mode {
            WindowMode::Sliding => index,
            WindowMode::Expanding => 0,
        };
        let window = Window { index, start, end };
        let steps = h_max.min(n - end);
        let train = panel.slice(start, end)?;
        match forecaster.fit_predict(window, &train, steps) {
            Ok(forecasts) => {
                for (j, values) in forecasts.into_iter().enumerate() {
                    let h = j + 1;
                    if config.horizons.contains(&h) {
                        predictions.push(Prediction {
                            window: index,
                            h,
                            target: end + j,
                            values,
                        });
                    }
                }
            }
            Err(e @ Error::Divergence { .. }) => skipped.push(SkippedWindow {
                window: index,
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }

    let mut horizons = Vec::new();
    for &h in &config.horizons {
        let per_window: Vec<WindowError> = predictions
            .iter()
            .filter(|p| p.h == h)
            .map(|p| {
                let (abs, sq) = cell_errors(&p.values, &panel.values[p.target]);
                WindowError {
                    window: p.window,
                    target: p.target,
                    abs,
                    sq,
                }
            })
            .collect();
        if per_window.is_empty() {
            return Err(Error::DegenerateData(format!("every window diverged at horizon {h}")));
        }
        let abs: Vec<f64> = per_window.iter().map(|w| w.abs).collect();
        let sq: Vec<f64> = per_window.iter().map(|w| w.sq).collect();
        let (mape, mspe) = aggregate(&abs, &sq);
        let std = metric_std(&abs, &sq).ok();
        horizons.push(HorizonReport {
            h,
            windows: per_window.len(),
            mape,
            mspe,
            mape_std: std.map(|s| s.0),
            mspe_std: std.map(|s| s.1),
            per_window,
        });
    }
    Ok(ForecastReport {
        model: forecaster.name(),
        mode: config.mode,
        n1,
        n2,
        horizons,
        skipped,
        predictions,
    })
}

/// The factor model refit on each window, warm-started from the previous
/// window's checkpoint.
#[derive(Debug, Clone)]
pub struct Df2mForecaster {
    pub model: ModelConfig,
    pub train: TrainConfig,
    previous: Option<(Df2mModel, usize)>,
}

impl Df2mForecaster {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Self {
        Self {
            model,
            train,
            previous: None,
        }
    }
}

impl Forecaster for Df2mForecaster {
    fn name(&self) -> String {
        format!("df2m-{}", self.model.encoder.as_str())
    }

    fn fit_predict(&mut self, window: Window, train: &FunctionalPanel, h: usize) -> Result<Vec<DMatrix<f64>>> {
        let start = match &self.previous {
            Some((model, prev_start)) => model.warm_start(train, window.start - prev_start)?,
            None => Df2mModel::init(train, self.model)?,
        };
        let config = TrainConfig {
            seed: self.train.seed.wrapping_add(window.index as u64),
            ..self.train
        };
        let fit = trainer::fit(start, train, &config)?;
        let out = fit.model.predict(h)?;
        self.previous = Some((fit.model, window.start));
        Ok(out)
    }
}

/// Predicts every cell as its average over the training window.
#[derive(Debug, Clone, Copy, Default)]
pub struct GlobalMean;

impl Forecaster for GlobalMean {
    fn name(&self) -> String {
        "global-mean".into()
    }

    fn fit_predict(&mut self, _window: Window, train: &FunctionalPanel, h: usize) -> Result<Vec<DMatrix<f64>>> {
        let mean = train.values.iter().fold(DMatrix::zeros(train.p(), train.l()), |a, v| a + v) / train.n() as f64;
        Ok(vec![mean; h])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub encoder: EncoderKind,
    pub hidden_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::Lstm,
            hidden_size: 15,
            steps: 500,
            lr: 1e-2,
            seed: 0,
        }
    }
}

/// Sequence network with a linear readout, mapping `Y_{t−1}` to `Y_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    pub encoder: EncoderParams,
    /// H × (p·L), zero at init.
    pub readout_w: DMatrix<f64>,
    pub readout_b: DMatrix<f64>,
    p: usize,
    l: usize,
}

fn flatten(y: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    y.iter().copied()
}

/// Row 0 is zero, row t is `vec(values[t − 1])`.
fn lagged_inputs(values: &[DMatrix<f64>], rows: usize) -> DMatrix<f64> {
    let d = values[0].len();
    let mut x = DMatrix::zeros(rows, d);
    for t in 1..rows {
        for (j, v) in flatten(&values[t - 1]).enumerate() {
            x[(t, j)] = v;
        }
    }
    x
}

impl Baseline {
    pub fn init(config: &BaselineConfig, p: usize, l: usize) -> Result<Self> {
        let enc = EncoderConfig::new(config.encoder, p * l, config.hidden_size, config.seed)?;
        Ok(Self {
            encoder: EncoderParams::init(enc),
            readout_w: DMatrix::zeros(config.hidden_size, p * l),
            readout_b: DMatrix::zeros(1, p * l),
            p,
            l,
        })
    }

    /// Adam on the mean squared one-step error over periods 1..n.
    pub fn train(&mut self, panel: &FunctionalPanel, config: &BaselineConfig) -> Result<()> {
        let n = panel.n();
        if n < 2 {
            return Err(Error::invalid("baseline", "need at least two periods"));
        }
        let d = self.p * self.l;
        let inputs = layer_norm(&lagged_inputs(&panel.values, n));
        let targets = DMatrix::from_fn(n - 1, d, |t, j| panel.values[t + 1].as_slice()[j]);
        let shapes: Vec<(usize, usize)> = self
            .encoder
            .tensors
            .iter()
            .map(|x| x.value.shape())
            .chain([self.readout_w.shape(), self.readout_b.shape()])
            .collect();
        let mut opt = Adam::new(config.lr, shapes);
        for step in 0..config.steps {
            let mut t = Tape::new();
            let vars = self.encoder.to_tape(&mut t);
            let w = t.leaf(self.readout_w.clone());
            let b = t.leaf(self.readout_b.clone());
            let x = t.constant(inputs.clone());
            let h = vars.features(&mut t, x)?;
            let out = t.affine(h, w, b)?;
            let out = t.slice(out, 1, 0, n - 1, d)?;
            let y = t.constant(targets.clone());
            let r = t.sub(y, out)?;
            let loss = t.sum_squares(r)?;
            let objective = t.scale(loss, -1.0 / ((n - 1) * d) as f64)?;
            let leaves: Vec<_> = vars.all().into_iter().chain([w, b]).collect();
            let grads = t.backward(objective, &leaves)?;
            let grads: Vec<DMatrix<f64>> = leaves.iter().map(|&v| grads.get(v).cloned().unwrap_or_default()).collect();
            if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(Error::Divergence {
                    iteration: step,
                    reason: "non-finite baseline gradient".into(),
                });
            }
            let params = self
                .encoder
                .tensors
                .iter_mut()
                .map(|x| &mut x.value)
                .chain([&mut self.readout_w, &mut self.readout_b]);
            opt.step(params, &grads);
        }
        Ok(())
    }

    /// Iterated forecasts of the `h` periods after `history`.
    pub fn predict(&self, history: &[DMatrix<f64>], h: usize) -> Result<Vec<DMatrix<f64>>> {
        let mut values = history.to_vec();
        let mut out = Vec::with_capacity(h);
        for _ in 0..h {
            let rows = values.len() + 1;
            let feats = self.encoder.features(&lagged_inputs(&values, rows))?;
            let last = feats.rows(rows - 1, 1) * &self.readout_w + &self.readout_b;
            let next = DMatrix::from_column_slice(self.p, self.l, last.transpose().as_slice());
            values.push(next.clone());
            out.push(next);
        }
        Ok(out)
    }
}

/// Baseline refit from scratch on every window.
#[derive(Debug, Clone, Copy)]
pub struct BaselineForecaster {
    pub config: BaselineConfig,
}

impl Forecaster for BaselineForecaster {
    fn name(&self) -> String {
        format!("baseline-{}", self.config.encoder.as_str())
    }

    fn fit_predict(&mut self, window: Window, train: &FunctionalPanel, h: usize) -> Result<Vec<DMatrix<f64>>> {
        let config = BaselineConfig {
            seed: self.config.seed.wrapping_add(window.index as u64),
            ..self.config
        };
        let mut model = Baseline::init(&config, train.p(), train.l())?;
        model.train(train, &config)?;
        model.predict(&train.values, h)
    }
}
