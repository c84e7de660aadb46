//! Python bindings. Panels cross the boundary as nested lists shaped
//! `[period][variable][gridpoint]`; settings use the CLI config keys.

use std::collections::HashMap;
use std::path::PathBuf;

use df2m::checkpoint::Checkpoint;
use df2m::config::{RunConfig, KEYS};
use df2m::data::FunctionalPanel;
use df2m::eval::{rolling_forecast, BaselineForecaster, Df2mForecaster, Forecaster, GlobalMean};
use df2m::model::Df2mModel;
use df2m::rng::{stream, Stream};
use df2m::simulate::simulate_panel;
use df2m::{trainer, Error};
use nalgebra::DMatrix;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config { .. }
        | Error::ShapeMismatch { .. }
        | Error::InvalidParameter { .. }
        | Error::DegenerateData(_)
        | Error::Parse { .. }
        | Error::MissingCells(_) => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn run_config(settings: Option<HashMap<String, String>>, seed: u64) -> PyResult<RunConfig> {
    let mut config = RunConfig {
        seed,
        ..RunConfig::default()
    };
    let mut pairs: Vec<_> = settings.unwrap_or_default().into_iter().collect();
    pairs.sort();
    for (k, v) in pairs {
        config.set(&k, &v).map_err(py_err)?;
    }
    config.validate().map_err(py_err)?;
    Ok(config)
}

pub fn to_nested(values: &[DMatrix<f64>]) -> Vec<Vec<Vec<f64>>> {
    values
        .iter()
        .map(|m| m.row_iter().map(|r| r.iter().copied().collect()).collect())
        .collect()
}

pub fn from_nested(values: Vec<Vec<Vec<f64>>>, grid: Vec<f64>) -> df2m::Result<FunctionalPanel> {
    let l = grid.len();
    let mut out = Vec::with_capacity(values.len());
    for (t, period) in values.into_iter().enumerate() {
        let p = period.len();
        if let Some(row) = period.iter().find(|r| r.len() != l) {
            return Err(Error::Parse {
                location: format!("period {t}"),
                message: format!("row of length {} on a grid of {l}", row.len()),
            });
        }
        out.push(DMatrix::from_fn(p, l, |i, k| period[i][k]));
    }
    FunctionalPanel::from_values(out, grid)
}

/// Simulate a panel; returns `(values, grid)`.
#[pyfunction]
#[pyo3(signature = (settings=None, seed=0))]
fn simulate(settings: Option<HashMap<String, String>>, seed: u64) -> PyResult<(Vec<Vec<Vec<f64>>>, Vec<f64>)> {
    let config = run_config(settings, seed)?;
    let (panel, _) = simulate_panel(&config.sim, &mut stream(seed, Stream::Sampling)).map_err(py_err)?;
    Ok((to_nested(&panel.values), panel.grid))
}

/// Rolling-window evaluation; returns the report as a JSON string.
#[pyfunction]
#[pyo3(signature = (values, grid, settings=None, seed=0))]
fn evaluate(
    values: Vec<Vec<Vec<f64>>>,
    grid: Vec<f64>,
    settings: Option<HashMap<String, String>>,
    seed: u64,
) -> PyResult<String> {
    let config = run_config(settings, seed)?;
    let panel = from_nested(values, grid).map_err(py_err)?;
    let rolling = config.rolling_config(panel.n());
    let mut forecasters: Vec<Box<dyn Forecaster>> =
        vec![Box::new(Df2mForecaster::new(config.model_config(), config.train_config()))];
    if config.baseline {
        forecasters.push(Box::new(BaselineForecaster {
            config: config.baseline_config(),
        }));
    }
    forecasters.push(Box::new(GlobalMean));
    let reports = forecasters
        .iter_mut()
        .map(|f| rolling_forecast(&panel, &rolling, f.as_mut()))
        .collect::<df2m::Result<Vec<_>>>()
        .map_err(py_err)?;
    let body = serde_json::json!({ "n1": rolling.n1, "horizons": rolling.horizons, "reports": reports });
    Ok(body.to_string())
}

#[pyfunction]
fn config_keys() -> Vec<&'static str> {
    KEYS.to_vec()
}

#[pyclass]
struct Model {
    ckpt: Checkpoint,
    trace: Vec<f64>,
}

#[pymethods]
impl Model {
    #[staticmethod]
    #[pyo3(signature = (values, grid, settings=None, seed=0))]
    fn fit(
        values: Vec<Vec<Vec<f64>>>,
        grid: Vec<f64>,
        settings: Option<HashMap<String, String>>,
        seed: u64,
    ) -> PyResult<Self> {
        let config = run_config(settings, seed)?;
        let panel = from_nested(values, grid).map_err(py_err)?;
        let train = config.train_config();
        let model = Df2mModel::init(&panel, config.model_config()).map_err(py_err)?;
        let fit = trainer::fit(model, &panel, &train).map_err(py_err)?;
        Ok(Self {
            trace: fit.trace.elbo(),
            ckpt: Checkpoint {
                model: fit.model,
                train: Some(train),
                variables: panel.variables,
            },
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            ckpt: Checkpoint::load(&path).map_err(py_err)?,
            trace: Vec::new(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.ckpt.save(&path).map_err(py_err)
    }

    /// Forecasts for horizons 1..=h, each `[variable][gridpoint]`.
    fn predict(&self, h: usize) -> PyResult<Vec<Vec<Vec<f64>>>> {
        Ok(to_nested(&self.ckpt.model.predict(h).map_err(py_err)?))
    }

    #[pyo3(signature = (threshold=0.5))]
    fn active_columns(&self, threshold: f64) -> Vec<usize> {
        self.ckpt.model.active_columns(threshold)
    }

    /// Per-iteration ELBO of the fit; empty for a loaded model.
    #[getter]
    fn elbo_trace(&self) -> Vec<f64> {
        self.trace.clone()
    }

    #[getter]
    fn variables(&self) -> Vec<String> {
        self.ckpt.variables.clone()
    }

    #[getter]
    fn grid(&self) -> Vec<f64> {
        self.ckpt.model.u.clone()
    }
}

#[pymodule]
fn df2m_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(config_keys, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
