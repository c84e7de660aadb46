//! Command-line workflows: fit, predict, evaluate, simulate, inspect.
//!
//! Each command writes a fixed set of files into the output directory and
//! prints a one-line JSON summary on stdout. Failures print a JSON error
//! envelope on stderr and exit nonzero.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde_json::{json, Value};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{load_panel, write_panel, FunctionalPanel};
use crate::error::{Error, Result};
use crate::eval::{rolling_forecast, BaselineForecaster, Df2mForecaster, Forecaster, GlobalMean};
use crate::model::Df2mModel;
use crate::rng::{self, Stream};
use crate::simulate::simulate_panel;
use crate::trainer;

#[derive(Debug, Parser)]
#[command(name = "df2m", version, about = "Deep functional factor model for functional time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a panel; writes model.ckpt and elbo_trace.csv.
    Fit(Options),
    /// Forecast from a checkpoint; writes forecast.csv.
    Predict(Options),
    /// Rolling-window evaluation; writes report.json and windows.csv.
    Evaluate(Options),
    /// Draw a synthetic panel; writes panel.csv and truth.json.
    Simulate(Options),
    /// Dump posterior summaries; writes loadings.csv, factors.csv and temporal_cov.csv.
    Inspect(Options),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Options {
    /// key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra assignments, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub data: Option<String>,
    /// long or wide.
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<String>,
    /// lin, lstm, gru or attn.
    #[arg(long)]
    pub encoder: Option<String>,
    /// Comma-separated forecast horizons.
    #[arg(long)]
    pub horizons: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    /// Output directory.
    #[arg(long, short)]
    pub out: Option<String>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

impl Command {
    fn options(&self) -> &Options {
        match self {
            Command::Fit(o) | Command::Predict(o) | Command::Evaluate(o) | Command::Simulate(o) | Command::Inspect(o) => o,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Fit(_) => "fit",
            Command::Predict(_) => "predict",
            Command::Evaluate(_) => "evaluate",
            Command::Simulate(_) => "simulate",
            Command::Inspect(_) => "inspect",
        }
    }

    fn outputs(&self) -> &'static [&'static str] {
        match self {
            Command::Fit(_) => &["model.ckpt", "elbo_trace.csv"],
            Command::Predict(_) => &["forecast.csv"],
            Command::Evaluate(_) => &["report.json", "windows.csv"],
            Command::Simulate(_) => &["panel.csv", "truth.json"],
            Command::Inspect(_) => &["loadings.csv", "factors.csv", "temporal_cov.csv"],
        }
    }
}

/// Merge defaults, config file, `--set` pairs and flags.
pub fn resolve(options: &Options) -> Result<RunConfig> {
    let mut c = RunConfig::default();
    if let Some(path) = &options.config {
        c.apply_file(path)?;
    }
    for pair in &options.set {
        let (k, v) = pair.split_once('=').ok_or_else(|| Error::Config {
            field: "set".into(),
            message: format!("expected KEY=VALUE, got `{pair}`"),
        })?;
        c.set(k, v)?;
    }
    let flags = [
        ("data", &options.data),
        ("format", &options.format),
        ("checkpoint", &options.checkpoint),
        ("encoder", &options.encoder),
        ("horizons", &options.horizons),
        ("seed", &options.seed),
        ("out", &options.out),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            c.set(key, v)?;
        }
    }
    c.validate()?;
    Ok(c)
}

fn prepare_outputs(config: &RunConfig, names: &[&str], force: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(&config.out)?;
    let paths: Vec<PathBuf> = names.iter().map(|n| config.out.join(n)).collect();
    if !force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(Error::OutputExists(p.clone()));
        }
    }
    Ok(paths)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn load(config: &RunConfig) -> Result<FunctionalPanel> {
    load_panel(config.require_file("data")?, config.format, config.transform)
}

/// Run one parsed command and return its summary.
pub fn execute(command: &Command) -> Result<Value> {
    let options = command.options();
    let config = resolve(options)?;
    match command {
        Command::Fit(_) | Command::Evaluate(_) => {
            config.require_file("data")?;
        }
        Command::Predict(_) | Command::Inspect(_) => {
            config.require_file("checkpoint")?;
        }
        Command::Simulate(_) => config.sim.validate()?,
    }
    let paths = prepare_outputs(&config, command.outputs(), options.force)?;
    let files: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
    let details = match command {
        Command::Fit(_) => fit(&config, &paths)?,
        Command::Predict(_) => predict(&config, &paths)?,
        Command::Evaluate(_) => evaluate(&config, &paths)?,
        Command::Simulate(_) => simulate(&config, &paths)?,
        Command::Inspect(_) => inspect(&config, &paths)?,
    };
    Ok(json!({ "command": command.name(), "outputs": files, "details": details }))
}

fn fit(config: &RunConfig, paths: &[PathBuf]) -> Result<Value> {
    let panel = load(config)?;
    let train = config.train_config();
    let model = Df2mModel::init(&panel, config.model_config())?;
    let fit = trainer::fit(model, &panel, &train)?;
    let active = fit.model.active_columns(0.5);
    let summary = json!({
        "status": fit.status,
        "iterations": fit.trace.rows.len(),
        "best_block": fit.best_block,
        "best_block_elbo": fit.best_block.map(|b| fit.trace.block_means[b]),
        "active_columns": active,
        "sigma_eps": fit.model.sigma_eps(),
    });
    Checkpoint {
        model: fit.model,
        train: Some(train),
        variables: panel.variables.clone(),
    }
    .save(&paths[0])?;
    fs::write(&paths[1], fit.trace.to_csv())?;
    Ok(summary)
}

fn predict(config: &RunConfig, paths: &[PathBuf]) -> Result<Value> {
    let ckpt = Checkpoint::load(config.require_file("checkpoint")?)?;
    let h_max = config.horizons.iter().copied().max().unwrap_or(1);
    let forecasts = ckpt.model.predict(h_max)?;
    let mut s = String::from("h,variable,gridpoint,value\n");
    for &h in &config.horizons {
        let f = &forecasts[h - 1];
        for (i, name) in ckpt.variables.iter().enumerate() {
            for (k, u) in ckpt.model.u.iter().enumerate() {
                s.push_str(&format!("{h},{name},{u},{}\n", f[(i, k)]));
            }
        }
    }
    fs::write(&paths[0], s)?;
    Ok(json!({ "horizons": config.horizons }))
}

fn evaluate(config: &RunConfig, paths: &[PathBuf]) -> Result<Value> {
    let panel = load(config)?;
    let rolling = config.rolling_config(panel.n());
    let mut forecasters: Vec<Box<dyn Forecaster>> = vec![Box::new(Df2mForecaster::new(
        config.model_config(),
        config.train_config(),
    ))];
    if config.baseline {
        forecasters.push(Box::new(BaselineForecaster {
            config: config.baseline_config(),
        }));
    }
    forecasters.push(Box::new(GlobalMean));
    let mut reports = Vec::new();
    let mut windows = String::new();
    for f in forecasters.iter_mut() {
        let report = rolling_forecast(&panel, &rolling, f.as_mut())?;
        let table = report.windows_csv();
        if windows.is_empty() {
            windows.push_str(&table);
        } else {
            windows.extend(table.lines().skip(1).map(|l| format!("{l}\n")));
        }
        reports.push(report);
    }
    let summary: Vec<Value> = reports
        .iter()
        .map(|r| {
            json!({
                "model": r.model,
                "mspe": r.horizons.iter().map(|h| (h.h, h.mspe)).collect::<Vec<_>>(),
                "mape": r.horizons.iter().map(|h| (h.h, h.mape)).collect::<Vec<_>>(),
                "skipped": r.skipped.len(),
            })
        })
        .collect();
    let body = json!({ "n1": rolling.n1, "horizons": rolling.horizons, "reports": reports });
    fs::write(&paths[0], serde_json::to_string_pretty(&body)? + "\n")?;
    fs::write(&paths[1], windows)?;
    Ok(Value::Array(summary))
}

fn simulate(config: &RunConfig, paths: &[PathBuf]) -> Result<Value> {
    let mut rng = rng::stream(config.seed, Stream::Sampling);
    let (panel, truth) = simulate_panel(&config.sim, &mut rng)?;
    let file = fs::File::create(&paths[0])?;
    write_panel(&panel, std::io::BufWriter::new(file), config.format)?;
    let body = json!({
        "spec": config.sim,
        "seed": config.seed,
        "z": rows(&truth.z),
        "a": rows(&truth.a),
        "factors": truth.factors.iter().map(rows).collect::<Vec<_>>(),
        "sigma_x": rows(&truth.sigma_x),
        "spatial": truth.spatial,
    });
    fs::write(&paths[1], serde_json::to_string_pretty(&body)? + "\n")?;
    Ok(json!({ "n": panel.n(), "p": panel.p(), "l": panel.l() }))
}

fn inspect(config: &RunConfig, paths: &[PathBuf]) -> Result<Value> {
    let ckpt = Checkpoint::load(config.require_file("checkpoint")?)?;
    let model = &ckpt.model;
    let q = model.loading_posterior();
    let weights = q.expected_weights();
    let mut s = String::from("variable,factor,m,eta,sigma_q,expected_weight\n");
    for (i, name) in ckpt.variables.iter().enumerate() {
        for (r, w) in weights.iter().enumerate() {
            s.push_str(&format!("{name},{},{},{},{},{w}\n", r + 1, q.m[(i, r)], q.eta[(i, r)], q.sigma_q[(i, r)]));
        }
    }
    fs::write(&paths[0], s)?;

    let paths_m = model.factor_paths()?;
    let l = model.u.len();
    let mut s = String::from("factor,period,gridpoint,value\n");
    for r in 0..paths_m.nrows() {
        for t in 0..model.n {
            for (k, u) in model.u.iter().enumerate() {
                s.push_str(&format!("{},{},{u},{}\n", r + 1, t + 1, paths_m[(r, t * l + k)]));
            }
        }
    }
    fs::write(&paths[1], s)?;

    let sx = model.sigma_x()?;
    let mut s = String::from("t,s,value\n");
    for t in 0..sx.nrows() {
        for u in 0..sx.ncols() {
            s.push_str(&format!("{},{},{}\n", t + 1, u + 1, sx[(t, u)]));
        }
    }
    fs::write(&paths[2], s)?;
    Ok(json!({ "active_columns": model.active_columns(0.5), "expected_weights": weights }))
}

/// JSON error envelope written to stderr.
pub fn error_json(e: &Error) -> Value {
    let field = match e {
        Error::Config { field, .. } => Some(field.clone()),
        Error::InvalidParameter { name, .. } => Some(name.clone()),
        _ => None,
    };
    json!({ "error": { "kind": e.kind(), "field": field, "message": e.to_string() } })
}

/// Parse `args` and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return 0;
            }
            let envelope = json!({ "error": { "kind": "usage", "field": null, "message": e.to_string().trim() } });
            eprintln!("{envelope}");
            return 2;
        }
    };
    match execute(&cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            match e {
                Error::Config { .. } | Error::OutputExists(_) => 2,
                _ => 1,
            }
        }
    }
}
