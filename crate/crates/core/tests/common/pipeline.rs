//! The command-line pipeline run through the built binary.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

pub const SMALL: &[&str] = &[
    "--set", "sim.n=20",
    "--set", "sim.p=3",
    "--set", "sim.l=5",
    "--set", "sim.factors=2",
    "--set", "factors=3",
    "--set", "inducing=4",
    "--set", "hidden_size=4",
    "--set", "max_iters=40",
    "--set", "window=5",
    "--set", "baseline_steps=20",
    "--set", "n1=17",
];

pub fn df2m(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_df2m")).args(args).output().unwrap()
}

pub fn run_ok(command: &str, out: &Path, extra: &[&str]) -> Value {
    let mut args = vec![command, "--out", out.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    let o = df2m(&args);
    assert!(o.status.success(), "{command}: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

/// Every command of the pipeline, writing into `root`.
pub fn pipeline(root: &Path) {
    let (sim, fit, pred, insp, eval) = (root.join("sim"), root.join("fit"), root.join("pred"), root.join("insp"), root.join("eval"));
    let data = sim.join("panel.csv");
    let ckpt = fit.join("model.ckpt");
    let summary = run_ok("simulate", &sim, &["--seed", "3"]);
    assert_eq!(summary["details"]["n"], 20);
    run_ok("fit", &fit, &["--data", data.to_str().unwrap(), "--seed", "1"]);
    run_ok("predict", &pred, &["--checkpoint", ckpt.to_str().unwrap(), "--horizons", "1,3"]);
    run_ok("inspect", &insp, &["--checkpoint", ckpt.to_str().unwrap()]);
    run_ok("evaluate", &eval, &["--data", data.to_str().unwrap(), "--horizons", "1,2", "--encoder", "gru"]);
}

pub const FILES: &[&str] = &[
    "sim/panel.csv",
    "sim/truth.json",
    "fit/model.ckpt",
    "fit/elbo_trace.csv",
    "pred/forecast.csv",
    "insp/loadings.csv",
    "insp/factors.csv",
    "insp/temporal_cov.csv",
    "eval/report.json",
    "eval/windows.csv",
];
