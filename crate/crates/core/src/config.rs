//! Flat `key = value` run configuration shared by every CLI command.
//!
//! Later sources override earlier ones: defaults, then the config file, then
//! `--set` pairs, then dedicated flags. Unknown keys and unparsable values
//! are rejected with the offending field named.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{CsvFormat, Transform};
use crate::error::{Error, Result};
use crate::eval::{BaselineConfig, RollingConfig, WindowMode};
use crate::kernels::KernelKind;
use crate::model::ModelConfig;
use crate::simulate::{Dynamics, LoadingMode, SimSpec};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub format: CsvFormat,
    pub transform: Transform,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub horizons: Vec<usize>,
    /// First training window length; defaults to 80% of the panel.
    pub n1: Option<usize>,
    pub window_mode: WindowMode,
    pub baseline: bool,
    pub baseline_steps: usize,
    pub baseline_lr: f64,
    pub sim: SimSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let baseline = BaselineConfig::default();
        Self {
            data: None,
            format: CsvFormat::Long,
            transform: Transform::None,
            checkpoint: None,
            out: PathBuf::from("."),
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            horizons: vec![1],
            n1: None,
            window_mode: WindowMode::Sliding,
            baseline: true,
            baseline_steps: baseline.steps,
            baseline_lr: baseline.lr,
            sim: SimSpec::default(),
        }
    }
}

/// Every accepted key, in documentation order.
pub const KEYS: &[&str] = &[
    "data",
    "format",
    "transform",
    "checkpoint",
    "out",
    "seed",
    "encoder",
    "factors",
    "inducing",
    "hidden_size",
    "alpha",
    "spatial_kernel",
    "temporal_kernel",
    "nugget",
    "mc_draws",
    "spectral_norm",
    "lr_variational",
    "lr_encoder",
    "beta2",
    "max_iters",
    "window",
    "tolerance",
    "patience",
    "variational_steps",
    "encoder_steps",
    "horizons",
    "n1",
    "window_mode",
    "baseline",
    "baseline_steps",
    "baseline_lr",
    "sim.p",
    "sim.n",
    "sim.l",
    "sim.factors",
    "sim.alpha",
    "sim.sigma_a",
    "sim.sigma_eps",
    "sim.spatial_kernel",
    "sim.spatial_ls",
    "sim.spatial_var",
    "sim.dynamics",
    "sim.loadings",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config {
        field: key.into(),
        message: format!("cannot parse `{value}`"),
    })
}

/// Re-tag a module parse error with the config key.
fn retag(key: &str, e: Error) -> Error {
    Error::Config {
        field: key.into(),
        message: match e {
            Error::InvalidParameter { reason, .. } => reason,
            other => other.to_string(),
        },
    }
}

fn parse_enum<T: FromStr<Err = Error>>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|e| retag(key, e))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(Error::Config {
            field: key.into(),
            message: format!("expected true or false, got `{other}`"),
        }),
    }
}

impl RunConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "data" => self.data = Some(PathBuf::from(v)),
            "format" => self.format = parse_enum(key, v)?,
            "transform" => self.transform = parse_enum(key, v)?,
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "out" => self.out = PathBuf::from(v),
            "seed" => self.seed = parse(key, v)?,
            "encoder" => self.model.encoder = parse_enum(key, v)?,
            "factors" => self.model.factors = parse(key, v)?,
            "inducing" => self.model.inducing = parse(key, v)?,
            "hidden_size" => self.model.hidden_size = parse(key, v)?,
            "alpha" => self.model.alpha = parse(key, v)?,
            "spatial_kernel" => self.model.spatial_kind = parse_enum(key, v)?,
            "temporal_kernel" => self.model.temporal_kind = parse_enum(key, v)?,
            "nugget" => self.model.nugget = parse(key, v)?,
            "mc_draws" => self.model.mc_draws = parse(key, v)?,
            "spectral_norm" => self.model.spectral_norm = parse_bool(key, v)?,
            "lr_variational" => self.train.lr_variational = parse(key, v)?,
            "lr_encoder" => self.train.lr_encoder = parse(key, v)?,
            "beta2" => self.train.beta2 = parse(key, v)?,
            "max_iters" => self.train.max_iters = parse(key, v)?,
            "window" => self.train.window = parse(key, v)?,
            "tolerance" => self.train.tolerance = parse(key, v)?,
            "patience" => self.train.patience = parse(key, v)?,
            "variational_steps" => self.train.variational_steps = parse(key, v)?,
            "encoder_steps" => self.train.encoder_steps = parse(key, v)?,
            "horizons" => {
                self.horizons = v
                    .split(',')
                    .map(|h| parse(key, h))
                    .collect::<Result<Vec<usize>>>()?
            }
            "n1" => self.n1 = Some(parse(key, v)?),
            "window_mode" => self.window_mode = parse_enum(key, v)?,
            "baseline" => self.baseline = parse_bool(key, v)?,
            "baseline_steps" => self.baseline_steps = parse(key, v)?,
            "baseline_lr" => self.baseline_lr = parse(key, v)?,
            "sim.p" => self.sim.p = parse(key, v)?,
            "sim.n" => self.sim.n = parse(key, v)?,
            "sim.l" => self.sim.l = parse(key, v)?,
            "sim.factors" => self.sim.factors = parse(key, v)?,
            "sim.alpha" => self.sim.alpha = parse(key, v)?,
            "sim.sigma_a" => self.sim.sigma_a = parse(key, v)?,
            "sim.sigma_eps" => self.sim.sigma_eps = parse(key, v)?,
            "sim.spatial_kernel" => self.sim.spatial.kind = parse_enum::<KernelKind>(key, v)?,
            "sim.spatial_ls" => self.sim.spatial.lengthscale = parse(key, v)?,
            "sim.spatial_var" => self.sim.spatial.variance = parse(key, v)?,
            "sim.dynamics" => {
                self.sim.dynamics = Dynamics::named(v).map_err(|e| retag(key, e))?
            }
            "sim.loadings" => {
                self.sim.loadings = match v {
                    "ibp" => LoadingMode::Ibp,
                    "ones" => LoadingMode::Ones,
                    other => {
                        return Err(Error::Config {
                            field: key.into(),
                            message: format!("unknown loading mode `{other}` (ibp, ones)"),
                        })
                    }
                }
            }
            other => {
                return Err(Error::Config {
                    field: other.into(),
                    message: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Parse `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                location: format!("config line {}", i + 1),
                message: "expected key = value".into(),
            })?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            field: "config".into(),
            message: format!("{}: {e}", path.display()),
        })?;
        self.apply_text(&text)
    }

    /// Seeds of the model, the trainer and the baseline all follow `seed`.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..self.model
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }

    pub fn baseline_config(&self) -> BaselineConfig {
        BaselineConfig {
            encoder: self.model.encoder,
            hidden_size: self.model.hidden_size,
            steps: self.baseline_steps,
            lr: self.baseline_lr,
            seed: self.seed,
        }
    }

    pub fn rolling_config(&self, n: usize) -> RollingConfig {
        RollingConfig {
            n1: self.n1.unwrap_or(n * 4 / 5),
            horizons: self.horizons.clone(),
            mode: self.window_mode,
        }
    }

    /// Validate the settings every command relies on.
    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train_config().validate()?;
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(Error::Config {
                field: "horizons".into(),
                message: "need at least one positive horizon".into(),
            });
        }
        if !(self.baseline_lr > 0.0) {
            return Err(Error::Config {
                field: "baseline_lr".into(),
                message: "must be positive".into(),
            });
        }
        Ok(())
    }

    /// The input file named by `field` must be set and exist.
    pub fn require_file(&self, field: &str) -> Result<&Path> {
        let path = match field {
            "data" => self.data.as_deref(),
            "checkpoint" => self.checkpoint.as_deref(),
            _ => None,
        };
        let path = path.ok_or_else(|| Error::Config {
            field: field.into(),
            message: "required for this command".into(),
        })?;
        if !path.is_file() {
            return Err(Error::Config {
                field: field.into(),
                message: format!("{} does not exist", path.display()),
            });
        }
        Ok(path)
    }
}
