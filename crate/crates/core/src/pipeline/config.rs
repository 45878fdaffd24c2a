//! Line-based run configuration.
//!
//! ```text
//! # comment
//! bits = 4
//! seed = 7
//!
//! [psot]
//! temperature = 2
//! ```
//!
//! Keys may also be written fully qualified outside any section (`psot.temperature = 2`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::activations::{Family, OutlierMode, SyntheticSpec};
use crate::asot::{parse_grid, AsotConfig};
use crate::error::{Error, Result};
use crate::infometrics::MetricsOptions;
use crate::lac::{LacConfig, LacMethod, Nonlinearity};
use crate::psot::{Init, PsotConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum InputSource {
    /// `samples` calibration samples generated from `spec` (seeds `spec.seed + r`).
    Synthetic { spec: SyntheticSpec, samples: usize },
    /// One calibration sample per ACTD file.
    Files { paths: Vec<PathBuf> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Stages {
    pub hadamard: bool,
    pub psot: bool,
    pub asot: bool,
    pub lac: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self {
            hadamard: true,
            psot: true,
            asot: true,
            lac: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BlockSource {
    Identity,
    /// Seeded Gaussian `W` with entries of variance `1 / dim`.
    Random { out_dim: usize },
    /// `W` stored as an ACTD matrix (`dim` rows, `out_dim` columns).
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LacSettings {
    pub search: LacConfig,
    pub block: BlockSource,
    pub nonlinearity: Nonlinearity,
    pub weight_bits: Option<u32>,
}

impl Default for LacSettings {
    fn default() -> Self {
        Self {
            search: LacConfig::default(),
            block: BlockSource::Identity,
            nonlinearity: Nonlinearity::Identity,
            weight_bits: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub input: InputSource,
    pub bits: u32,
    pub seed: u64,
    /// Fraction of token positions held out for evaluation.
    pub eval_fraction: f64,
    pub output: PathBuf,
    pub stages: Stages,
    pub psot: PsotConfig,
    pub asot: AsotConfig,
    pub lac: LacSettings,
    pub metrics: MetricsOptions,
    #[serde(skip)]
    input_seed: Option<u64>,
    #[serde(skip)]
    psot_seed: Option<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input: InputSource::Synthetic {
                spec: SyntheticSpec {
                    dim: 64,
                    n_tokens: 512,
                    outlier_rate: 0.01,
                    outlier_gain: 20.0,
                    ..Default::default()
                },
                samples: 10,
            },
            bits: 4,
            seed: 0,
            eval_fraction: 0.2,
            output: PathBuf::from("run"),
            stages: Stages::default(),
            psot: PsotConfig::default(),
            asot: AsotConfig::default(),
            lac: LacSettings::default(),
            metrics: MetricsOptions::default(),
            input_seed: None,
            psot_seed: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(None, format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::config(Some(line_no), format!("malformed section header {line:?}")))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(Error::config(Some(line_no), format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(Some(line_no), format!("expected `key = value`, got {line:?}")))?;
            let key = key.trim();
            let full = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            cfg.set(&full, value.trim())
                .map_err(|m| Error::config(Some(line_no), m))?;
        }
        cfg.finish()
    }

    /// Applies `key = value` overrides (from flags) on top of a parsed config.
    pub fn with_overrides<'a>(mut self, overrides: impl IntoIterator<Item = (&'a str, String)>) -> Result<Self> {
        for (key, value) in overrides {
            self.set(key, &value)
                .map_err(|m| Error::config(None, format!("override {key}: {m}")))?;
        }
        self.finish()
    }

    fn finish(mut self) -> Result<Self> {
        let input_seed = self.input_seed.unwrap_or(self.seed);
        if let InputSource::Synthetic { spec, .. } = &mut self.input {
            spec.seed = input_seed;
        }
        self.psot.seed = self.psot_seed.unwrap_or(self.seed);
        self.metrics.bits = self.bits;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::config(None, e.to_string());
        if !(2..=16).contains(&self.bits) {
            return Err(Error::config(None, format!("bits must lie in [2, 16], got {}", self.bits)));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::config(None, format!("eval_fraction must lie in (0, 1), got {}", self.eval_fraction)));
        }
        match &self.input {
            InputSource::Synthetic { spec, samples } => {
                spec.validate().map_err(wrap)?;
                if *samples == 0 {
                    return Err(Error::config(None, "input.samples must be >= 1"));
                }
            }
            InputSource::Files { paths } if paths.is_empty() => {
                return Err(Error::config(None, "input.source = files needs input.paths"));
            }
            InputSource::Files { .. } => {}
        }
        self.psot.validate().map_err(wrap)?;
        // m is taken from the number of samples at run time.
        AsotConfig {
            m: 1,
            ..self.asot.clone()
        }
        .validate()
        .map_err(wrap)?;
        self.lac.search.validate().map_err(wrap)?;
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = unquote(value);
        match key {
            "bits" => self.bits = num(v)?,
            "seed" => self.seed = num(v)?,
            "eval_fraction" => self.eval_fraction = range(num(v)?, 0.0, 1.0, false)?,
            "output" => self.output = PathBuf::from(v),

            "input.source" => {
                self.input = match v {
                    "synthetic" => InputSource::Synthetic {
                        spec: self.synthetic_spec(),
                        samples: self.synthetic_samples(),
                    },
                    "files" => InputSource::Files {
                        paths: match &self.input {
                            InputSource::Files { paths } => paths.clone(),
                            _ => Vec::new(),
                        },
                    },
                    other => return Err(format!("expected synthetic or files, got {other:?}")),
                }
            }
            "input.paths" => {
                self.input = InputSource::Files {
                    paths: v.split(',').map(|p| PathBuf::from(unquote(p.trim()))).filter(|p| !p.as_os_str().is_empty()).collect(),
                }
            }
            "input.samples" => {
                let n: usize = num(v)?;
                if n == 0 {
                    return Err("must be >= 1".into());
                }
                self.with_spec(|_, samples| *samples = n)?;
            }
            "input.seed" => self.input_seed = Some(num(v)?),
            "input.family" => {
                let f = match v {
                    "gaussian" => Family::Gaussian,
                    "laplace" => Family::Laplace,
                    other => return Err(format!("expected gaussian or laplace, got {other:?}")),
                };
                self.with_spec(|s, _| s.family = f)?;
            }
            "input.dim" => {
                let n: usize = num(v)?;
                self.with_spec(|s, _| s.dim = n)?;
            }
            "input.tokens" => {
                let n: usize = num(v)?;
                self.with_spec(|s, _| s.n_tokens = n)?;
            }
            "input.scale" => {
                let x: f64 = num(v)?;
                self.with_spec(|s, _| s.scale = x)?;
            }
            "input.outlier_rate" => {
                let x: f64 = num(v)?;
                self.with_spec(|s, _| s.outlier_rate = x)?;
            }
            "input.outlier_gain" => {
                let x: f64 = num(v)?;
                self.with_spec(|s, _| s.outlier_gain = x)?;
            }
            "input.outlier_mode" => {
                let m = match v {
                    "per_channel" => OutlierMode::PerChannel,
                    "per_token" => OutlierMode::PerToken,
                    other => return Err(format!("expected per_channel or per_token, got {other:?}")),
                };
                self.with_spec(|s, _| s.outlier_mode = m)?;
            }

            "stages.hadamard" => self.stages.hadamard = boolean(v)?,
            "stages.psot" => self.stages.psot = boolean(v)?,
            "stages.asot" => self.stages.asot = boolean(v)?,
            "stages.lac" => self.stages.lac = boolean(v)?,

            "psot.temperature" => self.psot.temperature = positive(num(v)?)?,
            "psot.lr" | "psot.learning_rate" => self.psot.learning_rate = range(num(v)?, 0.0, f64::INFINITY, true)?,
            "psot.epochs" => self.psot.epochs = at_least(num(v)?, 1)?,
            "psot.batch_size" => self.psot.batch_size = at_least(num(v)?, 1)?,
            "psot.blocks" => self.psot.blocks = at_least(num(v)?, 1)?,
            "psot.momentum" => self.psot.momentum = range(num(v)?, 0.0, 1.0, true)?,
            "psot.adaptive_cap" => self.psot.adaptive_cap = boolean(v)?,
            "psot.fd_check" => self.psot.fd_check = boolean(v)?,
            "psot.seed" => self.psot_seed = Some(num(v)?),
            "psot.init" => {
                self.psot.init = match v {
                    "hadamard" => Init::Hadamard,
                    "random" => Init::Random,
                    other => return Err(format!("expected hadamard or random, got {other:?}")),
                }
            }
            "psot.lr_schedule" if v == "linear_decay" => {}
            "psot.lr_schedule" => return Err(format!("only linear_decay is supported, got {v:?}")),

            "asot.delta" => self.asot.delta = positive(num(v)?)?,
            "asot.tau" => self.asot.tau = range(num(v)?, 0.0, 1.0, false)?,
            "asot.gamma" => {
                let g: f64 = num(v)?;
                if !(g >= 1.0 && g.is_finite()) {
                    return Err(format!("gamma must be finite and >= 1, got {g} (use asot.outliers_only for an infinite weight)"));
                }
                self.asot.gamma = g;
            }
            "asot.grid" => {
                let g = parse_grid(v).map_err(|e| e.to_string())?;
                if g.len() < 3 {
                    return Err(format!("grid {v:?} has fewer than 3 points"));
                }
                self.asot.grid = g;
            }
            "asot.outliers_only" => self.asot.outliers_only = boolean(v)?,

            "lac.grid" => self.lac.search.grid = at_least(num(v)?, 2)?,
            "lac.tol" => self.lac.search.tol = positive(num(v)?)?,
            "lac.sweeps" => self.lac.search.sweeps = num(v)?,
            "lac.method" => {
                self.lac.search.method = match v {
                    "grid_golden" => LacMethod::GridGolden,
                    "fd_descent" => LacMethod::FdDescent { steps: 20, lr: 0.05 },
                    other => return Err(format!("expected grid_golden or fd_descent, got {other:?}")),
                }
            }
            "lac.fd_steps" | "lac.fd_lr" => match &mut self.lac.search.method {
                LacMethod::FdDescent { steps, lr } => {
                    if key == "lac.fd_steps" {
                        *steps = num(v)?;
                    } else {
                        *lr = positive(num(v)?)?;
                    }
                }
                LacMethod::GridGolden => return Err("set lac.method = fd_descent first".into()),
            },
            "lac.block" => {
                self.lac.block = match v {
                    "identity" => BlockSource::Identity,
                    "random" => BlockSource::Random { out_dim: 32 },
                    other => return Err(format!("expected identity or random (or set lac.weights), got {other:?}")),
                }
            }
            "lac.out_dim" => match &mut self.lac.block {
                BlockSource::Random { out_dim } => *out_dim = at_least(num(v)?, 1)?,
                _ => return Err("set lac.block = random first".into()),
            },
            "lac.weights" => self.lac.block = BlockSource::File { path: PathBuf::from(v) },
            "lac.nonlinearity" => {
                self.lac.nonlinearity = match v {
                    "identity" => Nonlinearity::Identity,
                    "gelu" => Nonlinearity::Gelu,
                    other => return Err(format!("expected identity or gelu, got {other:?}")),
                }
            }
            "lac.weight_bits" => {
                self.lac.weight_bits = match v {
                    "none" | "" => None,
                    _ => Some(range(num::<u32>(v)? as f64, 2.0, 16.0, true)? as u32),
                }
            }

            "metrics.family" => {
                self.metrics.bound_family = match v {
                    "gaussian" => Family::Gaussian,
                    "laplace" => Family::Laplace,
                    other => return Err(format!("expected gaussian or laplace, got {other:?}")),
                }
            }
            "metrics.theta_ratio" => {
                let t: f64 = num(v)?;
                if !(t > 0.0 && t <= 0.2) {
                    return Err(format!("theta_ratio must lie in (0, 0.2], got {t}"));
                }
                self.metrics.theta_ratio = t;
            }
            "metrics.bins" => self.metrics.bins = at_least(num(v)?, 10)?,
            "metrics.support_sigmas" => self.metrics.support_sigmas = positive(num(v)?)?,

            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    fn synthetic_spec(&self) -> SyntheticSpec {
        match &self.input {
            InputSource::Synthetic { spec, .. } => spec.clone(),
            InputSource::Files { .. } => match Self::default().input {
                InputSource::Synthetic { spec, .. } => spec,
                InputSource::Files { .. } => unreachable!(),
            },
        }
    }

    fn synthetic_samples(&self) -> usize {
        match &self.input {
            InputSource::Synthetic { samples, .. } => *samples,
            InputSource::Files { .. } => 10,
        }
    }

    fn with_spec(&mut self, f: impl FnOnce(&mut SyntheticSpec, &mut usize)) -> std::result::Result<(), String> {
        match &mut self.input {
            InputSource::Synthetic { spec, samples } => {
                f(spec, samples);
                spec.validate().map_err(|e| e.to_string())
            }
            InputSource::Files { .. } => Err("only valid with input.source = synthetic".into()),
        }
    }
}

const SECTIONS: [&str; 6] = ["input", "stages", "psot", "asot", "lac", "metrics"];

fn unquote(v: &str) -> &str {
    v.strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .unwrap_or(v)
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse()
        .map_err(|_| format!("expected {}, got {v:?}", std::any::type_name::<T>()))
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn positive(x: f64) -> std::result::Result<f64, String> {
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("must be positive, got {x}"))
    }
}

fn at_least(x: usize, min: usize) -> std::result::Result<usize, String> {
    if x >= min {
        Ok(x)
    } else {
        Err(format!("must be >= {min}, got {x}"))
    }
}

fn range(x: f64, lo: f64, hi: f64, closed: bool) -> std::result::Result<f64, String> {
    let ok = if closed {
        x >= lo && x <= hi
    } else {
        x > lo && x < hi
    };
    if ok && !x.is_nan() {
        Ok(x)
    } else if closed {
        Err(format!("must lie in [{lo}, {hi}], got {x}"))
    } else {
        Err(format!("must lie in ({lo}, {hi}), got {x}"))
    }
}
