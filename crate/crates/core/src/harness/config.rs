//! Flat `key = value` run configuration.
//!
//! ```text
//! seed = 7
//! steps = 200
//!
//! [optimizer]
//! name = singd
//! structure_k = block_diagonal(4)
//! precision = bf16
//! ```
//!
//! Keys may also be written with a dotted prefix (`optimizer.name = singd`).
//! At most two levels are allowed. `#` starts a comment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::TruncationOrder;
use crate::model::{Activation, GaussianBlobs, Loss};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::precision::{Format, PrecisionPolicy, QuantizePoint};
use crate::structured::StructureKind;

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "SINGD_SEED";

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    value: String,
    line: usize,
}

/// Parsed `key → value` pairs with their source lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    entries: BTreeMap<String, Entry>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::config(line, content, "unterminated section header"))?
                    .trim();
                if !is_identifier(name) {
                    return Err(Error::config(
                        line,
                        name,
                        "section names are single identifiers",
                    ));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::config(line, content, "expected `key = value`"))?;
            let key = key.trim();
            let full = match &section {
                Some(s) => format!("{s}.{key}"),
                None => key.to_string(),
            };
            let parts: Vec<&str> = full.split('.').collect();
            if parts.len() > 2 || !parts.iter().all(|p| is_identifier(p)) {
                return Err(Error::config(
                    line,
                    full,
                    "keys are `name` or `section.name` identifiers",
                ));
            }
            let value = value.trim().trim_matches('"').to_string();
            if let Some(prev) = entries.insert(full.clone(), Entry { value, line }) {
                return Err(Error::config(
                    line,
                    full,
                    format!("duplicate key (first set on line {})", prev.line),
                ));
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn line_of(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |e| e.line)
    }

    fn parse_value<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some(e) => e
                .value
                .parse::<T>()
                .map(Some)
                .map_err(|err| Error::config(e.line, key, err.to_string())),
        }
    }

    fn or<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        Ok(self.parse_value(key)?.unwrap_or(default))
    }

    fn list<T>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        let Some(e) = self.entries.get(key) else {
            return Ok(None);
        };
        e.value
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<T>()
                    .map_err(|err| Error::config(e.line, key, err.to_string()))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    fn invalid(&self, key: &str, message: impl Into<String>) -> Error {
        Error::config(self.line_of(key), key, message)
    }
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "steps",
    "batch_size",
    "eval_interval",
    "task.kind",
    "task.classes",
    "task.dim",
    "task.per_class",
    "task.noise",
    "task.test_fraction",
    "task.path",
    "task.d_in",
    "task.d_out",
    "task.cond",
    "model.hidden",
    "model.activation",
    "model.loss",
    "optimizer.name",
    "optimizer.beta1",
    "optimizer.beta2",
    "optimizer.alpha1",
    "optimizer.alpha2",
    "optimizer.lambda",
    "optimizer.gamma",
    "optimizer.update_interval",
    "optimizer.structure",
    "optimizer.structure_k",
    "optimizer.structure_c",
    "optimizer.truncation",
    "optimizer.precision",
    "optimizer.accumulation",
    "optimizer.quantize_points",
    "optimizer.adamw_decay_sign",
    "schedule.kind",
    "schedule.interval",
    "schedule.factor",
    "output.path",
    "output.timing",
];

#[derive(Debug, Clone, PartialEq)]
pub enum TaskSpec {
    GaussianBlobs {
        blobs: GaussianBlobs,
        test_fraction: f64,
    },
    /// Classification data read from `label,f0,f1,...` CSV.
    Csv { path: PathBuf, test_fraction: f64 },
    /// Single-layer Kronecker quadratic with exact curvature and
    /// `cond(A ⊗ B) = cond`.
    KroneckerQuadratic {
        d_in: usize,
        d_out: usize,
        cond: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub loss: Loss,
}

/// Multiplier applied to `β₂` at step `t` of `steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant,
    /// `½(1 + cos(πt/steps))`.
    Cosine,
    /// `factor^⌊t/interval⌋`.
    Step {
        interval: usize,
        factor: f64,
    },
}

impl Schedule {
    pub fn multiplier(&self, t: usize, steps: usize) -> f64 {
        match *self {
            Schedule::Constant => 1.0,
            Schedule::Cosine => {
                0.5 * (1.0 + (std::f64::consts::PI * t as f64 / steps as f64).cos())
            }
            Schedule::Step { interval, factor } => factor.powi((t / interval) as i32),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub model: ModelSpec,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: Schedule,
    /// Record metrics every this many steps (and after the last one).
    pub eval_interval: usize,
    /// CSV destination.
    pub output: PathBuf,
    /// Fill `wall_ms`; off by default so that reruns are byte-identical.
    pub timing: bool,
}

impl RunConfig {
    pub fn from_file(file: &ConfigFile) -> Result<Self> {
        if let Some(unknown) = file.keys().find(|k| !KNOWN_KEYS.contains(k)) {
            return Err(file.invalid(unknown, "unknown key"));
        }

        let task_kind = file.get("task.kind").unwrap_or("gaussian_blobs");
        let test_fraction: f64 = file.or("task.test_fraction", 0.2)?;
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(file.invalid("task.test_fraction", "must lie in [0, 1)"));
        }
        let task = match task_kind {
            "gaussian_blobs" | "blobs" => TaskSpec::GaussianBlobs {
                blobs: GaussianBlobs {
                    classes: file.or("task.classes", 3)?,
                    dim: file.or("task.dim", 4)?,
                    per_class: file.or("task.per_class", 50)?,
                    noise: file.or("task.noise", 0.5)?,
                },
                test_fraction,
            },
            "csv" => TaskSpec::Csv {
                path: file
                    .parse_value::<PathBuf>("task.path")?
                    .ok_or_else(|| file.invalid("task.kind", "csv task needs `task.path`"))?,
                test_fraction,
            },
            "kronecker_quadratic" | "quadratic" => TaskSpec::KroneckerQuadratic {
                d_in: file.or("task.d_in", 4)?,
                d_out: file.or("task.d_out", 4)?,
                cond: file.or("task.cond", 1e3)?,
            },
            other => {
                return Err(file.invalid(
                    "task.kind",
                    format!("unknown task `{other}` (gaussian_blobs | csv | kronecker_quadratic)"),
                ))
            }
        };
        if let TaskSpec::GaussianBlobs { blobs, .. } = &task {
            if blobs.classes < 2 || blobs.dim == 0 || blobs.per_class == 0 {
                return Err(file.invalid("task.classes", "need ≥2 classes, dim ≥1, per_class ≥1"));
            }
        }
        if let TaskSpec::KroneckerQuadratic { d_in, d_out, cond } = &task {
            if *d_in == 0 || *d_out == 0 || !(*cond >= 1.0) {
                return Err(file.invalid("task.cond", "need d_in, d_out ≥ 1 and cond ≥ 1"));
            }
        }

        let model = ModelSpec {
            hidden: file.list("model.hidden")?.unwrap_or_else(|| vec![16]),
            activation: file.or("model.activation", Activation::Tanh)?,
            loss: file.or("model.loss", Loss::SoftmaxCrossEntropy)?,
        };
        if model.hidden.contains(&0) {
            return Err(file.invalid("model.hidden", "hidden widths must be positive"));
        }

        let optimizer = optimizer_config(file)?;

        let schedule = match file.get("schedule.kind").unwrap_or("constant") {
            "constant" => Schedule::Constant,
            "cosine" => Schedule::Cosine,
            "step" => {
                let interval: usize = file.or("schedule.interval", 40)?;
                if interval == 0 {
                    return Err(file.invalid("schedule.interval", "must be at least 1"));
                }
                Schedule::Step {
                    interval,
                    factor: file.or("schedule.factor", 0.1)?,
                }
            }
            other => {
                return Err(file.invalid(
                    "schedule.kind",
                    format!("unknown schedule `{other}` (constant | cosine | step)"),
                ))
            }
        };

        let steps: usize = file.or("steps", 100)?;
        if steps == 0 {
            return Err(file.invalid("steps", "must be at least 1"));
        }
        let batch_size: usize = file.or("batch_size", 32)?;
        if batch_size == 0 {
            return Err(file.invalid("batch_size", "must be at least 1"));
        }
        let eval_interval: usize = file.or("eval_interval", 10)?;
        if eval_interval == 0 {
            return Err(file.invalid("eval_interval", "must be at least 1"));
        }

        Ok(Self {
            task,
            model,
            optimizer,
            steps,
            batch_size,
            seed: file.or("seed", 0)?,
            schedule,
            eval_interval,
            output: file.or("output.path", PathBuf::from("metrics.csv"))?,
            timing: file.or("output.timing", false)?,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_file(&ConfigFile::parse(text)?)
    }

    /// Reads `path` and applies the [`SEED_ENV`] override.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        Ok(cfg)
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|e| Error::config(0, SEED_ENV, format!("{e}")))?;
        }
        Ok(())
    }
}

fn optimizer_config(file: &ConfigFile) -> Result<OptimizerConfig> {
    let kind: OptimizerKind = file.or("optimizer.name", OptimizerKind::Singd)?;
    let base = OptimizerConfig::new(kind);
    let both: Option<StructureKind> = file.parse_value("optimizer.structure")?;
    let structure_k = file
        .parse_value("optimizer.structure_k")?
        .or(both)
        .unwrap_or(base.structure_k);
    let structure_c = file
        .parse_value("optimizer.structure_c")?
        .or(both)
        .unwrap_or(base.structure_c);

    let truncation = match file.parse_value::<u32>("optimizer.truncation")? {
        None => base.truncation,
        Some(n) => TruncationOrder::from_order(n)
            .ok_or_else(|| file.invalid("optimizer.truncation", "must be 1 or 2"))?,
    };

    let precision = match file.parse_value::<Format>("optimizer.precision")? {
        None if file.get("optimizer.accumulation").is_none()
            && file.get("optimizer.quantize_points").is_none() =>
        {
            base.precision.clone()
        }
        storage => {
            let storage = storage.unwrap_or(Format::Fp64);
            let default_acc = if storage == Format::Fp64 {
                Format::Fp64
            } else {
                Format::Fp32
            };
            let accumulation = file.or("optimizer.accumulation", default_acc)?;
            let points = file
                .list::<QuantizePoint>("optimizer.quantize_points")?
                .unwrap_or_else(|| QuantizePoint::ALL.to_vec());
            PrecisionPolicy::new(storage, accumulation, points)
                .map_err(|m| file.invalid("optimizer.accumulation", m))?
        }
    };

    let cfg = OptimizerConfig {
        kind,
        beta1: file.or("optimizer.beta1", base.beta1)?,
        beta2: file.or("optimizer.beta2", base.beta2)?,
        alpha1: file.or("optimizer.alpha1", base.alpha1)?,
        alpha2: file.or("optimizer.alpha2", base.alpha2)?,
        lambda: file.or("optimizer.lambda", base.lambda)?,
        gamma: file.or("optimizer.gamma", base.gamma)?,
        update_interval: file.or("optimizer.update_interval", base.update_interval)?,
        structure_k,
        structure_c,
        truncation,
        precision,
        adamw_decay_sign: file.or("optimizer.adamw_decay_sign", base.adamw_decay_sign)?,
    };
    cfg.validate().map_err(|e| {
        let message = match e {
            Error::Contract { detail, .. } => detail,
            other => other.to_string(),
        };
        file.invalid("optimizer.name", message)
    })?;
    Ok(cfg)
}
