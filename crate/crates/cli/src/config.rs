//! Flat key-value experiment configuration.
//!
//! A TOML document is flattened to dotted keys (`policy.clip_epsilon`), then
//! every key is applied in turn; `--set key=value` overrides use the same
//! path. Unknown keys are rejected.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use asr_core::asrloop::{AsrConfig, DatasetSpec, LossKind, SamplerKind, StateMode};
use asr_core::asrloop::{BENCHMARK_EPOCHS, BENCHMARK_PER_CLASS, BENCHMARK_SPREAD};
use asr_core::losses::Reduction;
use asr_core::metrics::MetricWeights;
use toml::{Table, Value};

use crate::error::CliError;

/// Initial logits of the bandit testbed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BanditInit {
    Uniform,
    /// Probability `prob` on `action`, the rest shared equally.
    Skewed { action: usize, prob: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct BanditConfig {
    pub rewards: Vec<f64>,
    pub init: BanditInit,
    pub steps: usize,
    pub lr: f64,
    pub threshold: f64,
}

impl Default for BanditConfig {
    fn default() -> Self {
        Self {
            rewards: vec![1.0, 0.0],
            init: BanditInit::Uniform,
            steps: 1000,
            lr: 0.1,
            threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct DatasetFields {
    kind: String,
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    val_fraction: f64,
    path: Option<PathBuf>,
    header: bool,
}

impl Default for DatasetFields {
    fn default() -> Self {
        Self {
            kind: "blobs".into(),
            classes: 8,
            per_class: BENCHMARK_PER_CLASS,
            dim: 20,
            spread: BENCHMARK_SPREAD,
            val_fraction: 0.15,
            path: None,
            header: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub run: AsrConfig,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    dataset: DatasetFields,
    /// Dip threshold for the initial-distribution ablation.
    pub dip_delta: f64,
    pub compare_samplers: Vec<SamplerKind>,
    pub compare_losses: Vec<LossKind>,
    pub bandit: BanditConfig,
    /// Encoder checkpoint for `eval`; defaults to the `train` output.
    pub eval_checkpoint: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run: AsrConfig {
                epochs: BENCHMARK_EPOCHS,
                ..AsrConfig::default()
            },
            seeds: (0..10).collect(),
            out: PathBuf::from("runs"),
            dataset: DatasetFields::default(),
            dip_delta: 0.01,
            compare_samplers: SamplerKind::ALL.to_vec(),
            compare_losses: vec![LossKind::Triplet, LossKind::Margin],
            bandit: BanditConfig::default(),
            eval_checkpoint: None,
        }
    }
}

/// Every accepted key with its default, in documentation order.
pub const KEYS: &[(&str, &str)] = &[
    ("seeds", "[0, 1, ..., 9]"),
    ("out", "\"runs\""),
    ("loss", "\"triplet\""),
    ("sampler", "\"asr_ppo\""),
    ("init", "\"normal_low\""),
    ("epochs", "10"),
    ("inner_iters", "20"),
    ("batch.classes", "4"),
    ("batch.per_class", "8"),
    ("metric_weights", "\"recall@1:0.5,nmi:0.5\""),
    ("bins", "10"),
    ("multiplier", "2.0"),
    ("state", "\"augmented\""),
    ("policy.hidden", "32"),
    ("policy.lr", "0.003"),
    ("policy.clip_epsilon", "0.2"),
    ("policy.ppo_epochs", "4"),
    ("policy.eta", "0.95"),
    ("policy.baseline", "true"),
    ("policy.old_sync_every", "1"),
    ("encoder.hidden", "64"),
    ("encoder.out_dim", "16"),
    ("adam.lr", "0.001"),
    ("adam.beta1", "0.9"),
    ("adam.beta2", "0.999"),
    ("adam.eps", "1e-8"),
    ("losses.triplet_margin", "0.2"),
    ("losses.contrastive_margin", "1.0"),
    ("losses.margin_gamma", "0.2"),
    ("losses.beta", "0.6"),
    ("losses.beta_lr", "0.0005"),
    ("losses.margin_reduction", "\"sum\""),
    ("dataset.kind", "\"blobs\""),
    ("dataset.classes", "8"),
    ("dataset.per_class", "100"),
    ("dataset.dim", "20"),
    ("dataset.spread", "1.5"),
    ("dataset.val_fraction", "0.15"),
    ("dataset.path", "unset"),
    ("dataset.header", "false"),
    ("ablation.delta", "0.01"),
    ("compare.samplers", "all five"),
    ("compare.losses", "[\"triplet\", \"margin\"]"),
    ("bandit.rewards", "[1.0, 0.0]"),
    ("bandit.init", "\"uniform\""),
    ("bandit.skew_action", "1"),
    ("bandit.skew_prob", "0.99"),
    ("bandit.steps", "1000"),
    ("bandit.lr", "0.1"),
    ("bandit.threshold", "0.5"),
    ("eval.checkpoint", "unset"),
];

fn type_error(key: &str, expected: &str, v: &Value) -> CliError {
    CliError::Config(format!("`{key}` expects {expected}, got `{v}`"))
}

fn as_f64(key: &str, v: &Value) -> Result<f64, CliError> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(type_error(key, "a number", v)),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize, CliError> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(type_error(key, "a non-negative integer", v)),
    }
}

fn as_bool(key: &str, v: &Value) -> Result<bool, CliError> {
    v.as_bool().ok_or_else(|| type_error(key, "true or false", v))
}

fn as_str<'v>(key: &str, v: &'v Value) -> Result<&'v str, CliError> {
    v.as_str().ok_or_else(|| type_error(key, "a string", v))
}

fn parsed<T: FromStr>(key: &str, v: &Value) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    as_str(key, v)?
        .parse()
        .map_err(|e: T::Err| CliError::Config(format!("`{key}`: {e}")))
}

fn list<T>(key: &str, v: &Value, item: impl Fn(&str, &Value) -> Result<T, CliError>) -> Result<Vec<T>, CliError> {
    v.as_array()
        .ok_or_else(|| type_error(key, "a list", v))?
        .iter()
        .map(|x| item(key, x))
        .collect()
}

fn flatten(prefix: &str, table: &Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

/// Parse the right-hand side of `--set key=value` as a TOML value, falling
/// back to a bare string.
pub fn parse_override(raw: &str) -> Result<(String, Value), CliError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{raw}` is not key=value")))?;
    let key = key.trim().to_string();
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()));
    Ok((key, parsed))
}

impl ExperimentConfig {
    /// Defaults, then the file (if any), then overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            let table: Table = text
                .parse()
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let mut entries = Vec::new();
            flatten("", &table, &mut entries);
            for (k, v) in entries {
                cfg.set(&k, &v)?;
            }
        }
        for raw in overrides {
            let (k, v) = parse_override(raw)?;
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &Value) -> Result<(), CliError> {
        let r = &mut self.run;
        match key {
            "seeds" => self.seeds = list(key, v, |k, x| as_usize(k, x).map(|s| s as u64))?,
            "out" => self.out = PathBuf::from(as_str(key, v)?),
            "loss" => r.loss = parsed(key, v)?,
            "sampler" => r.sampler = parsed(key, v)?,
            "init" => r.init = parsed(key, v)?,
            "epochs" => r.epochs = as_usize(key, v)?,
            "inner_iters" => r.inner_iters = as_usize(key, v)?,
            "batch.classes" => r.batch_classes = as_usize(key, v)?,
            "batch.per_class" => r.batch_per_class = as_usize(key, v)?,
            "metric_weights" => r.metric_weights = parsed::<MetricWeights>(key, v)?,
            "bins" => r.bins = as_usize(key, v)?,
            "multiplier" => r.multiplier = as_f64(key, v)?,
            "state" => r.state_mode = parsed::<StateMode>(key, v)?,
            "policy.hidden" => r.policy.hidden = as_usize(key, v)?,
            "policy.lr" => r.policy.lr = as_f64(key, v)?,
            "policy.clip_epsilon" => r.policy.clip_epsilon = as_f64(key, v)?,
            "policy.ppo_epochs" => r.policy.ppo_epochs = as_usize(key, v)?,
            "policy.eta" => r.policy.eta = as_f64(key, v)?,
            "policy.baseline" => r.policy.baseline = as_bool(key, v)?,
            "policy.old_sync_every" => r.policy.old_sync_every = as_usize(key, v)?,
            "encoder.hidden" => r.encoder.hidden = as_usize(key, v)?,
            "encoder.out_dim" => r.encoder.out_dim = as_usize(key, v)?,
            "adam.lr" => r.adam.lr = as_f64(key, v)?,
            "adam.beta1" => r.adam.beta1 = as_f64(key, v)?,
            "adam.beta2" => r.adam.beta2 = as_f64(key, v)?,
            "adam.eps" => r.adam.eps = as_f64(key, v)?,
            "losses.triplet_margin" => r.losses.triplet_margin = as_f64(key, v)?,
            "losses.contrastive_margin" => r.losses.contrastive_margin = as_f64(key, v)?,
            "losses.margin_gamma" => r.losses.margin_gamma = as_f64(key, v)?,
            "losses.beta" => r.losses.beta = as_f64(key, v)?,
            "losses.beta_lr" => r.losses.beta_lr = as_f64(key, v)?,
            "losses.margin_reduction" => {
                r.losses.margin_reduction = match as_str(key, v)? {
                    "sum" => Reduction::Sum,
                    "mean" => Reduction::Mean,
                    other => return Err(CliError::Config(format!("`{key}`: unknown reduction `{other}`"))),
                }
            }
            "dataset.kind" => self.dataset.kind = as_str(key, v)?.to_string(),
            "dataset.classes" => self.dataset.classes = as_usize(key, v)?,
            "dataset.per_class" => self.dataset.per_class = as_usize(key, v)?,
            "dataset.dim" => self.dataset.dim = as_usize(key, v)?,
            "dataset.spread" => self.dataset.spread = as_f64(key, v)?,
            "dataset.val_fraction" => self.dataset.val_fraction = as_f64(key, v)?,
            "dataset.path" => self.dataset.path = Some(PathBuf::from(as_str(key, v)?)),
            "dataset.header" => self.dataset.header = as_bool(key, v)?,
            "ablation.delta" => self.dip_delta = as_f64(key, v)?,
            "compare.samplers" => self.compare_samplers = list(key, v, parsed)?,
            "compare.losses" => self.compare_losses = list(key, v, parsed)?,
            "bandit.rewards" => self.bandit.rewards = list(key, v, as_f64)?,
            "bandit.init" => {
                self.bandit.init = match as_str(key, v)? {
                    "uniform" => BanditInit::Uniform,
                    "skewed" => match self.bandit.init {
                        BanditInit::Skewed { .. } => self.bandit.init,
                        BanditInit::Uniform => BanditInit::Skewed { action: 1, prob: 0.99 },
                    },
                    other => return Err(CliError::Config(format!("`{key}`: unknown init `{other}`"))),
                }
            }
            "bandit.skew_action" | "bandit.skew_prob" => {
                let (mut action, mut prob) = match self.bandit.init {
                    BanditInit::Skewed { action, prob } => (action, prob),
                    BanditInit::Uniform => (1, 0.99),
                };
                if key == "bandit.skew_action" {
                    action = as_usize(key, v)?;
                } else {
                    prob = as_f64(key, v)?;
                }
                self.bandit.init = BanditInit::Skewed { action, prob };
            }
            "bandit.steps" => self.bandit.steps = as_usize(key, v)?,
            "bandit.lr" => self.bandit.lr = as_f64(key, v)?,
            "bandit.threshold" => self.bandit.threshold = as_f64(key, v)?,
            "eval.checkpoint" => self.eval_checkpoint = Some(PathBuf::from(as_str(key, v)?)),
            _ => return Err(CliError::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("`seeds` must not be empty".into()));
        }
        self.run.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.dataset()?;
        if !(self.dip_delta > 0.0) {
            return Err(CliError::Config("`ablation.delta` must be positive".into()));
        }
        if self.compare_samplers.is_empty() || self.compare_losses.is_empty() {
            return Err(CliError::Config("comparison needs at least one sampler and one loss".into()));
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<DatasetSpec, CliError> {
        let d = &self.dataset;
        if !(0.0..1.0).contains(&d.val_fraction) {
            return Err(CliError::Config("`dataset.val_fraction` must lie in [0, 1)".into()));
        }
        match d.kind.as_str() {
            "blobs" => {
                if d.classes < 4 || d.per_class < 2 || d.dim == 0 || !(d.spread > 0.0) {
                    return Err(CliError::Config(
                        "blobs need >= 4 classes, >= 2 per class, dim >= 1 and spread > 0".into(),
                    ));
                }
                Ok(DatasetSpec::Blobs {
                    classes: d.classes,
                    per_class: d.per_class,
                    dim: d.dim,
                    spread: d.spread,
                    val_fraction: d.val_fraction,
                })
            }
            "csv" => Ok(DatasetSpec::Csv {
                path: d
                    .path
                    .clone()
                    .ok_or_else(|| CliError::Config("`dataset.kind = \"csv\"` needs `dataset.path`".into()))?,
                header: d.header,
                val_fraction: d.val_fraction,
            }),
            other => Err(CliError::Config(format!("`dataset.kind`: unknown kind `{other}`"))),
        }
    }

    /// Run configuration for one seed.
    pub fn for_seed(&self, seed: u64) -> AsrConfig {
        AsrConfig {
            seed,
            ..self.run.clone()
        }
    }
}
