//! Resolved experiment settings.
//!
//! Settings are layered: built-in desk-scale defaults, then an optional
//! `key = value` file (or the `#` header of an earlier output), then flags.

use std::collections::BTreeMap;
use std::path::Path;

use promptlab::prompt::{trainable_param_count, PromptDims, PromptKind};
use promptlab::tasks::TaskKind;
use promptlab::trainer::{Method, TrainConfig};
use promptlab::{BackboneConfig, Error, Result};

/// Every recognized key, in the order they are echoed.
pub const KEYS: &[&str] = &[
    "embed_dim",
    "n_layers",
    "n_heads",
    "ffn_dim",
    "vocab_size",
    "max_len",
    "method",
    "task",
    "train_size",
    "dev_size",
    "prompt_length",
    "bottleneck",
    "hidden",
    "target_std",
    "lr",
    "epochs",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "seed",
    "batch_size",
    "eval_every",
    "probe_every",
];

const ALIASES: &[(&str, &str)] = &[("e", "embed_dim"), ("c", "prompt_length"), ("b", "bottleneck"), ("h", "hidden")];

fn canonical(key: &str) -> Result<&'static str> {
    let key = key.trim();
    if let Some(k) = KEYS.iter().find(|k| **k == key) {
        return Ok(k);
    }
    ALIASES
        .iter()
        .find(|(alias, _)| *alias == key)
        .map(|(_, k)| *k)
        .ok_or_else(|| Error::Usage(format!("unknown setting {key:?}")))
}

/// Raw settings before typing. Later layers overwrite earlier ones.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings(BTreeMap<&'static str, String>);

impl Settings {
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        self.0.insert(canonical(key)?, value.into());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.0.contains_key(key)
    }

    pub fn merge(&mut self, other: &Settings) {
        for (k, v) in &other.0 {
            self.0.insert(k, v.clone());
        }
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn parse_file(text: &str) -> Result<Self> {
        let mut out = Settings::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            out.set(k, v.trim())?;
        }
        Ok(out)
    }

    /// Recovers the settings echoed as `# key = value` at the top of an
    /// output file.
    pub fn parse_header(text: &str) -> Result<Self> {
        let mut out = Settings::default();
        for line in text.lines() {
            let Some(rest) = line.strip_prefix('#') else {
                break;
            };
            if let Some((k, v)) = rest.split_once('=') {
                if let Ok(key) = canonical(k) {
                    out.0.insert(key, v.trim().to_string());
                }
            }
        }
        if out.0.is_empty() {
            return Err(Error::Usage("no settings header found".into()));
        }
        Ok(out)
    }

    pub fn read(path: &Path, header: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        if header {
            Self::parse_header(&text)
        } else {
            Self::parse_file(&text)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub task: TaskKind,
    pub train_size: usize,
    pub dev_size: usize,
    pub dims: PromptDims,
    pub target_std: f64,
    pub probe_every: usize,
}

fn parse<T: std::str::FromStr>(s: &Settings, key: &str, default: T) -> Result<T> {
    match s.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| Error::Usage(format!("invalid value {v:?} for {key}"))),
    }
}

impl ExperimentConfig {
    /// Fills every unset key with its desk-scale default. Learning rate,
    /// epochs and weight decay default per method.
    pub fn resolve(s: &Settings) -> Result<Self> {
        let method = Method::parse(s.get("method").unwrap_or("dpt"))?;
        let task = match s.get("task") {
            Some(t) => TaskKind::parse(t).map_err(|_| Error::Usage(format!("unknown task {t:?}")))?,
            None => TaskKind::Majority,
        };
        let base = BackboneConfig::default();
        let backbone = BackboneConfig {
            embed_dim: parse(s, "embed_dim", base.embed_dim)?,
            n_layers: parse(s, "n_layers", base.n_layers)?,
            n_heads: parse(s, "n_heads", base.n_heads)?,
            ffn_dim: parse(s, "ffn_dim", base.ffn_dim)?,
            vocab_size: parse(s, "vocab_size", base.vocab_size)?,
            max_len: parse(s, "max_len", base.max_len)?,
        };
        let t = TrainConfig::desk(method);
        let train = TrainConfig {
            method,
            lr: parse(s, "lr", t.lr)?,
            epochs: parse(s, "epochs", t.epochs)?,
            beta1: parse(s, "beta1", t.beta1)?,
            beta2: parse(s, "beta2", t.beta2)?,
            eps: parse(s, "eps", t.eps)?,
            weight_decay: parse(s, "weight_decay", t.weight_decay)?,
            seed: parse(s, "seed", t.seed)?,
            batch_size: parse(s, "batch_size", t.batch_size)?,
            eval_every: parse(s, "eval_every", t.eval_every)?,
        };
        train.validate()?;
        let dims = PromptDims::new(backbone.embed_dim, parse(s, "prompt_length", 16)?)
            .with_bottleneck(parse(s, "bottleneck", 4)?)
            .with_hidden(parse(s, "hidden", 16)?);
        if let Method::Prompt(kind) = method {
            dims.validate(kind)?;
        }
        Ok(ExperimentConfig {
            backbone,
            train,
            task,
            train_size: parse(s, "train_size", 128)?,
            dev_size: parse(s, "dev_size", 200)?,
            dims,
            target_std: parse(s, "target_std", 1.0)?,
            probe_every: parse(s, "probe_every", promptlab::probe::DEFAULT_PROBE_EVERY)?,
        })
    }

    /// All settings, in [`KEYS`] order.
    pub fn echo(&self) -> Vec<(&'static str, String)> {
        let b = &self.backbone;
        let t = &self.train;
        let values = [
            b.embed_dim.to_string(),
            b.n_layers.to_string(),
            b.n_heads.to_string(),
            b.ffn_dim.to_string(),
            b.vocab_size.to_string(),
            b.max_len.to_string(),
            t.method.to_string(),
            self.task.name().to_string(),
            self.train_size.to_string(),
            self.dev_size.to_string(),
            self.dims.length.to_string(),
            self.dims.bottleneck.to_string(),
            self.dims.hidden.to_string(),
            self.target_std.to_string(),
            t.lr.to_string(),
            t.epochs.to_string(),
            t.beta1.to_string(),
            t.beta2.to_string(),
            t.eps.to_string(),
            t.weight_decay.to_string(),
            t.seed.to_string(),
            t.batch_size.to_string(),
            t.eval_every.to_string(),
            self.probe_every.to_string(),
        ];
        KEYS.iter().copied().zip(values).collect()
    }

    /// `# key = value` lines for the top of an output file.
    pub fn header(&self) -> String {
        self.echo().iter().map(|(k, v)| format!("# {k} = {v}\n")).collect()
    }

    /// Formula count for the configured method. Full fine-tuning counts
    /// every backbone weight and needs a constructed backbone, so it is
    /// `None` here.
    pub fn trainable_params(&self) -> Option<usize> {
        match self.train.method {
            Method::Prompt(kind) => Some(trainable_param_count(kind, self.dims)),
            Method::FullFineTune => None,
        }
    }

    pub fn prompt_kind(&self) -> Option<PromptKind> {
        match self.train.method {
            Method::Prompt(kind) => Some(kind),
            Method::FullFineTune => None,
        }
    }
}
