//! Training runs, sweeps and few-shot comparisons.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use promptlab::probe::{probe_run, probes_to_csv};
use promptlab::prompt::{export_file_name, export_product, trainable_param_count, InitOptions, PromptParams};
use promptlab::tasks::{generate, TaskSpec, TextToTextExample};
use promptlab::trainer::{few_shot_sample, subset_hash, train_full, train_prompt, Method, RunLog};
use promptlab::{Backbone, Error, Result};

use crate::config::{ExperimentConfig, Settings};
use crate::output::write_atomic;

/// Result of one training run.
#[derive(Debug)]
pub struct Outcome {
    pub log: RunLog,
    pub prompt: Option<PromptParams>,
}

/// Trains the configured method on `train`, scoring on `dev`. Prompt
/// methods fail with an invariant error if the backbone changes.
pub fn run_one(
    backbone: &Backbone,
    cfg: &ExperimentConfig,
    train: &[TextToTextExample],
    dev: &[TextToTextExample],
) -> Result<Outcome> {
    match cfg.train.method {
        Method::FullFineTune => {
            let mut tuned = backbone.clone();
            let log = train_full(&mut tuned, train, dev, &cfg.train)?;
            Ok(Outcome { log, prompt: None })
        }
        Method::Prompt(kind) => {
            let before = backbone.checksum();
            let mut params = PromptParams::init(
                kind,
                cfg.dims,
                Some(&backbone.embedding),
                InitOptions {
                    target_std: cfg.target_std,
                },
                cfg.train.seed,
            )?;
            let log = if kind == promptlab::PromptKind::RankProbe {
                probe_run(backbone, &mut params, train, dev, &cfg.train, cfg.probe_every)?.1
            } else {
                train_prompt(backbone, &mut params, train, dev, &cfg.train, None)?
            };
            if backbone.checksum() != before {
                return Err(Error::Invariant("backbone weights changed during prompt tuning".into()));
            }
            Ok(Outcome {
                log,
                prompt: Some(params),
            })
        }
    }
}

pub fn datasets(cfg: &ExperimentConfig) -> Result<(Vec<TextToTextExample>, Vec<TextToTextExample>)> {
    generate(&TaskSpec::new(cfg.task, cfg.train_size, cfg.dev_size, cfg.train.seed))
}

/// Checks that a loaded backbone agrees with any explicitly set
/// architecture keys, then adopts its shape.
pub fn adopt_backbone(cfg: &mut ExperimentConfig, settings: &Settings, backbone: &Backbone) -> Result<()> {
    let b = backbone.config();
    let explicit = [
        ("embed_dim", b.embed_dim),
        ("n_layers", b.n_layers),
        ("n_heads", b.n_heads),
        ("ffn_dim", b.ffn_dim),
        ("vocab_size", b.vocab_size),
        ("max_len", b.max_len),
    ];
    for (key, actual) in explicit {
        if let Some(v) = settings.get(key) {
            if v.parse::<usize>().ok() != Some(actual) {
                return Err(Error::Config(format!("{key} = {v} but the checkpoint has {actual}")));
            }
        }
    }
    cfg.backbone = b.clone();
    cfg.dims.embed_dim = b.embed_dim;
    Ok(())
}

/// Files written by [`write_run`].
#[derive(Debug, Default)]
pub struct Written {
    pub log: PathBuf,
    pub probes: Option<PathBuf>,
    pub prompt: Option<PathBuf>,
}

pub fn run_file_stem(cfg: &ExperimentConfig) -> String {
    format!("{}-{}-seed{}", cfg.train.method, cfg.task.name(), cfg.train.seed)
}

pub fn write_run(dir: &Path, cfg: &ExperimentConfig, outcome: &Outcome) -> Result<Written> {
    let stem = run_file_stem(cfg);
    let log = dir.join(format!("{stem}.csv"));
    write_atomic(&log, format!("{}{}", cfg.header(), outcome.log.to_csv()).as_bytes())?;
    let mut written = Written {
        log,
        ..Default::default()
    };
    if !outcome.log.probes.is_empty() {
        let path = dir.join(format!("{stem}-probe.csv"));
        write_atomic(&path, format!("{}{}", cfg.header(), probes_to_csv(&outcome.log.probes)).as_bytes())?;
        written.probes = Some(path);
    }
    if let Some(PromptParams::Decomposed(dpt)) = &outcome.prompt {
        let kind = promptlab::PromptKind::Decomposed;
        let path = dir.join(export_file_name(kind, cfg.dims, cfg.train.seed));
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        written.prompt = Some(export_product(dpt, &path)?);
    }
    Ok(written)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Bottleneck,
    Length,
    ShortPrompt,
    OverParam,
}

impl SweepParam {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "bottleneck" => Ok(SweepParam::Bottleneck),
            "length" => Ok(SweepParam::Length),
            "shortprompt" => Ok(SweepParam::ShortPrompt),
            "overparam" => Ok(SweepParam::OverParam),
            _ => Err(Error::Usage(format!(
                "unknown sweep {name:?}; known: bottleneck, length, shortprompt, overparam"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Bottleneck => "bottleneck",
            SweepParam::Length => "length",
            SweepParam::ShortPrompt => "shortprompt",
            SweepParam::OverParam => "overparam",
        }
    }

    pub fn preset(self) -> Vec<usize> {
        match self {
            SweepParam::Bottleneck => vec![4, 6, 8, 10, 12, 14],
            SweepParam::Length => vec![20, 100, 200],
            SweepParam::ShortPrompt => vec![6, 10],
            SweepParam::OverParam => vec![10, 1000, 10000],
        }
    }

    /// Applies one sweep value. Bottleneck and over-parameterized sweeps vary
    /// `b`; length sweeps vary `c`; the short-prompt regime varies `c` with
    /// `b = 2`.
    pub fn apply(self, base: &ExperimentConfig, value: usize) -> ExperimentConfig {
        let mut cfg = base.clone();
        match self {
            SweepParam::Bottleneck | SweepParam::OverParam => cfg.dims.bottleneck = value,
            SweepParam::Length => cfg.dims.length = value,
            SweepParam::ShortPrompt => {
                cfg.dims.length = value;
                cfg.dims.bottleneck = 2;
            }
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub value: usize,
    pub length: usize,
    pub bottleneck: usize,
    pub trainable_params: usize,
    pub accuracies: Vec<f64>,
}

impl SweepPoint {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.accuracies.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Runs every value for seeds `base.seed .. base.seed + seeds`.
pub fn sweep(
    backbone: &Backbone,
    base: &ExperimentConfig,
    param: SweepParam,
    values: &[usize],
    seeds: usize,
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::Usage("sweep needs at least one value".into()));
    }
    if seeds == 0 {
        return Err(Error::Usage("sweep needs at least one seed".into()));
    }
    let kind = base
        .prompt_kind()
        .ok_or_else(|| Error::Usage("sweeps vary prompt shape; full-ft has none".into()))?;
    let mut points = Vec::new();
    for &value in values {
        let point_cfg = param.apply(base, value);
        point_cfg.dims.validate(kind)?;
        let mut accuracies = Vec::new();
        for s in 0..seeds as u64 {
            let mut cfg = point_cfg.clone();
            cfg.train.seed = base.train.seed + s;
            let (train, dev) = datasets(&cfg)?;
            log::info!("sweep {} = {value}, seed {}", param.name(), cfg.train.seed);
            accuracies.push(run_one(backbone, &cfg, &train, &dev)?.log.final_accuracy);
        }
        points.push(SweepPoint {
            value,
            length: point_cfg.dims.length,
            bottleneck: point_cfg.dims.bottleneck,
            trainable_params: trainable_param_count(kind, point_cfg.dims),
            accuracies,
        });
    }
    Ok(points)
}

pub fn sweep_csv(param: SweepParam, points: &[SweepPoint]) -> String {
    let mut out = String::from("param,value,prompt_length,bottleneck,trainable_params,mean,min,max,accuracies\n");
    for p in points {
        let accs: Vec<String> = p.accuracies.iter().map(f64::to_string).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            param.name(),
            p.value,
            p.length,
            p.bottleneck,
            p.trainable_params,
            p.mean(),
            p.min(),
            p.max(),
            accs.join(";")
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct FewShotRow {
    pub k: usize,
    pub seed: u64,
    pub method: Method,
    pub subset_hash: u64,
    pub accuracy: f64,
}

/// For each `k` and seed, draws one subset from the training pool and
/// trains every method on it. Settings not fixed explicitly (learning rate,
/// epochs, decay) follow each method's defaults.
pub fn few_shot(
    backbone: &Backbone,
    settings: &Settings,
    ks: &[usize],
    seeds: usize,
    methods: &[Method],
) -> Result<Vec<FewShotRow>> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Usage("few-shot sizes must be at least 1".into()));
    }
    if methods.is_empty() || seeds == 0 {
        return Err(Error::Usage("few-shot needs at least one method and one seed".into()));
    }
    let mut rows = Vec::new();
    for &k in ks {
        for s in 0..seeds as u64 {
            let mut subset_hashes = Vec::new();
            for &method in methods {
                let mut local = settings.clone();
                local.set("method", method.name())?;
                let mut cfg = ExperimentConfig::resolve(&local)?;
                adopt_backbone(&mut cfg, settings, backbone)?;
                cfg.train.seed += s;
                let (pool, dev) = datasets(&cfg)?;
                let subset = few_shot_sample(&pool, k, cfg.train.seed)?;
                let hash = subset_hash(&subset);
                subset_hashes.push(hash);
                log::info!("few-shot k = {k}, seed {}, {method}", cfg.train.seed);
                let outcome = run_one(backbone, &cfg, &subset, &dev)?;
                rows.push(FewShotRow {
                    k,
                    seed: cfg.train.seed,
                    method,
                    subset_hash: hash,
                    accuracy: outcome.log.final_accuracy,
                });
            }
            if subset_hashes.windows(2).any(|w| w[0] != w[1]) {
                return Err(Error::Invariant(format!("methods saw different subsets at k = {k}")));
            }
        }
    }
    Ok(rows)
}

pub fn few_shot_csv(rows: &[FewShotRow]) -> String {
    let mut out = String::from("k,seed,method,subset_hash,accuracy\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{:016x},{}", r.k, r.seed, r.method, r.subset_hash, r.accuracy);
    }
    out.push_str("k,method,mean_accuracy\n");
    let mut groups: Vec<(usize, Method, Vec<f64>)> = Vec::new();
    for r in rows {
        match groups.iter_mut().find(|g| g.0 == r.k && g.1 == r.method) {
            Some(g) => g.2.push(r.accuracy),
            None => groups.push((r.k, r.method, vec![r.accuracy])),
        }
    }
    for (k, method, accs) in groups {
        let _ = writeln!(out, "{k},{method},{}", accs.iter().sum::<f64>() / accs.len() as f64);
    }
    out
}
