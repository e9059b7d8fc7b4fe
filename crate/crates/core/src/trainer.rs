//! Prompt tuning against a frozen backbone, the full fine-tuning baseline,
//! and few-shot subsampling.
//!
//! Batches are formed by gradient accumulation over single sequences. Every
//! random choice (initial shuffle order per epoch, few-shot subsets) is drawn
//! from a ChaCha stream seeded by the run seed, so a run is a pure function of
//! its inputs.

use std::fmt::{self, Write as _};
use std::hash::Hasher;

use fnv::FnvHasher;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::probe::ProbeRecord;
use crate::prompt::{PromptKind, PromptParams};
use crate::tasks::TextToTextExample;
use crate::tensor::{Tensor, TensorId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Prompt(PromptKind),
    FullFineTune,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Prompt(k) => k.name(),
            Method::FullFineTune => "full-ft",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        if name == "full-ft" {
            return Ok(Method::FullFineTune);
        }
        PromptKind::parse(name)
            .map(Method::Prompt)
            .map_err(|_| Error::Usage(format!("unknown method {name:?}; known: vanilla, dpt, residual, rank-probe, full-ft")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub lr: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub batch_size: usize,
    /// Evaluate on the dev set every this many epochs (and after the last).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Prompt(PromptKind::Decomposed),
            lr: 0.3,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            batch_size: 8,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    /// Settings for the desk-scale backbone. Prompt methods use a tenth of
    /// the default rate; full fine-tuning uses `3e-4` without decay.
    pub fn desk(method: Method) -> Self {
        match method {
            Method::Prompt(_) => TrainConfig {
                method,
                lr: 0.03,
                ..Default::default()
            },
            Method::FullFineTune => TrainConfig {
                method,
                lr: 3e-4,
                weight_decay: 0.0,
                epochs: 20,
                ..Default::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("epochs, batch_size and eval_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Key-value echo written into run logs.
    pub fn echo(&self) -> Vec<(String, String)> {
        vec![
            ("method".into(), self.method.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("beta1".into(), self.beta1.to_string()),
            ("beta2".into(), self.beta2.to_string()),
            ("eps".into(), self.eps.to_string()),
            ("weight_decay".into(), self.weight_decay.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("eval_every".into(), self.eval_every.to_string()),
        ]
    }
}

/// Names of the frozen (θ) and trainable (θ_P) tensors of a run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterPartition {
    pub frozen: Vec<String>,
    pub trainable: Vec<String>,
}

impl ParameterPartition {
    pub fn for_prompt(backbone: &Backbone, prompt: &PromptParams) -> Self {
        ParameterPartition {
            frozen: backbone.named_tensors().into_iter().map(|(n, _)| n).collect(),
            trainable: prompt.named_tensors().into_iter().map(|(n, _)| format!("prompt.{n}")).collect(),
        }
    }

    pub fn for_full(backbone: &Backbone) -> Self {
        ParameterPartition {
            frozen: Vec::new(),
            trainable: backbone.named_tensors().into_iter().map(|(n, _)| n).collect(),
        }
    }

    pub fn is_disjoint(&self) -> bool {
        self.frozen.iter().all(|n| !self.trainable.contains(n))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub config: Vec<(String, String)>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub final_accuracy: f64,
    pub trainable_params: usize,
    /// Set when a non-finite loss stopped the run.
    pub aborted: bool,
    pub probes: Vec<ProbeRecord>,
}

impl RunLog {
    /// `step,loss` and `epoch,accuracy` sections followed by a summary line.
    /// Config entries are not included; callers prepend them as `#` headers.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for s in &self.steps {
            let _ = writeln!(out, "{},{}", s.step, s.loss);
        }
        out.push_str("epoch,accuracy\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{}", e.epoch, e.accuracy);
        }
        let echo = self
            .config
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";");
        let _ = writeln!(
            out,
            "summary,final_accuracy={},trainable_params={},aborted={},config={}",
            self.final_accuracy, self.trainable_params, self.aborted, echo
        );
        out
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

/// Exact-match accuracy of greedy decoding against each example's target.
/// Decoding runs for exactly `target.len()` steps, so a missing EOS after a
/// correct label is not penalized.
pub fn evaluate(backbone: &Backbone, prompt: Option<&Tensor>, data: &[TextToTextExample]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for ex in data {
        let out = backbone.greedy_decode(prompt, &ex.input, ex.target.len().max(1))?;
        if out == ex.target {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

fn epoch_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x7261_6e6b_5f70_726f)
}

/// Observer hook called with the optimizer step count (0 before training)
/// and the current prompt parameters.
pub type StepObserver<'o> = dyn FnMut(usize, &PromptParams) -> Result<()> + 'o;

/// Tunes `prompt` against a frozen `backbone`. Only the prompt's tensors
/// get optimizer state; a gradient reaching any backbone tensor aborts with
/// [`Error::Invariant`].
pub fn train_prompt(
    backbone: &Backbone,
    prompt: &mut PromptParams,
    train: &[TextToTextExample],
    dev: &[TextToTextExample],
    config: &TrainConfig,
    mut observer: Option<&mut StepObserver<'_>>,
) -> Result<RunLog> {
    config.validate()?;
    if !backbone.is_frozen() {
        return Err(Error::Invariant("prompt tuning requires a frozen backbone".into()));
    }
    if prompt.embed_dim() != backbone.config().embed_dim {
        return Err(Error::Config(format!(
            "prompt embedding dimension {} does not match backbone {}",
            prompt.embed_dim(),
            backbone.config().embed_dim
        )));
    }
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let frozen_ids: Vec<TensorId> = backbone.named_tensors().iter().map(|(_, t)| t.id()).collect();
    let mut optimizer = AdamW::new(config.optimizer(), &prompt.tensors());
    let mut rng = shuffle_rng(config.seed);
    let mut log = RunLog {
        config: config.echo(),
        trainable_params: prompt.trainable_count(),
        ..Default::default()
    };
    if let Some(obs) = observer.as_mut() {
        obs(0, prompt)?;
    }
    let mut step = 0;
    'epochs: for epoch in 1..=config.epochs {
        let order = epoch_order(train.len(), &mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut batch_loss = 0.0;
            for &i in batch {
                let ex = &train[i];
                let (loss, grads) = {
                    let mut t = Tape::new();
                    let p = prompt.materialize_on(&mut t)?;
                    let (loss, _) = backbone.loss_on_tape(&mut t, Some(p), &ex.input, &ex.target)?;
                    (t.scalar(loss), t.backward(loss)?)
                };
                if frozen_ids.iter().any(|&id| grads.touches_id(id)) {
                    return Err(Error::Invariant("gradient reached a frozen backbone tensor".into()));
                }
                for tensor in prompt.tensors_mut() {
                    grads.accumulate_into(tensor);
                }
                batch_loss += loss;
            }
            step += 1;
            let mean = batch_loss / batch.len() as f64;
            log.steps.push(StepRecord { step, loss: mean });
            if !mean.is_finite() {
                log.aborted = true;
                break 'epochs;
            }
            optimizer.step(&mut prompt.tensors_mut(), 1.0 / batch.len() as f64);
            if let Some(obs) = observer.as_mut() {
                obs(step, prompt)?;
            }
        }
        if epoch % config.eval_every == 0 || epoch == config.epochs {
            let p = prompt.materialize();
            let accuracy = evaluate(backbone, Some(&p), dev)?;
            log.epochs.push(EpochRecord { epoch, accuracy });
        }
    }
    log.final_accuracy = log.epochs.last().map_or(0.0, |e| e.accuracy);
    Ok(log)
}

/// Full fine-tuning baseline: every backbone weight is trainable and no
/// prompt is used. The backbone is unfrozen for the run and frozen again
/// afterwards.
pub fn train_full(
    backbone: &mut Backbone,
    train: &[TextToTextExample],
    dev: &[TextToTextExample],
    config: &TrainConfig,
) -> Result<RunLog> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    backbone.set_frozen(false);
    let result = full_loop(backbone, train, dev, config);
    backbone.set_frozen(true);
    result
}

fn full_loop(
    backbone: &mut Backbone,
    train: &[TextToTextExample],
    dev: &[TextToTextExample],
    config: &TrainConfig,
) -> Result<RunLog> {
    let mut optimizer = {
        let tensors: Vec<&Tensor> = backbone.named_tensors().into_iter().map(|(_, t)| t).collect();
        AdamW::new(config.optimizer(), &tensors)
    };
    let mut rng = shuffle_rng(config.seed);
    let mut log = RunLog {
        config: config.echo(),
        trainable_params: backbone.parameter_count(),
        ..Default::default()
    };
    let mut step = 0;
    'epochs: for epoch in 1..=config.epochs {
        let order = epoch_order(train.len(), &mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut batch_loss = 0.0;
            for &i in batch {
                let ex = &train[i];
                let (loss, grads) = {
                    let mut t = Tape::new();
                    let (loss, _) = backbone.loss_on_tape(&mut t, None, &ex.input, &ex.target)?;
                    (t.scalar(loss), t.backward(loss)?)
                };
                for tensor in backbone.tensors_mut() {
                    grads.accumulate_into(tensor);
                }
                batch_loss += loss;
            }
            step += 1;
            let mean = batch_loss / batch.len() as f64;
            log.steps.push(StepRecord { step, loss: mean });
            if !mean.is_finite() {
                log.aborted = true;
                break 'epochs;
            }
            optimizer.step(&mut backbone.tensors_mut(), 1.0 / batch.len() as f64);
        }
        if epoch % config.eval_every == 0 || epoch == config.epochs {
            let accuracy = evaluate(backbone, None, dev)?;
            log.epochs.push(EpochRecord { epoch, accuracy });
        }
    }
    log.final_accuracy = log.epochs.last().map_or(0.0, |e| e.accuracy);
    Ok(log)
}

/// Uniform sample of `k` examples without replacement and without label
/// balancing. The same `(dataset, k, seed)` always yields the same subset,
/// in the same order.
pub fn few_shot_sample(dataset: &[TextToTextExample], k: usize, seed: u64) -> Result<Vec<TextToTextExample>> {
    if k == 0 {
        return Err(Error::Config("few-shot k must be at least 1".into()));
    }
    if k > dataset.len() {
        return Err(Error::Config(format!(
            "cannot sample {k} examples from a dataset of {}",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample(&mut rng, dataset.len(), k)
        .into_iter()
        .map(|i| dataset[i].clone())
        .collect())
}

/// Stable 64-bit digest of a dataset's contents (FNV-1a).
pub fn subset_hash(data: &[TextToTextExample]) -> u64 {
    let mut h = FnvHasher::default();
    for ex in data {
        for &t in &ex.input {
            h.write_u64(t as u64);
        }
        h.write_u64(u64::MAX);
        for &t in &ex.target {
            h.write_u64(t as u64);
        }
        h.write_u64(u64::MAX - 1);
    }
    h.finish()
}
