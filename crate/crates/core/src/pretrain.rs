//! Pretraining the backbone on the synthetic task mixture.

use std::hash::Hasher;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::tasks::{pretraining_corpus, TaskKind, TextToTextExample};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub backbone: BackboneConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear warmup length in steps; the rate then decays linearly to 10%.
    pub warmup: usize,
    pub seed: u64,
    pub corpus_size: usize,
    /// Longest run of instruction tokens prefixed to a corpus example. Soft
    /// prompts up to this length sit where the backbone has seen text start.
    pub max_prefix: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            backbone: BackboneConfig::default(),
            steps: 3000,
            batch_size: 64,
            lr: 3e-3,
            warmup: 100,
            seed: 0,
            corpus_size: 100_000,
            max_prefix: 20,
        }
    }
}

impl PretrainConfig {
    /// The corpus this configuration trains on, drawn from `seed`.
    pub fn corpus(&self) -> Vec<TextToTextExample> {
        pretraining_corpus(self.corpus_size, self.max_prefix, self.seed)
    }

    /// File name unique to this configuration, for caching checkpoints.
    pub fn checkpoint_name(&self) -> String {
        let mut h = fnv::FnvHasher::default();
        for (k, v) in self.echo() {
            h.write(k.as_bytes());
            h.write(v.as_bytes());
        }
        format!("backbone-{:016x}.txt", h.finish())
    }

    /// `key=value` pairs describing the run.
    pub fn echo(&self) -> Vec<(String, String)> {
        let b = &self.backbone;
        [
            ("embed_dim", b.embed_dim.to_string()),
            ("n_layers", b.n_layers.to_string()),
            ("n_heads", b.n_heads.to_string()),
            ("ffn_dim", b.ffn_dim.to_string()),
            ("vocab_size", b.vocab_size.to_string()),
            ("max_len", b.max_len.to_string()),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("warmup", self.warmup.to_string()),
            ("seed", self.seed.to_string()),
            ("corpus_size", self.corpus_size.to_string()),
            ("max_prefix", self.max_prefix.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    fn lr_at(&self, step: usize) -> f64 {
        if step <= self.warmup {
            return self.lr * step as f64 / self.warmup.max(1) as f64;
        }
        let span = (self.steps - self.warmup).max(1) as f64;
        let done = (step - self.warmup) as f64 / span;
        self.lr * (1.0 - 0.9 * done.min(1.0))
    }
}

/// Trains every backbone weight on `corpus` (cycled in shuffled passes) and
/// returns the backbone frozen. `on_step` sees each step's mean loss.
pub fn pretrain(
    config: &PretrainConfig,
    corpus: &[TextToTextExample],
    mut on_step: impl FnMut(usize, f64),
) -> Result<Backbone> {
    if corpus.is_empty() {
        return Err(Error::Config("pretraining corpus is empty".into()));
    }
    if config.steps == 0 || config.batch_size == 0 {
        return Err(Error::Config("steps and batch_size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut backbone = Backbone::new(config.backbone.clone(), &mut rng)?;
    backbone.set_frozen(false);
    let mut optimizer = {
        let tensors: Vec<&Tensor> = backbone.named_tensors().into_iter().map(|(_, t)| t).collect();
        AdamW::new(AdamWConfig::default(), &tensors)
    };
    let mut order: Vec<usize> = Vec::new();
    for step in 1..=config.steps {
        let mut total = 0.0;
        for _ in 0..config.batch_size {
            if order.is_empty() {
                order = (0..corpus.len()).collect();
                order.shuffle(&mut rng);
            }
            let ex = &corpus[order.pop().expect("refilled")];
            let (loss, grads) = {
                let mut t = Tape::new();
                let (loss, _) = backbone.loss_on_tape(&mut t, None, &ex.input, &ex.target)?;
                (t.scalar(loss), t.backward(loss)?)
            };
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite pretraining loss at step {step}")));
            }
            for tensor in backbone.tensors_mut() {
                grads.accumulate_into(tensor);
            }
            total += loss;
        }
        optimizer.config.lr = config.lr_at(step);
        optimizer.step(&mut backbone.tensors_mut(), 1.0 / config.batch_size as f64);
        on_step(step, total / config.batch_size as f64);
    }
    backbone.set_frozen(true);
    Ok(backbone)
}

/// Loads the checkpoint at `path` if one exists, otherwise pretrains on
/// [`PretrainConfig::corpus`] and saves the result there. The file is
/// written under a temporary name and renamed into place, so concurrent
/// callers never observe a partial checkpoint.
pub fn load_or_pretrain(config: &PretrainConfig, path: &Path) -> Result<Backbone> {
    if path.exists() {
        let backbone = Backbone::load(path)?;
        if backbone.config() == &config.backbone {
            return Ok(backbone);
        }
    }
    let backbone = pretrain(config, &config.corpus(), |_, _| {})?;
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    backbone.save(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(backbone)
}

/// Token-level accuracy of greedy decoding on fresh copy-task strings given
/// with a single instruction token.
pub fn copy_token_accuracy(backbone: &Backbone, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut right, mut total) = (0, 0);
    for _ in 0..samples {
        let ex = TaskKind::Copy.sample(&mut rng);
        let mut input = vec![TaskKind::Copy.task_token()];
        input.extend(&ex.input);
        let out = backbone.greedy_decode(None, &input, ex.target.len())?;
        total += ex.target.len();
        right += ex.target.iter().zip(&out).filter(|(a, b)| a == b).count();
    }
    Ok(if total == 0 { 0.0 } else { right as f64 / total as f64 })
}
