//! Synthetic text-to-text tasks with one-token verbalized labels, and the
//! line-oriented dataset file format.
//!
//! Dataset files hold one example per line: input ids, a tab, target ids,
//! each as space-separated integers.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BOS, EOS, PAD};
use crate::error::{Error, Result};

/// Reserved vocabulary layout shared by every task.
pub mod vocab {
    pub use crate::backbone::{BOS, EOS, PAD};
    pub const SEP: usize = 3;
    pub const TASK_COPY: usize = 4;
    pub const TASK_MAJORITY: usize = 5;
    pub const TASK_PARITY: usize = 6;
    pub const TASK_PAIR_MATCH: usize = 7;
    pub const YES: usize = 8;
    pub const NO: usize = 9;
    pub const FIRST_SYMBOL: usize = 10;
    /// Smallest vocabulary that holds every task's symbols.
    pub const MIN_VOCAB: usize = FIRST_SYMBOL + 16;
}

use vocab::*;

const _: () = assert!(PAD == 0 && BOS == 1 && EOS == 2);

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TextToTextExample {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    /// First target token; used for accounting only.
    pub label_id: usize,
}

impl TextToTextExample {
    pub fn new(input: Vec<usize>, target: Vec<usize>) -> Self {
        let label_id = target.first().copied().unwrap_or(PAD);
        TextToTextExample {
            input,
            target,
            label_id,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Copy,
    Majority,
    Parity,
    PairMatch,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Copy, TaskKind::Majority, TaskKind::Parity, TaskKind::PairMatch];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Majority => "majority",
            TaskKind::Parity => "parity",
            TaskKind::PairMatch => "pair-match",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Usage(format!("unknown task {name:?}; known: copy, majority, parity, pair-match")))
    }

    /// Instruction token that selects this task during pretraining.
    pub fn task_token(self) -> usize {
        match self {
            TaskKind::Copy => TASK_COPY,
            TaskKind::Majority => TASK_MAJORITY,
            TaskKind::Parity => TASK_PARITY,
            TaskKind::PairMatch => TASK_PAIR_MATCH,
        }
    }

    /// Draws one example.
    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> TextToTextExample {
        match self {
            TaskKind::Copy => {
                let len = rng.gen_range(2..=8);
                let s: Vec<usize> = (0..len).map(|_| FIRST_SYMBOL + rng.gen_range(0..16)).collect();
                TextToTextExample::new(s.clone(), s)
            }
            TaskKind::Majority => loop {
                let len = rng.gen_range(5..=9);
                let s: Vec<usize> = (0..len).map(|_| FIRST_SYMBOL + rng.gen_range(0..4)).collect();
                if let Some(winner) = majority_label(&s) {
                    break TextToTextExample::new(s, vec![winner]);
                }
            },
            TaskKind::Parity => {
                let len = rng.gen_range(0..=6);
                let payload: Vec<usize> = (0..len).map(|_| FIRST_SYMBOL + rng.gen_range(0..3)).collect();
                let label = parity_label(&payload);
                let mut input = payload;
                input.push(SEP);
                TextToTextExample::new(input, vec![label])
            }
            TaskKind::PairMatch => {
                let seg = |rng: &mut R| -> Vec<usize> { (0..2).map(|_| FIRST_SYMBOL + rng.gen_range(0..8)).collect() };
                let (a, b) = (seg(rng), seg(rng));
                let label = pair_match_label(&a, &b);
                let mut input = a;
                input.push(SEP);
                input.extend(b);
                TextToTextExample::new(input, vec![label])
            }
        }
    }
}

/// Most frequent symbol, or `None` on a tie for first place.
pub fn majority_label(symbols: &[usize]) -> Option<usize> {
    let mut counts: Vec<(usize, usize)> = Vec::new();
    for &s in symbols {
        match counts.iter_mut().find(|(sym, _)| *sym == s) {
            Some((_, n)) => *n += 1,
            None => counts.push((s, 1)),
        }
    }
    counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    match counts.as_slice() {
        [] => None,
        [(s, _)] => Some(*s),
        [(s, n), (_, m), ..] => (n > m).then_some(*s),
    }
}

/// `YES` when the marker symbol (the first task symbol) occurs an even
/// number of times. An empty payload is even.
pub fn parity_label(payload: &[usize]) -> usize {
    let count = payload.iter().filter(|&&s| s == FIRST_SYMBOL).count();
    if count % 2 == 0 {
        YES
    } else {
        NO
    }
}

pub fn pair_match_label(a: &[usize], b: &[usize]) -> usize {
    if a.iter().any(|s| b.contains(s)) {
        YES
    } else {
        NO
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub train_size: usize,
    pub dev_size: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, train_size: usize, dev_size: usize, seed: u64) -> Self {
        TaskSpec {
            name: kind.name().to_string(),
            kind,
            train_size,
            dev_size,
            seed,
        }
    }
}

pub type Dataset = Vec<TextToTextExample>;

/// Deterministic train/dev split with no input shared between the two sets
/// and no duplicate inputs within either.
pub fn generate(spec: &TaskSpec) -> Result<(Dataset, Dataset)> {
    if spec.train_size == 0 || spec.dev_size == 0 {
        return Err(Error::Config("train and dev sizes must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let budget = 200 * (spec.train_size + spec.dev_size);
    let mut draw = |n: usize, rng: &mut ChaCha8Rng| -> Result<Dataset> {
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0;
        while out.len() < n {
            attempts += 1;
            if attempts > budget {
                return Err(Error::Config(format!(
                    "task {} cannot supply {} distinct examples",
                    spec.name,
                    spec.train_size + spec.dev_size
                )));
            }
            let ex = spec.kind.sample(rng);
            if seen.insert(ex.input.clone()) {
                out.push(ex);
            }
        }
        Ok(out)
    };
    let dev = draw(spec.dev_size, &mut rng)?;
    let train = draw(spec.train_size, &mut rng)?;
    Ok((train, dev))
}

/// Mixture used to pretrain the backbone. Each example is prefixed with `k`
/// copies of its task's instruction token, `k` drawn from `1..=max_prefix`.
/// Copy examples also appear without any prefix.
pub fn pretraining_corpus(size: usize, max_prefix: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..size)
        .map(|_| {
            let kind = *TaskKind::ALL.choose(&mut rng).expect("non-empty");
            let base = kind.sample(&mut rng);
            let k = match kind {
                TaskKind::Copy => rng.gen_range(0..=max_prefix),
                _ => rng.gen_range(1..=max_prefix.max(1)),
            };
            let mut input = vec![kind.task_token(); k];
            input.extend(base.input);
            TextToTextExample::new(input, base.target)
        })
        .collect()
}

pub fn save(path: &Path, data: &[TextToTextExample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset(&mut w, data).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_dataset<W: Write>(w: &mut W, data: &[TextToTextExample]) -> std::io::Result<()> {
    let join = |ids: &[usize]| ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
    for ex in data {
        writeln!(w, "{}\t{}", join(&ex.input), join(&ex.target))?;
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file))
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Dataset> {
    let mut out = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.is_empty() {
            continue;
        }
        let (input, target) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: lineno,
            message: "expected `input-ids<TAB>target-ids`".into(),
        })?;
        let ids = |s: &str| -> Result<Vec<usize>> {
            s.split_whitespace()
                .map(|tok| {
                    tok.parse::<usize>().map_err(|_| Error::Parse {
                        line: lineno,
                        message: format!("non-integer token {tok:?}"),
                    })
                })
                .collect()
        };
        let target = ids(target)?;
        if target.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                message: "empty target".into(),
            });
        }
        out.push(TextToTextExample::new(ids(input)?, target));
    }
    Ok(out)
}
