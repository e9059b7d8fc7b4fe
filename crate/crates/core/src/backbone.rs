//! A small pre-LayerNorm encoder-decoder transformer that stays frozen while
//! soft prompts are tuned against it.
//!
//! Orientation follows the prompt literature: token embeddings are columns of
//! an `e×n` matrix, and the prompt `P_emb` (`e×c`) is prepended column-wise.
//! Inside the blocks the sequence is handled as rows (`len×e`).
//!
//! Positions: prompt slots take absolute positions `0..c` and text tokens
//! continue at `c..c+n`, all with sinusoidal encodings. The output projection
//! reuses the embedding table, scaled by `1/sqrt(e)`.

use std::fmt::Write as _;
use std::fs::File;
use std::hash::Hasher;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use fnv::FnvHasher;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{read_records, write_record, Tensor};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            embed_dim: 32,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 64,
            vocab_size: 64,
            max_len: 256,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.vocab_size <= EOS {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room for pad/bos/eos",
                self.vocab_size
            )));
        }
        if self.n_layers == 0 || self.ffn_dim == 0 || self.max_len < 2 {
            return Err(Error::Config("n_layers, ffn_dim must be positive and max_len >= 2".into()));
        }
        Ok(())
    }

    fn header(&self, frozen: bool) -> String {
        format!(
            "config embed_dim={} n_layers={} n_heads={} ffn_dim={} vocab_size={} max_len={} frozen={}",
            self.embed_dim, self.n_layers, self.n_heads, self.ffn_dim, self.vocab_size, self.max_len, frozen
        )
    }

    fn parse_header(line: &str) -> Result<(Self, bool)> {
        let bad = |m: String| Error::Parse { line: 1, message: m };
        let mut fields = line.split_whitespace();
        if fields.next() != Some("config") {
            return Err(bad("checkpoint must start with a `config` record".into()));
        }
        let mut cfg = BackboneConfig::default();
        let mut frozen = true;
        for field in fields {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got {field:?}")))?;
            if key == "frozen" {
                frozen = value
                    .parse()
                    .map_err(|_| bad(format!("bad frozen flag {value:?}")))?;
                continue;
            }
            let n: usize = value
                .parse()
                .map_err(|_| bad(format!("bad value for {key}: {value:?}")))?;
            match key {
                "embed_dim" => cfg.embed_dim = n,
                "n_layers" => cfg.n_layers = n,
                "n_heads" => cfg.n_heads = n,
                "ffn_dim" => cfg.ffn_dim = n,
                "vocab_size" => cfg.vocab_size = n,
                "max_len" => cfg.max_len = n,
                _ => return Err(bad(format!("unknown config key {key:?}"))),
            }
        }
        Ok((cfg, frozen))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::gaussian(&[input, output], (1.0 / input as f64).sqrt(), rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    fn apply<'a>(&'a self, t: &mut Tape<'a>, x: Var) -> Result<Var> {
        let w = t.param(&self.weight);
        let b = t.param(&self.bias);
        let y = t.matmul(x, w)?;
        t.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl Norm {
    fn new(e: usize) -> Self {
        Norm {
            gain: Tensor::filled(&[e], 1.0),
            bias: Tensor::zeros(&[e]),
        }
    }

    fn apply<'a>(&'a self, t: &mut Tape<'a>, x: Var) -> Result<Var> {
        let g = t.param(&self.gain);
        let b = t.param(&self.bias);
        t.layer_norm(x, g, b)
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl Attention {
    fn new<R: Rng>(e: usize, rng: &mut R) -> Self {
        Attention {
            query: Linear::new(e, e, rng),
            key: Linear::new(e, e, rng),
            value: Linear::new(e, e, rng),
            output: Linear::new(e, e, rng),
        }
    }

    fn apply<'a>(&'a self, t: &mut Tape<'a>, queries: Var, memory: Var, heads: usize, causal: bool) -> Result<Var> {
        let q = self.query.apply(t, queries)?;
        let k = self.key.apply(t, memory)?;
        let v = self.value.apply(t, memory)?;
        let (nq, e) = (t.shape(q)[0], t.shape(q)[1]);
        let nk = t.shape(k)[0];
        let dh = e / heads;
        let mask = if causal {
            let mut m = vec![0.0; nq * nk];
            for i in 0..nq {
                for j in (i + 1)..nk {
                    m[i * nk + j] = f64::NEG_INFINITY;
                }
            }
            Some(t.constant(vec![nq, nk], m)?)
        } else {
            None
        };
        let mut joined: Option<Var> = None;
        for h in 0..heads {
            let qh = t.slice_cols(q, h * dh, dh)?;
            let kh = t.slice_cols(k, h * dh, dh)?;
            let vh = t.slice_cols(v, h * dh, dh)?;
            let kt = t.transpose(kh)?;
            let scores = t.matmul(qh, kt)?;
            let mut scores = t.scale(scores, 1.0 / (dh as f64).sqrt());
            if let Some(m) = mask {
                scores = t.add(scores, m)?;
            }
            let weights = t.softmax_rows(scores)?;
            let out = t.matmul(weights, vh)?;
            joined = Some(match joined {
                None => out,
                Some(prev) => t.concat_cols(prev, out)?,
            });
        }
        self.output.apply(t, joined.expect("at least one head"))
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    fn apply<'a>(&'a self, t: &mut Tape<'a>, x: Var) -> Result<Var> {
        let h = self.up.apply(t, x)?;
        let h = t.relu(h);
        self.down.apply(t, h)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn_norm: Norm,
    pub attn: Attention,
    pub ffn_norm: Norm,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_norm: Norm,
    pub self_attn: Attention,
    pub cross_norm: Norm,
    pub cross_attn: Attention,
    pub ffn_norm: Norm,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    pub embedding: Tensor,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_norm: Norm,
    pub decoder: Vec<DecoderLayer>,
    pub decoder_norm: Norm,
    positions: Vec<f64>,
    frozen: bool,
}

fn sinusoidal(max_len: usize, e: usize) -> Vec<f64> {
    let mut table = vec![0.0; max_len * e];
    for pos in 0..max_len {
        for i in 0..e {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / e as f64);
            let angle = pos as f64 * rate;
            table[pos * e + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    table
}

impl Backbone {
    /// Randomly initialized, trainable backbone.
    pub fn new<R: Rng>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let e = config.embed_dim;
        let ffn = |rng: &mut R| FeedForward {
            up: Linear::new(e, config.ffn_dim, rng),
            down: Linear::new(config.ffn_dim, e, rng),
        };
        let embedding = Tensor::gaussian(&[config.vocab_size, e], 1.0, rng);
        let encoder = (0..config.n_layers)
            .map(|_| EncoderLayer {
                attn_norm: Norm::new(e),
                attn: Attention::new(e, rng),
                ffn_norm: Norm::new(e),
                ffn: ffn(rng),
            })
            .collect();
        let decoder = (0..config.n_layers)
            .map(|_| DecoderLayer {
                self_norm: Norm::new(e),
                self_attn: Attention::new(e, rng),
                cross_norm: Norm::new(e),
                cross_attn: Attention::new(e, rng),
                ffn_norm: Norm::new(e),
                ffn: ffn(rng),
            })
            .collect();
        let mut backbone = Backbone {
            positions: sinusoidal(config.max_len, e),
            config,
            embedding,
            encoder,
            encoder_norm: Norm::new(e),
            decoder,
            decoder_norm: Norm::new(e),
            frozen: false,
        };
        backbone.set_frozen(false);
        Ok(backbone)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Freezing clears `requires_grad` on every weight, so no tape built on
    /// this backbone will carry gradients into it.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        for t in self.tensors_mut() {
            t.set_requires_grad(!frozen);
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        fn lin<'b>(out: &mut Vec<(String, &'b Tensor)>, p: &str, l: &'b Linear) {
            out.push((format!("{p}.weight"), &l.weight));
            out.push((format!("{p}.bias"), &l.bias));
        }
        fn norm<'b>(out: &mut Vec<(String, &'b Tensor)>, p: &str, n: &'b Norm) {
            out.push((format!("{p}.gain"), &n.gain));
            out.push((format!("{p}.bias"), &n.bias));
        }
        for (i, l) in self.encoder.iter().enumerate() {
            let p = format!("encoder.{i}");
            norm(&mut out, &format!("{p}.attn_norm"), &l.attn_norm);
            for (name, lin_) in attention_parts(&l.attn) {
                lin(&mut out, &format!("{p}.attn.{name}"), lin_);
            }
            norm(&mut out, &format!("{p}.ffn_norm"), &l.ffn_norm);
            lin(&mut out, &format!("{p}.ffn.up"), &l.ffn.up);
            lin(&mut out, &format!("{p}.ffn.down"), &l.ffn.down);
        }
        norm(&mut out, "encoder_norm", &self.encoder_norm);
        for (i, l) in self.decoder.iter().enumerate() {
            let p = format!("decoder.{i}");
            norm(&mut out, &format!("{p}.self_norm"), &l.self_norm);
            for (name, lin_) in attention_parts(&l.self_attn) {
                lin(&mut out, &format!("{p}.self_attn.{name}"), lin_);
            }
            norm(&mut out, &format!("{p}.cross_norm"), &l.cross_norm);
            for (name, lin_) in attention_parts(&l.cross_attn) {
                lin(&mut out, &format!("{p}.cross_attn.{name}"), lin_);
            }
            norm(&mut out, &format!("{p}.ffn_norm"), &l.ffn_norm);
            lin(&mut out, &format!("{p}.ffn.up"), &l.ffn.up);
            lin(&mut out, &format!("{p}.ffn.down"), &l.ffn.down);
        }
        norm(&mut out, "decoder_norm", &self.decoder_norm);
        out
    }

    /// Every weight, in the same order as [`Backbone::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.embedding];
        fn lin<'b>(out: &mut Vec<&'b mut Tensor>, l: &'b mut Linear) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        fn norm<'b>(out: &mut Vec<&'b mut Tensor>, n: &'b mut Norm) {
            out.push(&mut n.gain);
            out.push(&mut n.bias);
        }
        fn attn<'b>(out: &mut Vec<&'b mut Tensor>, a: &'b mut Attention) {
            lin(out, &mut a.query);
            lin(out, &mut a.key);
            lin(out, &mut a.value);
            lin(out, &mut a.output);
        }
        for l in &mut self.encoder {
            norm(&mut out, &mut l.attn_norm);
            attn(&mut out, &mut l.attn);
            norm(&mut out, &mut l.ffn_norm);
            lin(&mut out, &mut l.ffn.up);
            lin(&mut out, &mut l.ffn.down);
        }
        norm(&mut out, &mut self.encoder_norm);
        for l in &mut self.decoder {
            norm(&mut out, &mut l.self_norm);
            attn(&mut out, &mut l.self_attn);
            norm(&mut out, &mut l.cross_norm);
            attn(&mut out, &mut l.cross_attn);
            norm(&mut out, &mut l.ffn_norm);
            lin(&mut out, &mut l.ffn.up);
            lin(&mut out, &mut l.ffn.down);
        }
        norm(&mut out, &mut self.decoder_norm);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// FNV-1a over the bit patterns of every weight.
    pub fn checksum(&self) -> u64 {
        let mut h = FnvHasher::default();
        for (_, t) in self.named_tensors() {
            for v in t.values() {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.config.vocab_size) {
            Some(&id) => Err(Error::Vocabulary {
                id,
                vocab_size: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    fn add_positions<'a>(&self, t: &mut Tape<'a>, rows: Var) -> Result<Var> {
        let (len, e) = (t.shape(rows)[0], t.shape(rows)[1]);
        if len > self.config.max_len {
            return Err(Error::Length {
                len,
                max: self.config.max_len,
            });
        }
        let pe = t.constant(vec![len, e], self.positions[..len * e].to_vec())?;
        t.add(rows, pe)
    }

    /// Runs the encoder over sequence rows (`len×e`).
    pub fn encode<'a>(&'a self, t: &mut Tape<'a>, rows: Var) -> Result<Var> {
        let mut x = self.add_positions(t, rows)?;
        for layer in &self.encoder {
            let h = layer.attn_norm.apply(t, x)?;
            let a = layer.attn.apply(t, h, h, self.config.n_heads, false)?;
            x = t.add(x, a)?;
            let h = layer.ffn_norm.apply(t, x)?;
            let f = layer.ffn.apply(t, h)?;
            x = t.add(x, f)?;
        }
        self.encoder_norm.apply(t, x)
    }

    /// Teacher-forced decoder pass; returns logits `len(decoder_ids)×V`.
    pub fn decode<'a>(&'a self, t: &mut Tape<'a>, memory: Var, decoder_ids: &[usize]) -> Result<Var> {
        self.check_ids(decoder_ids)?;
        let table = t.param(&self.embedding);
        let cols = t.embedding_lookup(table, decoder_ids)?;
        let rows = t.transpose(cols)?;
        let mut y = self.add_positions(t, rows)?;
        for layer in &self.decoder {
            let h = layer.self_norm.apply(t, y)?;
            let a = layer.self_attn.apply(t, h, h, self.config.n_heads, true)?;
            y = t.add(y, a)?;
            let h = layer.cross_norm.apply(t, y)?;
            let a = layer.cross_attn.apply(t, h, memory, self.config.n_heads, false)?;
            y = t.add(y, a)?;
            let h = layer.ffn_norm.apply(t, y)?;
            let f = layer.ffn.apply(t, h)?;
            y = t.add(y, f)?;
        }
        let y = self.decoder_norm.apply(t, y)?;
        let out = t.transpose(table)?;
        let logits = t.matmul(y, out)?;
        Ok(t.scale(logits, 1.0 / (self.config.embed_dim as f64).sqrt()))
    }

    /// Token embeddings of `ids` as an `e×n` matrix.
    pub fn embed<'a>(&'a self, t: &mut Tape<'a>, ids: &[usize]) -> Result<Var> {
        self.check_ids(ids)?;
        let table = t.param(&self.embedding);
        t.embedding_lookup(table, ids)
    }

    fn check_lengths(&self, c: usize, input: &[usize], target: &[usize]) -> Result<()> {
        let max = self.config.max_len;
        if c + input.len() > max {
            return Err(Error::Length {
                len: c + input.len(),
                max,
            });
        }
        if target.len() + 1 > max {
            return Err(Error::Length {
                len: target.len() + 1,
                max,
            });
        }
        Ok(())
    }

    /// `-log Pr(target | [prompt; input])` under teacher forcing. The decoder
    /// reads `[BOS] + target` and is scored against `target + [EOS]`.
    /// Returns `(loss, logits)`.
    pub fn loss_on_tape<'a>(
        &'a self,
        t: &mut Tape<'a>,
        prompt: Option<Var>,
        input: &[usize],
        target: &[usize],
    ) -> Result<(Var, Var)> {
        let c = prompt.map_or(0, |p| t.shape(p)[1]);
        self.check_lengths(c, input, target)?;
        let x_emb = self.embed(t, input)?;
        let full = match prompt {
            Some(p) => concat_prompt(t, p, x_emb)?,
            None => x_emb,
        };
        let rows = t.transpose(full)?;
        let memory = self.encode(t, rows)?;
        let logits = self.decode(t, memory, &decoder_input(target))?;
        let loss = t.cross_entropy(logits, &decoder_target(target))?;
        Ok((loss, logits))
    }

    /// Loss and logits for a concrete prompt matrix.
    pub fn forward(&self, prompt: &Tensor, input: &[usize], target: &[usize]) -> Result<(f64, Tensor)> {
        let mut t = Tape::new();
        let p = t.param(prompt);
        let (loss, logits) = self.loss_on_tape(&mut t, Some(p), input, target)?;
        Ok((t.scalar(loss), t.to_tensor(logits)))
    }

    /// Plain sequence-to-sequence loss with no prompt slots at all.
    pub fn forward_promptless(&self, input: &[usize], target: &[usize]) -> Result<(f64, Tensor)> {
        self.check_lengths(0, input, target)?;
        self.check_ids(input)?;
        let mut t = Tape::new();
        let table = t.param(&self.embedding);
        let cols = t.embedding_lookup(table, input)?;
        let rows = t.transpose(cols)?;
        let memory = self.encode(&mut t, rows)?;
        let logits = self.decode(&mut t, memory, &decoder_input(target))?;
        let loss = t.cross_entropy(logits, &decoder_target(target))?;
        Ok((t.scalar(loss), t.to_tensor(logits)))
    }

    /// Greedy decoding from BOS until EOS or `max_steps` tokens. EOS is not
    /// included in the result; ties go to the lower token id.
    pub fn greedy_decode(&self, prompt: Option<&Tensor>, input: &[usize], max_steps: usize) -> Result<Vec<usize>> {
        if max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        let c = prompt.map_or(0, |p| p.cols());
        self.check_lengths(c, input, &[])?;
        let mut t = Tape::new();
        let x_emb = self.embed(&mut t, input)?;
        let full = match prompt {
            Some(p) => {
                let p = t.param(p);
                concat_prompt(&mut t, p, x_emb)?
            }
            None => x_emb,
        };
        let rows = t.transpose(full)?;
        let memory = self.encode(&mut t, rows)?;
        let mut out = Vec::new();
        let steps = max_steps.min(self.config.max_len - 1);
        for _ in 0..steps {
            let logits = self.decode(&mut t, memory, &decoder_input(&out))?;
            let v = self.config.vocab_size;
            let last = &t.value(logits)[out.len() * v..(out.len() + 1) * v];
            let mut best = 0;
            for (i, &x) in last.iter().enumerate() {
                if x > last[best] {
                    best = i;
                }
            }
            if best == EOS {
                break;
            }
            out.push(best);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "{}", self.config.header(self.frozen))?;
        for (name, t) in self.named_tensors() {
            write_record(w, &name, t)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let mut first = String::new();
        r.read_line(&mut first).map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        let (config, frozen) = BackboneConfig::parse_header(first.trim())?;
        config.validate()?;
        let records = read_records(r)?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut backbone = Backbone::new(config, &mut rng)?;
        let names: Vec<String> = backbone.named_tensors().into_iter().map(|(n, _)| n).collect();
        if records.len() != names.len() {
            return Err(Error::Parse {
                line: 0,
                message: format!("expected {} tensors, found {}", names.len(), records.len()),
            });
        }
        for ((name, slot), (rname, rt)) in names.iter().zip(backbone.tensors_mut()).zip(records) {
            if *name != rname || slot.shape() != rt.shape() {
                let mut msg = String::new();
                let _ = write!(msg, "expected {name} {:?}, found {rname} {:?}", slot.shape(), rt.shape());
                return Err(Error::Parse { line: 0, message: msg });
            }
            slot.values_mut().copy_from_slice(rt.values());
        }
        backbone.set_frozen(frozen);
        Ok(backbone)
    }
}

fn attention_parts(a: &Attention) -> [(&'static str, &Linear); 4] {
    [
        ("query", &a.query),
        ("key", &a.key),
        ("value", &a.value),
        ("output", &a.output),
    ]
}

pub fn decoder_input(target: &[usize]) -> Vec<usize> {
    std::iter::once(BOS).chain(target.iter().copied()).collect()
}

pub fn decoder_target(target: &[usize]) -> Vec<usize> {
    target.iter().copied().chain(std::iter::once(EOS)).collect()
}

/// `[P_emb; X_emb]`: the `c` prompt columns followed by the `n` text columns.
pub fn concat_prompt<'a>(t: &mut Tape<'a>, prompt: Var, text: Var) -> Result<Var> {
    let (sp, sx) = (t.shape(prompt), t.shape(text));
    if sp.len() != 2 || sx.len() != 2 || sp[0] != sx[0] {
        return Err(Error::dimension("concat_prompt", sp, sx));
    }
    t.concat_cols(prompt, text)
}
