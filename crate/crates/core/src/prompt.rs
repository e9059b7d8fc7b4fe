//! Soft-prompt parameterizations. Each one owns its trainable tensors and
//! materializes an `e×c` prompt matrix on a tape:
//!
//! | kind        | prompt                                   | trainable scalars          |
//! |-------------|------------------------------------------|----------------------------|
//! | vanilla     | `P`                                      | `e·c`                      |
//! | decomposed  | `A·B`, `A: e×b`, `B: b×c`                | `e·b + b·c`                |
//! | residual    | `LN(up(relu(down(p_j)))) + p_j` per column | `e·c + 2·e·h + h + e + 2e` |
//! | rank probe  | `U·relu(Σ)·V`, only `diag(Σ)` free       | `e² + c + c²`              |

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{read_records, write_record, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PromptKind {
    Vanilla,
    Decomposed,
    Residual,
    RankProbe,
}

impl PromptKind {
    pub const ALL: [PromptKind; 4] = [
        PromptKind::Vanilla,
        PromptKind::Decomposed,
        PromptKind::Residual,
        PromptKind::RankProbe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PromptKind::Vanilla => "vanilla",
            PromptKind::Decomposed => "dpt",
            PromptKind::Residual => "residual",
            PromptKind::RankProbe => "rank-probe",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        PromptKind::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Usage(format!("unknown prompt kind {name:?}")))
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Dimensions of a prompt parameterization. `bottleneck` is used by the
/// decomposed kind, `hidden` by the residual kind; the others ignore them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptDims {
    pub embed_dim: usize,
    pub length: usize,
    pub bottleneck: usize,
    pub hidden: usize,
}

impl PromptDims {
    pub fn new(embed_dim: usize, length: usize) -> Self {
        PromptDims {
            embed_dim,
            length,
            bottleneck: 1,
            hidden: 1,
        }
    }

    pub fn with_bottleneck(mut self, b: usize) -> Self {
        self.bottleneck = b;
        self
    }

    pub fn with_hidden(mut self, h: usize) -> Self {
        self.hidden = h;
        self
    }

    /// Rejects dimensions `kind` cannot be built with.
    pub fn validate(&self, kind: PromptKind) -> Result<()> {
        let PromptDims {
            embed_dim: e,
            length: c,
            bottleneck: b,
            hidden: h,
        } = *self;
        if e == 0 || c == 0 {
            return Err(Error::Config("embedding dimension and prompt length must be positive".into()));
        }
        match kind {
            PromptKind::Decomposed if b == 0 => Err(Error::Config("bottleneck must be at least 1".into())),
            PromptKind::Residual if h == 0 => Err(Error::Config("residual hidden size must be at least 1".into())),
            PromptKind::RankProbe if c > e => Err(Error::Config(format!(
                "rank probe needs prompt length {c} <= embedding dimension {e}"
            ))),
            _ => Ok(()),
        }
    }
}

/// Closed-form count of trainable scalars.
pub fn trainable_param_count(kind: PromptKind, dims: PromptDims) -> usize {
    let PromptDims {
        embed_dim: e,
        length: c,
        bottleneck: b,
        hidden: h,
    } = dims;
    match kind {
        PromptKind::Vanilla => e * c,
        PromptKind::Decomposed => e * b + b * c,
        PromptKind::Residual => e * c + 2 * e * h + h + e + 2 * e,
        PromptKind::RankProbe => e * e + c + c * c,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitOptions {
    /// Scale of Gaussian initialization: the standard deviation of vanilla
    /// fallback entries, and `σ_t` in the factor std `(1/b)^(1/4)·σ_t`.
    pub target_std: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions { target_std: 1.0 }
    }
}

#[derive(Clone, Debug)]
pub struct VanillaPrompt {
    pub prompt: Tensor,
}

impl VanillaPrompt {
    /// Loads a single-record prompt dump (e.g. one written by
    /// [`export_product`]) as a trainable vanilla prompt.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = read_records(BufReader::new(file))?;
        if records.len() != 1 || records[0].1.shape().len() != 2 {
            return Err(Error::Parse {
                line: 0,
                message: format!("{}: expected exactly one 2-d prompt record", path.display()),
            });
        }
        let (_, prompt) = records.remove(0);
        Ok(VanillaPrompt {
            prompt: prompt.trainable(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct DecomposedPrompt {
    pub a: Tensor,
    pub b: Tensor,
}

impl DecomposedPrompt {
    pub fn bottleneck(&self) -> usize {
        self.a.cols()
    }

    pub fn product(&self) -> Tensor {
        let mut t = Tape::new();
        let (a, b) = (t.param(&self.a), t.param(&self.b));
        let p = t.matmul(a, b).expect("factor shapes agree by construction");
        t.to_tensor(p)
    }
}

#[derive(Clone, Debug)]
pub struct ResidualPrompt {
    pub prompt: Tensor,
    /// `h×e`
    pub down: Tensor,
    pub down_bias: Tensor,
    /// `e×h`
    pub up: Tensor,
    pub up_bias: Tensor,
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct RankProbePrompt {
    /// `e×e`
    pub u: Tensor,
    /// Diagonal of `Σ ∈ R^{e×c}`; the off-diagonal entries are not parameters.
    pub sigma: Tensor,
    /// `c×c`
    pub v: Tensor,
}

impl RankProbePrompt {
    /// `Σ` as a dense `e×c` matrix.
    pub fn sigma_matrix(&self) -> Tensor {
        let (e, c) = (self.u.rows(), self.sigma.len());
        let mut m = Tensor::zeros(&[e, c]);
        for (i, &s) in self.sigma.values().iter().enumerate() {
            m.values_mut()[i * c + i] = s;
        }
        m
    }
}

#[derive(Clone, Debug)]
pub enum PromptParams {
    Vanilla(VanillaPrompt),
    Decomposed(DecomposedPrompt),
    Residual(ResidualPrompt),
    RankProbe(RankProbePrompt),
}

impl PromptParams {
    /// Builds a parameterization. Vanilla and residual prompts copy `c`
    /// distinct rows of `vocab_embedding` when one is given and has enough
    /// rows, and fall back to `N(0, target_std²)` otherwise.
    pub fn init(
        kind: PromptKind,
        dims: PromptDims,
        vocab_embedding: Option<&Tensor>,
        options: InitOptions,
        seed: u64,
    ) -> Result<Self> {
        let PromptDims {
            embed_dim: e,
            length: c,
            bottleneck: b,
            hidden: h,
        } = dims;
        dims.validate(kind)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let copy_init = |rng: &mut ChaCha8Rng| -> Result<Tensor> {
            match vocab_embedding {
                Some(table) if table.shape().len() == 2 && table.rows() >= c => {
                    if table.cols() != e {
                        return Err(Error::dimension("copy-init", table.shape(), &[c, e]));
                    }
                    let rows = sample(rng, table.rows(), c);
                    let mut p = Tensor::zeros(&[e, c]);
                    for (j, row) in rows.iter().enumerate() {
                        for r in 0..e {
                            p.values_mut()[r * c + j] = table.at(row, r);
                        }
                    }
                    Ok(p)
                }
                _ => Ok(Tensor::gaussian(&[e, c], options.target_std, rng)),
            }
        };
        let params = match kind {
            PromptKind::Vanilla => PromptParams::Vanilla(VanillaPrompt {
                prompt: copy_init(&mut rng)?.trainable(),
            }),
            PromptKind::Decomposed => {
                // Entry variance of A·B is b·std⁴: unit at target_std = 1 for any b.
                let std = (1.0 / b as f64).powf(0.25) * options.target_std;
                PromptParams::Decomposed(DecomposedPrompt {
                    a: Tensor::gaussian(&[e, b], std, &mut rng).trainable(),
                    b: Tensor::gaussian(&[b, c], std, &mut rng).trainable(),
                })
            }
            PromptKind::Residual => {
                let prompt = copy_init(&mut rng)?.trainable();
                PromptParams::Residual(ResidualPrompt {
                    prompt,
                    down: Tensor::gaussian(&[h, e], (1.0 / e as f64).sqrt(), &mut rng).trainable(),
                    down_bias: Tensor::zeros(&[h]).trainable(),
                    up: Tensor::gaussian(&[e, h], (1.0 / h as f64).sqrt(), &mut rng).trainable(),
                    up_bias: Tensor::zeros(&[e]).trainable(),
                    norm_gain: Tensor::filled(&[e], 1.0).trainable(),
                    norm_bias: Tensor::zeros(&[e]).trainable(),
                })
            }
            PromptKind::RankProbe => {
                PromptParams::RankProbe(RankProbePrompt {
                    u: Tensor::gaussian(&[e, e], 1.0 / (e as f64).sqrt(), &mut rng).trainable(),
                    sigma: Tensor::filled(&[c], 1.0).trainable(),
                    v: Tensor::gaussian(&[c, c], 1.0 / (c as f64).sqrt(), &mut rng).trainable(),
                })
            }
        };
        Ok(params)
    }

    pub fn kind(&self) -> PromptKind {
        match self {
            PromptParams::Vanilla(_) => PromptKind::Vanilla,
            PromptParams::Decomposed(_) => PromptKind::Decomposed,
            PromptParams::Residual(_) => PromptKind::Residual,
            PromptParams::RankProbe(_) => PromptKind::RankProbe,
        }
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            PromptParams::Vanilla(p) => vec![("prompt", &p.prompt)],
            PromptParams::Decomposed(p) => vec![("a", &p.a), ("b", &p.b)],
            PromptParams::Residual(p) => vec![
                ("prompt", &p.prompt),
                ("down", &p.down),
                ("down_bias", &p.down_bias),
                ("up", &p.up),
                ("up_bias", &p.up_bias),
                ("norm_gain", &p.norm_gain),
                ("norm_bias", &p.norm_bias),
            ],
            PromptParams::RankProbe(p) => vec![("u", &p.u), ("sigma", &p.sigma), ("v", &p.v)],
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            PromptParams::Vanilla(p) => vec![&mut p.prompt],
            PromptParams::Decomposed(p) => vec![&mut p.a, &mut p.b],
            PromptParams::Residual(p) => vec![
                &mut p.prompt,
                &mut p.down,
                &mut p.down_bias,
                &mut p.up,
                &mut p.up_bias,
                &mut p.norm_gain,
                &mut p.norm_bias,
            ],
            PromptParams::RankProbe(p) => vec![&mut p.u, &mut p.sigma, &mut p.v],
        }
    }

    /// Trainable scalars counted by walking the live tensors.
    pub fn trainable_count(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|t| t.requires_grad())
            .map(|t| t.len())
            .sum()
    }

    pub fn embed_dim(&self) -> usize {
        match self {
            PromptParams::Vanilla(p) => p.prompt.rows(),
            PromptParams::Decomposed(p) => p.a.rows(),
            PromptParams::Residual(p) => p.prompt.rows(),
            PromptParams::RankProbe(p) => p.u.rows(),
        }
    }

    pub fn length(&self) -> usize {
        match self {
            PromptParams::Vanilla(p) => p.prompt.cols(),
            PromptParams::Decomposed(p) => p.b.cols(),
            PromptParams::Residual(p) => p.prompt.cols(),
            PromptParams::RankProbe(p) => p.sigma.len(),
        }
    }

    /// Records the prompt computation on `t` and returns the `e×c` node.
    pub fn materialize_on<'a>(&'a self, t: &mut Tape<'a>) -> Result<Var> {
        match self {
            PromptParams::Vanilla(p) => Ok(t.param(&p.prompt)),
            PromptParams::Decomposed(p) => {
                let (a, b) = (t.param(&p.a), t.param(&p.b));
                t.matmul(a, b)
            }
            PromptParams::Residual(p) => {
                let x = t.param(&p.prompt);
                let rows = t.transpose(x)?;
                let down = t.param(&p.down);
                let down_t = t.transpose(down)?;
                let h = t.matmul(rows, down_t)?;
                let db = t.param(&p.down_bias);
                let h = t.add_bias(h, db)?;
                let h = t.relu(h);
                let up = t.param(&p.up);
                let up_t = t.transpose(up)?;
                let o = t.matmul(h, up_t)?;
                let ub = t.param(&p.up_bias);
                let o = t.add_bias(o, ub)?;
                let (g, nb) = (t.param(&p.norm_gain), t.param(&p.norm_bias));
                let o = t.layer_norm(o, g, nb)?;
                let y = t.add(o, rows)?;
                t.transpose(y)
            }
            PromptParams::RankProbe(p) => {
                let u = t.param(&p.u);
                let sigma = t.param(&p.sigma);
                let e = p.u.rows();
                let s = t.diag_embed(sigma, e)?;
                let s = t.relu(s);
                let v = t.param(&p.v);
                let us = t.matmul(u, s)?;
                t.matmul(us, v)
            }
        }
    }

    /// The current prompt matrix `P_emb`.
    pub fn materialize(&self) -> Tensor {
        let mut t = Tape::new();
        let p = self
            .materialize_on(&mut t)
            .expect("parameter shapes are consistent by construction");
        t.to_tensor(p)
    }
}

/// Conventional file name for an exported prompt.
pub fn export_file_name(kind: PromptKind, dims: PromptDims, seed: u64) -> String {
    format!(
        "prompt-{}-e{}-c{}-b{}-seed{}.txt",
        kind.name(),
        dims.embed_dim,
        dims.length,
        dims.bottleneck,
        seed
    )
}

/// Writes the stored product `A·B` in the tensor dump format, so inference
/// can run with a plain `e×c` prompt.
pub fn export_product(param: &DecomposedPrompt, path: &Path) -> Result<PathBuf> {
    let product = param.product();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_record(&mut w, "prompt", &product).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(e: usize, c: usize, b: usize, h: usize) -> PromptDims {
        PromptDims::new(e, c).with_bottleneck(b).with_hidden(h)
    }

    #[test]
    fn decomposed_count_small() {
        let p = PromptParams::init(PromptKind::Decomposed, dims(4, 3, 2, 1), None, InitOptions::default(), 0).unwrap();
        assert_eq!(p.trainable_count(), 14);
        assert_eq!(trainable_param_count(PromptKind::Decomposed, dims(4, 3, 2, 1)), 14);
    }

    #[test]
    fn large_model_formulas() {
        let d = |e| dims(e, 100, 10, 400);
        assert_eq!(trainable_param_count(PromptKind::Decomposed, d(1024)), 11240);
        assert_eq!(trainable_param_count(PromptKind::Vanilla, d(1024)), 102400);
        assert_eq!(trainable_param_count(PromptKind::Residual, d(1024)), 925072);
        assert_eq!(trainable_param_count(PromptKind::Decomposed, d(512)), 6120);
    }

    #[test]
    fn formula_matches_enumeration() {
        for kind in PromptKind::ALL {
            for (e, c, b, h) in [(8, 4, 2, 5), (16, 16, 3, 7), (12, 1, 1, 1)] {
                let d = dims(e, c, b, h);
                let p = PromptParams::init(kind, d, None, InitOptions::default(), 1).unwrap();
                assert_eq!(p.trainable_count(), trainable_param_count(kind, d), "{kind} {d:?}");
            }
        }
    }

    #[test]
    fn rank_probe_starts_all_positive() {
        let p = PromptParams::init(PromptKind::RankProbe, dims(128, 100, 1, 1), None, InitOptions::default(), 0).unwrap();
        let PromptParams::RankProbe(rp) = &p else { unreachable!() };
        assert_eq!(rp.sigma.values().iter().filter(|&&s| s > 0.0).count(), 100);
    }

    #[test]
    fn rank_probe_rejects_long_prompt() {
        let err = PromptParams::init(PromptKind::RankProbe, dims(4, 5, 1, 1), None, InitOptions::default(), 0);
        assert!(matches!(err, Err(Error::Config(_))));
        let err = PromptParams::init(PromptKind::Decomposed, dims(4, 5, 0, 1), None, InitOptions::default(), 0);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn init_is_seeded() {
        for kind in PromptKind::ALL {
            let a = PromptParams::init(kind, dims(8, 4, 2, 3), None, InitOptions::default(), 9).unwrap();
            let b = PromptParams::init(kind, dims(8, 4, 2, 3), None, InitOptions::default(), 9).unwrap();
            for (x, y) in a.tensors().iter().zip(b.tensors()) {
                assert_eq!(*x, y);
            }
        }
    }

    #[test]
    fn copy_init_uses_distinct_rows() {
        let table = Tensor::new(vec![6, 2], (0..12).map(f64::from).collect()).unwrap();
        let p = PromptParams::init(PromptKind::Vanilla, dims(2, 4, 1, 1), Some(&table), InitOptions::default(), 3).unwrap();
        let m = p.materialize();
        let mut rows: Vec<usize> = (0..4).map(|j| (m.at(0, j) / 2.0) as usize).collect();
        for j in 0..4 {
            assert_eq!(m.at(1, j), m.at(0, j) + 1.0);
        }
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), 4);
    }

    #[test]
    fn decomposed_zero_b_gives_zero_prompt() {
        let mut p = PromptParams::init(PromptKind::Decomposed, dims(5, 3, 2, 1), None, InitOptions::default(), 0).unwrap();
        if let PromptParams::Decomposed(d) = &mut p {
            d.b.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        assert!(p.materialize().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decomposed_outer_product() {
        let p = PromptParams::Decomposed(DecomposedPrompt {
            a: Tensor::from_rows(&[&[1.0], &[2.0]]).unwrap(),
            b: Tensor::from_rows(&[&[3.0, 4.0]]).unwrap(),
        });
        assert_eq!(p.materialize().values(), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn rank_probe_negative_sigma_kills_prompt() {
        let mut p = PromptParams::init(PromptKind::RankProbe, dims(6, 4, 1, 1), None, InitOptions::default(), 0).unwrap();
        if let PromptParams::RankProbe(r) = &mut p {
            r.sigma.values_mut().iter_mut().for_each(|v| *v = -0.5);
        }
        assert!(p.materialize().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn materialize_is_pure() {
        for kind in PromptKind::ALL {
            let p = PromptParams::init(kind, dims(8, 4, 2, 3), None, InitOptions::default(), 2).unwrap();
            let (m1, m2) = (p.materialize(), p.materialize());
            assert_eq!(m1, m2);
            assert_eq!(m1.shape(), &[8, 4]);
        }
    }

    #[test]
    fn residual_is_columnwise() {
        // Permuting prompt columns permutes the output columns identically.
        let p = PromptParams::init(PromptKind::Residual, dims(6, 3, 1, 4), None, InitOptions::default(), 5).unwrap();
        let PromptParams::Residual(mut r) = p.clone() else { unreachable!() };
        let before = p.materialize();
        let orig = r.prompt.clone();
        for i in 0..6 {
            for j in 0..3 {
                r.prompt.values_mut()[i * 3 + j] = orig.at(i, 2 - j);
            }
        }
        let after = PromptParams::Residual(r).materialize();
        for i in 0..6 {
            for j in 0..3 {
                assert!((after.at(i, j) - before.at(i, 2 - j)).abs() < 1e-12);
            }
        }
    }
}
