//! Dense row-major tensors and the textual dump format used for checkpoints
//! and exported prompts.
//!
//! A dump is a sequence of records, two lines each:
//!
//! ```text
//! <name> shape <d0> <d1> ...
//! <v0> <v1> <v2> ...
//! ```
//!
//! Values are written with 17 significant digits, which round-trips every
//! `f64` exactly.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Identity of a tensor, used by the tape to bind one leaf per tensor and to
/// hand gradients back after a backward pass. Clones receive a fresh id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(u64);

#[derive(Debug)]
pub struct Tensor {
    id: TensorId,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor {
            id: TensorId(fresh_id()),
            shape: self.shape.clone(),
            values: self.values.clone(),
            grad: self.grad.clone(),
            requires_grad: self.requires_grad,
        }
    }
}

impl PartialEq for Tensor {
    /// Compares shape and values only.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.values == other.values
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::dimension("tensor", &shape, &[values.len()]));
        }
        Ok(Tensor {
            id: TensorId(fresh_id()),
            shape,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n]).expect("length matches shape")
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n]).expect("length matches shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value]).expect("length matches shape")
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Config("ragged rows".into()));
        }
        let values = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(vec![rows.len(), cols], values)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    pub fn gaussian<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite standard deviation");
        let n = shape.iter().product();
        let values = (0..n).map(|_| normal.sample(rng)).collect();
        Tensor::new(shape.to_vec(), values).expect("length matches shape")
    }

    /// Marks the tensor as trainable. Builder-style.
    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols() + col]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Adds `delta` into the gradient buffer. Frozen tensors ignore the call
    /// and never allocate a buffer.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        if !self.requires_grad {
            return;
        }
        assert_eq!(delta.len(), self.values.len(), "gradient length");
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub(crate) fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub(crate) fn restore_grad(&mut self, grad: Option<Vec<f64>>) {
        self.grad = grad;
    }

    /// Copy with rows and columns swapped. Only defined for 2-d tensors.
    pub fn transposed(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.values[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out).expect("length matches shape")
    }

    /// Infinity norm of the elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Writes one dump record.
pub fn write_record<W: Write>(out: &mut W, name: &str, tensor: &Tensor) -> std::io::Result<()> {
    let mut header = format!("{name} shape");
    for d in &tensor.shape {
        write!(header, " {d}").expect("string write");
    }
    writeln!(out, "{header}")?;
    let mut line = String::with_capacity(tensor.len() * 24);
    for (i, v) in tensor.values.iter().enumerate() {
        if i > 0 {
            line.push(' ');
        }
        write!(line, "{v:.16e}").expect("string write");
    }
    writeln!(out, "{line}")
}

/// Reads every record from a dump stream. Lines starting with `#` and blank
/// lines between records are skipped.
pub fn read_records<R: BufRead>(input: R) -> Result<Vec<(String, Tensor)>> {
    let mut records = Vec::new();
    let mut lines = input.lines().enumerate();
    while let Some((idx, line)) = lines.next() {
        let line = line.map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let name = fields.next().expect("non-empty line").to_string();
        if fields.next() != Some("shape") {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("expected `{name} shape d0 d1 ...`"),
            });
        }
        let shape = fields
            .map(|f| {
                f.parse::<usize>().map_err(|e| Error::Parse {
                    line: idx + 1,
                    message: format!("bad dimension {f:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (vidx, vline) = match lines.next() {
            Some((i, Ok(l))) => (i, l),
            Some((i, Err(e))) => {
                return Err(Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
            }
            None => {
                return Err(Error::Parse {
                    line: idx + 2,
                    message: format!("missing value line for {name}"),
                })
            }
        };
        let values = vline
            .split_whitespace()
            .map(|f| {
                f.parse::<f64>().map_err(|e| Error::Parse {
                    line: vidx + 1,
                    message: format!("bad value {f:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let tensor = Tensor::new(shape, values).map_err(|e| Error::Parse {
            line: vidx + 1,
            message: e.to_string(),
        })?;
        records.push((name, tensor));
    }
    Ok(records)
}
