//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every operation in creation order, so the node list is
//! already topologically sorted. [`Tape::backward`] walks it once in reverse
//! and returns the adjoints as an owned [`Gradients`] value; the tape itself
//! is left untouched and can be replayed. Gradients are only propagated
//! through nodes that transitively depend on a tensor with
//! `requires_grad = true`; frozen leaves never get a buffer.
//!
//! Accumulation contract: gradients flow into parameter tensors only through
//! [`Gradients::accumulate_into`], which adds. Two backward passes followed by
//! two accumulations double the stored gradient; call
//! [`Tensor::zero_grad`] between optimizer steps.
//!
//! Second-order derivatives are not supported: adjoints are plain numbers,
//! not tape nodes.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorId};

/// Layer-norm stabilizer.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary {
        kind: Elementwise,
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Scale(Var, f64),
    AddBias(Var, Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    ConcatCols(Var, Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    DiagEmbed(Var),
    Sum(Var),
}

struct Node<'a> {
    value: Cow<'a, [f64]>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    bound: HashMap<TensorId, Var>,
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [r, c] => (*r, *c),
        [n] => (1, *n),
        [] => (1, 1),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [f64]>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Binds a tensor by reference. Binding the same tensor twice returns the
    /// same node, so shared weights accumulate a single gradient.
    pub fn param(&mut self, tensor: &'a Tensor) -> Var {
        if let Some(&v) = self.bound.get(&tensor.id()) {
            return v;
        }
        let v = self.push(
            Cow::Borrowed(tensor.values()),
            tensor.shape().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        );
        self.bound.insert(tensor.id(), v);
        v
    }

    /// Binds an owned tensor.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let id = tensor.id();
        let rg = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        let values = tensor.values().to_vec();
        let v = self.push(Cow::Owned(values), shape, Op::Leaf, rg);
        self.bound.insert(id, v);
        v
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::dimension("constant", &shape, &[values.len()]));
        }
        Ok(self.push(Cow::Owned(values), shape, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is consistent")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dimension("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), vec![m, n], Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dimension("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), vec![c, r], Op::Transpose(x), rg))
    }

    /// Elementwise binary operation. `b` must match `a` exactly or hold a
    /// single element, which is broadcast.
    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let broadcast = sa != sb && self.value(b).len() == 1;
        if sa != sb && !broadcast {
            return Err(Error::dimension("elementwise", sa, sb));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            Elementwise::Add => x + y,
            Elementwise::Sub => x - y,
            Elementwise::Mul => x * y,
        };
        let out: Vec<f64> = if broadcast {
            av.iter().map(|&x| f(x, bv[0])).collect()
        } else {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        };
        let shape = sa.to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Cow::Owned(out),
            shape,
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Cow::Owned(out), shape, Op::Scale(x, factor), rg)
    }

    /// Adds `bias[n]` to every row of `x[m×n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(x));
        if self.value(bias).len() != n {
            return Err(Error::dimension("add_bias", self.shape(x), self.shape(bias)));
        }
        let bv = self.value(bias);
        let mut out = self.value(x).to_vec();
        for i in 0..m {
            for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(bv) {
                *o += b;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Cow::Owned(out), shape, Op::AddBias(x, bias), rg))
    }

    /// Elementwise `max(0, x)`; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Cow::Owned(out), shape, Op::Relu(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(x));
        let xv = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * n..(i + 1) * n];
            let mut total = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - max).exp();
                total += *o;
            }
            orow.iter_mut().for_each(|o| *o /= total);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), shape, Op::SoftmaxRows(x), rg))
    }

    /// Normalizes each vector along the last dimension to zero mean and unit
    /// variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let e = *shape.last().unwrap_or(&1);
        if self.value(gain).len() != e || self.value(bias).len() != e {
            return Err(Error::dimension("layer_norm", &shape, self.shape(gain)));
        }
        let m = if e == 0 { 0 } else { self.value(x).len() / e };
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; m * e];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * e];
        for i in 0..m {
            let row = &xv[i * e..(i + 1) * e];
            let mean = row.iter().sum::<f64>() / e as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / e as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..e {
                let h = (row[j] - mean) * is;
                xhat[i * e + j] = h;
                out[i * e + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Cow::Owned(out),
            shape,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Looks up `ids` in `table[V×e]` and returns the embeddings as the
    /// columns of an `e×n` matrix.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, e) = dims2(self.shape(table));
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Vocabulary {
                id: bad,
                vocab_size: v,
            });
        }
        let n = ids.len();
        let tv = self.value(table);
        let mut out = vec![0.0; e * n];
        for (j, &id) in ids.iter().enumerate() {
            for r in 0..e {
                out[r * n + j] = tv[id * e + r];
            }
        }
        let rg = self.rg(table);
        Ok(self.push(
            Cow::Owned(out),
            vec![e, n],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[t×V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (t, v) = dims2(self.shape(logits));
        if targets.len() != t {
            return Err(Error::dimension("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
            return Err(Error::Vocabulary {
                id: bad,
                vocab_size: v,
            });
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; t * v];
        let mut loss = 0.0;
        for i in 0..t {
            let row = &lv[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[i]];
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
        }
        if t > 0 {
            loss /= t as f64;
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Cow::Owned(vec![loss]),
            vec![1],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Joins `a[r×c1]` and `b[r×c2]` side by side.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::dimension("concat_cols", sa, sb));
        }
        let (r, c1, c2) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(r * (c1 + c2));
        for i in 0..r {
            out.extend_from_slice(&av[i * c1..(i + 1) * c1]);
            out.extend_from_slice(&bv[i * c2..(i + 1) * c2]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), vec![r, c1 + c2], Op::ConcatCols(a, b), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::dimension("slice_cols", s, &[start, len]));
        }
        let (r, c) = (s[0], s[1]);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), vec![r, len], Op::SliceCols { x, start }, rg))
    }

    /// Places a length-`c` vector on the main diagonal of a `rows×c` matrix.
    /// Off-diagonal entries are structural zeros and carry no parameters.
    pub fn diag_embed(&mut self, diag: Var, rows: usize) -> Result<Var> {
        let c = self.value(diag).len();
        if c > rows {
            return Err(Error::dimension("diag_embed", self.shape(diag), &[rows]));
        }
        let mut out = vec![0.0; rows * c];
        for (i, &d) in self.value(diag).iter().enumerate() {
            out[i * c + i] = d;
        }
        let rg = self.rg(diag);
        Ok(self.push(Cow::Owned(out), vec![rows, c], Op::DiagEmbed(diag), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(Cow::Owned(vec![total]), vec![1], Op::Sum(x), rg)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let bound = self
            .bound
            .iter()
            .filter(|(_, v)| grads[v.0].is_some())
            .map(|(&id, &v)| (id, v.0))
            .collect();
        Ok(Gradients {
            by_node: grads,
            bound,
        })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.rg(v) {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.shape(*a));
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |da| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (d, y) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += x * y;
                            }
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = dims2(self.shape(*x));
                acc(*x, &mut |dx| {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let bat = |i: usize| if *broadcast { bv[0] } else { bv[i] };
                acc(*a, &mut |da| match kind {
                    Elementwise::Add | Elementwise::Sub => {
                        da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                    }
                    Elementwise::Mul => {
                        for (i, d) in da.iter_mut().enumerate() {
                            *d += g[i] * bat(i);
                        }
                    }
                });
                acc(*b, &mut |db| {
                    let sign = if *kind == Elementwise::Sub { -1.0 } else { 1.0 };
                    for i in 0..g.len() {
                        let contrib = match kind {
                            Elementwise::Mul => g[i] * av[i],
                            _ => sign * g[i],
                        };
                        if *broadcast {
                            db[0] += contrib;
                        } else {
                            db[i] += contrib;
                        }
                    }
                });
            }
            Op::Scale(x, factor) => {
                acc(*x, &mut |dx| {
                    dx.iter_mut().zip(g).for_each(|(d, v)| *d += v * factor);
                });
            }
            Op::AddBias(x, bias) => {
                let n = self.value(*bias).len();
                acc(*x, &mut |dx| {
                    dx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                });
                acc(*bias, &mut |db| {
                    for row in g.chunks(n.max(1)) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |dx| {
                    for i in 0..dx.len() {
                        if xv[i] > 0.0 {
                            dx[i] += g[i];
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let (m, n) = dims2(self.shape(*x));
                let y = &node.value;
                acc(*x, &mut |dx| {
                    for i in 0..m {
                        let (yr, gr) = (&y[i * n..(i + 1) * n], &g[i * n..(i + 1) * n]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dx[i * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let e = self.value(*gain).len();
                let m = inv_std.len();
                let gv = self.value(*gain);
                acc(*x, &mut |dx| {
                    for i in 0..m {
                        let (gr, hr) = (&g[i * e..(i + 1) * e], &xhat[i * e..(i + 1) * e]);
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..e {
                            let d = gr[j] * gv[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d /= e as f64;
                        mean_dh /= e as f64;
                        for j in 0..e {
                            let d = gr[j] * gv[j];
                            dx[i * e + j] += inv_std[i] * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                });
                acc(*gain, &mut |dg| {
                    for i in 0..m {
                        for j in 0..e {
                            dg[j] += g[i * e + j] * xhat[i * e + j];
                        }
                    }
                });
                acc(*bias, &mut |db| {
                    for row in g.chunks(e.max(1)) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let e = self.shape(*table)[1];
                let n = ids.len();
                acc(*table, &mut |dt| {
                    for (j, &id) in ids.iter().enumerate() {
                        for r in 0..e {
                            dt[id * e + r] += g[r * n + j];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let t = targets.len();
                if t == 0 {
                    return;
                }
                let v = probs.len() / t;
                let scale = g[0] / t as f64;
                acc(*logits, &mut |dl| {
                    for i in 0..t {
                        for j in 0..v {
                            let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                            dl[i * v + j] += scale * (probs[i * v + j] - onehot);
                        }
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let (r, c1) = dims2(self.shape(*a));
                let c2 = self.shape(*b)[1];
                let c = c1 + c2;
                acc(*a, &mut |da| {
                    for i in 0..r {
                        for j in 0..c1 {
                            da[i * c1 + j] += g[i * c + j];
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..r {
                        for j in 0..c2 {
                            db[i * c2 + j] += g[i * c + c1 + j];
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (r, c) = dims2(self.shape(*x));
                let len = node.shape[1];
                acc(*x, &mut |dx| {
                    for i in 0..r {
                        for j in 0..len {
                            dx[i * c + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::DiagEmbed(d) => {
                let c = node.shape[1];
                acc(*d, &mut |dd| {
                    for (i, v) in dd.iter_mut().enumerate() {
                        *v += g[i * c + i];
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0]));
            }
        }
    }
}

/// Adjoints produced by one backward pass.
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
    bound: HashMap<TensorId, usize>,
}

impl Gradients {
    /// Gradient of the loss with respect to a node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.by_node.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a tensor bound with [`Tape::param`] or [`Tape::leaf`].
    pub fn of(&self, tensor: &Tensor) -> Option<&[f64]> {
        self.bound
            .get(&tensor.id())
            .and_then(|&i| self.by_node[i].as_deref())
    }

    /// Whether any gradient reached this tensor.
    pub fn touches(&self, tensor: &Tensor) -> bool {
        self.touches_id(tensor.id())
    }

    pub fn touches_id(&self, id: TensorId) -> bool {
        self.bound.contains_key(&id)
    }

    /// Adds this pass's gradient into `tensor.grad`. No-op for frozen tensors
    /// and tensors the loss does not depend on.
    pub fn accumulate_into(&self, tensor: &mut Tensor) {
        if let Some(g) = self.of(tensor) {
            let g = g.to_vec();
            tensor.accumulate_grad(&g);
        }
    }
}
