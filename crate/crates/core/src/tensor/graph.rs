use std::cell::Cell;
use std::collections::BTreeMap;

use super::kernels::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{Grads, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Tanh(Var),
    Relu(Var),
    Softmax {
        x: Var,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    /// `None` for parameter leaves, which read through the store.
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

thread_local! {
    static CORRUPT_BACKWARD: Cell<Option<&'static str>> = const { Cell::new(None) };
}

/// Runs `f` with the backward rule of `op` deliberately scaled by 1.5 on this
/// thread. Only meant as a negative control for gradient checks.
#[doc(hidden)]
pub fn with_corrupted_backward<R>(op: &'static str, f: impl FnOnce() -> R) -> R {
    let prev = CORRUPT_BACKWARD.with(|c| c.replace(Some(op)));
    let out = f();
    CORRUPT_BACKWARD.with(|c| c.set(prev));
    out
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Softmax { .. } => "softmax",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Embed { .. } => "embed",
            Op::Gather { .. } => "gather",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

/// Gradients of [`Graph::input`] leaves, keyed by their handle.
pub type InputGrads = BTreeMap<Var, Tensor>;

/// One forward pass recorded as a tape.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid topological order for the backward sweep.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    frozen_grads: bool,
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, "rank 2", s)),
    }
}

fn last_dim(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1)
}

impl<'s> Graph<'s> {
    /// A tape over `store`. Backward fills gradient slots for every parameter
    /// touched, frozen ones included.
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            frozen_grads: true,
        }
    }

    /// Skips computing weight gradients of frozen parameters. Gradients still
    /// flow through them to upstream trainable nodes.
    pub fn without_frozen_grads(mut self) -> Self {
        self.frozen_grads = false;
        self
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf that is not backed by the store.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Input,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let p = self.store.get(id);
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: self.frozen_grads || !p.frozen,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", [m, k], [k2, n]));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng, "matmul")
    }

    /// `a · bᵀ` for `a: [M,K]`, `b: [N,K]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul_t")?;
        let (n, k2) = dims2(self.value(b), "matmul_t")?;
        if k != k2 {
            return Err(Error::shape("matmul_t", [m, k], [n, k2]));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b), ng, "matmul_t")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Add(a, b), ng, "add")
    }

    /// Adds a `[N]` bias along the trailing axis of `x: [..., N]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = last_dim(tx);
        if tb.shape() != [n] {
            return Err(Error::shape("add_bias", [n], tb.shape()));
        }
        let data = tx
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(tb.data()).map(|(a, b)| a + b))
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.needs(x) || self.needs(bias);
        self.push(t, Op::AddBias(x, bias), ng, "add_bias")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Mul(a, b), ng, "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v * c).collect())?;
        let ng = self.needs(x);
        self.push(t, Op::Scale(x, c), ng, "scale")
    }

    /// Multiplies every entry of `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.value(s).item()?;
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v * c).collect())?;
        let ng = self.needs(x) || self.needs(s);
        self.push(t, Op::ScaleBy(x, s), ng, "scale_by")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v.tanh()).collect())?;
        let ng = self.needs(x);
        self.push(t, Op::Tanh(x), ng, "tanh")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v.max(0.0)).collect())?;
        let ng = self.needs(x);
        self.push(t, Op::Relu(x), ng, "relu")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Row-wise softmax of attention scores `[Tq, P + Tk]` where the first
    /// `prefix` columns are always visible and column `prefix + j` is visible
    /// to row `i` only when `j <= i`.
    pub fn softmax_causal(&mut self, x: Var, prefix: usize) -> Result<Var> {
        self.softmax_impl(x, Some(prefix))
    }

    fn softmax_impl(&mut self, x: Var, causal_prefix: Option<usize>) -> Result<Var> {
        let tx = self.value(x);
        let n = last_dim(tx);
        let mut out = vec![0.0; tx.numel()];
        if causal_prefix.is_some() && tx.rank() != 2 {
            return Err(Error::shape("softmax_causal", "rank 2", tx.shape()));
        }
        for (r, (row, o)) in tx.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let visible = match causal_prefix {
                Some(p) => (p + r + 1).min(n),
                None => n,
            };
            if visible == 0 {
                return Err(Error::Contract("softmax row with every entry masked".into()));
            }
            let max = row[..visible].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, v) in o[..visible].iter_mut().zip(&row[..visible]) {
                *o = (v - max).exp();
                z += *o;
            }
            o[..visible].iter_mut().for_each(|v| *v /= z);
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.needs(x);
        self.push(t, Op::Softmax { x }, ng, "softmax")
    }

    /// `x / sqrt(mean(x²) + eps) · gain` over the last axis.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let h = last_dim(tx);
        if tg.shape() != [h] {
            return Err(Error::shape("rms_norm", [h], tg.shape()));
        }
        let mut inv_rms = Vec::with_capacity(tx.numel() / h.max(1));
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(h) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / h as f64;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(tg.data()).map(|(v, g)| v * r * g));
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.needs(x) || self.needs(gain);
        self.push(t, Op::RmsNorm { x, gain, inv_rms }, ng, "rms_norm")
    }

    /// Row lookup `table[ids[i], :]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, h) = dims2(tt, "embed")?;
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= v {
                return Err(Error::Contract(format!("token id {id} out of range for vocab {v}")));
            }
            out.extend_from_slice(&tt.data()[id * h..(id + 1) * h]);
        }
        let t = Tensor::new(vec![ids.len(), h], out)?;
        let ng = self.needs(table);
        self.push(
            t,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            ng,
            "embed",
        )
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`. Slicing,
    /// transposes and reshapes are all expressed through this op.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::shape("gather", index.len(), &shape));
        }
        let n = tx.numel();
        let mut out = Vec::with_capacity(index.len());
        for &i in &index {
            if i >= n {
                return Err(Error::Contract(format!("gather index {i} out of range {n}")));
            }
            out.push(tx.data()[i]);
        }
        let t = Tensor::new(shape, out)?;
        let ng = self.needs(x);
        self.push(t, Op::Gather { x, index }, ng, "gather")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if shape.iter().product::<usize>() != n {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        self.gather(x, (0..n).collect(), shape.to_vec())
    }

    /// Rows `[start, end)` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "slice_rows")?;
        if start > end || end > r {
            return Err(Error::shape("slice_rows", r, (start, end)));
        }
        self.gather(x, (start * c..end * c).collect(), vec![end - start, c])
    }

    /// Columns `[start, end)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "slice_cols")?;
        if start > end || end > c {
            return Err(Error::shape("slice_cols", c, (start, end)));
        }
        let index = (0..r).flat_map(|i| (start..end).map(move |j| i * c + j)).collect();
        self.gather(x, index, vec![r, end - start])
    }

    /// Contiguous block `x.flat[offset .. offset + prod(shape)]`.
    pub fn slice_flat(&mut self, x: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.gather(x, (offset..offset + n).collect(), shape.to_vec())
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_rows of nothing".into()));
        };
        let (_, c) = dims2(self.value(first), "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c2) = dims2(self.value(p), "concat_rows")?;
            if c2 != c {
                return Err(Error::shape("concat_rows", c, c2));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::new(vec![rows, c], out)?, Op::ConcatRows(parts.to_vec()), ng, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_cols of nothing".into()));
        };
        let (r, _) = dims2(self.value(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r2, c) = dims2(self.value(p), "concat_cols")?;
            if r2 != r {
                return Err(Error::shape("concat_cols", r, r2));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::new(vec![r, total], out)?, Op::ConcatCols(parts.to_vec()), ng, "concat_cols")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng, "mean")
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits: [T, V]`, skipping positions equal to `pad`. An all-pad target
    /// yields 0 with zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad: usize) -> Result<Var> {
        let tl = self.value(logits);
        let (t, v) = dims2(tl, "cross_entropy")?;
        if targets.len() != t {
            return Err(Error::shape("cross_entropy", t, targets.len()));
        }
        let mut probs = vec![0.0; t * v];
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, &y) in targets.iter().enumerate() {
            let row = &tl.data()[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            for (p, x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
            if y == pad {
                continue;
            }
            if y >= v {
                return Err(Error::Contract(format!("target {y} out of range for vocab {v}")));
            }
            total += lse - row[y];
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let ng = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad,
                probs,
            },
            ng,
            "cross_entropy",
        )
    }

    /// Reverse sweep from a scalar `loss`. Parameter gradients are added into
    /// `grads` (repeated calls accumulate); gradients of [`Graph::input`]
    /// leaves are returned.
    pub fn backward(&self, loss: Var, grads: &mut Grads) -> Result<InputGrads> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut g: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(vec![1.0]);
        let mut inputs = InputGrads::new();
        let corrupt = CORRUPT_BACKWARD.with(Cell::get);

        for i in (0..=loss.0).rev() {
            let Some(gout) = g[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Input => {
                    inputs.insert(Var(i), Tensor::new(self.value(Var(i)).shape().to_vec(), gout)?);
                }
                Op::Param(id) => grads.accumulate(*id, self.store.value(*id).shape(), &gout),
                op if corrupt == Some(op.name()) => {
                    let bad: Vec<f64> = gout.iter().map(|x| x * 1.5).collect();
                    self.backward_op(op, Var(i), &bad, &mut g)?
                }
                op => self.backward_op(op, Var(i), &gout, &mut g)?,
            }
        }
        Ok(inputs)
    }

    fn acc(&self, g: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let slot = g[v.0].get_or_insert_with(|| vec![0.0; self.value(v).numel()]);
        f(slot);
    }

    fn backward_op(&self, op: &Op, out: Var, gout: &[f64], g: &mut [Option<Vec<f64>>]) -> Result<()> {
        match op {
            Op::Constant | Op::Input | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.value(*a), "matmul")?;
                let n = self.value(*b).shape()[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // dA = dC · Bᵀ, dB = Aᵀ · dC
                self.acc(g, *a, |ga| matmul_nt_acc(gout, bv, ga, m, n, k));
                self.acc(g, *b, |gb| matmul_tn_acc(av, gout, gb, m, k, n));
            }
            Op::MatMulT(a, b) => {
                let (m, k) = dims2(self.value(*a), "matmul_t")?;
                let n = self.value(*b).shape()[0];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // C = A·Bᵀ: dA = dC · B, dB = dCᵀ · A
                self.acc(g, *a, |ga| matmul_acc(gout, bv, ga, m, n, k));
                self.acc(g, *b, |gb| matmul_tn_acc(gout, av, gb, m, n, k));
            }
            Op::Add(a, b) => {
                self.acc(g, *a, |ga| ga.iter_mut().zip(gout).for_each(|(x, y)| *x += y));
                self.acc(g, *b, |gb| gb.iter_mut().zip(gout).for_each(|(x, y)| *x += y));
            }
            Op::AddBias(x, bias) => {
                let n = self.value(*bias).numel();
                self.acc(g, *x, |gx| gx.iter_mut().zip(gout).for_each(|(a, b)| *a += b));
                self.acc(g, *bias, |gb| {
                    for row in gout.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(g, *a, |ga| {
                    for ((x, y), z) in ga.iter_mut().zip(gout).zip(bv) {
                        *x += y * z;
                    }
                });
                self.acc(g, *b, |gb| {
                    for ((x, y), z) in gb.iter_mut().zip(gout).zip(av) {
                        *x += y * z;
                    }
                });
            }
            Op::Scale(x, c) => {
                self.acc(g, *x, |gx| gx.iter_mut().zip(gout).for_each(|(a, b)| *a += b * c));
            }
            Op::ScaleBy(x, s) => {
                let c = self.value(*s).data()[0];
                let xv = self.value(*x).data();
                self.acc(g, *x, |gx| gx.iter_mut().zip(gout).for_each(|(a, b)| *a += b * c));
                self.acc(g, *s, |gs| {
                    gs[0] += gout.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
                });
            }
            Op::Tanh(x) => {
                let y = self.value(out).data();
                self.acc(g, *x, |gx| {
                    for ((a, b), y) in gx.iter_mut().zip(gout).zip(y) {
                        *a += b * (1.0 - y * y);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.acc(g, *x, |gx| {
                    for ((a, b), v) in gx.iter_mut().zip(gout).zip(xv) {
                        if *v > 0.0 {
                            *a += b;
                        }
                    }
                });
            }
            Op::Softmax { x, .. } => {
                let y = self.value(out);
                let n = last_dim(y);
                self.acc(g, *x, |gx| {
                    for ((gr, yr), gor) in gx.chunks_mut(n).zip(y.data().chunks(n)).zip(gout.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gor).map(|(a, b)| a * b).sum();
                        for ((a, yv), gv) in gr.iter_mut().zip(yr).zip(gor) {
                            *a += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let h = gv.len();
                self.acc(g, *x, |gx| {
                    for (r, ((gxr, xr), gor)) in gx.chunks_mut(h).zip(xv.chunks(h)).zip(gout.chunks(h)).enumerate() {
                        let ir = inv_rms[r];
                        let dot: f64 = gor.iter().zip(gv).zip(xr).map(|((a, b), c)| a * b * c).sum();
                        let k = ir * ir * ir * dot / h as f64;
                        for j in 0..h {
                            gxr[j] += ir * gor[j] * gv[j] - xr[j] * k;
                        }
                    }
                });
                self.acc(g, *gain, |gg| {
                    for (r, (xr, gor)) in xv.chunks(h).zip(gout.chunks(h)).enumerate() {
                        for j in 0..h {
                            gg[j] += gor[j] * xr[j] * inv_rms[r];
                        }
                    }
                });
            }
            Op::Embed { table, ids } => {
                let h = self.value(*table).shape()[1];
                self.acc(g, *table, |gt| {
                    for (row, &id) in gout.chunks(h).zip(ids) {
                        gt[id * h..(id + 1) * h].iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Gather { x, index } => {
                self.acc(g, *x, |gx| {
                    for (&i, v) in index.iter().zip(gout) {
                        gx[i] += v;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.acc(g, p, |gp| gp.iter_mut().zip(&gout[off..off + n]).for_each(|(a, b)| *a += b));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let r = self.value(out).shape()[0];
                let total = self.value(out).shape()[1];
                let mut col = 0;
                for &p in parts {
                    let c = self.value(p).shape()[1];
                    self.acc(g, p, |gp| {
                        for i in 0..r {
                            let src = &gout[i * total + col..i * total + col + c];
                            gp[i * c..(i + 1) * c].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    });
                    col += c;
                }
            }
            Op::Sum(x) => {
                let s = gout[0];
                self.acc(g, *x, |gx| gx.iter_mut().for_each(|a| *a += s));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel().max(1) as f64;
                let s = gout[0] / n;
                self.acc(g, *x, |gx| gx.iter_mut().for_each(|a| *a += s));
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad,
                probs,
            } => {
                let v = self.value(*logits).shape()[1];
                let count = targets.iter().filter(|&&t| t != *pad).count();
                if count == 0 {
                    return Ok(());
                }
                let s = gout[0] / count as f64;
                self.acc(g, *logits, |gl| {
                    for (i, &y) in targets.iter().enumerate() {
                        if y == *pad {
                            continue;
                        }
                        let row = &mut gl[i * v..(i + 1) * v];
                        for (a, p) in row.iter_mut().zip(&probs[i * v..(i + 1) * v]) {
                            *a += s * p;
                        }
                        row[y] -= s;
                    }
                });
            }
        }
        Ok(())
    }
}
