//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! parameters (as a [`GradBuffer`]) and for `input` nodes. Parameter values
//! are borrowed from a [`ParamSource`], so the anchor store and the EMA
//! target view can drive the same model code.

use super::tensor::{gemm, inv_rms, Trans};
use super::{GradBuffer, ParamId, ParamSource, Real, Rng, Tensor};
use crate::error::{Result, TigrError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var, Trans),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    CosTail(Var),
    Softmax(Var),
    RmsNorm(Var, Var),
    Gather(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var, Vec<bool>),
    Rope(Var, Vec<f64>),
    L2Normalize(Var),
    SumCols(Var),
    Mean(Var),
    CrossEntropy(Var, Vec<usize>),
    Mse(Var, Vec<f64>),
    BlockAttention {
        q: Var,
        k: Var,
        v: Var,
        blocks: Vec<(usize, usize)>,
        scale: f64,
        probs: Vec<Vec<f64>>,
    },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op,
    needs_grad: bool,
}

pub const ROPE_BASE: f64 = 10_000.0;

pub struct Graph<'a, T: Real> {
    source: &'a dyn ParamSource<T>,
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

/// Result of a backward pass.
pub struct Gradients<T> {
    pub params: GradBuffer<T>,
    nodes: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a node created by [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(source: &'a dyn ParamSource<T>) -> Self {
        Graph {
            source,
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape whose parameters never require gradients.
    pub fn frozen(source: &'a dyn ParamSource<T>) -> Self {
        Graph {
            source,
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.source.param(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push_node(Some(value), op, needs_grad)
    }

    fn push_node(&mut self, value: Option<Tensor<T>>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, op: &'static str, a: Var, b: Var, ok: bool) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(TigrError::Dimension {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            })
        }
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_node(Some(t), Op::Constant, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push_node(Some(t), Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let g = self.grad_enabled;
        self.push_node(None, Op::Param(id), g)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, Trans::None)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, Trans::Rhs)
    }

    fn matmul_t(&mut self, a: Var, b: Var, t: Trans) -> Result<Var> {
        let v = gemm(self.value(a), self.value(b), t)?;
        Ok(self.push(v, Op::MatMul(a, b, t), &[a, b]))
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        self.check(name, a, b, x.numel() == y.numel() && x.cols() == y.cols())?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let v = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(v, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), "add", |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), "sub", |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), "mul", |p, q| p * q)
    }

    /// `x[m×n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.row_op(x, b, Op::AddRow(x, b), "add_row", |p, q| p + q)
    }

    /// `x[m×n] ⊙ g[n]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        self.row_op(x, g, Op::MulRow(x, g), "mul_row", |p, q| p * q)
    }

    fn row_op(&mut self, x: Var, b: Var, op: Op, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = xv.cols();
        self.check(name, x, b, bv.numel() == n)?;
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            for (o, &q) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o = f(*o, q);
            }
        }
        Ok(self.push(out, op, &[x, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let ct = T::from_f64(c);
        let v = self.value(x).map(|p| p * ct);
        self.push(v, Op::Scale(x, c), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|p| p / (T::one() + (-p).exp()));
        self.push(v, Op::Silu(x), &[x])
    }

    /// Column 0 passes through; every other column is replaced by its cosine.
    pub fn cos_tail(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let n = v.cols();
        for r in 0..v.rows() {
            for o in &mut v.row_mut(r)[1..n] {
                *o = o.cos();
            }
        }
        self.push(v, Op::CosTail(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var, allowed: Option<Vec<bool>>) -> Result<Var> {
        if let Some(m) = &allowed {
            if m.len() != self.value(x).cols() {
                return Err(TigrError::Dimension {
                    op: "softmax mask",
                    lhs: self.value(x).shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let v = super::softmax_rows(self.value(x), allowed.as_deref());
        Ok(self.push(v, Op::Softmax(x), &[x]))
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let v = super::rmsnorm(self.value(x), self.value(gain))?;
        Ok(self.push(v, Op::RmsNorm(x, gain), &[x, gain]))
    }

    /// Row lookup `table[ids]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, d) = (t.rows(), t.cols());
        if ids.is_empty() {
            return Err(TigrError::Contract("gather with no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TigrError::Index {
                    what: "embedding table",
                    index: id,
                    size: vocab,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let v = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(v, Op::Gather(table, ids.to_vec()), &[table]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        for &p in parts {
            self.check("concat_cols", parts[0], p, self.value(p).rows() == m)?;
        }
        let n: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let v = Tensor::new(vec![m, n], data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).cols();
        for &p in parts {
            self.check("concat_rows", parts[0], p, self.value(p).cols() == n)?;
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let m = data.len() / n;
        let v = Tensor::new(vec![m, n], data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start >= end || end > xv.rows() {
            return Err(TigrError::Index {
                what: "slice_rows",
                index: end,
                size: xv.rows(),
            });
        }
        let n = xv.cols();
        let v = Tensor::new(vec![end - start, n], xv.data()[start * n..end * n].to_vec())?;
        Ok(self.push(v, Op::SliceRows(x, start), &[x]))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start >= end || end > xv.cols() {
            return Err(TigrError::Index {
                what: "slice_cols",
                index: end,
                size: xv.cols(),
            });
        }
        let mut data = Vec::with_capacity(xv.rows() * (end - start));
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..end]);
        }
        let v = Tensor::new(vec![xv.rows(), end - start], data)?;
        Ok(self.push(v, Op::SliceCols(x, start), &[x]))
    }

    /// Mean over the rows flagged in `keep`, as a `1 × n` tensor.
    pub fn mean_rows(&mut self, x: Var, keep: Vec<bool>) -> Result<Var> {
        let xv = self.value(x);
        if keep.len() != xv.rows() {
            return Err(TigrError::Dimension {
                op: "mean_rows",
                lhs: xv.shape().to_vec(),
                rhs: vec![keep.len()],
            });
        }
        let count = keep.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(TigrError::Contract("mean over zero rows (all positions padded)".into()));
        }
        let n = xv.cols();
        let mut acc = vec![0.0f64; n];
        for (r, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
            for (a, v) in acc.iter_mut().zip(xv.row(r)) {
                *a += v.as_f64();
            }
        }
        let v = Tensor::new(vec![1, n], acc.iter().map(|a| T::from_f64(a / count as f64)).collect())?;
        Ok(self.push(v, Op::MeanRows(x, keep), &[x]))
    }

    /// Rotary position embedding: pairs `(2i, 2i+1)` of row `r` are rotated
    /// by `positions[r] · ROPE_BASE^(−2i/d)`.
    pub fn rope(&mut self, x: Var, positions: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if d % 2 != 0 {
            return Err(TigrError::config("head_dim", format!("RoPE needs an even width, got {d}")));
        }
        if positions.len() != xv.rows() {
            return Err(TigrError::Dimension {
                op: "rope",
                lhs: xv.shape().to_vec(),
                rhs: vec![positions.len()],
            });
        }
        let pos: Vec<f64> = positions.iter().map(|&p| p as f64).collect();
        let v = rope_apply(xv, &pos, 1.0);
        Ok(self.push(v, Op::Rope(x, pos), &[x]))
    }

    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let inv = 1.0 / l2(row);
            row.iter_mut().for_each(|p| *p = T::from_f64(p.as_f64() * inv));
        }
        self.push(v, Op::L2Normalize(x), &[x])
    }

    /// Row sums as an `m × 1` tensor.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = (0..xv.rows())
            .map(|r| T::from_f64(xv.row(r).iter().map(|v| v.as_f64()).sum()))
            .collect();
        let v = Tensor::new(vec![xv.rows(), 1], data)?;
        Ok(self.push(v, Op::SumCols(x), &[x]))
    }

    /// Mean of all entries as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data().iter().map(|v| v.as_f64()).sum::<f64>() / xv.numel() as f64;
        self.push(Tensor::scalar(T::from_f64(m)), Op::Mean(x), &[x])
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if targets.len() != lv.rows() {
            return Err(TigrError::Dimension {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            if t >= row.len() {
                return Err(TigrError::Index {
                    what: "cross_entropy target",
                    index: t,
                    size: row.len(),
                });
            }
            total += log_sum_exp(row) - row[t].as_f64();
        }
        let v = Tensor::scalar(T::from_f64(total / targets.len() as f64));
        Ok(self.push(v, Op::CrossEntropy(logits, targets.to_vec()), &[logits]))
    }

    /// Mean squared error of an `m × 1` prediction against `targets`.
    pub fn mse(&mut self, pred: Var, targets: &[f64]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.numel() != targets.len() {
            return Err(TigrError::Dimension {
                op: "mse",
                lhs: pv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let s: f64 = pv.data().iter().zip(targets).map(|(p, y)| (p.as_f64() - y).powi(2)).sum();
        let v = Tensor::scalar(T::from_f64(s / targets.len() as f64));
        Ok(self.push(v, Op::Mse(pred, targets.to_vec()), &[pred]))
    }

    /// Scaled dot-product attention restricted to row blocks: for each
    /// `(start, end)` the rows of `q` attend only to the same rows of `k` and
    /// `v`. Rows outside every block are zero in the output.
    pub fn block_attention(&mut self, q: Var, k: Var, v: Var, blocks: &[(usize, usize)], scale: f64) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        self.check("block_attention q/k", q, k, qv.shape() == kv.shape())?;
        self.check("block_attention k/v", k, v, kv.rows() == vv.rows())?;
        let (n, dk, dv) = (qv.rows(), qv.cols(), vv.cols());
        let mut out = vec![T::zero(); n * dv];
        let mut probs = Vec::with_capacity(blocks.len());
        for &(s, e) in blocks {
            if s >= e || e > n {
                return Err(TigrError::Index {
                    what: "attention block",
                    index: e,
                    size: n,
                });
            }
            let len = e - s;
            let mut a = vec![0.0f64; len * len];
            for i in 0..len {
                let qi = qv.row(s + i);
                let row = &mut a[i * len..(i + 1) * len];
                for (j, o) in row.iter_mut().enumerate() {
                    let kj = kv.row(s + j);
                    *o = scale * (0..dk).map(|c| qi[c].as_f64() * kj[c].as_f64()).sum::<f64>();
                }
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for o in row.iter_mut() {
                    *o = (*o - m).exp();
                    z += *o;
                }
                row.iter_mut().for_each(|o| *o /= z);
                let orow = &mut out[(s + i) * dv..(s + i + 1) * dv];
                for (j, &p) in row.iter().enumerate() {
                    for (o, x) in orow.iter_mut().zip(vv.row(s + j)) {
                        *o += T::from_f64(p * x.as_f64());
                    }
                }
            }
            probs.push(a);
        }
        let value = Tensor::new(vec![n, dv], out)?;
        let op = Op::BlockAttention {
            q,
            k,
            v,
            blocks: blocks.to_vec(),
            scale,
            probs,
        };
        Ok(self.push(value, op, &[q, k, v]))
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let wv = self.param(w);
        let y = self.matmul(x, wv)?;
        match b {
            Some(b) => {
                let bv = self.param(b);
                self.add_row(y, bv)
            }
            None => Ok(y),
        }
    }

    /// Inverted dropout with keep-probability `1 − p`; identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let xv = self.value(x);
        let scale = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..xv.numel())
            .map(|_| if rng.bernoulli(p) { T::zero() } else { scale })
            .collect();
        let m = self.constant(Tensor::new(xv.shape().to_vec(), mask)?);
        self.mul(x, m)
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TigrError::Contract("backward from a non-scalar".into()));
        }
        self.backward_from(vec![(loss, Tensor::ones(self.value(loss).shape()))])
    }

    /// Backward pass seeded with explicit output gradients.
    pub fn backward_from(&self, seeds: Vec<(Var, Tensor<T>)>) -> Result<Gradients<T>> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads, v, g, self.value(v).shape());
        }
        let mut params = GradBuffer::new(0);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if !g.is_finite() {
                return Err(TigrError::NonFinite(format!("gradient at node {i} ({:?})", op_name(&node.op))));
            }
            let out = self.nodes[i].value.as_ref();
            match &node.op {
                Op::Constant => {}
                Op::Input => {
                    grads[i] = Some(g);
                }
                Op::Param(id) => params.add(*id, &reshape_like(g, self.source.param(*id).shape())),
                Op::MatMul(a, b, t) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (ga, gb) = match t {
                        Trans::None => (gemm(&g, bv, Trans::Rhs)?, gemm(av, &g, Trans::Lhs)?),
                        Trans::Rhs => (gemm(&g, bv, Trans::None)?, gemm(&g, av, Trans::Lhs)?),
                        Trans::Lhs => (gemm(bv, &g, Trans::Rhs)?, gemm(av, &g, Trans::None)?),
                    };
                    self.send(&mut grads, *a, ga);
                    self.send(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    self.send(&mut grads, *a, g.clone());
                    self.send(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    self.send(&mut grads, *b, g.map(|x| -x));
                    self.send(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = elementwise(&g, self.value(*b), |p, q| p * q);
                    let gb = elementwise(&g, self.value(*a), |p, q| p * q);
                    self.send(&mut grads, *a, ga);
                    self.send(&mut grads, *b, gb);
                }
                Op::AddRow(x, b) => {
                    let gb = column_sums(&g, |_, v| v);
                    self.send(&mut grads, *b, gb);
                    self.send(&mut grads, *x, g);
                }
                Op::MulRow(x, s) => {
                    let xv = self.value(*x);
                    let sv = self.value(*s);
                    let gs = column_sums(&g, |idx, v| v * xv.data()[idx].as_f64());
                    let mut gx = g;
                    let c = gx.cols();
                    for (k, v) in gx.data_mut().iter_mut().enumerate() {
                        *v *= sv.data()[k % c];
                    }
                    self.send(&mut grads, *s, gs);
                    self.send(&mut grads, *x, gx);
                }
                Op::Scale(x, c) => {
                    let ct = T::from_f64(*c);
                    self.send(&mut grads, *x, g.map(|v| v * ct));
                }
                Op::Silu(x) => {
                    let gx = elementwise(&g, self.value(*x), |gv, xv| {
                        let s = T::one() / (T::one() + (-xv).exp());
                        gv * s * (T::one() + xv * (T::one() - s))
                    });
                    self.send(&mut grads, *x, gx);
                }
                Op::CosTail(x) => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut gx = g;
                    for (k, v) in gx.data_mut().iter_mut().enumerate() {
                        if k % c != 0 {
                            *v *= -xv.data()[k].sin();
                        }
                    }
                    self.send(&mut grads, *x, gx);
                }
                Op::Softmax(x) => {
                    let y = out.expect("softmax value");
                    let c = y.cols();
                    let mut gx = g;
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &mut gx.data_mut()[r * c..(r + 1) * c];
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv = T::from_f64(yv.as_f64() * (gv.as_f64() - dot));
                        }
                    }
                    self.send(&mut grads, *x, gx);
                }
                Op::RmsNorm(x, gain) => {
                    let (xv, gv) = (self.value(*x), self.value(*gain));
                    let d = xv.cols();
                    let mut gx = Tensor::zeros(xv.shape());
                    let mut ggain = vec![0.0f64; d];
                    for r in 0..xv.rows() {
                        let xr = xv.row(r);
                        let gr = g.row(r);
                        let inv = inv_rms(xr);
                        let mut dot = 0.0f64;
                        for k in 0..d {
                            let u = gr[k].as_f64() * gv.data()[k].as_f64();
                            dot += u * xr[k].as_f64();
                            ggain[k] += gr[k].as_f64() * xr[k].as_f64() * inv;
                        }
                        let coef = inv.powi(3) * dot / d as f64;
                        for (k, o) in gx.row_mut(r).iter_mut().enumerate() {
                            let u = gr[k].as_f64() * gv.data()[k].as_f64();
                            *o = T::from_f64(inv * u - xr[k].as_f64() * coef);
                        }
                    }
                    let gg = Tensor::new(gv.shape().to_vec(), ggain.into_iter().map(T::from_f64).collect())?;
                    self.send(&mut grads, *gain, gg);
                    self.send(&mut grads, *x, gx);
                }
                Op::Gather(table, ids) => {
                    if let Some(acc) = self.slot(&mut grads, *table) {
                        for (r, &id) in ids.iter().enumerate() {
                            for (o, &v) in acc.row_mut(id).iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                    }
                }
                Op::BlockAttention {
                    q,
                    k,
                    v,
                    blocks,
                    scale,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let dk = qv.cols();
                    let mut gq = Tensor::zeros(qv.shape());
                    let mut gk = Tensor::zeros(kv.shape());
                    let mut gvv = Tensor::zeros(vv.shape());
                    for (&(s, e), a) in blocks.iter().zip(probs) {
                        let len = e - s;
                        for i in 0..len {
                            let go = g.row(s + i);
                            let ar = &a[i * len..(i + 1) * len];
                            // dA_ij = <dO_i, V_j>; dS = A ⊙ (dA − <dA, A>)
                            let da: Vec<f64> = (0..len)
                                .map(|j| go.iter().zip(vv.row(s + j)).map(|(x, y)| x.as_f64() * y.as_f64()).sum())
                                .collect();
                            let dot: f64 = da.iter().zip(ar).map(|(x, y)| x * y).sum();
                            for j in 0..len {
                                let p = ar[j];
                                for (o, x) in gvv.row_mut(s + j).iter_mut().zip(go) {
                                    *o += T::from_f64(p * x.as_f64());
                                }
                                let ds = scale * p * (da[j] - dot);
                                if ds == 0.0 {
                                    continue;
                                }
                                for c in 0..dk {
                                    let kc = kv.row(s + j)[c].as_f64();
                                    let qc = qv.row(s + i)[c].as_f64();
                                    gq.row_mut(s + i)[c] += T::from_f64(ds * kc);
                                    gk.row_mut(s + j)[c] += T::from_f64(ds * qc);
                                }
                            }
                        }
                    }
                    self.send(&mut grads, *q, gq);
                    self.send(&mut grads, *k, gk);
                    self.send(&mut grads, *v, gvv);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut data = Vec::with_capacity(g.rows() * w);
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        let gp = Tensor::new(vec![g.rows(), w], data)?;
                        self.send(&mut grads, p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).numel();
                        let gp = Tensor::new(vec![len / c, c], g.data()[off..off + len].to_vec())?;
                        off += len;
                        self.send(&mut grads, p, gp);
                    }
                }
                Op::SliceRows(x, start) => {
                    if let Some(acc) = self.slot(&mut grads, *x) {
                        let c = acc.cols();
                        for (o, v) in acc.data_mut()[start * c..start * c + g.numel()].iter_mut().zip(g.data()) {
                            *o += *v;
                        }
                    }
                }
                Op::SliceCols(x, start) => {
                    if let Some(acc) = self.slot(&mut grads, *x) {
                        let w = g.cols();
                        for r in 0..acc.rows() {
                            for (o, v) in acc.row_mut(r)[*start..start + w].iter_mut().zip(g.row(r)) {
                                *o += *v;
                            }
                        }
                    }
                }
                Op::MeanRows(x, keep) => {
                    let xv = self.value(*x);
                    let count = keep.iter().filter(|&&k| k).count() as f64;
                    let mut gx = Tensor::zeros(xv.shape());
                    for (r, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
                        for (o, v) in gx.row_mut(r).iter_mut().zip(g.data()) {
                            *o = T::from_f64(v.as_f64() / count);
                        }
                    }
                    self.send(&mut grads, *x, gx);
                }
                Op::Rope(x, pos) => {
                    let gx = rope_apply(&g, pos, -1.0);
                    self.send(&mut grads, *x, gx);
                }
                Op::L2Normalize(x) => {
                    let xv = self.value(*x);
                    let y = out.expect("normalised value");
                    let mut gx = g;
                    for r in 0..y.rows() {
                        let inv = 1.0 / l2(xv.row(r));
                        let yr = y.row(r);
                        let gr = gx.row_mut(r);
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv = T::from_f64((gv.as_f64() - yv.as_f64() * dot) * inv);
                        }
                    }
                    self.send(&mut grads, *x, gx);
                }
                Op::SumCols(x) => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let data = (0..xv.numel()).map(|k| g.data()[k / c]).collect();
                    self.send(&mut grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let v = T::from_f64(g.item().as_f64() / xv.numel() as f64);
                    self.send(&mut grads, *x, Tensor::full(xv.shape(), v));
                }
                Op::CrossEntropy(logits, targets) => {
                    let lv = self.value(*logits);
                    let m = targets.len() as f64;
                    let scale = g.item().as_f64() / m;
                    let mut gl = super::softmax_rows(lv, None);
                    for (r, &t) in targets.iter().enumerate() {
                        let row = gl.row_mut(r);
                        row[t] -= T::one();
                        row.iter_mut().for_each(|v| *v = T::from_f64(v.as_f64() * scale));
                    }
                    self.send(&mut grads, *logits, gl);
                }
                Op::Mse(pred, targets) => {
                    let pv = self.value(*pred);
                    let scale = 2.0 * g.item().as_f64() / targets.len() as f64;
                    let data = pv
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(p, y)| T::from_f64(scale * (p.as_f64() - y)))
                        .collect();
                    self.send(&mut grads, *pred, Tensor::new(pv.shape().to_vec(), data)?);
                }
            }
        }
        Ok(Gradients { params, nodes: grads })
    }

    /// Gradient accumulator for `v`, created as zeros on first use; `None`
    /// when `v` needs no gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut Tensor<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let shape = self.value(v).shape().to_vec();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(&shape)))
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if self.nodes[v.0].needs_grad {
            accumulate(grads, v, g, self.value(v).shape());
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>, shape: &[usize]) {
    let g = reshape_like(g, shape);
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn reshape_like<T: Real>(g: Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        g
    } else {
        g.reshape(shape.to_vec()).expect("gradient numel matches value")
    }
}

fn elementwise<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same numel")
}

/// Sums `f(flat_index, value)` down each column into a length-`cols` vector.
fn column_sums<T: Real>(g: &Tensor<T>, f: impl Fn(usize, f64) -> f64) -> Tensor<T> {
    let c = g.cols();
    let mut acc = vec![0.0f64; c];
    for (k, v) in g.data().iter().enumerate() {
        acc[k % c] += f(k, v.as_f64());
    }
    Tensor::new(vec![c], acc.into_iter().map(T::from_f64).collect()).expect("non-empty")
}

fn l2<T: Real>(row: &[T]) -> f64 {
    row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt().max(1e-12)
}

fn log_sum_exp<T: Real>(row: &[T]) -> f64 {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln()
}

/// Rotates coordinate pairs; `sign = -1` applies the inverse rotation.
pub(crate) fn rope_apply<T: Real>(x: &Tensor<T>, positions: &[f64], sign: f64) -> Tensor<T> {
    let d = x.cols();
    let mut out = x.clone();
    for (r, &p) in positions.iter().enumerate() {
        let row = out.row_mut(r);
        for i in 0..d / 2 {
            let omega = ROPE_BASE.powf(-2.0 * i as f64 / d as f64);
            let (s, c) = (sign * p * omega).sin_cos();
            let (a, b) = (row[2 * i].as_f64(), row[2 * i + 1].as_f64());
            row[2 * i] = T::from_f64(a * c - b * s);
            row[2 * i + 1] = T::from_f64(a * s + b * c);
        }
    }
    out
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Constant => "constant",
        Op::Input => "input",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::Scale(..) => "scale",
        Op::Silu(_) => "silu",
        Op::CosTail(_) => "cos_tail",
        Op::Softmax(..) => "softmax",
        Op::RmsNorm(..) => "rmsnorm",
        Op::Gather(..) => "gather",
        Op::ConcatCols(_) => "concat_cols",
        Op::ConcatRows(_) => "concat_rows",
        Op::SliceRows(..) => "slice_rows",
        Op::SliceCols(..) => "slice_cols",
        Op::MeanRows(..) => "mean_rows",
        Op::Rope(..) => "rope",
        Op::L2Normalize(_) => "l2_normalize",
        Op::SumCols(_) => "sum_cols",
        Op::Mean(_) => "mean",
        Op::CrossEntropy(..) => "cross_entropy",
        Op::Mse(..) => "mse",
        Op::BlockAttention { .. } => "block_attention",
    }
}
