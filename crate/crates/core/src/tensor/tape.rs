use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::ops;
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    node: usize,
    tape: u64,
}

/// Transform applied to a parameter's gradient before it leaves `backward`.
pub type GradHook<T> = Box<dyn Fn(&mut Tensor<T>) + Send + Sync>;

/// Gradient of the loss for every parameter bound in the pass, keyed by id.
pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

enum Op<T> {
    MatMul(usize, usize),
    Linear(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Softmax(usize),
    RmsNorm {
        x: usize,
        gain: usize,
        inv_rms: Vec<T>,
    },
    Silu(usize),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Transpose(usize),
    Reshape(usize),
    Rope {
        x: usize,
        head_dim: usize,
        offset: usize,
        base: f64,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    CausalMask {
        x: usize,
        offset: usize,
    },
    Sum(usize),
    Nll {
        logits: usize,
        targets: Vec<(usize, usize, T)>,
    },
}

struct Record<T> {
    op: Op<T>,
    out: usize,
}

/// Reverse-mode tape.
///
/// Parameters are bound by string id for each pass with [`GradTape::param`].
/// The set of known ids and their hooks survive [`GradTape::clear`], so a
/// training loop can reuse one tape and its hooks across steps.
pub struct GradTape<T: Scalar> {
    id: u64,
    values: Vec<Tensor<T>>,
    tracked: Vec<bool>,
    records: Vec<Record<T>>,
    params: BTreeMap<String, Option<usize>>,
    hooks: BTreeMap<String, GradHook<T>>,
}

impl<T: Scalar> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GradTape<T> {
    pub fn new() -> Self {
        Self {
            id: fresh_id(),
            values: Vec::new(),
            tracked: Vec::new(),
            records: Vec::new(),
            params: BTreeMap::new(),
            hooks: BTreeMap::new(),
        }
    }

    /// Drops every recorded value and operation. Known parameter ids and
    /// hooks are kept; `Var`s from before the clear become invalid.
    pub fn clear(&mut self) {
        self.id = fresh_id();
        self.values.clear();
        self.tracked.clear();
        self.records.clear();
        for slot in self.params.values_mut() {
            *slot = None;
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, tracked: bool) -> Var {
        self.values.push(value);
        self.tracked.push(tracked);
        Var {
            node: self.values.len() - 1,
            tape: self.id,
        }
    }

    fn node(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.node >= self.values.len() {
            return Err(Error::usage("variable does not belong to this tape pass"));
        }
        Ok(v.node)
    }

    /// Binds parameter `id` to `value` for this pass.
    pub fn param(&mut self, id: &str, value: Tensor<T>) -> Result<Var> {
        if matches!(self.params.get(id), Some(Some(_))) {
            return Err(Error::usage(format!(
                "parameter `{id}` bound twice in one pass"
            )));
        }
        let v = self.push(value, true);
        self.params.insert(id.to_string(), Some(v.node));
        Ok(v)
    }

    /// Declares a parameter id without binding a value, so hooks can be
    /// registered before the first pass.
    pub fn declare_param(&mut self, id: &str) {
        self.params.entry(id.to_string()).or_insert(None);
    }

    pub fn is_param(&self, id: &str) -> bool {
        self.params.contains_key(id)
    }

    /// An input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.values[self.node(v)?])
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.node(v).map(|n| self.tracked[n]).unwrap_or(false)
    }

    /// Registers `hook` for parameter `id`; at most one hook per parameter.
    pub fn register_grad_hook(&mut self, id: &str, hook: GradHook<T>) -> Result<()> {
        if !self.params.contains_key(id) {
            return Err(Error::usage(format!("no parameter named `{id}`")));
        }
        if self.hooks.contains_key(id) {
            return Err(Error::usage(format!(
                "parameter `{id}` already has a gradient hook"
            )));
        }
        self.hooks.insert(id.to_string(), hook);
        Ok(())
    }

    pub fn has_hook(&self, id: &str) -> bool {
        self.hooks.contains_key(id)
    }

    fn record(&mut self, op: Op<T>, inputs: &[usize], value: Tensor<T>) -> Var {
        let tracked = inputs.iter().any(|&i| self.tracked[i]);
        let v = self.push(value, tracked);
        if tracked {
            self.records.push(Record { op, out: v.node });
        }
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.node(a)?, self.node(b)?);
        let out = ops::matmul(&self.values[a], &self.values[b])?;
        Ok(self.record(Op::MatMul(a, b), &[a, b], out))
    }

    /// `x · wᵀ` with `w` stored `[out × in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (x, w) = (self.node(x)?, self.node(w)?);
        let out = ops::linear(&self.values[x], &self.values[w])?;
        Ok(self.record(Op::Linear(x, w), &[x, w], out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.node(a)?, self.node(b)?);
        let out = ops::add(&self.values[a], &self.values[b])?;
        Ok(self.record(Op::Add(a, b), &[a, b], out))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (a, b) = (self.node(a)?, self.node(bias)?);
        let out = ops::add_row(&self.values[a], &self.values[b])?;
        Ok(self.record(Op::AddRow(a, b), &[a, b], out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.node(a)?, self.node(b)?);
        let out = ops::mul(&self.values[a], &self.values[b])?;
        Ok(self.record(Op::Mul(a, b), &[a, b], out))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let a = self.node(a)?;
        let out = ops::scale(&self.values[a], s);
        Ok(self.record(Op::Scale(a, s), &[a], out))
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let a = self.node(a)?;
        let out = ops::row_softmax(&self.values[a])?;
        Ok(self.record(Op::Softmax(a), &[a], out))
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let (x, gain) = (self.node(x)?, self.node(gain)?);
        let (out, inv_rms) = ops::rms_norm(&self.values[x], &self.values[gain], eps)?;
        Ok(self.record(Op::RmsNorm { x, gain, inv_rms }, &[x, gain], out))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let a = self.node(a)?;
        let out = ops::silu(&self.values[a]);
        Ok(self.record(Op::Silu(a), &[a], out))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let table = self.node(table)?;
        let out = ops::embedding(&self.values[table], ids)?;
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.record(op, &[table], out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let a = self.node(a)?;
        let out = ops::transpose(&self.values[a])?;
        Ok(self.record(Op::Transpose(a), &[a], out))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let a = self.node(a)?;
        let out = ops::reshape(&self.values[a], shape)?;
        Ok(self.record(Op::Reshape(a), &[a], out))
    }

    pub fn rope(&mut self, x: Var, head_dim: usize, offset: usize, base: f64) -> Result<Var> {
        let x = self.node(x)?;
        let out = ops::rope(&self.values[x], head_dim, offset, base, false)?;
        let op = Op::Rope {
            x,
            head_dim,
            offset,
            base,
        };
        Ok(self.record(op, &[x], out))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let x = self.node(x)?;
        let out = ops::slice_cols(&self.values[x], start, width)?;
        Ok(self.record(Op::SliceCols { x, start }, &[x], out))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let nodes = parts
            .iter()
            .map(|&p| self.node(p))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = nodes.iter().map(|&n| &self.values[n]).collect();
        let out = ops::concat_cols(&refs)?;
        Ok(self.record(Op::ConcatCols(nodes.clone()), &nodes, out))
    }

    pub fn causal_mask(&mut self, x: Var, offset: usize) -> Result<Var> {
        let x = self.node(x)?;
        let out = ops::causal_mask(&self.values[x], offset)?;
        Ok(self.record(Op::CausalMask { x, offset }, &[x], out))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let a = self.node(a)?;
        let s: T = self.values[a].data().iter().copied().sum();
        Ok(self.record(Op::Sum(a), &[a], Tensor::scalar(s)))
    }

    /// Weighted negative log-likelihood `Σ w · −log softmax(logits[row])[token]`
    /// over `(row, token, weight)` triples; a scalar.
    pub fn nll(&mut self, logits: Var, targets: &[(usize, usize, T)]) -> Result<Var> {
        let logits = self.node(logits)?;
        let lt = &self.values[logits];
        let mut total = T::zero();
        for &(row, token, w) in targets {
            if row >= lt.rows() || token >= lt.cols() {
                return Err(Error::shape(format!(
                    "nll target ({row}, {token}) outside logits {:?}",
                    lt.shape()
                )));
            }
            total -= w * ops::log_prob(lt.row(row), token)?;
        }
        let op = Op::Nll {
            logits,
            targets: targets.to_vec(),
        };
        Ok(self.record(op, &[logits], Tensor::scalar(total)))
    }

    /// Gradients of the scalar `loss` with respect to every parameter bound in
    /// this pass. Each parameter's hook, if any, runs on its fully accumulated
    /// gradient before it is returned.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss = self.node(loss)?;
        if self.values[loss].numel() != 1 {
            return Err(Error::usage("backward needs a scalar loss"));
        }
        if !self.tracked[loss] {
            return Err(Error::usage(
                "loss does not depend on any parameter recorded on the tape",
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        grads[loss] = Some(Tensor::scalar(T::one()));

        for rec in self.records.iter().rev() {
            let Some(g) = grads[rec.out].take() else {
                continue;
            };
            self.backprop(rec, &g, &mut grads)?;
            // Only leaves need to keep their gradient.
        }

        let mut out = Gradients::new();
        for (id, slot) in &self.params {
            let Some(node) = *slot else { continue };
            let mut g = match grads[node].take() {
                Some(g) => g,
                None => Tensor::zeros(self.values[node].shape())?,
            };
            if let Some(hook) = self.hooks.get(id) {
                hook(&mut g);
                if g.shape() != self.values[node].shape() {
                    return Err(Error::usage(format!(
                        "hook for `{id}` changed the gradient shape"
                    )));
                }
            }
            out.insert(id.clone(), g);
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], node: usize, g: Tensor<T>) {
        if !self.tracked[node] {
            return;
        }
        match &mut grads[node] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn backprop(
        &self,
        rec: &Record<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let val = |n: usize| &self.values[n];
        match &rec.op {
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.tracked[*a] {
                    // g[m×n] · bᵀ[n×k]
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g.data(), (n, 1), bv.data(), (1, n), T::zero(), &mut ga);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], ga)?);
                }
                if self.tracked[*b] {
                    // aᵀ[k×m] · g[m×n]
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, av.data(), (1, k), g.data(), (n, 1), T::zero(), &mut gb);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], gb)?);
                }
            }
            Op::Linear(x, w) => {
                let (xv, wv) = (val(*x), val(*w));
                let (m, k, n) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                if self.tracked[*x] {
                    // g[m×n] · w[n×k]
                    let mut gx = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g.data(), (n, 1), wv.data(), (k, 1), T::zero(), &mut gx);
                    self.accumulate(grads, *x, Tensor::new(vec![m, k], gx)?);
                }
                if self.tracked[*w] {
                    // gᵀ[n×m] · x[m×k]
                    let mut gw = vec![T::zero(); n * k];
                    T::gemm(n, m, k, g.data(), (1, n), xv.data(), (k, 1), T::zero(), &mut gw);
                    self.accumulate(grads, *w, Tensor::new(vec![n, k], gw)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.tracked[*bias] {
                    let mut gb = vec![T::zero(); g.cols()];
                    for r in 0..g.rows() {
                        for (acc, &x) in gb.iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(val(*bias).shape().to_vec(), gb)?);
                }
            }
            Op::Mul(a, b) => {
                if self.tracked[*a] {
                    self.accumulate(grads, *a, ops::mul(g, val(*b))?);
                }
                if self.tracked[*b] {
                    self.accumulate(grads, *b, ops::mul(g, val(*a))?);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, ops::scale(g, *s)),
            Op::Softmax(a) => {
                let y = val(rec.out);
                let mut ga = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let inner: T = yr.iter().zip(g.row(r)).map(|(&p, &d)| p * d).sum();
                    for ((o, &p), &d) in ga.row_mut(r).iter_mut().zip(yr).zip(g.row(r)) {
                        *o = p * (d - inner);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (val(*x), val(*gain));
                let c = xv.cols();
                let n = T::c(c as f64);
                if self.tracked[*x] {
                    let mut gx = xv.clone();
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        let xr = xv.row(r);
                        let gr = g.row(r);
                        let s: T = (0..c).map(|j| gr[j] * gv.data()[j] * xr[j]).sum();
                        let coef = ir * ir * ir * s / n;
                        for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = ir * gv.data()[j] * gr[j] - xr[j] * coef;
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.tracked[*gain] {
                    let mut gg = vec![T::zero(); c];
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        for ((acc, &d), &xj) in gg.iter_mut().zip(g.row(r)).zip(xv.row(r)) {
                            *acc += d * xj * ir;
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::new(gv.shape().to_vec(), gg)?);
                }
            }
            Op::Silu(a) => {
                let av = val(*a);
                let data = av
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &d)| {
                        let s = T::one() / (T::one() + (-x).exp());
                        d * s * (T::one() + x * (T::one() - s))
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), data)?);
            }
            Op::Embedding { table, ids } => {
                let tv = val(*table);
                let mut gt = Tensor::zeros(tv.shape())?;
                for (r, &id) in ids.iter().enumerate() {
                    for (acc, &d) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *acc += d;
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, ops::transpose(g)?),
            Op::Reshape(a) => self.accumulate(grads, *a, g.reshaped(val(*a).shape())?),
            Op::Rope {
                x,
                head_dim,
                offset,
                base,
            } => {
                let gx = ops::rope(g, *head_dim, *offset, *base, true)?;
                self.accumulate(grads, *x, gx);
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let mut gx = Tensor::zeros(xv.shape())?;
                let w = g.cols();
                for r in 0..g.rows() {
                    gx.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if self.tracked[p] {
                        self.accumulate(grads, p, ops::slice_cols(g, start, w)?);
                    }
                    start += w;
                }
            }
            Op::CausalMask { x, offset } => {
                let mut gx = g.clone();
                let c = gx.cols();
                for i in 0..gx.rows() {
                    for v in gx.row_mut(i).iter_mut().take(c).skip(i + offset + 1) {
                        *v = T::zero();
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(a) => {
                let d = g.item()?;
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), d)?);
            }
            Op::Nll { logits, targets } => {
                let lv = val(*logits);
                let d = g.item()?;
                let mut gl = Tensor::zeros(lv.shape())?;
                for &(row, token, w) in targets {
                    let mut p = lv.row(row).to_vec();
                    ops::softmax_in_place(&mut p)?;
                    let scale = d * w;
                    for (j, o) in gl.row_mut(row).iter_mut().enumerate() {
                        let onehot = if j == token { T::one() } else { T::zero() };
                        *o += scale * (p[j] - onehot);
                    }
                }
                self.accumulate(grads, *logits, gl);
            }
        }
        Ok(())
    }
}
