//! Reverse-mode differentiation over a per-pass operation tape.
//!
//! Every value on the tape is a row-major matrix; vectors are `1×n`.
//! Parameters are referenced, not copied, and their gradients are collected
//! into a [`Gradients`] aligned with the owning [`ParamSet`].

use crate::error::{Error, Result};

use super::kernels;
use super::{Gradients, Mode, ParamId, ParamSet, RngState, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Dropout(Var, Vec<T>),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    MeanRows(Var),
    Gather(Vec<(Var, usize)>),
    CrossEntropy { logits: Var, label: usize, probs: Vec<T> },
}

struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
}

/// A recorded tensor of interest (attention weights), kept for inspection.
#[derive(Clone, Debug)]
pub struct Probe {
    pub label: String,
    pub var: Var,
}

pub struct Tape<'p, T: Scalar> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    mode: Mode,
    rng: Option<RngState>,
    probes: Option<Vec<Probe>>,
}

fn dims_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::shape(op, format!("{}×{} vs {}×{}", a.0, a.1, b.0, b.1))
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamSet<T>, mode: Mode) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(1024),
            param_vars: vec![None; params.len()],
            mode,
            rng: None,
            probes: None,
        }
    }

    /// Supplies the random stream used by train-mode dropout.
    pub fn with_rng(mut self, rng: RngState) -> Self {
        self.rng = Some(rng);
        self
    }

    /// Enables recording of attention-weight matrices.
    pub fn with_probes(mut self) -> Self {
        self.probes = Some(Vec::new());
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == rows * cols);
        self.nodes.push(Node { rows, cols, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.get(id).data(),
            _ => &node.value,
        }
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let (r, c) = self.dims(v);
        Tensor::matrix(r, c, self.value(v).to_vec()).expect("tape node has consistent dims")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    pub fn probe(&mut self, label: impl Into<String>, var: Var) {
        if let Some(p) = self.probes.as_mut() {
            p.push(Probe { label: label.into(), var });
        }
    }

    pub fn is_probing(&self) -> bool {
        self.probes.is_some()
    }

    pub fn probes(&self) -> &[Probe] {
        self.probes.as_deref().unwrap_or(&[])
    }

    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        let (r, c) = t.as_matrix_dims();
        self.push(r, c, t.data().to_vec(), Op::Input)
    }

    pub fn input_matrix(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Var> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(Error::shape("input", format!("{rows}×{cols} with {} values", data.len())));
        }
        Ok(self.push(rows, cols, data, Op::Input))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let (r, c) = self.params.get(id).as_matrix_dims();
        let v = self.push(r, c, Vec::new(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(dims_err("matmul", (m, k), (k2, n)));
        }
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        Ok(self.push(m, n, out, Op::MatMul(a, b)))
    }

    /// a · bᵀ
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(dims_err("matmul_bt", (m, k), (n, k2)));
        }
        let out = kernels::matmul_bt(self.value(a), self.value(b), m, k, n);
        Ok(self.push(m, n, out, Op::MatMulBt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = kernels::transpose(self.value(a), r, c);
        self.push(c, r, out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(dims_err("add", da, db));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(da.0, da.1, out, Op::Add(a, b)))
    }

    /// Adds a `1×c` row to every row of `a` (the one documented broadcast).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let dr = self.dims(row);
        if dr != (1, c) {
            return Err(dims_err("add_row", (r, c), dr));
        }
        let bias = self.value(row);
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_mut(c) {
            for (o, &b) in chunk.iter_mut().zip(bias) {
                *o += b;
            }
        }
        Ok(self.push(r, c, out, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| x * s).collect();
        self.push(r, c, out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| x.max(T::zero())).collect();
        self.push(r, c, out, Op::Relu(a))
    }

    /// Inverted dropout; identity in eval mode or at rate 0.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        check_rate(rate)?;
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(a);
        }
        let (r, c) = self.dims(a);
        let rng = self
            .rng
            .as_mut()
            .ok_or_else(|| Error::Config("train-mode dropout needs a random stream".into()))?;
        let keep = T::cast(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..r * c)
            .map(|_| if rng.uniform() < rate { T::zero() } else { keep })
            .collect();
        let out = self.value(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        Ok(self.push(r, c, out, Op::Dropout(a, mask)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            kernels::softmax_in_place(row);
        }
        self.push(r, c, out, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with a `1×c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (r, c) = self.dims(x);
        for p in [gamma, beta] {
            if self.dims(p) != (1, c) {
                return Err(dims_err("layer_norm", (r, c), self.dims(p)));
            }
        }
        let mut xhat = vec![T::zero(); r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let s = kernels::standardize(&self.value(x)[i * c..(i + 1) * c], eps, &mut xhat[i * c..(i + 1) * c]);
            inv_std.push(s);
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut out = xhat.clone();
        for row in out.chunks_mut(c) {
            for j in 0..c {
                row[j] = row[j] * g[j] + b[j];
            }
        }
        Ok(self.push(r, c, out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }))
    }

    /// Concatenation along the feature (column) axis, in operand order.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_cols", "no operands"))?;
        let r = self.dims(first).0;
        let mut total = 0;
        for &p in parts {
            let d = self.dims(p);
            if d.0 != r {
                return Err(dims_err("concat_cols", self.dims(first), d));
            }
            total += d.1;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(r, total, out, Op::ConcatCols(parts.to_vec())))
    }

    /// Concatenation along the sequence (row) axis, in operand order.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_rows", "no operands"))?;
        let c = self.dims(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let d = self.dims(p);
            if d.1 != c {
                return Err(dims_err("concat_rows", self.dims(first), d));
            }
            rows += d.0;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(rows, c, out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", format!("[{start}, {}) of {r}×{c}", start + len)));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        Ok(self.push(r, len, out, Op::SliceCols(a, start)))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = vec![T::zero(); c];
        for row in self.value(a).chunks(c) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let inv = T::one() / T::cast(r as f64);
        for o in &mut out {
            *o *= inv;
        }
        self.push(1, c, out, Op::MeanRows(a))
    }

    /// Builds a matrix whose i-th row is row `rows[i].1` of `rows[i].0`.
    pub fn gather_rows(&mut self, rows: &[(Var, usize)]) -> Result<Var> {
        let &(first, _) = rows.first().ok_or_else(|| Error::shape("gather_rows", "no rows"))?;
        let c = self.dims(first).1;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &(v, i) in rows {
            let (vr, vc) = self.dims(v);
            if vc != c || i >= vr {
                return Err(Error::shape("gather_rows", format!("row {i} of {vr}×{vc}, width {c}")));
            }
            out.extend_from_slice(&self.value(v)[i * c..(i + 1) * c]);
        }
        Ok(self.push(rows.len(), c, out, Op::Gather(rows.to_vec())))
    }

    /// `x · w + b` with `w` stored as `in×out` and `b` as a `1×out` row.
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

    /// −log softmax(logits)[label] for a `1×n` logit row; returns a `1×1` node.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (r, n) = self.dims(logits);
        if r != 1 {
            return Err(Error::shape("cross_entropy", format!("expected one logit row, got {r}×{n}")));
        }
        if label >= n {
            return Err(Error::Input(format!("label {label} out of range for {n} candidates")));
        }
        let mut probs = self.value(logits).to_vec();
        kernels::softmax_in_place(&mut probs);
        let loss = log_sum_exp(self.value(logits)) - self.value(logits)[label];
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite cross-entropy".into()));
        }
        Ok(self.push(1, 1, vec![loss], Op::CrossEntropy { logits, label, probs }))
    }

    /// Reverse sweep from a `1×1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let mut out = Gradients::zeros_like(self.params);
        self.backward_into(loss, &mut out)?;
        Ok(out)
    }

    /// Like [`Tape::backward`] but adds the parameter gradients into `out`.
    pub fn backward_into(&self, loss: Var, out: &mut Gradients<T>) -> Result<()> {
        if self.dims(loss) != (1, 1) {
            return Err(Error::shape("backward", "loss must be a 1×1 node"));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let (r, c) = (node.rows, node.cols);
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    for (o, &x) in out.per_param[id.0].iter_mut().zip(&g) {
                        *o += x;
                    }
                }
                Op::MatMul(a, b) => {
                    let k = self.dims(*a).1;
                    let (av, bv) = (self.value(*a), self.value(*b));
                    // dA = G·Bᵀ
                    let da = acc(&mut grads, *a, r * k);
                    for ii in 0..r {
                        let grow = &g[ii * c..(ii + 1) * c];
                        for p in 0..k {
                            da[ii * k + p] += kernels::dot(grow, &bv[p * c..(p + 1) * c]);
                        }
                    }
                    // dB = Aᵀ·G
                    let db = acc(&mut grads, *b, k * c);
                    for ii in 0..r {
                        let grow = &g[ii * c..(ii + 1) * c];
                        for p in 0..k {
                            let s = av[ii * k + p];
                            if s != T::zero() {
                                kernels::axpy(s, grow, &mut db[p * c..(p + 1) * c]);
                            }
                        }
                    }
                }
                Op::MatMulBt(a, b) => {
                    let k = self.dims(*a).1;
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = acc(&mut grads, *a, r * k);
                    for ii in 0..r {
                        for j in 0..c {
                            kernels::axpy(g[ii * c + j], &bv[j * k..(j + 1) * k], &mut da[ii * k..(ii + 1) * k]);
                        }
                    }
                    let db = acc(&mut grads, *b, c * k);
                    for ii in 0..r {
                        for j in 0..c {
                            kernels::axpy(g[ii * c + j], &av[ii * k..(ii + 1) * k], &mut db[j * k..(j + 1) * k]);
                        }
                    }
                }
                Op::Transpose(a) => {
                    let gt = kernels::transpose(&g, r, c);
                    add_into(acc(&mut grads, *a, r * c), &gt);
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, r * c), &g);
                    add_into(acc(&mut grads, *b, r * c), &g);
                }
                Op::AddRow(a, row) => {
                    add_into(acc(&mut grads, *a, r * c), &g);
                    let dr = acc(&mut grads, *row, c);
                    for chunk in g.chunks(c) {
                        add_into(dr, chunk);
                    }
                }
                Op::Scale(a, s) => {
                    let da = acc(&mut grads, *a, r * c);
                    for (d, &x) in da.iter_mut().zip(&g) {
                        *d += x * *s;
                    }
                }
                Op::Relu(a) => {
                    let av = self.value(*a);
                    let da = acc(&mut grads, *a, r * c);
                    for j in 0..r * c {
                        if av[j] > T::zero() {
                            da[j] += g[j];
                        }
                    }
                }
                Op::Dropout(a, mask) => {
                    let da = acc(&mut grads, *a, r * c);
                    for j in 0..r * c {
                        da[j] += g[j] * mask[j];
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let da = acc(&mut grads, *a, r * c);
                    for ii in 0..r {
                        let yr = &y[ii * c..(ii + 1) * c];
                        let gr = &g[ii * c..(ii + 1) * c];
                        let s = kernels::dot(yr, gr);
                        for j in 0..c {
                            da[ii * c + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gv = self.value(*gamma);
                    let n = T::cast(c as f64);
                    {
                        let dg = acc(&mut grads, *gamma, c);
                        for ii in 0..r {
                            for j in 0..c {
                                dg[j] += g[ii * c + j] * xhat[ii * c + j];
                            }
                        }
                    }
                    {
                        let db = acc(&mut grads, *beta, c);
                        for chunk in g.chunks(c) {
                            add_into(db, chunk);
                        }
                    }
                    let dx = acc(&mut grads, *x, r * c);
                    let mut dxhat = vec![T::zero(); c];
                    for ii in 0..r {
                        let xh = &xhat[ii * c..(ii + 1) * c];
                        for j in 0..c {
                            dxhat[j] = g[ii * c + j] * gv[j];
                        }
                        let mean_d = dxhat.iter().copied().sum::<T>() / n;
                        let mean_dx = kernels::dot(&dxhat, xh) / n;
                        for j in 0..c {
                            dx[ii * c + j] += inv_std[ii] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.dims(p).1;
                        let dp = acc(&mut grads, p, r * pc);
                        for ii in 0..r {
                            add_into(&mut dp[ii * pc..(ii + 1) * pc], &g[ii * c + offset..ii * c + offset + pc]);
                        }
                        offset += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.dims(p).0 * c;
                        add_into(acc(&mut grads, p, len), &g[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::SliceCols(a, start) => {
                    let ac = self.dims(*a).1;
                    let da = acc(&mut grads, *a, r * ac);
                    for ii in 0..r {
                        add_into(&mut da[ii * ac + start..ii * ac + start + c], &g[ii * c..(ii + 1) * c]);
                    }
                }
                Op::MeanRows(a) => {
                    let ar = self.dims(*a).0;
                    let inv = T::one() / T::cast(ar as f64);
                    let da = acc(&mut grads, *a, ar * c);
                    for chunk in da.chunks_mut(c) {
                        kernels::axpy(inv, &g, chunk);
                    }
                }
                Op::Gather(rows) => {
                    for (k, &(v, src)) in rows.iter().enumerate() {
                        let len = self.dims(v).0 * c;
                        let dv = acc(&mut grads, v, len);
                        add_into(&mut dv[src * c..(src + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                }
                Op::CrossEntropy { logits, label, probs } => {
                    let n = probs.len();
                    let dl = acc(&mut grads, *logits, n);
                    for j in 0..n {
                        let onehot = if j == *label { T::one() } else { T::zero() };
                        dl[j] += g[0] * (probs[j] - onehot);
                    }
                }
            }
        }
        Ok(())
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

pub(crate) fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    max + xs.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}
