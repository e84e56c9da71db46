use crate::tensor::gemm;
use crate::{Tensor, TensorError};

/// Additive logit for masked-out entries.
pub const MASK_LOGIT: f64 = -1e9;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Var {
    /// Index into the parameter slice the tape was created with.
    Param(usize),
    /// Index of a node produced by a forward op.
    Node(usize),
}

/// Which query/key pairs an attention op may use.
#[derive(Clone, Debug)]
pub enum AttentionMask {
    None,
    /// One flag per key, `groups * n_keys` long; shared by every query of the group.
    Keys(Vec<bool>),
    /// One flag per (query, key) pair, `groups * n_queries * n_keys` long.
    Pairs(Vec<bool>),
}

enum Op {
    Const,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows {
        input: Var,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        scale: f64,
        weights: Vec<f64>,
    },
    PickCols(Var, Vec<usize>),
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    Clamp(Var, f64, f64),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of one forward pass.
///
/// Parameters are borrowed, never copied; their gradients come back from
/// [`Tape::backward`] indexed like the parameter slice.
pub struct Tape<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node>,
}

/// Parameter gradients from one backward pass. `None` means the parameter
/// did not take part in the loss.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, i: usize) -> Option<&Tensor> {
        self.params[i].as_ref()
    }

    /// Sums `other * weight` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Gradients, weight: f64) {
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            let Some(theirs) = theirs else { continue };
            match mine {
                Some(m) => {
                    for (a, b) in m.data_mut().iter_mut().zip(theirs.data()) {
                        *a += weight * b;
                    }
                }
                None => {
                    let mut t = theirs.clone();
                    t.data_mut().iter_mut().for_each(|x| *x *= weight);
                    *mine = Some(t);
                }
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .map(Tensor::sum_squares)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in self.params.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
        norm
    }
}

fn finite(op: &'static str, t: Tensor) -> Result<Tensor, TensorError> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn softmax_row_inplace(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param(&self, i: usize) -> Var {
        assert!(i < self.params.len(), "parameter {i} out of range");
        Var::Param(i)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match v {
            Var::Param(i) => &self.params[i],
            Var::Node(i) => &self.nodes[i].value,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var::Node(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var, TensorError> {
        let value = finite(name, value)?;
        Ok(self.push(value, op))
    }

    /// Records a value that takes no gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var, TensorError> {
        self.record("constant", t, Op::Const)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            av.data(),
            false,
            bv.data(),
            false,
            0.0,
            &mut out,
        );
        let t = Tensor::new(vec![m, n], out)?;
        self.record("matmul", t, Op::MatMul(a, b))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(self.shape_err(name, a, b));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.record(name, t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    /// `a + bias` with `bias` a single row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(bias));
        let c = av.cols();
        if bv.numel() != c {
            return Err(self.shape_err("add_row", a, bias));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.record("add_row", t, Op::AddRow(a, bias))
    }

    /// `x·W + b`, the usual dense layer.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * s).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.record("scale", t, Op::Scale(a, s))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(self.shape_err("concat_cols", parts[0], p));
            }
            widths.push(self.value(p).cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(vec![rows, total], data)?;
        self.record("concat_cols", t, Op::ConcatCols(parts.to_vec()))
    }

    /// Selects (and may repeat) rows; covers slicing and tiling.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Result<Var, TensorError> {
        let av = self.value(a);
        let (rows, c) = (av.rows(), av.cols());
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in &index {
            if i >= rows {
                return Err(TensorError::Invalid {
                    op: "gather_rows",
                    msg: format!("row {i} out of range for {rows} rows"),
                });
            }
            data.extend_from_slice(av.row(i));
        }
        let t = Tensor::new(vec![index.len(), c], data)?;
        self.record("gather_rows", t, Op::GatherRows(a, index))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        self.gather_rows(a, (start..end).collect())
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a).clone().reshaped(shape)?;
        self.record("reshape", t, Op::Reshape(a))
    }

    fn map(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.record(name, t, op)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, TensorError> {
        self.map("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(av.cols()) {
            softmax_row_inplace(row);
        }
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.record("softmax_rows", t, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(av.cols()) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.record("log_softmax_rows", t, Op::LogSoftmaxRows(a))
    }

    /// Per-row standardization to zero mean and unit (biased) variance.
    pub fn layer_normalize(&mut self, a: Var, eps: f64) -> Result<Var, TensorError> {
        let av = self.value(a);
        let c = av.cols();
        let mut data = av.data().to_vec();
        let mut inv_std = Vec::with_capacity(av.rows());
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * is);
            inv_std.push(is);
        }
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.record(
            "layer_normalize",
            t,
            Op::LayerNormRows { input: a, inv_std },
        )
    }

    /// Grouped scaled dot-product attention.
    ///
    /// `q` is `[groups * nq, d]`, `k` is `[groups * nk, d]` and `v` is
    /// `[groups * nk, dv]`; group `g` of the queries attends only to group
    /// `g` of the keys. Masked pairs get [`MASK_LOGIT`] before the softmax.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        mask: &AttentionMask,
    ) -> Result<Var, TensorError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let dv = vv.cols();
        if groups == 0 || qv.rows() % groups != 0 || kv.rows() % groups != 0 {
            return Err(TensorError::Invalid {
                op: "attention",
                msg: format!(
                    "{} query rows / {} key rows not divisible into {groups} groups",
                    qv.rows(),
                    kv.rows()
                ),
            });
        }
        if kv.cols() != d {
            return Err(self.shape_err("attention", q, k));
        }
        if vv.rows() != kv.rows() {
            return Err(self.shape_err("attention", k, v));
        }
        let nq = qv.rows() / groups;
        let nk = kv.rows() / groups;
        match mask {
            AttentionMask::None => {}
            AttentionMask::Keys(m) if m.len() == groups * nk => {}
            AttentionMask::Pairs(m) if m.len() == groups * nq * nk => {}
            _ => {
                return Err(TensorError::Invalid {
                    op: "attention",
                    msg: "mask length does not match the attention layout".into(),
                })
            }
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut weights = vec![0.0; groups * nq * nk];
        let mut out = vec![0.0; groups * nq * dv];
        for g in 0..groups {
            let qg = &qv.data()[g * nq * d..(g + 1) * nq * d];
            let kg = &kv.data()[g * nk * d..(g + 1) * nk * d];
            let vg = &vv.data()[g * nk * dv..(g + 1) * nk * dv];
            let w = &mut weights[g * nq * nk..(g + 1) * nq * nk];
            gemm(nq, d, nk, scale, qg, false, kg, true, 0.0, w);
            match mask {
                AttentionMask::None => {}
                AttentionMask::Keys(m) => {
                    let mg = &m[g * nk..(g + 1) * nk];
                    for row in w.chunks_mut(nk) {
                        for (x, &keep) in row.iter_mut().zip(mg) {
                            if !keep {
                                *x += MASK_LOGIT;
                            }
                        }
                    }
                }
                AttentionMask::Pairs(m) => {
                    let mg = &m[g * nq * nk..(g + 1) * nq * nk];
                    for (x, &keep) in w.iter_mut().zip(mg) {
                        if !keep {
                            *x += MASK_LOGIT;
                        }
                    }
                }
            }
            for row in w.chunks_mut(nk) {
                softmax_row_inplace(row);
            }
            let og = &mut out[g * nq * dv..(g + 1) * nq * dv];
            gemm(nq, nk, dv, 1.0, w, false, vg, false, 0.0, og);
        }
        let t = Tensor::new(vec![groups * nq, dv], out)?;
        self.record(
            "attention",
            t,
            Op::Attention {
                q,
                k,
                v,
                groups,
                scale,
                weights,
            },
        )
    }

    /// Attention weights saved by an attention node, `[groups * nq, nk]` row-major.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match v {
            Var::Node(i) => match &self.nodes[i].op {
                Op::Attention { weights, .. } => Some(weights),
                _ => None,
            },
            Var::Param(_) => None,
        }
    }

    /// One entry per row, `out[r] = a[r, index[r]]`, shape `[rows, 1]`.
    pub fn pick_cols(&mut self, a: Var, index: Vec<usize>) -> Result<Var, TensorError> {
        let av = self.value(a);
        let c = av.cols();
        if index.len() != av.rows() || index.iter().any(|&i| i >= c) {
            return Err(TensorError::Invalid {
                op: "pick_cols",
                msg: format!(
                    "{} indices for {} rows of width {c}",
                    index.len(),
                    av.rows()
                ),
            });
        }
        let data = index
            .iter()
            .enumerate()
            .map(|(r, &i)| av.data()[r * c + i])
            .collect();
        let t = Tensor::new(vec![index.len(), 1], data)?;
        self.record("pick_cols", t, Op::PickCols(a, index))
    }

    /// Row sums, shape `[rows, 1]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        let data = av
            .data()
            .chunks(av.cols())
            .map(|r| r.iter().sum())
            .collect();
        let t = Tensor::new(vec![av.rows(), 1], data)?;
        self.record("sum_rows", t, Op::SumRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).data().iter().sum();
        self.record("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.numel() as f64;
        self.record("mean", Tensor::scalar(s), Op::Mean(a))
    }

    /// Reverse pass from a single-element loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut node_grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Tensor>> = (0..self.params.len()).map(|_| None).collect();
        let seed = Tensor::full(lv.shape(), 1.0);
        let last = match loss {
            Var::Node(i) => {
                node_grads[i] = Some(seed);
                i
            }
            Var::Param(i) => {
                param_grads[i] = Some(seed);
                return Ok(Gradients {
                    params: param_grads,
                });
            }
        };
        let mut acc = Accumulator {
            tape: self,
            nodes: &mut node_grads,
            params: &mut param_grads,
        };
        for i in (0..=last).rev() {
            let Some(g) = acc.nodes[i].take() else {
                continue;
            };
            self.backward_node(i, &g, &mut acc);
        }
        Ok(Gradients {
            params: param_grads,
        })
    }

    fn backward_node(&self, i: usize, g: &Tensor, acc: &mut Accumulator<'_, 'p>) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Const => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                acc.with(*a, |da| {
                    gemm(m, n, k, 1.0, g.data(), false, bv.data(), true, 1.0, da)
                });
                acc.with(*b, |db| {
                    gemm(k, m, n, 1.0, av.data(), true, g.data(), false, 1.0, db)
                });
            }
            Op::Add(a, b) => {
                acc.add(*a, g.data());
                acc.add(*b, g.data());
            }
            Op::Sub(a, b) => {
                acc.add(*a, g.data());
                acc.with(*b, |db| {
                    db.iter_mut().zip(g.data()).for_each(|(x, y)| *x -= y)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc.with(*a, |da| {
                    for ((x, gy), y) in da.iter_mut().zip(g.data()).zip(bv) {
                        *x += gy * y;
                    }
                });
                acc.with(*b, |db| {
                    for ((x, gy), y) in db.iter_mut().zip(g.data()).zip(av) {
                        *x += gy * y;
                    }
                });
            }
            Op::AddRow(a, bias) => {
                acc.add(*a, g.data());
                let c = g.cols();
                acc.with(*bias, |db| {
                    for row in g.data().chunks(c) {
                        for (x, y) in db.iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                });
            }
            Op::Scale(a, s) => {
                acc.with(*a, |da| {
                    da.iter_mut().zip(g.data()).for_each(|(x, y)| *x += s * y)
                });
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc.with(p, |dp| {
                        for (r, row) in dp.chunks_mut(w).enumerate() {
                            let src = &g.data()[r * total + offset..r * total + offset + w];
                            row.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    });
                    offset += w;
                }
            }
            Op::GatherRows(a, index) => {
                let c = g.cols();
                acc.with(*a, |da| {
                    for (r, &src) in index.iter().enumerate() {
                        let gr = &g.data()[r * c..(r + 1) * c];
                        da[src * c..(src + 1) * c]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Reshape(a) => acc.add(*a, g.data()),
            Op::Relu(a) => {
                acc.with(*a, |da| {
                    for ((x, gy), y) in da.iter_mut().zip(g.data()).zip(out.data()) {
                        if *y > 0.0 {
                            *x += gy;
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                acc.with(*a, |da| {
                    for ((x, gy), y) in da.iter_mut().zip(g.data()).zip(out.data()) {
                        *x += gy * (1.0 - y * y);
                    }
                });
            }
            Op::Exp(a) => {
                acc.with(*a, |da| {
                    for ((x, gy), y) in da.iter_mut().zip(g.data()).zip(out.data()) {
                        *x += gy * y;
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a).data();
                acc.with(*a, |da| {
                    for ((x, gy), v) in da.iter_mut().zip(g.data()).zip(av) {
                        if v >= lo && v <= hi {
                            *x += gy;
                        }
                    }
                });
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let take_a_if_le = matches!(node.op, Op::Minimum(..));
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // ties route the gradient to `a`
                let pick_a = |x: f64, y: f64| if take_a_if_le { x <= y } else { x >= y };
                acc.with(*a, |da| {
                    for (((d, gy), x), y) in da.iter_mut().zip(g.data()).zip(av).zip(bv) {
                        if pick_a(*x, *y) {
                            *d += gy;
                        }
                    }
                });
                acc.with(*b, |db| {
                    for (((d, gy), x), y) in db.iter_mut().zip(g.data()).zip(av).zip(bv) {
                        if !pick_a(*x, *y) {
                            *d += gy;
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                acc.with(*a, |da| {
                    for ((dr, gr), pr) in da
                        .chunks_mut(c)
                        .zip(g.data().chunks(c))
                        .zip(out.data().chunks(c))
                    {
                        let dot: f64 = gr.iter().zip(pr).map(|(x, p)| x * p).sum();
                        for ((d, gy), p) in dr.iter_mut().zip(gr).zip(pr) {
                            *d += p * (gy - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let c = out.cols();
                acc.with(*a, |da| {
                    for ((dr, gr), lr) in da
                        .chunks_mut(c)
                        .zip(g.data().chunks(c))
                        .zip(out.data().chunks(c))
                    {
                        let total: f64 = gr.iter().sum();
                        for ((d, gy), l) in dr.iter_mut().zip(gr).zip(lr) {
                            *d += gy - l.exp() * total;
                        }
                    }
                });
            }
            Op::LayerNormRows { input, inv_std } => {
                let c = out.cols();
                let n = c as f64;
                acc.with(*input, |da| {
                    for (r, (dr, gr)) in da.chunks_mut(c).zip(g.data().chunks(c)).enumerate() {
                        let xr = out.row(r);
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((d, gy), x) in dr.iter_mut().zip(gr).zip(xr) {
                            *d += inv_std[r] * (gy - mean_g - x * mean_gx);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                groups,
                scale,
                weights,
            } => self.backward_attention(g, *q, *k, *v, *groups, *scale, weights, acc),
            Op::PickCols(a, index) => {
                let c = self.value(*a).cols();
                acc.with(*a, |da| {
                    for (r, &i) in index.iter().enumerate() {
                        da[r * c + i] += g.data()[r];
                    }
                });
            }
            Op::SumRows(a) => {
                let c = self.value(*a).cols();
                acc.with(*a, |da| {
                    for (row, gy) in da.chunks_mut(c).zip(g.data()) {
                        row.iter_mut().for_each(|x| *x += gy);
                    }
                });
            }
            Op::Sum(a) => {
                let gy = g.item();
                acc.with(*a, |da| da.iter_mut().for_each(|x| *x += gy));
            }
            Op::Mean(a) => {
                let gy = g.item() / self.value(*a).numel() as f64;
                acc.with(*a, |da| da.iter_mut().for_each(|x| *x += gy));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_attention(
        &self,
        g: &Tensor,
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        scale: f64,
        weights: &[f64],
        acc: &mut Accumulator<'_, 'p>,
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let dv = vv.cols();
        let nq = qv.rows() / groups;
        let nk = kv.rows() / groups;
        let mut dq = vec![0.0; qv.numel()];
        let mut dk = vec![0.0; kv.numel()];
        let mut dvv = vec![0.0; vv.numel()];
        let mut ds = vec![0.0; nq * nk];
        for grp in 0..groups {
            let qg = &qv.data()[grp * nq * d..(grp + 1) * nq * d];
            let kg = &kv.data()[grp * nk * d..(grp + 1) * nk * d];
            let vg = &vv.data()[grp * nk * dv..(grp + 1) * nk * dv];
            let pg = &weights[grp * nq * nk..(grp + 1) * nq * nk];
            let gg = &g.data()[grp * nq * dv..(grp + 1) * nq * dv];
            // dV = Pᵀ dO
            gemm(
                nk,
                nq,
                dv,
                1.0,
                pg,
                true,
                gg,
                false,
                0.0,
                &mut dvv[grp * nk * dv..(grp + 1) * nk * dv],
            );
            // dP = dO Vᵀ, then the softmax Jacobian in place
            gemm(nq, dv, nk, 1.0, gg, false, vg, true, 0.0, &mut ds);
            for (dr, pr) in ds.chunks_mut(nk).zip(pg.chunks(nk)) {
                let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                for (x, p) in dr.iter_mut().zip(pr) {
                    *x = p * (*x - dot);
                }
            }
            gemm(
                nq,
                nk,
                d,
                scale,
                &ds,
                false,
                kg,
                false,
                0.0,
                &mut dq[grp * nq * d..(grp + 1) * nq * d],
            );
            gemm(
                nk,
                nq,
                d,
                scale,
                &ds,
                true,
                qg,
                false,
                0.0,
                &mut dk[grp * nk * d..(grp + 1) * nk * d],
            );
        }
        acc.add(q, &dq);
        acc.add(k, &dk);
        acc.add(v, &dvv);
    }
}

struct Accumulator<'a, 'p> {
    tape: &'a Tape<'p>,
    nodes: &'a mut Vec<Option<Tensor>>,
    params: &'a mut Vec<Option<Tensor>>,
}

impl Accumulator<'_, '_> {
    /// Hands `f` the gradient buffer of `v`, zero-initialised on first use.
    fn with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        let slot = match v {
            Var::Param(i) => &mut self.params[i],
            Var::Node(i) => {
                if matches!(self.tape.nodes[i].op, Op::Const) {
                    return;
                }
                &mut self.nodes[i]
            }
        };
        let buf = slot.get_or_insert_with(|| Tensor::zeros(self.tape.value(v).shape()));
        f(buf.data_mut());
    }

    fn add(&mut self, v: Var, g: &[f64]) {
        self.with(v, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
    }
}
