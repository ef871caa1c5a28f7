//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value and the
//! inputs it read. Nodes are only ever appended, so the tape is
//! topologically ordered by construction and the backward pass is a
//! single reverse sweep that visits each node once.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, LayerNormCache};
use crate::numerics::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    ScaleBy(Var, Var),
    Gelu(Var),
    Sigmoid(Var),
    Square(Var),
    LogClamped(Var, f64),
    Softmax(Var),
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        cache: LayerNormCache,
    },
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SumAll(Var),
    MeanRows(Var, Vec<usize>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::ScaleBy(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Affine(a, _)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::Square(a)
            | Op::LogClamped(a, _)
            | Op::Softmax(a)
            | Op::GatherRows(a, _)
            | Op::SliceCols(a, _)
            | Op::SumAll(a)
            | Op::MeanRows(a, _) => vec![*a],
            Op::LayerNorm {
                input, gain, bias, ..
            } => vec![*input, *gain, *bias],
            Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients for every node of a tape after a backward sweep.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// ∂loss/∂var; all zeros when `var` is not on a path to the loss.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    /// Whether any gradient reached `var` at all.
    pub fn reached(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

/// Ordered record of primitive applications.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Unnamed leaf tracked for gradients (its `requires_grad` flag is honoured).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = value.requires_grad();
        self.push_leaf(value, rg)
    }

    /// Named trainable parameter. Registering a name twice is an error.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(Error::invalid(format!("parameter `{name}` registered twice")));
        }
        let v = self.push_leaf(value, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Copy of `v` with no link back into the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// True when `output` was computed (transitively) from `input`.
    pub fn depends_on(&self, output: Var, input: Var) -> bool {
        if input.0 > output.0 {
            return false;
        }
        let mut live = vec![false; output.0 + 1];
        live[output.0] = true;
        for idx in (input.0..=output.0).rev() {
            if !live[idx] {
                continue;
            }
            if idx == input.0 {
                return true;
            }
            for p in self.nodes[idx].op.inputs() {
                if p.0 >= input.0 {
                    live[p.0] = true;
                }
            }
        }
        false
    }

    // ── forward operations ─────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul_t(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = kernels::transpose(self.value(a));
        self.push(out, Op::Transpose(a))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Matrix plus a row vector broadcast over every row.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (tm, tr) = (self.value(m), self.value(row));
        let c = tm.cols();
        if tr.len() != c {
            return Err(Error::shape("add_row", format!("row of {} for {c} columns", tr.len())));
        }
        let r = tr.data();
        let data = tm
            .data()
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let out = Tensor::from_parts(tm.shape().to_vec(), data);
        Ok(self.push(out, Op::AddRow(m, row)))
    }

    /// `c · a`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| c * x).collect());
        self.push(out, Op::Affine(a, c))
    }

    /// `1 − a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| 1.0 - x).collect());
        self.push(out, Op::Affine(a, -1.0))
    }

    /// Tensor times a one-element tensor.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self
            .value(s)
            .item()
            .ok_or_else(|| Error::shape("scale_by", "scale must hold one value"))?;
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| sv * x).collect());
        Ok(self.push(out, Op::ScaleBy(a, s)))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect());
        self.push(out, op)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, kernels::gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    /// `ln(max(a, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        self.map(a, |x| x.max(floor).ln(), Op::LogClamped(a, floor))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax_rows_masked(a, None)
    }

    pub fn softmax_rows_masked(&mut self, a: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let out = kernels::softmax_rows_masked(self.value(a), key_mask)?;
        Ok(self.push(out, Op::Softmax(a)))
    }

    pub fn layer_norm(&mut self, input: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (out, cache) =
            kernels::layer_norm_forward(self.value(input), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                input,
                gain,
                bias,
                cache,
            },
        ))
    }

    /// Rows `ids` of `table`, in order (embedding lookup, row selection).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (r, c) = (t.rows(), t.cols());
        if ids.is_empty() {
            return Err(Error::shape("gather_rows", "no rows selected"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {r}")));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::from_parts(vec![ids.len(), c], data);
        Ok(self.push(out, Op::GatherRows(table, ids.to_vec())))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", format!("{start}..{} of {c}", start + len)));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let out = Tensor::from_parts(vec![r, len], data);
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_cols", "nothing to concatenate"))?;
        let r = self.value(first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let c: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::from_parts(vec![r, c], data);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// Mean over the listed rows, as a `[1 × cols]` matrix.
    pub fn mean_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if rows.is_empty() {
            return Err(Error::AllMasked);
        }
        if rows.iter().any(|&i| i >= r) {
            return Err(Error::shape("mean_rows", "row index out of range"));
        }
        let mut acc = vec![0.0; c];
        for &i in rows {
            for (s, v) in acc.iter_mut().zip(t.row(i)) {
                *s += v;
            }
        }
        let n = rows.len() as f64;
        acc.iter_mut().for_each(|s| *s /= n);
        let out = Tensor::from_parts(vec![1, c], acc);
        Ok(self.push(out, Op::MeanRows(a, rows.to_vec())))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`, returning gradients for every node.
    pub fn backward_all(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// ∂loss/∂θ for every named parameter; parameters off the path get zeros.
    pub fn backward(&self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.backward_all(loss)?;
        Ok(self
            .params
            .iter()
            .map(|(name, &v)| (name.clone(), grads.wrt(v)))
            .collect())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !wants(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                acc(*a, &mut |s| {
                    // dA = dC · Bᵀ
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            s[i * k + p] += gi.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |s| {
                    // dB = Aᵀ · dC
                    let d = kernels::matmul_tn_raw(ta.data(), g, m, k, n);
                    add_into(s, &d);
                });
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                acc(*a, &mut |s| {
                    // dA = dC · B
                    let d = kernels::matmul_raw(g, tb.data(), m, n, k);
                    add_into(s, &d);
                });
                acc(*b, &mut |s| {
                    // dB = dCᵀ · A
                    let d = kernels::matmul_tn_raw(g, ta.data(), m, n, k);
                    add_into(s, &d);
                });
            }
            Op::Transpose(a) => {
                let ta = val(*a);
                let (m, n) = (ta.rows(), ta.cols());
                acc(*a, &mut |s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for ((x, gv), bv) in s.iter_mut().zip(g).zip(tb.data()) {
                        *x += gv * bv;
                    }
                });
                acc(*b, &mut |s| {
                    for ((x, gv), av) in s.iter_mut().zip(g).zip(ta.data()) {
                        *x += gv * av;
                    }
                });
            }
            Op::AddRow(m, r) => {
                let c = val(*m).cols();
                acc(*m, &mut |s| add_into(s, g));
                acc(*r, &mut |s| {
                    for chunk in g.chunks(c) {
                        add_into(s, chunk);
                    }
                });
            }
            Op::Affine(a, c) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::ScaleBy(a, sc) => {
                let sv = val(*sc).data()[0];
                let ta = val(*a);
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += sv * y));
                acc(*sc, &mut |s| {
                    s[0] += g.iter().zip(ta.data()).map(|(x, y)| x * y).sum::<f64>();
                });
            }
            Op::Gelu(a) => {
                let ta = val(*a);
                acc(*a, &mut |s| {
                    for ((x, gv), xv) in s.iter_mut().zip(g).zip(ta.data()) {
                        *x += gv * kernels::gelu_grad(*xv);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &mut |s| {
                    for ((x, gv), yv) in s.iter_mut().zip(g).zip(y) {
                        *x += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Square(a) => {
                let ta = val(*a);
                acc(*a, &mut |s| {
                    for ((x, gv), xv) in s.iter_mut().zip(g).zip(ta.data()) {
                        *x += 2.0 * xv * gv;
                    }
                });
            }
            Op::LogClamped(a, floor) => {
                let ta = val(*a);
                acc(*a, &mut |s| {
                    for ((x, gv), xv) in s.iter_mut().zip(g).zip(ta.data()) {
                        if *xv > *floor {
                            *x += gv / xv;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let c = y.cols();
                acc(*a, &mut |s| {
                    for (i, (yrow, grow)) in y.data().chunks(c).zip(g.chunks(c)).enumerate() {
                        let dot: f64 = yrow.iter().zip(grow).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            s[i * c + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                cache,
            } => {
                let d = val(*input).cols();
                let gv = val(*gain).data();
                let xh = &cache.normalized;
                acc(*gain, &mut |s| {
                    for (grow, xrow) in g.chunks(d).zip(xh.chunks(d)) {
                        for j in 0..d {
                            s[j] += grow[j] * xrow[j];
                        }
                    }
                });
                acc(*bias, &mut |s| {
                    for grow in g.chunks(d) {
                        add_into(s, grow);
                    }
                });
                acc(*input, &mut |s| {
                    for (i, (grow, xrow)) in g.chunks(d).zip(xh.chunks(d)).enumerate() {
                        let dxh: Vec<f64> = grow.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_d = dxh.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxh.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let inv = cache.inv_std[i];
                        for j in 0..d {
                            s[i * d + j] += inv * (dxh[j] - mean_d - xrow[j] * mean_dx);
                        }
                    }
                });
            }
            Op::GatherRows(table, ids) => {
                let c = val(*table).cols();
                acc(*table, &mut |s| {
                    for (k, &row) in ids.iter().enumerate() {
                        add_into(&mut s[row * c..(row + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let c = val(*a).cols();
                let len = node.value.cols();
                acc(*a, &mut |s| {
                    for (i, grow) in g.chunks(len).enumerate() {
                        add_into(&mut s[i * c + start..i * c + start + len], grow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    acc(p, &mut |s| {
                        for (i, grow) in g.chunks(total).enumerate() {
                            add_into(&mut s[i * w..(i + 1) * w], &grow[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SumAll(a) => {
                acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::MeanRows(a, rows) => {
                let c = val(*a).cols();
                let n = rows.len() as f64;
                acc(*a, &mut |s| {
                    for &r in rows {
                        for j in 0..c {
                            s[r * c + j] += g[j] / n;
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
