//! Reverse-mode differentiation over a linear tape.
//!
//! Every differentiable op appends one node holding its value, its shape
//! and the recipe needed to push an output gradient back onto its inputs.
//! Parameters are bound by reference so building a tape does not copy the
//! weights. `Tape::backward` consumes the tape.

use std::borrow::Cow;

use super::tensor::{dims2, log_softmax_in_place, softmax_in_place, Real, Tensor};
use crate::error::{NmtError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Map { x: Var, deriv: fn(T, T) -> T },
    Concat(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Softmax(Var),
    LogSoftmax(Var),
    MulConst { x: Var, c: Vec<T> },
    AddConst(Var),
    Blend { new: Var, old: Var, take: Vec<T> },
    WeightedSum { w: Var, hs: Vec<Var> },
    GatherRows { table: Var, ids: Vec<usize> },
    PickSum { x: Var, picks: Vec<(usize, usize, T)> },
    Sum(Var),
    Scale(Var, T),
}

struct Node<'a, T: Real> {
    value: Cow<'a, [T]>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    params: Vec<(String, Var)>,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Position to which [`Tape::truncate`] can later rewind.
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node recorded after `mark`. Handles to dropped nodes
    /// become invalid.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        self.params.retain(|(_, v)| v.0 < mark);
    }

    fn push(&mut self, value: Cow<'a, [T]>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), shape, op, needs_grad)
    }

    pub fn leaf(&mut self, tensor: Tensor<T>, requires_grad: bool) -> Var {
        let shape = tensor.shape().to_vec();
        self.push(Cow::Owned(tensor.into_data()), shape, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor, false)
    }

    pub fn variable(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor, true)
    }

    /// Binds a named parameter by reference; its gradient is reported by
    /// name after the backward pass.
    pub fn param(&mut self, name: &str, tensor: &'a Tensor<T>) -> Var {
        let v = self.push(
            Cow::Borrowed(tensor.data()),
            tensor.shape().to_vec(),
            Op::Leaf,
            true,
        );
        self.params.push((name.to_string(), v));
        v
    }

    /// Binds a tensor by reference without tracking its gradient.
    pub fn constant_ref(&mut self, tensor: &'a Tensor<T>) -> Var {
        self.push(
            Cow::Borrowed(tensor.data()),
            tensor.shape().to_vec(),
            Op::Leaf,
            false,
        )
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.to_vec()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        dims2(&self.nodes[v.0].shape)
    }

    /// Matrix product `[m×k]·[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(NmtError::dim(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a),
            (k as isize, 1),
            self.value(b),
            (n as isize, 1),
            &mut out,
            false,
        );
        Ok(self.derived(out, vec![m, n], Op::MatMul(a, b), &[a, b]))
    }

    /// Affine map `x·Wᵀ + b` with `W` stored as `[out × in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, input) = self.dims(x);
        let wshape = self.shape(w);
        if wshape.len() != 2 || wshape[1] != input {
            return Err(NmtError::dim(
                "linear",
                format!("input {:?} vs weight {:?}", self.shape(x), wshape),
            ));
        }
        let output = wshape[0];
        if let Some(b) = b {
            if self.value(b).len() != output {
                return Err(NmtError::dim(
                    "linear",
                    format!("bias {:?} vs weight {:?}", self.shape(b), self.shape(w)),
                ));
            }
        }
        let mut out = vec![T::zero(); rows * output];
        T::gemm(
            rows,
            input,
            output,
            self.value(x),
            (input as isize, 1),
            self.value(w),
            (1, input as isize),
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b);
            for row in out.chunks_mut(output) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let shape = if self.shape(x).len() == 1 {
            vec![output]
        } else {
            vec![rows, output]
        };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.derived(out, shape, Op::Linear { x, w, b }, &inputs))
    }

    /// Elementwise sum; `b` may also be a bias row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let la = self.value(a).len();
        let lb = self.value(b).len();
        let (_, cols) = self.dims(a);
        if la == lb {
            let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
            let shape = self.shape(a).to_vec();
            Ok(self.derived(out, shape, Op::Add(a, b), &[a, b]))
        } else if lb == cols {
            let bias = self.value(b);
            let out: Vec<T> = self
                .value(a)
                .chunks(cols)
                .flat_map(|row| row.iter().zip(bias).map(|(&x, &y)| x + y))
                .collect();
            let shape = self.shape(a).to_vec();
            Ok(self.derived(out, shape, Op::AddRow(a, b), &[a, b]))
        } else {
            Err(NmtError::dim(
                "add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ))
        }
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        Ok(self.derived(out, shape, Op::Mul(a, b), &[a, b]))
    }

    /// `1 − x`, the complement used by the GRU update gate.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| T::one() - v).collect();
        let shape = self.shape(x).to_vec();
        self.derived(out, shape, Op::OneMinus(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.derived(out, shape, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        self.derived(out, shape, Op::Tanh(x), &[x])
    }

    /// Elementwise map with a caller-supplied derivative `deriv(x, f(x))`.
    pub fn map(&mut self, x: Var, f: fn(T) -> T, deriv: fn(T, T) -> T) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.derived(out, shape, Op::Map { x, deriv }, &[x])
    }

    /// Concatenation along the last axis. Vectors join into a vector;
    /// matrices must agree on their row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NmtError::dim("concat", "no parts"));
        }
        let all_vectors = parts.iter().all(|&p| self.shape(p).len() <= 1);
        let rows = self.dims(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(NmtError::dim(
                    "concat",
                    format!(
                        "row mismatch: {:?}",
                        parts.iter().map(|&q| self.shape(q).to_vec()).collect::<Vec<_>>()
                    ),
                ));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let (_, c) = self.dims(p);
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let shape = if all_vectors {
            vec![total]
        } else {
            vec![rows, total]
        };
        Ok(self.derived(out, shape, Op::Concat(parts.to_vec()), parts))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if start >= end || end > cols {
            return Err(NmtError::dim(
                "slice_cols",
                format!("range {start}..{end} of {:?}", self.shape(x)),
            ));
        }
        let width = end - start;
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        let shape = if self.shape(x).len() == 1 {
            vec![width]
        } else {
            vec![rows, width]
        };
        Ok(self.derived(out, shape, Op::SliceCols { x, start }, &[x]))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (_, cols) = self.dims(x);
        let mut out = self.value(x).to_vec();
        out.chunks_mut(cols).for_each(softmax_in_place);
        let shape = self.shape(x).to_vec();
        self.derived(out, shape, Op::Softmax(x), &[x])
    }

    /// Row-wise log-softmax, fused so losses never take `log(0)`.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (_, cols) = self.dims(x);
        let mut out = self.value(x).to_vec();
        out.chunks_mut(cols).for_each(log_softmax_in_place);
        let shape = self.shape(x).to_vec();
        self.derived(out, shape, Op::LogSoftmax(x), &[x])
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Vec<T>) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(NmtError::dim(
                "mul_const",
                format!("{:?} vs {} constants", self.shape(x), c.len()),
            ));
        }
        let out = zip_map(self.value(x), &c, |a, b| a * b);
        let shape = self.shape(x).to_vec();
        Ok(self.derived(out, shape, Op::MulConst { x, c }, &[x]))
    }

    /// Elementwise sum with a constant (additive logit masks).
    pub fn add_const(&mut self, x: Var, c: &[T]) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(NmtError::dim(
                "add_const",
                format!("{:?} vs {} constants", self.shape(x), c.len()),
            ));
        }
        let out = zip_map(self.value(x), c, |a, b| a + b);
        let shape = self.shape(x).to_vec();
        Ok(self.derived(out, shape, Op::AddConst(x), &[x]))
    }

    /// Per-row choice `take·new + (1 − take)·old`; with a 0/1 `take` this
    /// carries `old` through padded positions untouched.
    pub fn blend(&mut self, new: Var, old: Var, take: Vec<T>) -> Result<Var> {
        self.same_len("blend", new, old)?;
        let (rows, cols) = self.dims(new);
        if take.len() != rows {
            return Err(NmtError::dim(
                "blend",
                format!("{rows} rows vs {} weights", take.len()),
            ));
        }
        let a = self.value(new);
        let b = self.value(old);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let t = take[r];
            let s = T::one() - t;
            for c in 0..cols {
                out.push(t * a[r * cols + c] + s * b[r * cols + c]);
            }
        }
        let shape = self.shape(new).to_vec();
        Ok(self.derived(out, shape, Op::Blend { new, old, take }, &[new, old]))
    }

    /// `out[b] = Σ_i w[b, i] · hs[i][b]` for weights `[B × n]` and `n`
    /// states of shape `[B × D]`.
    pub fn weighted_sum(&mut self, w: Var, hs: &[Var]) -> Result<Var> {
        let (rows, n) = self.dims(w);
        if hs.len() != n || n == 0 {
            return Err(NmtError::dim(
                "weighted_sum",
                format!("{n} weights per row vs {} states", hs.len()),
            ));
        }
        let (hr, d) = self.dims(hs[0]);
        if hr != rows || hs.iter().any(|&h| self.dims(h) != (hr, d)) {
            return Err(NmtError::dim(
                "weighted_sum",
                format!("weights {:?} vs state {:?}", self.shape(w), self.shape(hs[0])),
            ));
        }
        let wv = self.value(w);
        let mut out = vec![T::zero(); rows * d];
        for (i, &h) in hs.iter().enumerate() {
            let hv = self.value(h);
            for r in 0..rows {
                let a = wv[r * n + i];
                for (o, &x) in out[r * d..(r + 1) * d].iter_mut().zip(&hv[r * d..(r + 1) * d]) {
                    *o += a * x;
                }
            }
        }
        let shape = self.shape(hs[0]).to_vec();
        let mut inputs = vec![w];
        inputs.extend_from_slice(hs);
        Ok(self.derived(
            out,
            shape,
            Op::WeightedSum {
                w,
                hs: hs.to_vec(),
            },
            &inputs,
        ))
    }

    /// Embedding lookup: rows `ids` of a `[V × d]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(NmtError::OutOfRange {
                what: "row id",
                value: bad,
                limit: v,
            });
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.derived(
            out,
            vec![ids.len(), d],
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Scalar `Σ weight · x[row, col]` over the given picks.
    pub fn pick_sum(&mut self, x: Var, picks: Vec<(usize, usize, T)>) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        let xv = self.value(x);
        let mut total = T::zero();
        for &(r, c, w) in &picks {
            if r >= rows || c >= cols {
                return Err(NmtError::dim(
                    "pick_sum",
                    format!("index ({r}, {c}) in {:?}", self.shape(x)),
                ));
            }
            total += w * xv[r * cols + c];
        }
        Ok(self.derived(vec![total], Vec::new(), Op::PickSum { x, picks }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().copied().sum();
        self.derived(vec![total], Vec::new(), Op::Sum(x), &[x])
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * k).collect();
        let shape = self.shape(x).to_vec();
        self.derived(out, shape, Op::Scale(x, k), &[x])
    }

    fn same_len(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).len() != self.value(b).len() {
            return Err(NmtError::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// Back-propagates from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(NmtError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = dims2(&nodes[a.0].shape);
                    let (_, n) = dims2(&nodes[b.0].shape);
                    if let Some(ga) = slot(nodes, &mut grads, *a) {
                        // dA = dC·Bᵀ
                        T::gemm(m, n, k, &g, (n as isize, 1), &nodes[b.0].value, (1, n as isize), ga, true);
                    }
                    if let Some(gb) = slot(nodes, &mut grads, *b) {
                        // dB = Aᵀ·dC
                        T::gemm(k, m, n, &nodes[a.0].value, (1, k as isize), &g, (n as isize, 1), gb, true);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (rows, input) = dims2(&nodes[x.0].shape);
                    let output = nodes[w.0].shape[0];
                    if let Some(gx) = slot(nodes, &mut grads, *x) {
                        T::gemm(rows, output, input, &g, (output as isize, 1), &nodes[w.0].value, (input as isize, 1), gx, true);
                    }
                    if let Some(gw) = slot(nodes, &mut grads, *w) {
                        T::gemm(output, rows, input, &g, (1, output as isize), &nodes[x.0].value, (input as isize, 1), gw, true);
                    }
                    if let Some(b) = b {
                        if let Some(gb) = slot(nodes, &mut grads, *b) {
                            for row in g.chunks(output) {
                                for (acc, &v) in gb.iter_mut().zip(row) {
                                    *acc += v;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if let Some(gv) = slot(nodes, &mut grads, v) {
                            add_into(gv, &g);
                        }
                    }
                }
                Op::AddRow(a, b) => {
                    if let Some(ga) = slot(nodes, &mut grads, *a) {
                        add_into(ga, &g);
                    }
                    if let Some(gb) = slot(nodes, &mut grads, *b) {
                        let cols = gb.len();
                        for row in g.chunks(cols) {
                            add_into(gb, row);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if let Some(ga) = slot(nodes, &mut grads, *a) {
                        for ((acc, &gv), &bv) in ga.iter_mut().zip(g.iter()).zip(nodes[b.0].value.iter()) {
                            *acc += gv * bv;
                        }
                    }
                    if let Some(gb) = slot(nodes, &mut grads, *b) {
                        for ((acc, &gv), &av) in gb.iter_mut().zip(g.iter()).zip(nodes[a.0].value.iter()) {
                            *acc += gv * av;
                        }
                    }
                }
                Op::OneMinus(x) => {
                    if let Some(gx) = slot(nodes, &mut grads, *x) {
                        for (acc, &gv) in gx.iter_mut().zip(g.iter()) {
                            *acc -= gv;
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    if let Some(gx) = slot(nodes, &mut grads, *x) {
                        for ((acc, &gv), &y) in gx.iter_mut().zip(g.iter()).zip(out.iter()) {
                            *acc += gv * y * (T::one() - y);
                        }
                    }
                }
                Op::Tanh(x) => {
                    if let Some(gx) = slot(nodes, &mut grads, *x) {
                        for ((acc, &gv), &y) in gx.iter_mut().zip(g.iter()).zip(out.iter()) {
                            *acc += gv * (T::one() - y * y);
                        }
                    }
                }
                Op::Map { x, deriv } => {
                    let xv = &nodes[x.0].value;
                    if let Some(gx) = slot(nodes, &mut grads, *x) {
                        for (i, acc) in gx.iter_mut().enumerate() {
                            *acc += g[i] * deriv(xv[i], out[i]);
                        }
                    }
                }
                Op::Concat(parts) => {
                    let rows = dims2(&node.shape).0;
                    let total = out.len() / rows;
                    let mut offset = 0;
                    for &p in parts {
                        let (_, c) = dims2(&nodes[p.0].shape);
                        if let Some(gp) = slot(nodes, &mut grads, p) {
                            for r in 0..rows {
                                add_into(&mut gp[r * c..(r + 1) * c], &g[r * total + offset..r * total + offset + c]);
                            }
                        }
                        offset += c;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = dims2(&nodes[x.0].shape);
                    let width = out.len() / rows;
                    if let Some(gx) = slot(nodes, &mut grads, *x) {
                        for r in 0..rows {
                            add_into(&mut gx[r * cols + start..r * cols + start + width], &g[r * width..(r + 1) * width]);
                        }
                    }
                }
                Op::Softmax(x) => {
                    let (_, cols) = dims2(&node.shape);
                    if let Some(gx) = slot(nodes, &mut grads, *x) {
                        for ((acc, gr), y) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                            let dot: T = gr.iter().zip(y).map(|(&a, &b)| a * b).sum();
                            for i in 0..cols {
                                acc[i] += y[i] * (gr[i] - dot);
                            }
                        }
                    }
                }
                Op::LogSoftmax(x) => {
                    let (_, cols) = dims2(&node.shape);
                    if let Some(gx) = slot(nodes, &mut grads, *x) {
                        for ((acc, gr), y) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                            let total: T = gr.iter().copied().sum();
                            for i in 0..cols {
                                acc[i] += gr[i] - y[i].exp() * total;
                            }
                        }
                    }
                }
                Op::MulConst { x, c } => {
                    if let Some(gx) = slot(nodes, &mut grads, *x) {
                        for ((acc, &gv), &cv) in gx.iter_mut().zip(g.iter()).zip(c.iter()) {
                            *acc += gv * cv;
                        }
                    }
                }
                Op::AddConst(x) => {
                    if let Some(gx) = slot(nodes, &mut grads, *x) {
                        add_into(gx, &g);
                    }
                }
                Op::Blend { new, old, take } => {
                    let (_, cols) = dims2(&node.shape);
                    for (v, complement) in [(*new, false), (*old, true)] {
                        if let Some(gv) = slot(nodes, &mut grads, v) {
                            for (r, (acc, gr)) in gv.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                                let t = if complement { T::one() - take[r] } else { take[r] };
                                for (a, &b) in acc.iter_mut().zip(gr) {
                                    *a += t * b;
                                }
                            }
                        }
                    }
                }
                Op::WeightedSum { w, hs } => {
                    let (rows, n) = dims2(&nodes[w.0].shape);
                    let d = out.len() / rows;
                    if let Some(gw) = slot(nodes, &mut grads, *w) {
                        for (i, h) in hs.iter().enumerate() {
                            let hv = &nodes[h.0].value;
                            for r in 0..rows {
                                let dot: T = g[r * d..(r + 1) * d]
                                    .iter()
                                    .zip(&hv[r * d..(r + 1) * d])
                                    .map(|(&a, &b)| a * b)
                                    .sum();
                                gw[r * n + i] += dot;
                            }
                        }
                    }
                    for (i, &h) in hs.iter().enumerate() {
                        if let Some(gh) = slot(nodes, &mut grads, h) {
                            let wv = &nodes[w.0].value;
                            for r in 0..rows {
                                let a = wv[r * n + i];
                                for (acc, &gv) in gh[r * d..(r + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                                    *acc += a * gv;
                                }
                            }
                        }
                    }
                }
                Op::GatherRows { table, ids } => {
                    let (_, d) = dims2(&nodes[table.0].shape);
                    if let Some(gt) = slot(nodes, &mut grads, *table) {
                        for (k, &i) in ids.iter().enumerate() {
                            add_into(&mut gt[i * d..(i + 1) * d], &g[k * d..(k + 1) * d]);
                        }
                    }
                }
                Op::PickSum { x, picks } => {
                    let (_, cols) = dims2(&nodes[x.0].shape);
                    if let Some(gx) = slot(nodes, &mut grads, *x) {
                        for &(r, c, w) in picks {
                            gx[r * cols + c] += g[0] * w;
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(gx) = slot(nodes, &mut grads, *x) {
                        for acc in gx.iter_mut() {
                            *acc += g[0];
                        }
                    }
                }
                Op::Scale(x, k) => {
                    if let Some(gx) = slot(nodes, &mut grads, *x) {
                        for (acc, &gv) in gx.iter_mut().zip(g.iter()) {
                            *acc += gv * *k;
                        }
                    }
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| if matches!(n.op, Op::Leaf) { g } else { None })
            .collect();
        let shapes = nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients {
            grads,
            shapes,
            params: self.params,
        })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; zeros when the leaf did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Gradients of every named parameter, in binding order.
    pub fn params(&self) -> impl Iterator<Item = (&str, Tensor<T>)> + '_ {
        self.params.iter().map(|(name, v)| (name.as_str(), self.get(*v)))
    }
}

fn slot<'g, T: Real>(
    nodes: &[Node<'_, T>],
    grads: &'g mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'g mut Vec<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn add_into<T: Real>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
