//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! Leaves are either trainable parameters (gradient requested) or constants.
//! Constants still sit on the graph, so gradients flow *through* frozen
//! weights to upstream parameters; they just never receive a gradient of
//! their own.

use crate::error::{shape_err, DampError, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, gelu, gelu_grad, gemm_nt, gemm_tn, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row/column grouping for block-diagonal attention.
///
/// Query group `g` attends only to key group `g`. With a single group this is
/// ordinary attention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnGroups {
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
}

impl AttnGroups {
    pub fn single(nq: usize, nk: usize) -> Self {
        Self {
            queries: vec![nq],
            keys: vec![nk],
        }
    }

    /// `count` groups of identical sizes.
    pub fn uniform(count: usize, nq: usize, nk: usize) -> Self {
        Self {
            queries: vec![nq; count],
            keys: vec![nk; count],
        }
    }

    /// Same partition for queries and keys (self-attention over packed sequences).
    pub fn packed(lengths: &[usize]) -> Self {
        Self {
            queries: lengths.to_vec(),
            keys: lengths.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttnSpec {
    pub heads: usize,
    /// Additive -inf masking of keys after the query position within a group.
    pub causal: bool,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, Var),
    MulConst(Var, T),
    Gelu(Var),
    Exp(Var),
    LogFloor(Var, T),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: AttnGroups,
        probs: Vec<T>,
    },
    ConcatRows(Vec<Var>),
    RowMix {
        x: Var,
        entries: Vec<(usize, usize, T)>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    GroupedRowDot {
        a: Var,
        b: Var,
        group: usize,
    },
    LogSoftmaxRows(Var),
    Pick {
        x: Var,
        entries: Vec<(usize, usize, T)>,
    },
    SumAll(Var),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar output with respect to every node that needed one.
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.get(0, 0)
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `x * w + b` with `b` a row vector.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = self.value(a).add_row_broadcast(self.value(row))?;
        let ng = self.ng(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    /// Multiplies every entry of `a` by the 1x1 node `s`.
    pub fn scale(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.shape() != (1, 1) {
            return shape_err("scale", format!("scale factor is {}x{}", sv.rows(), sv.cols()));
        }
        let value = self.value(a).scale(sv.get(0, 0));
        let ng = self.ng(&[a, s]);
        Ok(self.push(value, Op::Scale(a, s), ng))
    }

    pub fn mul_const(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).scale(c);
        let ng = self.ng(&[a]);
        self.push(value, Op::MulConst(a, c), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.ng(&[a]);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.exp());
        let ng = self.ng(&[a]);
        self.push(value, Op::Exp(a), ng)
    }

    /// `ln(max(x, floor))`; zero gradient below the floor.
    pub fn log_floor(&mut self, a: Var, floor: T) -> Var {
        let value = self.value(a).map(|x| x.max(floor).ln());
        let ng = self.ng(&[a]);
        self.push(value, Op::LogFloor(a, floor), ng)
    }

    /// Row-wise layer normalization with affine `gain`/`bias` rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.shape() != (1, cols) || bv.shape() != (1, cols) {
            return shape_err(
                "layer_norm",
                format!("input width {cols}, gain {:?}, bias {:?}", gv.shape(), bv.shape()),
            );
        }
        let eps = T::of(LAYER_NORM_EPS);
        let n = T::of(cols as f64);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for c in 0..cols {
                xh[c] = (row[c] - mean) * is;
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = xh[c] * gv.as_slice()[c] + bv.as_slice()[c];
            }
        }
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// queries, keys and values. Heads split the columns evenly.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        spec: AttnSpec,
        groups: AttnGroups,
    ) -> Result<Var> {
        let (out, probs) =
            attention_forward(self.value(q), self.value(k), self.value(v), spec, &groups)?;
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads: spec.heads,
                groups,
                probs,
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_rows(&mats)?;
        let ng = self.ng(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Sparse linear recombination of rows:
    /// `out[o] = sum over entries (o, i, w) of w * x[i]`.
    pub fn row_mix(&mut self, x: Var, out_rows: usize, entries: Vec<(usize, usize, T)>) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = Matrix::zeros(out_rows, cols);
        for &(o, i, w) in &entries {
            if o >= out_rows || i >= xv.rows() {
                return shape_err(
                    "row_mix",
                    format!("entry ({o}, {i}) outside {out_rows} x {} rows", xv.rows()),
                );
            }
            let src = xv.row(i);
            for (d, &s) in out.row_mut(o).iter_mut().zip(src) {
                *d += w * s;
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::RowMix { x, entries }, ng))
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let entries = indices
            .iter()
            .enumerate()
            .map(|(o, &i)| (o, i, T::one()))
            .collect();
        self.row_mix(x, indices.len(), entries)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(x, &idx)
    }

    /// Stacks `times` copies of `x`.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let n = self.value(x).rows();
        let idx: Vec<usize> = (0..times).flat_map(|_| 0..n).collect();
        self.gather_rows(x, &idx)
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn group_mean_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let n = self.value(x).rows();
        if group == 0 || n % group != 0 {
            return shape_err("group_mean_rows", format!("{n} rows in groups of {group}"));
        }
        let w = T::one() / T::of(group as f64);
        let entries = (0..n).map(|i| (i / group, i, w)).collect();
        self.row_mix(x, n / group, entries)
    }

    /// Mean across `blocks` stacked blocks of equal height, elementwise by position.
    pub fn block_mean_rows(&mut self, x: Var, blocks: usize) -> Result<Var> {
        let n = self.value(x).rows();
        if blocks == 0 || n % blocks != 0 {
            return shape_err("block_mean_rows", format!("{n} rows in {blocks} blocks"));
        }
        let h = n / blocks;
        let w = T::one() / T::of(blocks as f64);
        let entries = (0..n).map(|i| (i % h, i, w)).collect();
        self.row_mix(x, h, entries)
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).rows();
        self.group_mean_rows(x, n)
    }

    /// L2-normalizes every row. Zero rows are rejected; non-finite rows pass through.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = dot(xv.row(r), xv.row(r)).sqrt();
            if n == T::zero() {
                return Err(DampError::Invalid(format!(
                    "row {r} has zero norm; cosine similarity is undefined"
                )));
            }
            norms.push(n);
            out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::NormalizeRows { x, norms }, ng))
    }

    /// `out[i, j] = <a[i], b[i * group + j]>`.
    pub fn grouped_row_dot(&mut self, a: Var, b: Var, group: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() || av.rows() * group != bv.rows() {
            return shape_err(
                "grouped_row_dot",
                format!(
                    "{}x{} against {}x{} in groups of {group}",
                    av.rows(),
                    av.cols(),
                    bv.rows(),
                    bv.cols()
                ),
            );
        }
        let out = Matrix::from_fn(av.rows(), group, |i, j| dot(av.row(i), bv.row(i * group + j)));
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::GroupedRowDot { a, b, group }, ng))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            out.row_mut(r)
                .copy_from_slice(&crate::tensor::log_softmax(xv.row(r)));
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::LogSoftmaxRows(x), ng)
    }

    /// Weighted sum of selected entries, as a 1x1 node.
    pub fn pick(&mut self, x: Var, entries: Vec<(usize, usize, T)>) -> Result<Var> {
        let xv = self.value(x);
        let mut total = T::zero();
        for &(r, c, w) in &entries {
            if r >= xv.rows() || c >= xv.cols() {
                return shape_err("pick", format!("({r}, {c}) outside {:?}", xv.shape()));
            }
            total += w * xv.get(r, c);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Matrix::scalar(total), Op::Pick { x, entries }, ng))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let ng = self.ng(&[x]);
        self.push(Matrix::scalar(total), Op::SumAll(x), ng)
    }

    /// Sum of several 1x1 nodes with weights.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        if terms.is_empty() {
            return Ok(self.constant(Matrix::scalar(T::zero())));
        }
        let mut acc = self.mul_const(terms[0].0, terms[0].1);
        for &(v, w) in &terms[1..] {
            let scaled = self.mul_const(v, w);
            acc = self.add(acc, scaled)?;
        }
        Ok(acc)
    }

    /// Back-propagates from the 1x1 node `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out_val = self.value(output);
        if out_val.shape() != (1, 1) {
            return shape_err("backward", format!("output is {:?}, expected 1x1", out_val.shape()));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::scalar(T::one()));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs_grad(*a) {
                    let bv = self.value(*b);
                    let acc = slot(grads, *a, self.value(*a).shape());
                    gemm_nt(g, bv, acc);
                }
                if self.needs_grad(*b) {
                    let av = self.value(*a);
                    let acc = slot(grads, *b, self.value(*b).shape());
                    gemm_tn(av, g, acc);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs_grad(*v) {
                        slot(grads, *v, g.shape()).add_assign(g);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.needs_grad(*a) {
                    slot(grads, *a, g.shape()).add_assign(g);
                }
                if self.needs_grad(*row) {
                    let acc = slot(grads, *row, (1, g.cols()));
                    for r in 0..g.rows() {
                        for (d, &s) in acc.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs_grad(*a) {
                    let bv = self.value(*b);
                    let acc = slot(grads, *a, g.shape());
                    for ((d, &gi), &bi) in acc.as_mut_slice().iter_mut().zip(g.as_slice()).zip(bv.as_slice()) {
                        *d += gi * bi;
                    }
                }
                if self.needs_grad(*b) {
                    let av = self.value(*a);
                    let acc = slot(grads, *b, g.shape());
                    for ((d, &gi), &ai) in acc.as_mut_slice().iter_mut().zip(g.as_slice()).zip(av.as_slice()) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Scale(a, s) => {
                let sv = self.value(*s).get(0, 0);
                if self.needs_grad(*a) {
                    slot(grads, *a, g.shape()).scaled_add_assign(sv, g);
                }
                if self.needs_grad(*s) {
                    let d = dot(g.as_slice(), self.value(*a).as_slice());
                    let acc = slot(grads, *s, (1, 1));
                    acc.as_mut_slice()[0] += d;
                }
            }
            Op::MulConst(a, c) => {
                if self.needs_grad(*a) {
                    slot(grads, *a, g.shape()).scaled_add_assign(*c, g);
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let acc = slot(grads, *a, g.shape());
                for ((d, &gi), &x) in acc.as_mut_slice().iter_mut().zip(g.as_slice()).zip(av.as_slice()) {
                    *d += gi * gelu_grad(x);
                }
            }
            Op::Exp(a) => {
                let acc = slot(grads, *a, g.shape());
                for ((d, &gi), &y) in acc.as_mut_slice().iter_mut().zip(g.as_slice()).zip(node.value.as_slice()) {
                    *d += gi * y;
                }
            }
            Op::LogFloor(a, floor) => {
                let av = self.value(*a);
                let acc = slot(grads, *a, g.shape());
                for ((d, &gi), &x) in acc.as_mut_slice().iter_mut().zip(g.as_slice()).zip(av.as_slice()) {
                    if x > *floor {
                        *d += gi / x;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = g.shape();
                if self.needs_grad(*gain) {
                    let acc = slot(grads, *gain, (1, cols));
                    for r in 0..rows {
                        for c in 0..cols {
                            acc.as_mut_slice()[c] += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                }
                if self.needs_grad(*bias) {
                    let acc = slot(grads, *bias, (1, cols));
                    for r in 0..rows {
                        for (d, &s) in acc.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
                if self.needs_grad(*x) {
                    let gv = self.value(*gain).as_slice().to_vec();
                    let n = T::of(cols as f64);
                    let acc = slot(grads, *x, (rows, cols));
                    let mut dy = vec![T::zero(); cols];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = xhat.row(r);
                        let mut mean_dy = T::zero();
                        let mut mean_dy_xh = T::zero();
                        for c in 0..cols {
                            dy[c] = gr[c] * gv[c];
                            mean_dy += dy[c];
                            mean_dy_xh += dy[c] * xh[c];
                        }
                        mean_dy /= n;
                        mean_dy_xh /= n;
                        let out = acc.row_mut(r);
                        for c in 0..cols {
                            out[c] += inv_std[r] * (dy[c] - mean_dy - xh[c] * mean_dy_xh);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = Matrix::zeros(qv.rows(), qv.cols());
                let mut dk = Matrix::zeros(kv.rows(), kv.cols());
                let mut dv = Matrix::zeros(vv.rows(), vv.cols());
                attention_backward(qv, kv, vv, *heads, groups, probs, g, &mut dq, &mut dk, &mut dv);
                for (var, d) in [(q, dq), (k, dk), (v, dv)] {
                    if self.needs_grad(*var) {
                        slot(grads, *var, d.shape()).add_assign(&d);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if self.needs_grad(*p) {
                        let piece = g.slice_rows(start, start + rows);
                        slot(grads, *p, piece.shape()).add_assign(&piece);
                    }
                    start += rows;
                }
            }
            Op::RowMix { x, entries } => {
                let shape = self.value(*x).shape();
                let acc = slot(grads, *x, shape);
                for &(o, i, w) in entries {
                    let src = g.row(o);
                    for (d, &s) in acc.row_mut(i).iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let acc = slot(grads, *x, g.shape());
                for r in 0..g.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let proj = dot(yr, gr);
                    let out = acc.row_mut(r);
                    for c in 0..gr.len() {
                        out[c] += (gr[c] - yr[c] * proj) / norms[r];
                    }
                }
            }
            Op::GroupedRowDot { a, b, group } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    let acc = slot(grads, *a, av.shape());
                    for i in 0..av.rows() {
                        for j in 0..*group {
                            let w = g.get(i, j);
                            let src = bv.row(i * group + j);
                            for (d, &s) in acc.row_mut(i).iter_mut().zip(src) {
                                *d += w * s;
                            }
                        }
                    }
                }
                if self.needs_grad(*b) {
                    let acc = slot(grads, *b, bv.shape());
                    for i in 0..av.rows() {
                        for j in 0..*group {
                            let w = g.get(i, j);
                            let src = av.row(i);
                            for (d, &s) in acc.row_mut(i * group + j).iter_mut().zip(src) {
                                *d += w * s;
                            }
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(x) => {
                let y = &node.value;
                let acc = slot(grads, *x, g.shape());
                for r in 0..g.rows() {
                    let gr = g.row(r);
                    let total: T = gr.iter().copied().sum();
                    let yr = y.row(r);
                    let out = acc.row_mut(r);
                    for c in 0..gr.len() {
                        out[c] += gr[c] - yr[c].exp() * total;
                    }
                }
            }
            Op::Pick { x, entries } => {
                let s = g.get(0, 0);
                let shape = self.value(*x).shape();
                let acc = slot(grads, *x, shape);
                for &(r, c, w) in entries {
                    let cur = acc.get(r, c);
                    acc.set(r, c, cur + w * s);
                }
            }
            Op::SumAll(x) => {
                let s = g.get(0, 0);
                let acc = slot(grads, *x, self.value(*x).shape());
                acc.as_mut_slice().iter_mut().for_each(|d| *d += s);
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, shape: (usize, usize)) -> &mut Matrix<T> {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

fn check_groups(nq: usize, nk: usize, groups: &AttnGroups, causal: bool) -> Result<()> {
    if groups.queries.len() != groups.keys.len() {
        return shape_err(
            "attention",
            format!(
                "{} query groups vs {} key groups",
                groups.queries.len(),
                groups.keys.len()
            ),
        );
    }
    let sq: usize = groups.queries.iter().sum();
    let sk: usize = groups.keys.iter().sum();
    if sq != nq || sk != nk {
        return shape_err(
            "attention",
            format!("groups cover {sq} queries / {sk} keys, inputs have {nq} / {nk}"),
        );
    }
    if let Some(g) = groups.keys.iter().position(|&n| n == 0) {
        if groups.queries[g] > 0 {
            return shape_err("attention", format!("group {g} has queries but no keys"));
        }
    }
    if causal && groups.queries != groups.keys {
        return shape_err("attention", "causal masking needs equal query and key groups");
    }
    Ok(())
}

/// Forward pass of grouped multi-head attention; returns the output and the
/// attention probabilities (flattened per group, then per head).
pub(crate) fn attention_forward<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    spec: AttnSpec,
    groups: &AttnGroups,
) -> Result<(Matrix<T>, Vec<T>)> {
    let heads = spec.heads;
    if q.cols() != k.cols() {
        return shape_err(
            "attention",
            format!("query width {} vs key width {}", q.cols(), k.cols()),
        );
    }
    if k.rows() != v.rows() {
        return shape_err(
            "attention",
            format!("{} keys vs {} values", k.rows(), v.rows()),
        );
    }
    if heads == 0 || q.cols() % heads != 0 || v.cols() % heads != 0 {
        return shape_err(
            "attention",
            format!("widths {}/{} not divisible by {heads} heads", q.cols(), v.cols()),
        );
    }
    check_groups(q.rows(), k.rows(), groups, spec.causal)?;
    let dh = q.cols() / heads;
    let dvh = v.cols() / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = Matrix::zeros(q.rows(), v.cols());
    let total: usize = groups
        .queries
        .iter()
        .zip(&groups.keys)
        .map(|(a, b)| a * b * heads)
        .sum();
    let mut probs = Vec::with_capacity(total);
    let (mut qs, mut ks) = (0, 0);
    let mut scores = Vec::new();
    for (&nq, &nk) in groups.queries.iter().zip(&groups.keys) {
        for h in 0..heads {
            let qc = h * dh..(h + 1) * dh;
            let vc = h * dvh..(h + 1) * dvh;
            for i in 0..nq {
                let qrow = &q.row(qs + i)[qc.clone()];
                scores.clear();
                for j in 0..nk {
                    if spec.causal && j > i {
                        scores.push(T::neg_infinity());
                    } else {
                        scores.push(dot(qrow, &k.row(ks + j)[qc.clone()]) * scale);
                    }
                }
                crate::tensor::softmax_in_place(&mut scores);
                let orow = &mut out.row_mut(qs + i)[vc.clone()];
                for (j, &p) in scores.iter().enumerate() {
                    let vrow = &v.row(ks + j)[vc.clone()];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o += p * x;
                    }
                }
                probs.extend_from_slice(&scores);
            }
        }
        qs += nq;
        ks += nk;
    }
    Ok((out, probs))
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    heads: usize,
    groups: &AttnGroups,
    probs: &[T],
    g: &Matrix<T>,
    dq: &mut Matrix<T>,
    dk: &mut Matrix<T>,
    dv: &mut Matrix<T>,
) {
    let dh = q.cols() / heads;
    let dvh = v.cols() / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let (mut qs, mut ks, mut off) = (0, 0, 0);
    let mut dp = Vec::new();
    for (&nq, &nk) in groups.queries.iter().zip(&groups.keys) {
        for h in 0..heads {
            let qc = h * dh..(h + 1) * dh;
            let vc = h * dvh..(h + 1) * dvh;
            for i in 0..nq {
                let p = &probs[off..off + nk];
                off += nk;
                let grow = &g.row(qs + i)[vc.clone()];
                dp.clear();
                for j in 0..nk {
                    dp.push(dot(grow, &v.row(ks + j)[vc.clone()]));
                    let dvrow = &mut dv.row_mut(ks + j)[vc.clone()];
                    for (d, &x) in dvrow.iter_mut().zip(grow) {
                        *d += p[j] * x;
                    }
                }
                let inner: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                let qrow = q.row(qs + i)[qc.clone()].to_vec();
                for j in 0..nk {
                    let ds = p[j] * (dp[j] - inner) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let krow = &k.row(ks + j)[qc.clone()];
                    let dqrow = &mut dq.row_mut(qs + i)[qc.clone()];
                    for (d, &x) in dqrow.iter_mut().zip(krow) {
                        *d += ds * x;
                    }
                    let dkrow = &mut dk.row_mut(ks + j)[qc.clone()];
                    for (d, &x) in dkrow.iter_mut().zip(&qrow) {
                        *d += ds * x;
                    }
                }
            }
        }
        qs += nq;
        ks += nk;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(build)/d(inputs) for every input entry.
    fn check(inputs: Vec<Matrix<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        let eps = 1e-6;
        for (n, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[n]).cloned().unwrap_or_else(|| Matrix::zeros(input.rows(), input.cols()));
            for idx in 0..input.len() {
                let eval = |delta: f64| {
                    let mut t = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(m, x)| {
                            let mut x = x.clone();
                            if m == n {
                                x.as_mut_slice()[idx] += delta;
                            }
                            t.param(x)
                        })
                        .collect();
                    let o = build(&mut t, &vs);
                    t.scalar_value(o)
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic.as_slice()[idx];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(err < 1e-5, "input {n} entry {idx}: analytic {a} vs fd {fd}");
            }
        }
    }

    /// Random linear functional of a node, so every output entry matters.
    fn probe(tape: &mut Tape<f64>, x: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = tape.value(x).shape();
        let w = tape.constant(rand_matrix(&mut rng, r, c));
        let prod = tape.mul(x, w).unwrap();
        tape.sum_all(prod)
    }

    #[test]
    fn matmul_and_linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(
            vec![rand_matrix(&mut rng, 3, 4), rand_matrix(&mut rng, 4, 2), rand_matrix(&mut rng, 1, 2)],
            |t, v| {
                let y = t.linear(v[0], v[1], v[2]).unwrap();
                let y = t.gelu(y);
                probe(t, y, 7)
            },
        );
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(
            vec![rand_matrix(&mut rng, 3, 5), rand_matrix(&mut rng, 1, 5), rand_matrix(&mut rng, 1, 5)],
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
                probe(t, y, 8)
            },
        );
    }

    #[test]
    fn grouped_attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let groups = AttnGroups {
            queries: vec![2, 1],
            keys: vec![3, 2],
        };
        check(
            vec![rand_matrix(&mut rng, 3, 4), rand_matrix(&mut rng, 5, 4), rand_matrix(&mut rng, 5, 6)],
            move |t, v| {
                let y = t
                    .attention(v[0], v[1], v[2], AttnSpec { heads: 2, causal: false }, groups.clone())
                    .unwrap();
                probe(t, y, 9)
            },
        );
    }

    #[test]
    fn causal_attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(
            vec![rand_matrix(&mut rng, 3, 4), rand_matrix(&mut rng, 3, 4), rand_matrix(&mut rng, 3, 4)],
            |t, v| {
                let y = t
                    .attention(v[0], v[1], v[2], AttnSpec { heads: 2, causal: true }, AttnGroups::packed(&[3]))
                    .unwrap();
                probe(t, y, 10)
            },
        );
    }

    #[test]
    fn cosine_head_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check(
            vec![rand_matrix(&mut rng, 2, 3), rand_matrix(&mut rng, 6, 3), rand_matrix(&mut rng, 1, 1)],
            |t, v| {
                let a = t.normalize_rows(v[0]).unwrap();
                let b = t.normalize_rows(v[1]).unwrap();
                let logits = t.grouped_row_dot(a, b, 3).unwrap();
                let logits = t.scale(logits, v[2]).unwrap();
                let lp = t.log_softmax_rows(logits);
                let p = t.exp(lp);
                let mean = t.mean_rows(p).unwrap();
                let lm = t.log_floor(mean, 1e-12);
                let ent = t.mul(mean, lm).unwrap();
                let e = t.sum_all(ent);
                let nll = t.pick(lp, vec![(0, 1, -0.5), (1, 2, -0.5)]).unwrap();
                t.add(e, nll).unwrap()
            },
        );
    }

    #[test]
    fn row_mix_and_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        check(
            vec![rand_matrix(&mut rng, 4, 3), rand_matrix(&mut rng, 2, 3)],
            |t, v| {
                let c = t.concat_rows(&[v[0], v[1]]).unwrap();
                let m = t.block_mean_rows(c, 3).unwrap();
                let tiled = t.tile_rows(m, 2).unwrap();
                let g = t.group_mean_rows(tiled, 2).unwrap();
                probe(t, g, 11)
            },
        );
    }

    #[test]
    fn constants_receive_no_gradient_but_pass_it_on() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap());
        let w = tape.constant(Matrix::from_vec(2, 1, vec![3.0, 4.0]).unwrap());
        let y = tape.matmul(p, w).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get(p).unwrap().as_slice(), &[3.0, 4.0]);
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Matrix::zeros(1, 3));
        assert!(matches!(tape.normalize_rows(x), Err(DampError::Invalid(_))));
    }
}
