//! Reverse-mode differentiation over [`Tensor2`] values.
//!
//! A [`Tape`] records every primitive in the order it is applied. Calling
//! [`Tape::backward`] walks the record from the loss node back to the first
//! entry, so gradients are always propagated in exact reverse recording order.

use std::sync::Arc;

use super::tensor::{matmul_at_into, matmul_bt_into, Tensor2};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

/// Normalisation used by [`Tape::masked_row_softmax`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SoftmaxNorm {
    /// Denominator sums only over unmasked entries; rows sum to one.
    #[default]
    Masked,
    /// Numerator is masked but the denominator sums over every entry, so rows
    /// sum to at most one.
    Unmasked,
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Aggregate(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    MaskedSoftmax {
        input: Var,
        mask: Arc<Tensor2>,
        norm: SoftmaxNorm,
        /// Unmasked softmax of the logits; only kept for [`SoftmaxNorm::Unmasked`].
        full: Option<Tensor2>,
    },
    ColumnMaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        input: Var,
        start: usize,
    },
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        normalized: Tensor2,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Tensor2,
        count: usize,
    },
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Aggregate(..) => "aggregate",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Transpose(..) => "transpose",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::MaskedSoftmax { .. } => "masked_row_softmax",
            Op::ColumnMaxPool { .. } => "column_max_pool",
            Op::Gather { .. } => "embedding_lookup",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(..) => "sum",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
}

/// Ordered record of primitive operations and their forward values.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`]. Only leaf
/// gradients are retained.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor2> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor2 {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor2::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor2 {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor2::zeros(r, c)
            }
        }
    }
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

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    /// Names of the recorded primitives, in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaves(&mut self, values: &[Tensor2]) -> Vec<Var> {
        values.iter().map(|t| self.leaf(t.clone())).collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Matrix product whose every output entry sums its terms in ascending
    /// value order, so the result does not depend on the order of the shared
    /// (inner) index. Used for neighbourhood aggregation.
    pub fn aggregate(&mut self, weights: Var, values: Var) -> Result<Var> {
        let (w, v) = (self.value(weights), self.value(values));
        if w.cols() != v.rows() {
            return Err(Error::shape(
                "aggregate",
                format!(
                    "weights {}x{} are incompatible with values {}x{}",
                    w.rows(),
                    w.cols(),
                    v.rows(),
                    v.cols()
                ),
            ));
        }
        let mut out = Tensor2::zeros(w.rows(), v.cols());
        let mut terms = Vec::with_capacity(w.cols());
        for r in 0..w.rows() {
            let wr = w.row(r);
            for c in 0..v.cols() {
                terms.clear();
                terms.extend(wr.iter().enumerate().map(|(k, a)| a * v.get(k, c)));
                out.set(r, c, canonical_sum(&mut terms));
            }
        }
        Ok(self.push(out, Op::Aggregate(weights, values)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a `1 × c` row to every row of an `r × c` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(row));
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(Error::shape(
                "add_row",
                format!(
                    "row {}x{} cannot broadcast onto {}x{}",
                    b.rows(),
                    b.cols(),
                    x.rows(),
                    x.cols()
                ),
            ));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.check_same_shape("mul", y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor2::from_vec(x.rows(), x.cols(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).scale(factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor2::from_vec(x.rows(), x.cols(), data).expect("same shape");
        self.push(out, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let x = self.value(a);
        let data = x
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let out = Tensor2::from_vec(x.rows(), x.cols(), data).expect("same shape");
        self.push(out, Op::LeakyRelu(a, slope))
    }

    /// Row-wise softmax restricted to entries where `mask` is nonzero.
    ///
    /// Each row is stabilised by subtracting its maximum over the entries that
    /// take part in the denominator. Masked-out entries are exactly zero.
    pub fn masked_row_softmax(
        &mut self,
        logits: Var,
        mask: Arc<Tensor2>,
        norm: SoftmaxNorm,
    ) -> Result<Var> {
        let (out, full) = masked_row_softmax_forward(self.value(logits), &mask, norm)?;
        Ok(self.push(
            out,
            Op::MaskedSoftmax {
                input: logits,
                mask,
                norm,
                full,
            },
        ))
    }

    /// Per-row maximum over columns, giving an `r × 1` column.
    pub fn column_max_pool(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows() == 0 || x.cols() == 0 {
            return Err(Error::shape(
                "column_max_pool",
                format!("cannot pool an empty {}x{} tensor", x.rows(), x.cols()),
            ));
        }
        let mut argmax = Vec::with_capacity(x.rows());
        let mut out = Tensor2::zeros(x.rows(), 1);
        for r in 0..x.rows() {
            let row = x.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                // strict comparison keeps the lowest index on ties
                if v > row[best] {
                    best = c;
                }
            }
            argmax.push(best);
            out.set(r, 0, row[best]);
        }
        Ok(self.push(out, Op::ColumnMaxPool { input: a, argmax }))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let mut out = Tensor2::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            if id >= t.rows() {
                return Err(Error::Vocabulary {
                    id,
                    vocab_size: t.rows(),
                });
            }
            out.row_mut(i).copy_from_slice(t.row(id));
        }
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no inputs"));
        };
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column count {} does not match {}", t.cols(), cols),
                ));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor2::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if start + len > x.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} out of range for {} rows", start + len, x.rows()),
            ));
        }
        let out = x.slice_rows(start, len);
        Ok(self.push(out, Op::SliceRows { input: a, start }))
    }

    /// Row-wise layer normalisation with a learned `1 × d` gain and bias.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let x = self.value(a);
        let d = x.cols();
        for (name, p) in [("gain", gain), ("bias", bias)] {
            let t = self.value(p);
            if t.shape() != (1, d) {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{name} {}x{} expected 1x{d}", t.rows(), t.cols()),
                ));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut normalized = Tensor2::zeros(x.rows(), d);
        let mut out = Tensor2::zeros(x.rows(), d);
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for c in 0..d {
                let xh = (row[c] - mean) * inv;
                normalized.set(r, c, xh);
                out.set(r, c, xh * g[c] + b[c]);
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                input: a,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    /// Mean negative log-likelihood over rows with a target; `None` rows are
    /// ignored. Produces a `1 × 1` value (zero when every row is ignored).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let x = self.value(logits);
        if x.rows() != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} logit rows for {} targets", x.rows(), targets.len()),
            ));
        }
        let mut probs = Tensor2::zeros(x.rows(), x.cols());
        let mut total = 0.0;
        let mut count = 0;
        for (r, target) in targets.iter().enumerate() {
            let row = x.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - max).exp() / z;
            }
            if let Some(t) = *target {
                if t >= x.cols() {
                    return Err(Error::Vocabulary {
                        id: t,
                        vocab_size: x.cols(),
                    });
                }
                total += max + z.ln() - row[t];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            Tensor2::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor2::filled(1, 1, s), Op::Sum(a))
    }

    /// Reverse sweep from a `1 × 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            let (r, c) = self.value(loss).shape();
            return Err(Error::shape(
                "backward",
                format!("loss must be 1x1, got {r}x{c}"),
            ));
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor2::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        grads.resize(self.nodes.len(), None);
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Tensor2, grads: &mut [Option<Tensor2>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) | Op::Aggregate(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = slot(grads, *a, av.shape());
                matmul_bt_into(g, bv, ga);
                let gb = slot(grads, *b, bv.shape());
                matmul_at_into(av, g, gb);
            }
            Op::Add(a, b) => {
                slot(grads, *a, g.shape()).add_assign(g);
                slot(grads, *b, g.shape()).add_assign(g);
            }
            Op::AddRow(a, row) => {
                slot(grads, *a, g.shape()).add_assign(g);
                let gr = slot(grads, *row, (1, g.cols()));
                for r in 0..g.rows() {
                    for (o, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = slot(grads, *a, av.shape());
                for ((o, gv), y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                    *o += gv * y;
                }
                let gb = slot(grads, *b, bv.shape());
                for ((o, gv), x) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *o += gv * x;
                }
            }
            Op::Scale(a, f) => {
                let ga = slot(grads, *a, g.shape());
                for (o, gv) in ga.data_mut().iter_mut().zip(g.data()) {
                    *o += gv * f;
                }
            }
            Op::Transpose(a) => {
                slot(grads, *a, (g.cols(), g.rows())).add_assign(&g.transpose());
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let ga = slot(grads, *a, x.shape());
                for ((o, gv), xv) in ga.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                    if *xv > 0.0 {
                        *o += gv;
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let ga = slot(grads, *a, x.shape());
                for ((o, gv), xv) in ga.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                    *o += if *xv > 0.0 { *gv } else { slope * gv };
                }
            }
            Op::MaskedSoftmax {
                input,
                mask,
                norm,
                full,
            } => {
                let out = &node.value;
                let ga = slot(grads, *input, out.shape());
                for r in 0..out.rows() {
                    let (y, gr, m) = (out.row(r), g.row(r), mask.row(r));
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let dst = ga.row_mut(r);
                    match norm {
                        SoftmaxNorm::Masked => {
                            for c in 0..y.len() {
                                if m[c] != 0.0 {
                                    dst[c] += y[c] * (gr[c] - dot);
                                }
                            }
                        }
                        SoftmaxNorm::Unmasked => {
                            let s = full.as_ref().expect("full softmax cached").row(r);
                            for c in 0..y.len() {
                                let own = if m[c] != 0.0 { gr[c] } else { 0.0 };
                                dst[c] += s[c] * (own - dot);
                            }
                        }
                    }
                }
            }
            Op::ColumnMaxPool { input, argmax } => {
                let shape = self.value(*input).shape();
                let ga = slot(grads, *input, shape);
                for (r, &c) in argmax.iter().enumerate() {
                    let v = ga.get(r, c) + g.get(r, 0);
                    ga.set(r, c, v);
                }
            }
            Op::Gather { table, ids } => {
                let shape = self.value(*table).shape();
                let gt = slot(grads, *table, shape);
                for (i, &id) in ids.iter().enumerate() {
                    for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape();
                    let gp = slot(grads, p, shape);
                    gp.add_assign(&g.slice_rows(offset, shape.0));
                    offset += shape.0;
                }
            }
            Op::SliceRows { input, start } => {
                let shape = self.value(*input).shape();
                let gi = slot(grads, *input, shape);
                for r in 0..g.rows() {
                    for (o, v) in gi.row_mut(start + r).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let d = normalized.cols();
                let gamma = self.value(*gain).data().to_vec();
                {
                    let gg = slot(grads, *gain, (1, d));
                    for r in 0..g.rows() {
                        for c in 0..d {
                            gg.data_mut()[c] += g.get(r, c) * normalized.get(r, c);
                        }
                    }
                }
                {
                    let gb = slot(grads, *bias, (1, d));
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                let gx = slot(grads, *input, normalized.shape());
                let mut dxh = vec![0.0; d];
                for r in 0..g.rows() {
                    let xh = normalized.row(r);
                    for c in 0..d {
                        dxh[c] = g.get(r, c) * gamma[c];
                    }
                    let sum: f64 = dxh.iter().sum();
                    let sum_x: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                    let k = inv_std[r] / d as f64;
                    let dst = gx.row_mut(r);
                    for c in 0..d {
                        dst[c] += k * (d as f64 * dxh[c] - sum - xh[c] * sum_x);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let scale = g.scalar() / *count as f64;
                let gl = slot(grads, *logits, probs.shape());
                for (r, target) in targets.iter().enumerate() {
                    let Some(t) = *target else { continue };
                    let dst = gl.row_mut(r);
                    for (o, p) in dst.iter_mut().zip(probs.row(r)) {
                        *o += scale * p;
                    }
                    dst[t] -= scale;
                }
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape();
                let s = g.scalar();
                for o in slot(grads, *a, shape).data_mut() {
                    *o += s;
                }
            }
        }
    }
}

/// Sum in ascending value order; independent of the order of `terms`.
fn canonical_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

fn slot(grads: &mut [Option<Tensor2>], v: Var, shape: (usize, usize)) -> &mut Tensor2 {
    grads[v.0].get_or_insert_with(|| Tensor2::zeros(shape.0, shape.1))
}

fn masked_row_softmax_forward(
    logits: &Tensor2,
    mask: &Tensor2,
    norm: SoftmaxNorm,
) -> Result<(Tensor2, Option<Tensor2>)> {
    logits.check_same_shape("masked_row_softmax", mask)?;
    let mut out = Tensor2::zeros(logits.rows(), logits.cols());
    let mut full = match norm {
        SoftmaxNorm::Masked => None,
        SoftmaxNorm::Unmasked => Some(Tensor2::zeros(logits.rows(), logits.cols())),
    };
    for r in 0..logits.rows() {
        let (l, m) = (logits.row(r), mask.row(r));
        if m.iter().all(|&v| v == 0.0) {
            return Err(Error::DegenerateRow { row: r });
        }
        match norm {
            SoftmaxNorm::Masked => {
                let max = l
                    .iter()
                    .zip(m)
                    .filter(|(_, &mk)| mk != 0.0)
                    .map(|(&v, _)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                let dst = out.row_mut(r);
                for c in 0..l.len() {
                    if m[c] != 0.0 {
                        dst[c] = (l[c] - max).exp();
                    }
                }
                let z = canonical_sum(&mut dst.to_vec());
                for v in dst.iter_mut() {
                    *v /= z;
                }
            }
            SoftmaxNorm::Unmasked => {
                let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let s = full.as_mut().expect("allocated").row_mut(r);
                for c in 0..l.len() {
                    s[c] = (l[c] - max).exp();
                }
                let z = canonical_sum(&mut s.to_vec());
                for v in s.iter_mut() {
                    *v /= z;
                }
                let dst = out.row_mut(r);
                for c in 0..l.len() {
                    if m[c] != 0.0 {
                        dst[c] = s[c];
                    }
                }
            }
        }
    }
    Ok((out, full))
}

/// Tape-free masked softmax, for callers that only need the weights.
pub fn masked_row_softmax(logits: &Tensor2, mask: &Tensor2, norm: SoftmaxNorm) -> Result<Tensor2> {
    masked_row_softmax_forward(logits, mask, norm).map(|(out, _)| out)
}

/// Tape-free per-row maximum; see [`Tape::column_max_pool`].
pub fn column_max_pool(h: &Tensor2) -> Result<Tensor2> {
    let mut tape = Tape::new();
    let v = tape.leaf(h.clone());
    let out = tape.column_max_pool(v)?;
    Ok(tape.value(out).clone())
}
