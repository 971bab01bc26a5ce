//! Reverse-mode automatic differentiation over a recording tape.
//!
//! A `Tape` owns every value produced during a forward pass. Operations are
//! recorded in execution order (which is already a topological order), and
//! `backward` replays them in reverse exactly once per call, accumulating
//! vector-Jacobian products into per-node gradient buffers.
//!
//! A tape is single-owner: the federated simulation gives each simulated
//! client its own tape. Values are quantized to storage precision as they are
//! written; gradient accumulation always runs at 64-bit width.

use crate::error::{Error, Result};
use crate::tensor::{Array, Precision};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327; // 1/sqrt(2*pi)

/// Handle to a value living on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tensor {
    id: usize,
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    /// True when a gradient can flow into this node (leaf flag or inherited).
    needs_grad: bool,
}

enum Op {
    Matmul { a: usize, b: usize, out: usize },
    /// out = a · bᵀ
    MatmulNt { a: usize, b: usize, out: usize },
    Add { a: usize, b: usize, out: usize },
    Sub { a: usize, b: usize, out: usize },
    Scale { x: usize, c: f64, out: usize },
    /// [m,n] + [n], broadcast over rows; the only broadcast the tape offers.
    AddRowBias { x: usize, bias: usize, out: usize },
    Gelu { x: usize, out: usize },
    SoftmaxRows { x: usize, out: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, out: usize, normalized: Vec<f64>, inv_sigma: Vec<f64> },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64>, out: usize },
    Embed { table: usize, ids: Vec<u32>, out: usize },
    SliceCols { x: usize, start: usize, out: usize },
    ConcatCols { xs: Vec<usize>, out: usize },
    SliceRows { x: usize, start: usize, out: usize },
    ConcatRows { xs: Vec<usize>, out: usize },
    Reshape { x: usize, out: usize },
    Sum { x: usize, out: usize },
    SumSquares { x: usize, out: usize },
}

/// Recording tape for reverse-mode differentiation.
pub struct Tape {
    precision: Precision,
    nodes: Vec<Node>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for (d, bv) in dst.iter_mut().zip(row) {
                *d += av * bv;
            }
        }
    }
    out
}

/// GELU in the exact erf form, x·Φ(x).
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

/// Derivative of exact GELU: Φ(x) + x·φ(x).
#[inline]
pub fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            precision,
            nodes: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push_node(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, needs_grad: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            needs_grad,
        });
        self.grads.push(None);
        Tensor {
            id: self.nodes.len() - 1,
        }
    }

    fn push_result(&mut self, mut data: Vec<f64>, shape: Vec<usize>, inputs: &[usize]) -> Tensor {
        self.precision.store_slice(&mut data);
        let needs = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.push_node(data, shape, false, needs)
    }

    /// Register a leaf value.
    pub fn leaf(&mut self, a: &Array, requires_grad: bool) -> Tensor {
        let mut data = a.data().to_vec();
        self.precision.store_slice(&mut data);
        self.push_node(data, a.shape().to_vec(), requires_grad, requires_grad)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, a: &Array) -> Tensor {
        self.leaf(a, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, a: &Array) -> Tensor {
        self.leaf(a, true)
    }

    pub fn value(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.id].data
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.id].shape
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.id].requires_grad
    }

    pub fn value_array(&self, t: Tensor) -> Array {
        Array::from_vec(&self.nodes[t.id].shape, self.nodes[t.id].data.clone())
            .expect("tape node shape is consistent")
    }

    /// Accumulated gradient; zeros when no gradient has flowed.
    pub fn grad(&self, t: Tensor) -> Vec<f64> {
        match &self.grads[t.id] {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[t.id].data.len()],
        }
    }

    pub fn grad_array(&self, t: Tensor) -> Array {
        Array::from_vec(&self.nodes[t.id].shape, self.grad(t)).expect("tape node shape is consistent")
    }

    /// Clear accumulated gradients, keeping recorded values and ops.
    pub fn reset_grads(&mut self) {
        for g in self.grads.iter_mut() {
            *g = None;
        }
    }

    fn shape2(&self, t: Tensor, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[t.id].shape;
        if s.len() != 2 {
            return Err(Error::contract(op, format!("expected rank-2 tensor, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    // ── primitive operations ────────────────────────────────────────────

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, k) = self.shape2(a, "matmul")?;
        let (k2, n) = self.shape2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.nodes[a.id].shape.clone(),
                right: self.nodes[b.id].shape.clone(),
            });
        }
        let data = matmul_raw(&self.nodes[a.id].data, &self.nodes[b.id].data, m, k, n);
        let out = self.push_result(data, vec![m, n], &[a.id, b.id]);
        self.ops.push(Op::Matmul { a: a.id, b: b.id, out: out.id });
        Ok(out)
    }

    /// a · bᵀ for a: [m,k], b: [n,k].
    pub fn matmul_nt(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, k) = self.shape2(a, "matmul_nt")?;
        let (n, k2) = self.shape2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: self.nodes[a.id].shape.clone(),
                right: self.nodes[b.id].shape.clone(),
            });
        }
        let av = &self.nodes[a.id].data;
        let bv = &self.nodes[b.id].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bv[j * k..(j + 1) * k];
                data[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        let out = self.push_result(data, vec![m, n], &[a.id, b.id]);
        self.ops.push(Op::MatmulNt { a: a.id, b: b.id, out: out.id });
        Ok(out)
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if self.nodes[a.id].shape != self.nodes[b.id].shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: self.nodes[a.id].shape.clone(),
                right: self.nodes[b.id].shape.clone(),
            });
        }
        let data = self.nodes[a.id]
            .data
            .iter()
            .zip(&self.nodes[b.id].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.id].shape.clone();
        let out = self.push_result(data, shape, &[a.id, b.id]);
        self.ops.push(Op::Add { a: a.id, b: b.id, out: out.id });
        Ok(out)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if self.nodes[a.id].shape != self.nodes[b.id].shape {
            return Err(Error::ShapeMismatch {
                op: "sub",
                left: self.nodes[a.id].shape.clone(),
                right: self.nodes[b.id].shape.clone(),
            });
        }
        let data = self.nodes[a.id]
            .data
            .iter()
            .zip(&self.nodes[b.id].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.id].shape.clone();
        let out = self.push_result(data, shape, &[a.id, b.id]);
        self.ops.push(Op::Sub { a: a.id, b: b.id, out: out.id });
        Ok(out)
    }

    pub fn scale(&mut self, x: Tensor, c: f64) -> Result<Tensor> {
        let data = self.nodes[x.id].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.id].shape.clone();
        let out = self.push_result(data, shape, &[x.id]);
        self.ops.push(Op::Scale { x: x.id, c, out: out.id });
        Ok(out)
    }

    /// x: [m,n] plus bias: [n], broadcast over rows.
    pub fn add_row_bias(&mut self, x: Tensor, bias: Tensor) -> Result<Tensor> {
        let (m, n) = self.shape2(x, "add_row_bias")?;
        if self.nodes[bias.id].shape != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                left: self.nodes[x.id].shape.clone(),
                right: self.nodes[bias.id].shape.clone(),
            });
        }
        let bv = self.nodes[bias.id].data.clone();
        let mut data = self.nodes[x.id].data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bv[j];
            }
        }
        let out = self.push_result(data, vec![m, n], &[x.id, bias.id]);
        self.ops.push(Op::AddRowBias { x: x.id, bias: bias.id, out: out.id });
        Ok(out)
    }

    /// Elementwise GELU, exact erf form.
    pub fn gelu(&mut self, x: Tensor) -> Result<Tensor> {
        let data = self.nodes[x.id].data.iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.nodes[x.id].shape.clone();
        let out = self.push_result(data, shape, &[x.id]);
        self.ops.push(Op::Gelu { x: x.id, out: out.id });
        Ok(out)
    }

    /// Row-wise softmax with max-subtraction stabilization.
    pub fn softmax_rows(&mut self, x: Tensor) -> Result<Tensor> {
        let (m, n) = self.shape2(x, "softmax_rows")?;
        let xv = &self.nodes[x.id].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                data[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                data[i * n + j] /= sum;
            }
        }
        let out = self.push_result(data, vec![m, n], &[x.id]);
        self.ops.push(Op::SoftmaxRows { x: x.id, out: out.id });
        Ok(out)
    }

    /// Row-wise layer normalization with affine gain/bias over the last axis.
    pub fn layer_norm(&mut self, x: Tensor, gain: Tensor, bias: Tensor) -> Result<Tensor> {
        const EPS: f64 = 1e-5;
        let (m, n) = self.shape2(x, "layer_norm")?;
        if self.nodes[gain.id].shape != [n] || self.nodes[bias.id].shape != [n] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: self.nodes[x.id].shape.clone(),
                right: self.nodes[gain.id].shape.clone(),
            });
        }
        let xv = &self.nodes[x.id].data;
        let gv = &self.nodes[gain.id].data;
        let bv = &self.nodes[bias.id].data;
        let mut data = vec![0.0; m * n];
        let mut normalized = vec![0.0; m * n];
        let mut inv_sigma = vec![0.0; m];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            inv_sigma[i] = inv;
            for j in 0..n {
                let y = (row[j] - mean) * inv;
                normalized[i * n + j] = y;
                data[i * n + j] = gv[j] * y + bv[j];
            }
        }
        let out = self.push_result(data, vec![m, n], &[x.id, gain.id, bias.id]);
        self.ops.push(Op::LayerNorm {
            x: x.id,
            gain: gain.id,
            bias: bias.id,
            out: out.id,
            normalized,
            inv_sigma,
        });
        Ok(out)
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Tensor, labels: &[usize]) -> Result<Tensor> {
        let (m, c) = self.shape2(logits, "cross_entropy")?;
        if labels.len() != m {
            return Err(Error::contract(
                "cross_entropy",
                format!("{} labels for {} rows", labels.len(), m),
            ));
        }
        for &y in labels {
            if y >= c {
                return Err(Error::IndexOutOfRange {
                    op: "cross_entropy",
                    index: y,
                    bound: c,
                });
            }
        }
        let xv = &self.nodes[logits.id].data;
        let mut probs = vec![0.0; m * c];
        let mut total = 0.0;
        for i in 0..m {
            let row = &xv[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                probs[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                probs[i * c + j] /= sum;
            }
            total += max + sum.ln() - row[labels[i]];
        }
        let loss = total / m as f64;
        let out = self.push_result(vec![loss], vec![], &[logits.id]);
        self.ops.push(Op::CrossEntropy {
            logits: logits.id,
            labels: labels.to_vec(),
            probs,
            out: out.id,
        });
        Ok(out)
    }

    /// Gather rows of `table` by token id.
    pub fn embed(&mut self, table: Tensor, ids: &[u32]) -> Result<Tensor> {
        let (v, d) = self.shape2(table, "embed")?;
        for &id in ids {
            if id as usize >= v {
                return Err(Error::IndexOutOfRange {
                    op: "embed",
                    index: id as usize,
                    bound: v,
                });
            }
        }
        let tv = &self.nodes[table.id].data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&tv[id as usize * d..(id as usize + 1) * d]);
        }
        let out = self.push_result(data, vec![ids.len(), d], &[table.id]);
        self.ops.push(Op::Embed {
            table: table.id,
            ids: ids.to_vec(),
            out: out.id,
        });
        Ok(out)
    }

    pub fn slice_cols(&mut self, x: Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.shape2(x, "slice_cols")?;
        if start + len > n {
            return Err(Error::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: n,
            });
        }
        let xv = &self.nodes[x.id].data;
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        let out = self.push_result(data, vec![m, len], &[x.id]);
        self.ops.push(Op::SliceCols { x: x.id, start, out: out.id });
        Ok(out)
    }

    pub fn concat_cols(&mut self, xs: &[Tensor]) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(Error::contract("concat_cols", "empty input list"));
        }
        let (m, _) = self.shape2(xs[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(xs.len());
        for &t in xs {
            let (mi, ni) = self.shape2(t, "concat_cols")?;
            if mi != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.nodes[xs[0].id].shape.clone(),
                    right: self.nodes[t.id].shape.clone(),
                });
            }
            widths.push(ni);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&t, &w) in xs.iter().zip(&widths) {
                let xv = &self.nodes[t.id].data;
                data.extend_from_slice(&xv[i * w..(i + 1) * w]);
            }
        }
        let ids: Vec<usize> = xs.iter().map(|t| t.id).collect();
        let out = self.push_result(data, vec![m, total], &ids);
        self.ops.push(Op::ConcatCols { xs: ids, out: out.id });
        Ok(out)
    }

    pub fn slice_rows(&mut self, x: Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.shape2(x, "slice_rows")?;
        if start + len > m {
            return Err(Error::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                bound: m,
            });
        }
        let xv = &self.nodes[x.id].data;
        let data = xv[start * n..(start + len) * n].to_vec();
        let out = self.push_result(data, vec![len, n], &[x.id]);
        self.ops.push(Op::SliceRows { x: x.id, start, out: out.id });
        Ok(out)
    }

    pub fn concat_rows(&mut self, xs: &[Tensor]) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(Error::contract("concat_rows", "empty input list"));
        }
        let (_, n) = self.shape2(xs[0], "concat_rows")?;
        let mut total = 0;
        for &t in xs {
            let (mi, ni) = self.shape2(t, "concat_rows")?;
            if ni != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.nodes[xs[0].id].shape.clone(),
                    right: self.nodes[t.id].shape.clone(),
                });
            }
            total += mi;
        }
        let mut data = Vec::with_capacity(total * n);
        for &t in xs {
            data.extend_from_slice(&self.nodes[t.id].data);
        }
        let ids: Vec<usize> = xs.iter().map(|t| t.id).collect();
        let out = self.push_result(data, vec![total, n], &ids);
        self.ops.push(Op::ConcatRows { xs: ids, out: out.id });
        Ok(out)
    }

    /// Reinterpret the shape; element count must match.
    pub fn reshape(&mut self, x: Tensor, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.id].data.len() {
            return Err(Error::contract(
                "reshape",
                format!(
                    "cannot reshape {:?} ({} values) to {:?}",
                    self.nodes[x.id].shape,
                    self.nodes[x.id].data.len(),
                    shape
                ),
            ));
        }
        let data = self.nodes[x.id].data.clone();
        let out = self.push_result(data, shape.to_vec(), &[x.id]);
        self.ops.push(Op::Reshape { x: x.id, out: out.id });
        Ok(out)
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: Tensor) -> Result<Tensor> {
        let s = self.nodes[x.id].data.iter().sum();
        let out = self.push_result(vec![s], vec![], &[x.id]);
        self.ops.push(Op::Sum { x: x.id, out: out.id });
        Ok(out)
    }

    /// Sum of squared elements (squared Frobenius norm).
    pub fn sum_squares(&mut self, x: Tensor) -> Result<Tensor> {
        let s = self.nodes[x.id].data.iter().map(|v| v * v).sum();
        let out = self.push_result(vec![s], vec![], &[x.id]);
        self.ops.push(Op::SumSquares { x: x.id, out: out.id });
        Ok(out)
    }

    // ── backward pass ───────────────────────────────────────────────────

    /// Propagate gradients from a scalar loss back to every participating
    /// node. Accumulates into existing gradients; call `reset_grads` between
    /// independent steps.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.nodes[loss.id].data.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss.id].shape
                ),
            ));
        }
        // Per-call flow buffer so repeated backward calls accumulate linearly.
        let mut delta: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        delta[loss.id] = Some(vec![1.0]);

        for idx in (0..self.ops.len()).rev() {
            self.backward_op(idx, &mut delta);
        }

        for (g, d) in self.grads.iter_mut().zip(delta.into_iter()) {
            if let Some(d) = d {
                match g {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&d) {
                            *a += v;
                        }
                    }
                    None => *g = Some(d),
                }
            }
        }
        Ok(())
    }

    fn accumulate(delta: &mut [Option<Vec<f64>>], id: usize, len: usize, f: impl FnOnce(&mut [f64])) {
        let slot = delta[id].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn backward_op(&self, idx: usize, delta: &mut Vec<Option<Vec<f64>>>) {
        match &self.ops[idx] {
            Op::Matmul { a, b, out } => {
                let Some(g) = delta[*out].clone() else { return };
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                if self.nodes[*a].needs_grad {
                    // da += g · bᵀ
                    let bv = &self.nodes[*b].data;
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gv * bv[p * n + j];
                            }
                        }
                    }
                    Self::accumulate(delta, *a, m * k, |acc| {
                        for (x, y) in acc.iter_mut().zip(&da) {
                            *x += y;
                        }
                    });
                }
                if self.nodes[*b].needs_grad {
                    // db += aᵀ · g
                    let av = &self.nodes[*a].data;
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let avv = av[i * k + p];
                            if avv == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += avv * g[i * n + j];
                            }
                        }
                    }
                    Self::accumulate(delta, *b, k * n, |acc| {
                        for (x, y) in acc.iter_mut().zip(&db) {
                            *x += y;
                        }
                    });
                }
            }
            Op::MatmulNt { a, b, out } => {
                let Some(g) = delta[*out].clone() else { return };
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[0];
                if self.nodes[*a].needs_grad {
                    // da += g · b
                    let bv = &self.nodes[*b].data;
                    let da = matmul_raw(&g, bv, m, n, k);
                    Self::accumulate(delta, *a, m * k, |acc| {
                        for (x, y) in acc.iter_mut().zip(&da) {
                            *x += y;
                        }
                    });
                }
                if self.nodes[*b].needs_grad {
                    // db += gᵀ · a
                    let av = &self.nodes[*a].data;
                    let mut db = vec![0.0; n * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                db[j * k + p] += gv * av[i * k + p];
                            }
                        }
                    }
                    Self::accumulate(delta, *b, n * k, |acc| {
                        for (x, y) in acc.iter_mut().zip(&db) {
                            *x += y;
                        }
                    });
                }
            }
            Op::Add { a, b, out } => {
                let Some(g) = delta[*out].clone() else { return };
                for &id in &[*a, *b] {
                    if self.nodes[id].needs_grad {
                        Self::accumulate(delta, id, g.len(), |acc| {
                            for (x, y) in acc.iter_mut().zip(&g) {
                                *x += y;
                            }
                        });
                    }
                }
            }
            Op::Sub { a, b, out } => {
                let Some(g) = delta[*out].clone() else { return };
                if self.nodes[*a].needs_grad {
                    Self::accumulate(delta, *a, g.len(), |acc| {
                        for (x, y) in acc.iter_mut().zip(&g) {
                            *x += y;
                        }
                    });
                }
                if self.nodes[*b].needs_grad {
                    Self::accumulate(delta, *b, g.len(), |acc| {
                        for (x, y) in acc.iter_mut().zip(&g) {
                            *x -= y;
                        }
                    });
                }
            }
            Op::Scale { x, c, out } => {
                let Some(g) = delta[*out].clone() else { return };
                if self.nodes[*x].needs_grad {
                    let c = *c;
                    Self::accumulate(delta, *x, g.len(), |acc| {
                        for (a, y) in acc.iter_mut().zip(&g) {
                            *a += c * y;
                        }
                    });
                }
            }
            Op::AddRowBias { x, bias, out } => {
                let Some(g) = delta[*out].clone() else { return };
                let (m, n) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                if self.nodes[*x].needs_grad {
                    Self::accumulate(delta, *x, m * n, |acc| {
                        for (a, y) in acc.iter_mut().zip(&g) {
                            *a += y;
                        }
                    });
                }
                if self.nodes[*bias].needs_grad {
                    Self::accumulate(delta, *bias, n, |acc| {
                        for i in 0..m {
                            for j in 0..n {
                                acc[j] += g[i * n + j];
                            }
                        }
                    });
                }
            }
            Op::Gelu { x, out } => {
                let Some(g) = delta[*out].clone() else { return };
                if self.nodes[*x].needs_grad {
                    let xv = &self.nodes[*x].data;
                    Self::accumulate(delta, *x, xv.len(), |acc| {
                        for i in 0..xv.len() {
                            acc[i] += g[i] * gelu_derivative(xv[i]);
                        }
                    });
                }
            }
            Op::SoftmaxRows { x, out } => {
                let Some(g) = delta[*out].clone() else { return };
                if self.nodes[*x].needs_grad {
                    let (m, n) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                    let s = &self.nodes[*out].data;
                    Self::accumulate(delta, *x, m * n, |acc| {
                        for i in 0..m {
                            let srow = &s[i * n..(i + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                acc[i * n + j] += srow[j] * (grow[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { x, gain, bias, out, normalized, inv_sigma } => {
                let Some(g) = delta[*out].clone() else { return };
                let (m, n) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                let gv = &self.nodes[*gain].data;
                if self.nodes[*gain].needs_grad {
                    Self::accumulate(delta, *gain, n, |acc| {
                        for i in 0..m {
                            for j in 0..n {
                                acc[j] += g[i * n + j] * normalized[i * n + j];
                            }
                        }
                    });
                }
                if self.nodes[*bias].needs_grad {
                    Self::accumulate(delta, *bias, n, |acc| {
                        for i in 0..m {
                            for j in 0..n {
                                acc[j] += g[i * n + j];
                            }
                        }
                    });
                }
                if self.nodes[*x].needs_grad {
                    Self::accumulate(delta, *x, m * n, |acc| {
                        for i in 0..m {
                            let yrow = &normalized[i * n..(i + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            let mut mean_gh = 0.0;
                            let mut mean_ghy = 0.0;
                            for j in 0..n {
                                let gh = grow[j] * gv[j];
                                mean_gh += gh;
                                mean_ghy += gh * yrow[j];
                            }
                            mean_gh /= n as f64;
                            mean_ghy /= n as f64;
                            for j in 0..n {
                                let gh = grow[j] * gv[j];
                                acc[i * n + j] += (gh - mean_gh - yrow[j] * mean_ghy) * inv_sigma[i];
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, labels, probs, out } => {
                let Some(g) = delta[*out].clone() else { return };
                if self.nodes[*logits].needs_grad {
                    let (m, c) = (self.nodes[*logits].shape[0], self.nodes[*logits].shape[1]);
                    let scale = g[0] / m as f64;
                    Self::accumulate(delta, *logits, m * c, |acc| {
                        for i in 0..m {
                            for j in 0..c {
                                let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                                acc[i * c + j] += scale * (probs[i * c + j] - onehot);
                            }
                        }
                    });
                }
            }
            Op::Embed { table, ids, out } => {
                let Some(g) = delta[*out].clone() else { return };
                if self.nodes[*table].needs_grad {
                    let d = self.nodes[*table].shape[1];
                    let len = self.nodes[*table].data.len();
                    Self::accumulate(delta, *table, len, |acc| {
                        for (t, &id) in ids.iter().enumerate() {
                            let dst = &mut acc[id as usize * d..(id as usize + 1) * d];
                            let src = &g[t * d..(t + 1) * d];
                            for (a, b) in dst.iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                    });
                }
            }
            Op::SliceCols { x, start, out } => {
                let Some(g) = delta[*out].clone() else { return };
                if self.nodes[*x].needs_grad {
                    let (m, n) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                    let len = self.nodes[*out].shape[1];
                    Self::accumulate(delta, *x, m * n, |acc| {
                        for i in 0..m {
                            for j in 0..len {
                                acc[i * n + start + j] += g[i * len + j];
                            }
                        }
                    });
                }
            }
            Op::ConcatCols { xs, out } => {
                let Some(g) = delta[*out].clone() else { return };
                let m = self.nodes[*out].shape[0];
                let total = self.nodes[*out].shape[1];
                let mut offset = 0;
                for &id in xs {
                    let w = self.nodes[id].shape[1];
                    if self.nodes[id].needs_grad {
                        Self::accumulate(delta, id, m * w, |acc| {
                            for i in 0..m {
                                for j in 0..w {
                                    acc[i * w + j] += g[i * total + offset + j];
                                }
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start, out } => {
                let Some(g) = delta[*out].clone() else { return };
                if self.nodes[*x].needs_grad {
                    let n = self.nodes[*x].shape[1];
                    let len = self.nodes[*out].shape[0];
                    let total = self.nodes[*x].data.len();
                    Self::accumulate(delta, *x, total, |acc| {
                        for i in 0..len {
                            for j in 0..n {
                                acc[(start + i) * n + j] += g[i * n + j];
                            }
                        }
                    });
                }
            }
            Op::ConcatRows { xs, out } => {
                let Some(g) = delta[*out].clone() else { return };
                let n = self.nodes[*out].shape[1];
                let mut offset = 0;
                for &id in xs {
                    let rows = self.nodes[id].shape[0];
                    if self.nodes[id].needs_grad {
                        Self::accumulate(delta, id, rows * n, |acc| {
                            for (a, b) in acc.iter_mut().zip(&g[offset * n..(offset + rows) * n]) {
                                *a += b;
                            }
                        });
                    }
                    offset += rows;
                }
            }
            Op::Reshape { x, out } => {
                let Some(g) = delta[*out].clone() else { return };
                if self.nodes[*x].needs_grad {
                    Self::accumulate(delta, *x, g.len(), |acc| {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    });
                }
            }
            Op::Sum { x, out } => {
                let Some(g) = delta[*out].clone() else { return };
                if self.nodes[*x].needs_grad {
                    let len = self.nodes[*x].data.len();
                    Self::accumulate(delta, *x, len, |acc| {
                        for a in acc.iter_mut() {
                            *a += g[0];
                        }
                    });
                }
            }
            Op::SumSquares { x, out } => {
                let Some(g) = delta[*out].clone() else { return };
                if self.nodes[*x].needs_grad {
                    let xv = &self.nodes[*x].data;
                    Self::accumulate(delta, *x, xv.len(), |acc| {
                        for (a, v) in acc.iter_mut().zip(xv) {
                            *a += 2.0 * v * g[0];
                        }
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn arr(shape: &[usize], data: &[f64]) -> Array {
        Array::from_vec(shape, data.to_vec()).unwrap()
    }

    /// Central finite differences of a scalar function w.r.t. one input.
    fn finite_diff(
        f: &dyn Fn(&[Array]) -> f64,
        inputs: &[Array],
        which: usize,
        h: f64,
    ) -> Vec<f64> {
        let mut grad = vec![0.0; inputs[which].len()];
        for i in 0..grad.len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= h;
            grad[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        grad
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    fn rand_array(shape: &[usize], rng: &mut impl Rng) -> Array {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Array::from_vec(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new(Precision::F64Verify);
        let i2 = tape.constant(&arr(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(&arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_annihilating_product() {
        let mut tape = Tape::new(Precision::F64Verify);
        let a = tape.constant(&arr(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let b = tape.constant(&arr(&[2, 2], &[0.0, 0.0, 0.0, 1.0]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new(Precision::F64Verify);
        let a = tape.constant(&Array::zeros(&[2, 3]));
        let b = tape.constant(&Array::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "got: {msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = rng::stream(11, "matmul-fd", 0, 0);
        let a = rand_array(&[3, 4], &mut rng);
        let b = rand_array(&[4, 2], &mut rng);
        let f = |inputs: &[Array]| {
            let mut t = Tape::new(Precision::F64Verify);
            let ta = t.constant(&inputs[0]);
            let tb = t.constant(&inputs[1]);
            let c = t.matmul(ta, tb).unwrap();
            let l = t.sum_squares(c).unwrap();
            t.value(l)[0]
        };
        let mut t = Tape::new(Precision::F64Verify);
        let ta = t.param(&a);
        let tb = t.param(&b);
        let c = t.matmul(ta, tb).unwrap();
        let l = t.sum_squares(c).unwrap();
        t.backward(l).unwrap();
        let inputs = [a, b];
        for (which, tt) in [(0, ta), (1, tb)] {
            let fd = finite_diff(&f, &inputs, which, 1e-5);
            assert!(max_rel_err(&t.grad(tt), &fd) <= 1e-4);
        }
    }

    #[test]
    fn gelu_fixed_point_and_asymptote() {
        let mut tape = Tape::new(Precision::F64Verify);
        let x = tape.constant(&arr(&[1, 2], &[0.0, 10.0]));
        let y = tape.gelu(x).unwrap();
        assert_eq!(tape.value(y)[0], 0.0);
        assert!((tape.value(y)[1] - 10.0).abs() <= 1e-6);
    }

    #[test]
    fn gelu_gradient_matches_finite_differences() {
        let pts = arr(&[1, 4], &[-2.0, -0.5, 0.5, 2.0]);
        let f = |inputs: &[Array]| {
            let mut t = Tape::new(Precision::F64Verify);
            let tx = t.constant(&inputs[0]);
            let y = t.gelu(tx).unwrap();
            let l = t.sum(y).unwrap();
            t.value(l)[0]
        };
        let mut t = Tape::new(Precision::F64Verify);
        let tx = t.param(&pts);
        let y = t.gelu(tx).unwrap();
        let l = t.sum(y).unwrap();
        t.backward(l).unwrap();
        let fd = finite_diff(&f, &[pts], 0, 1e-5);
        assert!(max_rel_err(&t.grad(tx), &fd) <= 1e-4);
    }

    #[test]
    fn softmax_uniform_row() {
        let mut tape = Tape::new(Precision::F64Verify);
        let c = 0.37;
        let x = tape.constant(&arr(&[1, 3], &[c, c, c]));
        let s = tape.softmax_rows(x).unwrap();
        for v in tape.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_is_stable_under_large_logits() {
        let mut tape = Tape::new(Precision::F64Verify);
        let x = tape.constant(&arr(&[1, 2], &[1000.0, 0.0]));
        let s = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(s), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut rng = rng::stream(12, "softmax-fd", 0, 0);
        let x = rand_array(&[2, 4], &mut rng);
        // Weighted sum so the gradient is not identically zero.
        let w = rand_array(&[2, 4], &mut rng);
        let wc = w.clone();
        let f = move |inputs: &[Array]| {
            let mut t = Tape::new(Precision::F64Verify);
            let tx = t.constant(&inputs[0]);
            let tw = t.constant(&wc);
            let s = t.softmax_rows(tx).unwrap();
            let prod = t.matmul_nt(s, tw).unwrap();
            let l = t.sum_squares(prod).unwrap();
            t.value(l)[0]
        };
        let mut t = Tape::new(Precision::F64Verify);
        let tx = t.param(&x);
        let tw = t.constant(&w);
        let s = t.softmax_rows(tx).unwrap();
        let prod = t.matmul_nt(s, tw).unwrap();
        let l = t.sum_squares(prod).unwrap();
        t.backward(l).unwrap();
        let fd = finite_diff(&f, &[x], 0, 1e-5);
        assert!(max_rel_err(&t.grad(tx), &fd) <= 1e-4);
    }

    #[test]
    fn layer_norm_zero_variance_row_maps_to_zero() {
        let mut tape = Tape::new(Precision::F64Verify);
        let x = tape.constant(&arr(&[1, 4], &[3.0, 3.0, 3.0, 3.0]));
        let g = tape.constant(&Array::filled(&[4], 1.0));
        let b = tape.constant(&Array::zeros(&[4]));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_row_statistics() {
        let mut rng = rng::stream(13, "ln-stats", 0, 0);
        let x = rand_array(&[1, 16], &mut rng);
        let mut tape = Tape::new(Precision::F64Verify);
        let tx = tape.constant(&x);
        let g = tape.constant(&Array::filled(&[16], 1.0));
        let b = tape.constant(&Array::zeros(&[16]));
        let y = tape.layer_norm(tx, g, b).unwrap();
        let out = tape.value(y);
        let mean: f64 = out.iter().sum::<f64>() / 16.0;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() <= 1e-6);
        assert!((var - 1.0).abs() <= 1e-3);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = rng::stream(14, "ln-fd", 0, 0);
        let x = rand_array(&[2, 5], &mut rng);
        let g = rand_array(&[5], &mut rng);
        let b = rand_array(&[5], &mut rng);
        let w = rand_array(&[2, 5], &mut rng);
        let wc = w.clone();
        let f = move |inputs: &[Array]| {
            let mut t = Tape::new(Precision::F64Verify);
            let tx = t.constant(&inputs[0]);
            let tg = t.constant(&inputs[1]);
            let tb = t.constant(&inputs[2]);
            let tw = t.constant(&wc);
            let y = t.layer_norm(tx, tg, tb).unwrap();
            let p = t.matmul_nt(y, tw).unwrap();
            let l = t.sum_squares(p).unwrap();
            t.value(l)[0]
        };
        let mut t = Tape::new(Precision::F64Verify);
        let tx = t.param(&x);
        let tg = t.param(&g);
        let tb = t.param(&b);
        let tw = t.constant(&w);
        let y = t.layer_norm(tx, tg, tb).unwrap();
        let p = t.matmul_nt(y, tw).unwrap();
        let l = t.sum_squares(p).unwrap();
        t.backward(l).unwrap();
        let inputs = [x, g, b];
        for (which, th) in [(0, tx), (1, tg), (2, tb)] {
            let fd = finite_diff(&f, &inputs, which, 1e-5);
            assert!(max_rel_err(&t.grad(th), &fd) <= 1e-4, "input {which}");
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_c() {
        let mut tape = Tape::new(Precision::F64Verify);
        let logits = tape.constant(&arr(&[1, 4], &[0.3, 0.3, 0.3, 0.3]));
        let l = tape.cross_entropy(logits, &[2]).unwrap();
        assert!((tape.value(l)[0] - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_margin_asymptote() {
        let mut tape = Tape::new(Precision::F64Verify);
        let logits = tape.constant(&arr(&[1, 4], &[20.0, 0.0, 0.0, 0.0]));
        let l = tape.cross_entropy(logits, &[0]).unwrap();
        assert!(tape.value(l)[0] <= 1e-3);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut tape = Tape::new(Precision::F64Verify);
        let logits = tape.constant(&Array::zeros(&[1, 4]));
        assert!(matches!(
            tape.cross_entropy(logits, &[4]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = rng::stream(15, "ce-fd", 0, 0);
        let x = rand_array(&[3, 5], &mut rng);
        let labels = vec![1usize, 4, 0];
        let lab = labels.clone();
        let f = move |inputs: &[Array]| {
            let mut t = Tape::new(Precision::F64Verify);
            let tx = t.constant(&inputs[0]);
            let l = t.cross_entropy(tx, &lab).unwrap();
            t.value(l)[0]
        };
        let mut t = Tape::new(Precision::F64Verify);
        let tx = t.param(&x);
        let l = t.cross_entropy(tx, &labels).unwrap();
        t.backward(l).unwrap();
        let fd = finite_diff(&f, &[x], 0, 1e-5);
        assert!(max_rel_err(&t.grad(tx), &fd) <= 1e-4);
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut tape = Tape::new(Precision::F64Verify);
        let x = tape.param(&arr(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 4.0, -1.0]));
        let l = tape.sum(x).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x), vec![1.0; 6]);
    }

    #[test]
    fn non_participating_tensor_keeps_zero_gradient() {
        let mut tape = Tape::new(Precision::F64Verify);
        let x = tape.param(&arr(&[1, 2], &[1.0, 2.0]));
        let y = tape.param(&arr(&[1, 2], &[3.0, 4.0]));
        let l = tape.sum_squares(x).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(y), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new(Precision::F64Verify);
        let x = tape.param(&arr(&[1, 2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract { .. })));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new(Precision::F64Verify);
        let x = tape.param(&arr(&[1, 2], &[1.0, 2.0]));
        let l = tape.sum(x).unwrap();
        tape.backward(l).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x), vec![2.0, 2.0]);
    }

    #[test]
    fn backward_is_linear_over_loss_sums() {
        let mut rng = rng::stream(16, "linear", 0, 0);
        let x = rand_array(&[2, 3], &mut rng);

        let mut t1 = Tape::new(Precision::F64Verify);
        let p1 = t1.param(&x);
        let a = t1.sum_squares(p1).unwrap();
        let b = t1.sum(p1).unwrap();
        let total = t1.add(a, b).unwrap();
        t1.backward(total).unwrap();

        let mut t2 = Tape::new(Precision::F64Verify);
        let p2 = t2.param(&x);
        let a2 = t2.sum_squares(p2).unwrap();
        let b2 = t2.sum(p2).unwrap();
        t2.backward(a2).unwrap();
        t2.backward(b2).unwrap();

        let g1 = t1.grad(p1);
        let g2 = t2.grad(p2);
        for (u, v) in g1.iter().zip(&g2) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn ops_are_bitwise_deterministic() {
        let mut rng = rng::stream(17, "det", 0, 0);
        let x = rand_array(&[4, 4], &mut rng);
        let run = |a: &Array| -> Vec<f64> {
            let mut t = Tape::new(Precision::F32);
            let tx = t.param(a);
            let s = t.softmax_rows(tx).unwrap();
            let g = t.gelu(s).unwrap();
            let m = t.matmul(g, tx).unwrap();
            let l = t.sum_squares(m).unwrap();
            t.backward(l).unwrap();
            let mut out = t.value(l).to_vec();
            out.extend(t.grad(tx));
            out
        };
        let r1 = run(&x);
        let r2 = run(&x);
        assert_eq!(
            r1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            r2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn embed_and_slice_gradients_match_finite_differences() {
        let mut rng = rng::stream(18, "embed-fd", 0, 0);
        let table = rand_array(&[6, 4], &mut rng);
        let ids = vec![1u32, 3, 1, 5];
        let idc = ids.clone();
        let f = move |inputs: &[Array]| {
            let mut t = Tape::new(Precision::F64Verify);
            let tt = t.constant(&inputs[0]);
            let e = t.embed(tt, &idc).unwrap();
            let s = t.slice_cols(e, 1, 2).unwrap();
            let r = t.slice_rows(s, 0, 3).unwrap();
            let l = t.sum_squares(r).unwrap();
            t.value(l)[0]
        };
        let mut t = Tape::new(Precision::F64Verify);
        let tt = t.param(&table);
        let e = t.embed(tt, &ids).unwrap();
        let s = t.slice_cols(e, 1, 2).unwrap();
        let r = t.slice_rows(s, 0, 3).unwrap();
        let l = t.sum_squares(r).unwrap();
        t.backward(l).unwrap();
        let fd = finite_diff(&f, &[table], 0, 1e-5);
        assert!(max_rel_err(&t.grad(tt), &fd) <= 1e-4);
    }

    #[test]
    fn embed_rejects_out_of_vocab() {
        let mut tape = Tape::new(Precision::F64Verify);
        let table = tape.constant(&Array::zeros(&[4, 2]));
        assert!(matches!(
            tape.embed(table, &[4]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn concat_ops_gradients_match_finite_differences() {
        let mut rng = rng::stream(19, "concat-fd", 0, 0);
        let a = rand_array(&[2, 3], &mut rng);
        let b = rand_array(&[2, 2], &mut rng);
        let f = |inputs: &[Array]| {
            let mut t = Tape::new(Precision::F64Verify);
            let ta = t.constant(&inputs[0]);
            let tb = t.constant(&inputs[1]);
            let c = t.concat_cols(&[ta, tb]).unwrap();
            let r = t.concat_rows(&[c, c]).unwrap();
            let l = t.sum_squares(r).unwrap();
            t.value(l)[0]
        };
        let mut t = Tape::new(Precision::F64Verify);
        let ta = t.param(&a);
        let tb = t.param(&b);
        let c = t.concat_cols(&[ta, tb]).unwrap();
        let r = t.concat_rows(&[c, c]).unwrap();
        let l = t.sum_squares(r).unwrap();
        t.backward(l).unwrap();
        let inputs = [a, b];
        for (which, th) in [(0, ta), (1, tb)] {
            let fd = finite_diff(&f, &inputs, which, 1e-5);
            assert!(max_rel_err(&t.grad(th), &fd) <= 1e-4);
        }
    }
}
