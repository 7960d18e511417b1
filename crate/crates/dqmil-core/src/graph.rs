//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A `Graph` records every operation of one forward pass in topological
//! order. `backward` walks the tape once in reverse, accumulating
//! gradients in a fixed order so training runs are bit-reproducible.
//! One backward per graph; a consumed graph rejects further recording.
//!
//! Matrix products deliberately accumulate along `k` in sequence, with the
//! innermost loop over contiguous output columns. That keeps the per-element
//! operation order independent of SIMD width, so results match across
//! platforms bit for bit.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::{check_same_shape, Tensor};

/// Handle to a node in one `Graph`. Meaningless across graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op<F: Scalar> {
    Leaf,
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    Add(TensorId, TensorId),
    /// Broadcast a length-c row vector over every row of an r x c matrix.
    AddRow(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, F),
    Gelu(TensorId),
    MeanAxis(TensorId, usize),
    SumAll(TensorId),
    L2NormSq(TensorId),
    Softmax(TensorId, F),
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: F,
    },
    ConcatCols(Vec<TensorId>),
    SliceCols {
        x: TensorId,
        start: usize,
        len: usize,
    },
    Pick(TensorId, usize),
    LnFloor(TensorId, F),
    /// Stop-gradient: the edge to the input is deliberately not recorded.
    Detach,
    Reshape(TensorId),
}

struct Node<F: Scalar> {
    op: Op<F>,
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
}

/// Recorded forward pass plus gradient storage.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    consumed: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<F>, shape: Vec<usize>, data: Vec<F>, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            op,
            shape,
            data,
            grad: None,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn guard_open(&self) -> Result<()> {
        if self.consumed {
            Err(CoreError::GraphState(
                "graph already consumed by backward; record a new forward pass",
            ))
        } else {
            Ok(())
        }
    }

    fn node(&self, id: TensorId) -> &Node<F> {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn value(&self, id: TensorId) -> &[F] {
        &self.node(id).data
    }

    /// Value of a one-element node.
    pub fn scalar_value(&self, id: TensorId) -> F {
        debug_assert_eq!(self.node(id).data.len(), 1);
        self.node(id).data[0]
    }

    pub fn value_tensor(&self, id: TensorId) -> Tensor<F> {
        Tensor::from_vec(&self.node(id).shape, self.node(id).data.clone())
            .expect("graph nodes hold consistent shapes")
    }

    /// Gradient slot, present only after backward and only on nodes that
    /// required gradients.
    pub fn grad(&self, id: TensorId) -> Option<&[F]> {
        self.node(id).grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.node(id).requires_grad
    }

    // ── Leaves ──────────────────────────────────────────────────────

    pub fn constant(&mut self, t: Tensor<F>) -> Result<TensorId> {
        self.guard_open()?;
        let shape = t.shape().to_vec();
        Ok(self.push(Op::Leaf, shape, t.into_data(), false))
    }

    pub fn trainable(&mut self, t: Tensor<F>) -> Result<TensorId> {
        self.guard_open()?;
        let shape = t.shape().to_vec();
        Ok(self.push(Op::Leaf, shape, t.into_data(), true))
    }

    pub fn scalar(&mut self, v: F) -> Result<TensorId> {
        self.constant(Tensor::scalar(v))
    }

    // ── Operations ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.guard_open()?;
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CoreError::Dimension(format!(
                "matmul: incompatible shapes {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::ZERO; m * n];
        matmul_acc(&self.node(a).data, &self.node(b).data, &mut out, m, k, n);
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Op::Matmul(a, b), vec![m, n], out, rg))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        self.guard_open()?;
        let sa = &self.node(a).shape;
        if sa.len() != 2 {
            return Err(CoreError::Dimension(format!(
                "transpose: expected rank-2, got {sa:?}"
            )));
        }
        let (r, c) = (sa[0], sa[1]);
        let out = transpose_data(&self.node(a).data, r, c);
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::Transpose(a), vec![c, r], out, rg))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.guard_open()?;
        check_same_shape("add", &self.node(a).shape, &self.node(b).shape)?;
        let out: Vec<F> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.node(a).shape.clone();
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Op::Add(a, b), shape, out, rg))
    }

    pub fn add_row(&mut self, x: TensorId, row: TensorId) -> Result<TensorId> {
        self.guard_open()?;
        let (sx, sr) = (&self.node(x).shape, &self.node(row).shape);
        if sx.len() != 2 || sr.len() != 1 || sx[1] != sr[0] {
            return Err(CoreError::Dimension(format!(
                "add_row: matrix {sx:?} and row {sr:?} are incompatible"
            )));
        }
        let (r, c) = (sx[0], sx[1]);
        let rowd = &self.node(row).data;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(self.node(x).data[i * c + j] + rowd[j]);
            }
        }
        let rg = self.node(x).requires_grad || self.node(row).requires_grad;
        Ok(self.push(Op::AddRow(x, row), vec![r, c], out, rg))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.guard_open()?;
        check_same_shape("sub", &self.node(a).shape, &self.node(b).shape)?;
        let out: Vec<F> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.node(a).shape.clone();
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Op::Sub(a, b), shape, out, rg))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.guard_open()?;
        check_same_shape("mul", &self.node(a).shape, &self.node(b).shape)?;
        let out: Vec<F> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.node(a).shape.clone();
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Op::Mul(a, b), shape, out, rg))
    }

    pub fn scale(&mut self, a: TensorId, c: F) -> Result<TensorId> {
        self.guard_open()?;
        let out: Vec<F> = self.node(a).data.iter().map(|&x| x * c).collect();
        let shape = self.node(a).shape.clone();
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::Scale(a, c), shape, out, rg))
    }

    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        self.guard_open()?;
        let out: Vec<F> = self.node(a).data.iter().map(|&x| gelu(x)).collect();
        let shape = self.node(a).shape.clone();
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::Gelu(a), shape, out, rg))
    }

    /// Mean over one axis of a rank-2 tensor. Axis 0 averages rows away
    /// (result length = cols), axis 1 averages columns away.
    pub fn mean_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        self.guard_open()?;
        let sa = &self.node(a).shape;
        if sa.len() != 2 {
            return Err(CoreError::Dimension(format!(
                "mean_axis: expected rank-2, got {sa:?}"
            )));
        }
        if axis > 1 {
            return Err(CoreError::Parameter(format!(
                "mean_axis: axis {axis} out of range for rank-2"
            )));
        }
        let (r, c) = (sa[0], sa[1]);
        if sa[axis] == 0 {
            return Err(CoreError::EmptyInput("mean_axis over an empty axis"));
        }
        let d = &self.node(a).data;
        let out = if axis == 0 {
            let inv = F::ONE / F::from_usize(r);
            (0..c)
                .map(|j| (0..r).map(|i| d[i * c + j]).sum::<F>() * inv)
                .collect::<Vec<F>>()
        } else {
            let inv = F::ONE / F::from_usize(c);
            (0..r)
                .map(|i| d[i * c..(i + 1) * c].iter().copied().sum::<F>() * inv)
                .collect::<Vec<F>>()
        };
        let out_shape = if axis == 0 { vec![c] } else { vec![r] };
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::MeanAxis(a, axis), out_shape, out, rg))
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        self.guard_open()?;
        let s: F = self.node(a).data.iter().copied().sum();
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::SumAll(a), Vec::new(), vec![s], rg))
    }

    /// Squared Euclidean norm of all entries, as a scalar node.
    pub fn l2_norm_sq(&mut self, a: TensorId) -> Result<TensorId> {
        self.guard_open()?;
        let s: F = self.node(a).data.iter().map(|&x| x * x).sum();
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::L2NormSq(a), Vec::new(), vec![s], rg))
    }

    /// Temperature softmax over the trailing axis, max-subtracted for
    /// overflow safety.
    pub fn softmax(&mut self, a: TensorId, temperature: F) -> Result<TensorId> {
        self.guard_open()?;
        if temperature <= F::ZERO {
            return Err(CoreError::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let sa = &self.node(a).shape;
        let n = *sa.last().ok_or_else(|| {
            CoreError::Dimension(format!("softmax: need rank >= 1, got {sa:?}"))
        })?;
        if n == 0 {
            return Err(CoreError::EmptyInput("softmax over an empty axis"));
        }
        let d = &self.node(a).data;
        let mut out = Vec::with_capacity(d.len());
        for slice in d.chunks(n) {
            let mut m = slice[0] / temperature;
            for &v in slice {
                m = m.max(v / temperature);
            }
            let mut denom = F::ZERO;
            let base = out.len();
            for &v in slice {
                let e = (v / temperature - m).exp();
                out.push(e);
                denom += e;
            }
            for v in &mut out[base..] {
                *v /= denom;
            }
        }
        let shape = sa.clone();
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::Softmax(a, temperature), shape, out, rg))
    }

    /// Layer normalization over the trailing axis with affine gain/bias.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: F,
    ) -> Result<TensorId> {
        self.guard_open()?;
        let sx = self.node(x).shape.clone();
        let d = *sx.last().ok_or_else(|| {
            CoreError::Dimension(format!("layer_norm: need rank >= 1, got {sx:?}"))
        })?;
        if d == 0 {
            return Err(CoreError::Dimension(
                "layer_norm: trailing axis must be non-empty".into(),
            ));
        }
        if self.node(gain).shape != [d] || self.node(bias).shape != [d] {
            return Err(CoreError::Dimension(format!(
                "layer_norm: gain {:?} / bias {:?} must both be [{d}]",
                self.node(gain).shape,
                self.node(bias).shape
            )));
        }
        let inv_d = F::ONE / F::from_usize(d);
        let xd = &self.node(x).data;
        let gd = &self.node(gain).data;
        let bd = &self.node(bias).data;
        let mut out = Vec::with_capacity(xd.len());
        for slice in xd.chunks(d) {
            let mean = slice.iter().copied().sum::<F>() * inv_d;
            let var = slice.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let inv_std = F::ONE / (var + eps).sqrt();
            for (j, &v) in slice.iter().enumerate() {
                out.push((v - mean) * inv_std * gd[j] + bd[j]);
            }
        }
        let rg = self.node(x).requires_grad
            || self.node(gain).requires_grad
            || self.node(bias).requires_grad;
        Ok(self.push(Op::LayerNorm { x, gain, bias, eps }, sx, out, rg))
    }

    /// Concatenate rank-2 tensors along the column axis.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        self.guard_open()?;
        if parts.is_empty() {
            return Err(CoreError::EmptyInput("concat_cols of zero tensors"));
        }
        let r = self.node(parts[0]).shape.first().copied().unwrap_or(0);
        let mut total_c = 0;
        for &p in parts {
            let sp = &self.node(p).shape;
            if sp.len() != 2 || sp[0] != r {
                return Err(CoreError::Dimension(format!(
                    "concat_cols: part {sp:?} incompatible with {r} rows"
                )));
            }
            total_c += sp[1];
        }
        let mut out = Vec::with_capacity(r * total_c);
        for i in 0..r {
            for &p in parts {
                let c = self.node(p).shape[1];
                out.extend_from_slice(&self.node(p).data[i * c..(i + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.node(p).requires_grad);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), vec![r, total_c], out, rg))
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        self.guard_open()?;
        let sx = &self.node(x).shape;
        if sx.len() != 2 || start + len > sx[1] {
            return Err(CoreError::Dimension(format!(
                "slice_cols: columns [{start}, {}) out of {sx:?}",
                start + len
            )));
        }
        let (r, c) = (sx[0], sx[1]);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.node(x).data[i * c + start..i * c + start + len]);
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(Op::SliceCols { x, start, len }, vec![r, len], out, rg))
    }

    /// Extract one element by flat index, as a scalar node.
    pub fn pick(&mut self, x: TensorId, index: usize) -> Result<TensorId> {
        self.guard_open()?;
        let numel = self.node(x).data.len();
        if index >= numel {
            return Err(CoreError::Dimension(format!(
                "pick: index {index} out of {numel} elements"
            )));
        }
        let v = self.node(x).data[index];
        let rg = self.node(x).requires_grad;
        Ok(self.push(Op::Pick(x, index), Vec::new(), vec![v], rg))
    }

    /// Elementwise ln(max(x, floor)); the floor guards exact zeros.
    pub fn ln_floor(&mut self, x: TensorId, floor: F) -> Result<TensorId> {
        self.guard_open()?;
        if floor <= F::ZERO {
            return Err(CoreError::Parameter(format!(
                "ln_floor: floor must be positive, got {floor}"
            )));
        }
        let out: Vec<F> = self.node(x).data.iter().map(|&v| v.max(floor).ln()).collect();
        let shape = self.node(x).shape.clone();
        let rg = self.node(x).requires_grad;
        Ok(self.push(Op::LnFloor(x, floor), shape, out, rg))
    }

    /// Identity forward, no gradient flow backward.
    pub fn detach(&mut self, x: TensorId) -> Result<TensorId> {
        self.guard_open()?;
        let shape = self.node(x).shape.clone();
        let data = self.node(x).data.clone();
        Ok(self.push(Op::Detach, shape, data, false))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        self.guard_open()?;
        let numel: usize = shape.iter().product();
        if numel != self.node(x).data.len() {
            return Err(CoreError::Dimension(format!(
                "reshape: {:?} to {shape:?} changes element count",
                self.node(x).shape
            )));
        }
        let data = self.node(x).data.clone();
        let rg = self.node(x).requires_grad;
        Ok(self.push(Op::Reshape(x), shape.to_vec(), data, rg))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Fills gradient slots of every
    /// node that requires gradients, in fixed tape order, then consumes
    /// the graph.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.consumed {
            return Err(CoreError::GraphState(
                "backward already run; record a new forward pass first",
            ));
        }
        if self.node(loss).data.len() != 1 {
            return Err(CoreError::GraphState("backward needs a scalar loss"));
        }
        if !self.node(loss).data[0].is_finite() {
            return Err(CoreError::NonFinite(format!(
                "loss is {}",
                self.node(loss).data[0]
            )));
        }
        if !self.node(loss).requires_grad {
            return Err(CoreError::GraphState(
                "loss is not connected to any trainable tensor",
            ));
        }
        self.consumed = true;

        for node in self.nodes.iter_mut().take(loss.0 + 1) {
            if node.requires_grad {
                node.grad = Some(vec![F::ZERO; node.data.len()]);
            }
        }
        self.nodes[loss.0].grad.as_mut().expect("just allocated")[0] = F::ONE;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_backward(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn apply_backward(&mut self, i: usize, g: &[F]) {
        // Local clone of the op keeps the borrow checker out of the way;
        // ops only hold ids and small constants.
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, n) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let k = self.nodes[a.0].shape[1];
                if self.nodes[a.0].requires_grad {
                    // da += g . b^T
                    let bt = transpose_data(&self.nodes[b.0].data, k, n);
                    let mut da = vec![F::ZERO; m * k];
                    matmul_acc(g, &bt, &mut da, m, n, k);
                    add_into(self.grad_mut(a), &da);
                }
                if self.nodes[b.0].requires_grad {
                    // db += a^T . g
                    let at = transpose_data(&self.nodes[a.0].data, m, k);
                    let mut db = vec![F::ZERO; k * n];
                    matmul_acc(&at, g, &mut db, k, m, n);
                    add_into(self.grad_mut(b), &db);
                }
            }
            Op::Transpose(a) => {
                if self.nodes[a.0].requires_grad {
                    let (c, r) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let gt = transpose_data(g, c, r);
                    add_into(self.grad_mut(a), &gt);
                }
            }
            Op::Add(a, b) => {
                if self.nodes[a.0].requires_grad {
                    add_into(self.grad_mut(a), g);
                }
                if self.nodes[b.0].requires_grad {
                    add_into(self.grad_mut(b), g);
                }
            }
            Op::AddRow(x, row) => {
                if self.nodes[x.0].requires_grad {
                    add_into(self.grad_mut(x), g);
                }
                if self.nodes[row.0].requires_grad {
                    let c = self.nodes[row.0].data.len();
                    let gr = self.grad_mut(row);
                    for (idx, &v) in g.iter().enumerate() {
                        gr[idx % c] += v;
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.nodes[a.0].requires_grad {
                    add_into(self.grad_mut(a), g);
                }
                if self.nodes[b.0].requires_grad {
                    let gb = self.grad_mut(b);
                    for (dst, &v) in gb.iter_mut().zip(g) {
                        *dst -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let prod: Vec<F> = g
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    add_into(self.grad_mut(a), &prod);
                }
                if self.nodes[b.0].requires_grad {
                    let prod: Vec<F> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    add_into(self.grad_mut(b), &prod);
                }
            }
            Op::Scale(a, c) => {
                if self.nodes[a.0].requires_grad {
                    let scaled: Vec<F> = g.iter().map(|&v| v * c).collect();
                    add_into(self.grad_mut(a), &scaled);
                }
            }
            Op::Gelu(a) => {
                if self.nodes[a.0].requires_grad {
                    let dx: Vec<F> = self.nodes[a.0]
                        .data
                        .iter()
                        .zip(g)
                        .map(|(&x, &gv)| gv * gelu_grad(x))
                        .collect();
                    add_into(self.grad_mut(a), &dx);
                }
            }
            Op::MeanAxis(a, axis) => {
                if self.nodes[a.0].requires_grad {
                    let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let ga = self.grad_mut(a);
                    if axis == 0 {
                        let inv = F::ONE / F::from_usize(r);
                        for i2 in 0..r {
                            for j in 0..c {
                                ga[i2 * c + j] += g[j] * inv;
                            }
                        }
                    } else {
                        let inv = F::ONE / F::from_usize(c);
                        for i2 in 0..r {
                            for j in 0..c {
                                ga[i2 * c + j] += g[i2] * inv;
                            }
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if self.nodes[a.0].requires_grad {
                    let gv = g[0];
                    for dst in self.grad_mut(a) {
                        *dst += gv;
                    }
                }
            }
            Op::L2NormSq(a) => {
                if self.nodes[a.0].requires_grad {
                    let gv = g[0];
                    let two = F::from_f64(2.0);
                    let dx: Vec<F> = self.nodes[a.0].data.iter().map(|&x| two * x * gv).collect();
                    add_into(self.grad_mut(a), &dx);
                }
            }
            Op::Softmax(a, tau) => {
                if self.nodes[a.0].requires_grad {
                    let n = *self.nodes[i].shape.last().expect("rank checked");
                    let y = &self.nodes[i].data;
                    let mut dx = vec![F::ZERO; y.len()];
                    for (s, (ys, gs)) in y.chunks(n).zip(g.chunks(n)).enumerate() {
                        let dot: F = ys.iter().zip(gs).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..n {
                            dx[s * n + j] = ys[j] * (gs[j] - dot) / tau;
                        }
                    }
                    add_into(self.grad_mut(a), &dx);
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let d = *self.nodes[i].shape.last().expect("rank checked");
                let inv_d = F::ONE / F::from_usize(d);
                let xd = self.nodes[x.0].data.clone();
                let gd = self.nodes[gain.0].data.clone();
                let x_rg = self.nodes[x.0].requires_grad;
                let gain_rg = self.nodes[gain.0].requires_grad;
                let bias_rg = self.nodes[bias.0].requires_grad;
                let mut dx_all = vec![F::ZERO; xd.len()];
                let mut dgain = vec![F::ZERO; d];
                let mut dbias = vec![F::ZERO; d];
                for (s, (xs, gs)) in xd.chunks(d).zip(g.chunks(d)).enumerate() {
                    let mean = xs.iter().copied().sum::<F>() * inv_d;
                    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
                    let inv_std = F::ONE / (var + eps).sqrt();
                    // xhat_j = (x_j - mean) * inv_std
                    let mut mean_dxhat = F::ZERO;
                    let mut mean_dxhat_xhat = F::ZERO;
                    for j in 0..d {
                        let xhat = (xs[j] - mean) * inv_std;
                        let dxhat = gs[j] * gd[j];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                        dgain[j] += gs[j] * xhat;
                        dbias[j] += gs[j];
                    }
                    mean_dxhat *= inv_d;
                    mean_dxhat_xhat *= inv_d;
                    if x_rg {
                        for j in 0..d {
                            let xhat = (xs[j] - mean) * inv_std;
                            let dxhat = gs[j] * gd[j];
                            dx_all[s * d + j] =
                                inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                }
                if x_rg {
                    add_into(self.grad_mut(x), &dx_all);
                }
                if gain_rg {
                    add_into(self.grad_mut(gain), &dgain);
                }
                if bias_rg {
                    add_into(self.grad_mut(bias), &dbias);
                }
            }
            Op::ConcatCols(parts) => {
                let r = self.nodes[i].shape[0];
                let total_c = self.nodes[i].shape[1];
                let mut offset = 0;
                for &p in &parts {
                    let c = self.nodes[p.0].shape[1];
                    if self.nodes[p.0].requires_grad {
                        let mut gp = vec![F::ZERO; r * c];
                        for i2 in 0..r {
                            gp[i2 * c..(i2 + 1) * c].copy_from_slice(
                                &g[i2 * total_c + offset..i2 * total_c + offset + c],
                            );
                        }
                        add_into(self.grad_mut(p), &gp);
                    }
                    offset += c;
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.nodes[x.0].requires_grad {
                    let c = self.nodes[x.0].shape[1];
                    let r = self.nodes[x.0].shape[0];
                    let gx = self.grad_mut(x);
                    for i2 in 0..r {
                        for j in 0..len {
                            gx[i2 * c + start + j] += g[i2 * len + j];
                        }
                    }
                }
            }
            Op::Pick(x, index) => {
                if self.nodes[x.0].requires_grad {
                    self.grad_mut(x)[index] += g[0];
                }
            }
            Op::LnFloor(x, floor) => {
                if self.nodes[x.0].requires_grad {
                    let dx: Vec<F> = self.nodes[x.0]
                        .data
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v > floor { gv / v } else { F::ZERO })
                        .collect();
                    add_into(self.grad_mut(x), &dx);
                }
            }
            Op::Detach => {}
            Op::Reshape(x) => {
                if self.nodes[x.0].requires_grad {
                    add_into(self.grad_mut(x), g);
                }
            }
        }
    }

    fn grad_mut(&mut self, id: TensorId) -> &mut [F] {
        self.nodes[id.0]
            .grad
            .as_mut()
            .expect("gradient slot allocated for requires_grad node")
    }
}

// ── Kernels ─────────────────────────────────────────────────────────

/// out[m x n] += a[m x k] . b[k x n], axpy ordering: the inner loop runs
/// over contiguous columns so it vectorizes without reassociating sums.
fn matmul_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (dst, &bv) in out_row.iter_mut().zip(b_row) {
                *dst += av * bv;
            }
        }
    }
}

fn transpose_data<F: Scalar>(data: &[F], r: usize, c: usize) -> Vec<F> {
    let mut out = vec![F::ZERO; data.len()];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = data[i * c + j];
        }
    }
    out
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Exact GELU: x * Phi(x) with the Gaussian CDF via erf.
fn gelu<F: Scalar>(x: F) -> F {
    let half = F::from_f64(0.5);
    let inv_sqrt2 = F::from_f64(core::f64::consts::FRAC_1_SQRT_2);
    half * x * (F::ONE + (x * inv_sqrt2).erf())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let half = F::from_f64(0.5);
    let inv_sqrt2 = F::from_f64(core::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = F::from_f64(0.3989422804014327);
    let phi_cdf = half * (F::ONE + (x * inv_sqrt2).erf());
    let phi_pdf = inv_sqrt_2pi * (-(half * x * x)).exp();
    phi_cdf + x * phi_pdf
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn t2(rows: usize, cols: usize, vals: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[rows, cols], vals.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.constant(t2(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let b = g.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let c = g.matmul(eye, b).unwrap();
        assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_zero() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let c = g.matmul(z, b).unwrap();
        assert!(g.value(c).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 2])).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::from_vec(&[3], vec![0.0, 0.0, 0.0]).unwrap())
            .unwrap();
        let y = g.softmax(x, 1.0).unwrap();
        for &v in g.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_two_logits_matches_direct_eval() {
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::from_vec(&[2], vec![2.0, 0.0]).unwrap())
            .unwrap();
        let y = g.softmax(x, 1.0).unwrap();
        let e2 = (2.0f64).exp();
        let expect = e2 / (e2 + 1.0);
        assert!((g.value(y)[0] - expect).abs() < 1e-4);
        assert!((g.value(y)[0] - 0.8808).abs() < 1e-4);
        assert!((g.value(y)[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn softmax_sharp_temperature_collapses() {
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::from_vec(&[2], vec![2.0, 0.0]).unwrap())
            .unwrap();
        let y = g.softmax(x, 1.0 / 16.0).unwrap();
        assert!(g.value(y)[0] > 1.0 - 1e-13);
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap())
            .unwrap();
        assert!(matches!(g.softmax(x, 0.0), Err(CoreError::Parameter(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one_for_large_logits() {
        let mut rng = crate::rng::Rng::new(17);
        let mut g = Graph::new();
        let vals: Vec<f64> = (0..64).map(|_| (rng.next_f64() * 2.0 - 1.0) * 1e3).collect();
        let x = g.constant(Tensor::from_vec(&[8, 8], vals).unwrap()).unwrap();
        let y = g.softmax(x, 1.0).unwrap();
        for row in g.value(y).chunks(8) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-7, "sum {s}");
        }
    }

    #[test]
    fn layer_norm_constant_slice_is_zero() {
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::from_vec(&[3], vec![5.0, 5.0, 5.0]).unwrap())
            .unwrap();
        let gain = g.constant(Tensor::full(&[3], 1.0)).unwrap();
        let bias = g.constant(Tensor::zeros(&[3])).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        for &v in g.value(y) {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_already_normalized() {
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap())
            .unwrap();
        let gain = g.constant(Tensor::full(&[2], 1.0)).unwrap();
        let bias = g.constant(Tensor::zeros(&[2])).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        assert!((g.value(y)[0] - 1.0).abs() < 1e-5);
        assert!((g.value(y)[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = crate::rng::Rng::new(3);
        let vals: Vec<f64> = (0..4).map(|_| rng.next_f64() * 4.0 - 2.0).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[4], vals).unwrap()).unwrap();
        let gain = g.constant(Tensor::full(&[4], 1.0)).unwrap();
        let bias = g.constant(Tensor::zeros(&[4])).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let out = g.value(y);
        let mean: f64 = out.iter().sum::<f64>() / 4.0;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-7, "mean {mean}");
        // Variance is 1 scaled by sigma^2 / (sigma^2 + eps).
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let w = g.trainable(t2(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let loss = g.sum_all(w).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_softmax_pick_matches_jacobian_row() {
        let (a, b) = (0.7, -0.3);
        let mut g = Graph::new();
        let x = g
            .trainable(Tensor::from_vec(&[2], vec![a, b]).unwrap())
            .unwrap();
        let y = g.softmax(x, 1.0).unwrap();
        let p0 = g.pick(y, 0).unwrap();
        g.backward(p0).unwrap();
        let ya = (a as f64).exp() / ((a as f64).exp() + (b as f64).exp());
        // d p0 / d x = [p0 (1 - p0), -p0 p1]
        let expect = [ya * (1.0 - ya), -ya * (1.0 - ya)];
        let got = g.grad(x).unwrap();
        for (got, want) in got.iter().zip(expect) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn second_backward_is_a_state_error() {
        let mut g = Graph::new();
        let w = g.trainable(Tensor::scalar(2.0f64)).unwrap();
        let loss = g.sum_all(w).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(CoreError::GraphState(_))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let w = g.trainable(t2(1, 2, &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(w), Err(CoreError::GraphState(_))));
    }

    #[test]
    fn ops_after_backward_rejected() {
        let mut g = Graph::new();
        let w = g.trainable(Tensor::scalar(2.0f64)).unwrap();
        let loss = g.sum_all(w).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(
            g.scale(w, 2.0),
            Err(CoreError::GraphState(_))
        ));
    }

    #[test]
    fn detach_blocks_gradients() {
        let mut g = Graph::new();
        let w = g.trainable(Tensor::scalar(3.0f64)).unwrap();
        let d = g.detach(w).unwrap();
        assert!(!g.requires_grad(d));
        let prod = g.mul(w, d).unwrap(); // loss = w * detach(w)
        let loss = g.sum_all(prod).unwrap();
        g.backward(loss).unwrap();
        // d/dw [w * const(3)] = 3, not 2w = 6.
        assert_eq!(g.grad(w).unwrap(), &[3.0]);
    }

    #[test]
    fn mean_axis_single_row_unchanged() {
        let mut g = Graph::new();
        let x = g.constant(t2(1, 4, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let m = g.mean_axis(x, 0).unwrap();
        assert_eq!(g.value(m), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn l2_norm_sq_of_difference_with_self_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(t2(2, 2, &[1.0, -2.0, 3.0, 4.0])).unwrap();
        let d = g.sub(x, x).unwrap();
        let n = g.l2_norm_sq(d).unwrap();
        assert_eq!(g.scalar_value(n), 0.0);
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut g = Graph::new();
        let a = g.constant(t2(2, 2, &[1.0, 2.0, 5.0, 6.0])).unwrap();
        let b = g.constant(t2(2, 1, &[3.0, 7.0])).unwrap();
        let cat = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(cat), &[1.0, 2.0, 3.0, 5.0, 6.0, 7.0]);
        let back = g.slice_cols(cat, 2, 1).unwrap();
        assert_eq!(g.value(back), &[3.0, 7.0]);
    }

    #[test]
    fn forward_bit_identical_across_runs() {
        let run = || {
            let mut rng = crate::rng::Rng::new(99);
            let mut g = Graph::<f32>::new();
            let a = g
                .constant(Tensor::trunc_normal(&[4, 4], 0.0, 1.0, -3.0, 3.0, &mut rng).unwrap())
                .unwrap();
            let b = g
                .constant(Tensor::trunc_normal(&[4, 4], 0.0, 1.0, -3.0, 3.0, &mut rng).unwrap())
                .unwrap();
            let c = g.matmul(a, b).unwrap();
            let s = g.softmax(c, 2.0).unwrap();
            g.value(s).to_vec()
        };
        let x = run();
        let y = run();
        assert!(x.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
