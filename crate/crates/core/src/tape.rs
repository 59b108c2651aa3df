//! Reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its output value and the operand
//! handles needed for the backward rule. Nodes are only ever appended, so the
//! tape is topologically ordered by construction and [`Tape::backward`] is a
//! single reverse sweep. Trainable leaves keep their gradient accumulators
//! across sweeps; intermediate gradients are rebuilt on every sweep.

use crate::error::{Error, Result};
use crate::tensor::{axis_extents, inverse_permutation, permute_values, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// tanh approximation
    Gelu,
    Relu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    AddRow { a: usize, bias: usize },
    AddConst { a: usize },
    Reshape { a: usize },
    Permute { a: usize, axes: Vec<usize> },
    Slice { a: usize, axis: usize, start: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Gather { table: usize, ids: Vec<usize> },
    Softmax { a: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu { a: usize },
    Relu { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
    Dropout { a: usize, mask: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its `requires_grad` flag decides whether gradients reach it.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Records a trainable leaf, allocating a gradient accumulator if missing.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        let t = if tensor.requires_grad() { tensor } else { tensor.with_grad() };
        self.leaf(t)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        debug_assert!(!tensor.requires_grad());
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf (or `None` if it does not require grad).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn vals(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    // ---------------------------------------------------------------- ops

    /// Matrix product of `[m, k] x [k, n]`, or batched `[g, m, k] x [g, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::shape("matmul", format!("cannot multiply {:?} by {:?}", sa, sb));
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([g, m, k], [g2, k2, n]) if g == g2 && k == k2 => (*g, *m, *k, *n),
            _ => return Err(mismatch()),
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.vals(a), self.vals(b));
            for g in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[g * m * k..(g + 1) * m * k],
                    false,
                    &bv[g * k * n..(g + 1) * k * n],
                    false,
                    &mut out[g * m * n..(g + 1) * m * n],
                    false,
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a: a.0, b: b.0, batch, m, k, n }, needs))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self.vals(a).iter().zip(self.vals(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add { a: a.0, b: b.0 }, needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self.vals(a).iter().zip(self.vals(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul { a: a.0, b: b.0 }, needs))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out: Vec<f64> = self.vals(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a.0]);
        self.push(Tensor::from_parts(shape, out), Op::Scale { a: a.0, factor }, needs)
    }

    /// Adds a `[d]` vector to every row of a `[.., d]` tensor.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(a).last().unwrap();
        if self.shape(bias) != [d] {
            return Err(Error::shape("add_row", format!("bias {:?} for input {:?}", self.shape(bias), self.shape(a))));
        }
        let b = self.vals(bias);
        let out: Vec<f64> = self.vals(a).iter().enumerate().map(|(i, x)| x + b[i % d]).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a.0, bias.0]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddRow { a: a.0, bias: bias.0 }, needs))
    }

    /// Adds a non-differentiable tensor of identical shape (used for attention masks).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(Error::shape("add_const", format!("{:?} vs {:?}", self.shape(a), c.shape())));
        }
        let out: Vec<f64> = self.vals(a).iter().zip(c.values()).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a.0]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddConst { a: a.0 }, needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        let needs = self.needs(&[a.0]);
        Ok(self.push(t, Op::Reshape { a: a.0 }, needs))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.shape(a).len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&x| x >= rank || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::shape("permute", format!("axes {:?} invalid for rank {}", axes, rank)));
        }
        let (out, shape) = permute_values(self.vals(a), self.shape(a), axes);
        let needs = self.needs(&[a.0]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Permute { a: a.0, axes: axes.to_vec() }, needs))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(Error::shape("transpose", format!("rank {} < 2", rank)));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("range {}..{} on axis {} of {:?}", start, start + len, axis, shape),
            ));
        }
        let (outer, full, inner) = axis_extents(&shape, axis);
        let src = self.vals(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let needs = self.needs(&[a.0]);
        Ok(self.push(Tensor::from_parts(new_shape, out), Op::Slice { a: a.0, axis, start }, needs))
    }

    /// Concatenates along `axis` in argument order.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no operands"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {} invalid for {:?}", axis, base)));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{:?} incompatible with {:?} on axis {}", s, base, axis)));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis];
                let src = self.vals(*p);
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let needs = self.needs(&idx);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { parts: idx, axis }, needs))
    }

    /// Rows of a `[n, d]` table selected by integer ids; embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("gather_rows", format!("table must be 2-D, got {:?}", shape)));
        }
        if ids.is_empty() {
            return Err(Error::shape("gather_rows", "no ids"));
        }
        let (n, d) = (shape[0], shape[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", format!("id {} out of range for {} rows", bad, n)));
        }
        let src = self.vals(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let needs = self.needs(&[table.0]);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Gather { table: table.0, ids: ids.to_vec() },
            needs,
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {} invalid for {:?}", axis, shape)));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let x = self.vals(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| x[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for i in 0..len {
                    let e = (x[at(i)] - max).exp();
                    out[at(i)] = e;
                    sum += e;
                }
                for i in 0..len {
                    out[at(i)] /= sum;
                }
            }
        }
        let needs = self.needs(&[a.0]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { a: a.0, axis }, needs))
    }

    /// Normalizes each last-axis row, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("gain {:?} / bias {:?} for input {:?}", self.shape(gain), self.shape(bias), shape),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {}", eps)));
        }
        let (xv, g, b) = (self.vals(x), self.vals(gain), self.vals(bias));
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (row[i] - mean) * rs;
                xhat[r * d + i] = h;
                out[r * d + i] = h * g[i] + b[i];
            }
        }
        let needs = self.needs(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, xhat, rstd },
            needs,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self
            .vals(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a.0]);
        self.push(Tensor::from_parts(shape, out), Op::Gelu { a: a.0 }, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.vals(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a.0]);
        self.push(Tensor::from_parts(shape, out), Op::Relu { a: a.0 }, needs)
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        match kind {
            Activation::Gelu => self.gelu(a),
            Activation::Relu => self.relu(a),
        }
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.vals(a).iter().sum();
        let needs = self.needs(&[a.0]);
        self.push(Tensor::scalar(s), Op::Sum { a: a.0 }, needs)
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.vals(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let needs = self.needs(&[a.0]);
        self.push(Tensor::scalar(s), Op::Mean { a: a.0 }, needs)
    }

    /// Mean softmax cross-entropy of `[b, r]` logits against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} with {} targets", shape, targets.len()),
            ));
        }
        let (b, r) = (shape[0], shape[1]);
        if let Some(t) = targets.iter().find(|&&t| t >= r) {
            return Err(Error::shape("cross_entropy", format!("target {} out of range for {} classes", t, r)));
        }
        let z = self.vals(logits);
        let mut probs = vec![0.0; z.len()];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &z[i * r..(i + 1) * r];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[targets[i]];
            for j in 0..r {
                probs[i * r + j] = (row[j] - lse).exp();
            }
        }
        let needs = self.needs(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(loss / b as f64),
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), probs },
            needs,
        ))
    }

    /// Multiplies by a fixed mask (already scaled for inverted dropout).
    pub fn dropout_mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return Err(Error::shape("dropout", format!("mask of {} for {:?}", mask.len(), self.shape(a))));
        }
        let out: Vec<f64> = self.vals(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a.0]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Dropout { a: a.0, mask }, needs))
    }

    // ----------------------------------------------------------- backward

    /// Back-propagates from a scalar `loss`, accumulating into trainable leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |idx: usize, delta: Vec<f64>| {
            if !nodes[idx].needs_grad {
                return;
            }
            match &mut grads[idx] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |idx: usize| nodes[idx].value.values();
        let need = |idx: usize| nodes[idx].needs_grad;

        match &nodes[i].op {
            Op::Leaf => unreachable!(),
            &Op::MatMul { a, b, batch, m, k, n } => {
                if need(a) {
                    let mut da = vec![0.0; batch * m * k];
                    for s in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[s * m * n..(s + 1) * m * n],
                            false,
                            &val(b)[s * k * n..(s + 1) * k * n],
                            true,
                            &mut da[s * m * k..(s + 1) * m * k],
                            false,
                        );
                    }
                    acc(a, da);
                }
                if need(b) {
                    let mut db = vec![0.0; batch * k * n];
                    for s in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &val(a)[s * m * k..(s + 1) * m * k],
                            true,
                            &g[s * m * n..(s + 1) * m * n],
                            false,
                            &mut db[s * k * n..(s + 1) * k * n],
                            false,
                        );
                    }
                    acc(b, db);
                }
            }
            &Op::Add { a, b } => {
                acc(a, g.to_vec());
                acc(b, g.to_vec());
            }
            &Op::Mul { a, b } => {
                if need(a) {
                    acc(a, g.iter().zip(val(b)).map(|(g, y)| g * y).collect());
                }
                if need(b) {
                    acc(b, g.iter().zip(val(a)).map(|(g, x)| g * x).collect());
                }
            }
            &Op::Scale { a, factor } => acc(a, g.iter().map(|v| v * factor).collect()),
            &Op::AddRow { a, bias } => {
                acc(a, g.to_vec());
                if need(bias) {
                    let d = nodes[bias].value.numel();
                    let mut db = vec![0.0; d];
                    for (j, v) in g.iter().enumerate() {
                        db[j % d] += v;
                    }
                    acc(bias, db);
                }
            }
            &Op::AddConst { a } | &Op::Reshape { a } => acc(a, g.to_vec()),
            Op::Permute { a, axes } => {
                let (back, _) = permute_values(g, nodes[i].value.shape(), &inverse_permutation(axes));
                acc(*a, back);
            }
            &Op::Slice { a, axis, start } => {
                let in_shape = nodes[a].value.shape();
                let (outer, full, inner) = axis_extents(in_shape, axis);
                let len = nodes[i].value.shape()[axis];
                let mut da = vec![0.0; nodes[a].value.numel()];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    da[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(a, da);
            }
            Op::Concat { parts, axis } => {
                let out_shape = nodes[i].value.shape();
                let (outer, total, inner) = axis_extents(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].value.shape()[*axis];
                    if need(p) {
                        let mut dp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            dp.extend_from_slice(&g[src..src + len * inner]);
                        }
                        acc(p, dp);
                    }
                    offset += len;
                }
            }
            Op::Gather { table, ids } => {
                let d = nodes[*table].value.shape()[1];
                let mut dt = vec![0.0; nodes[*table].value.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                acc(*table, dt);
            }
            &Op::Softmax { a, axis } => {
                let y = nodes[i].value.values();
                let (outer, len, inner) = axis_extents(nodes[i].value.shape(), axis);
                let mut da = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + j;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            da[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                acc(a, da);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = nodes[*gain].value.numel();
                let gv = val(*gain);
                let rows = xhat.len() / d;
                if need(*gain) || need(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                            db[j] += g[r * d + j];
                        }
                    }
                    acc(*gain, dg);
                    acc(*bias, db);
                }
                if need(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            dx[r * d + j] = rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                    acc(*x, dx);
                }
            }
            &Op::Gelu { a } => {
                let da = g
                    .iter()
                    .zip(val(a))
                    .map(|(g, &x)| {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    })
                    .collect();
                acc(a, da);
            }
            &Op::Relu { a } => {
                acc(a, g.iter().zip(val(a)).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect());
            }
            &Op::Sum { a } => acc(a, vec![g[0]; nodes[a].value.numel()]),
            &Op::Mean { a } => {
                let n = nodes[a].value.numel();
                acc(a, vec![g[0] / n as f64; n]);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let r = nodes[*logits].value.shape()[1];
                let scale = g[0] / targets.len() as f64;
                let mut dz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (row, &t) in targets.iter().enumerate() {
                    dz[row * r + t] -= scale;
                }
                acc(*logits, dz);
            }
            Op::Dropout { a, mask } => acc(*a, g.iter().zip(mask).map(|(g, m)| g * m).collect()),
        }
    }
}

/// `c[m, n] (+)= op(a)[m, k] * op(b)[k, n]` with row-major operands.
/// With `trans_a` the buffer `a` holds `[k, m]`; with `trans_b`, `b` holds `[n, k]`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool, c: &mut [f64], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
