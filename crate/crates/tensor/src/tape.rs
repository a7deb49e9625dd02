//! Reverse-mode gradient tape.
//!
//! Every forward op appends one node holding its output value and enough
//! saved context to run its backward rule. Nodes are only ever appended, so
//! the node order is a topological order and `backward` is a single reverse
//! sweep. Leaf gradients accumulate across `backward` calls until
//! [`Tape::zero_grad`] is called.

use rand::Rng;

use crate::error::{shape_err, Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddScalar(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Vec<f64>),
    MaskedFill(Var, Vec<bool>),
    Relu(Var),
    Sum(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Transpose(Var),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad: usize,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// A single-threaded recording of tensor operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives gradients.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(TensorError::Contract(format!(
                "var {} is not on this tape",
                v.0
            )));
        }
        Ok(())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return shape_err(op, format!("{sa:?} vs {sb:?}"));
        }
        Ok(())
    }

    // ---- forward ops -------------------------------------------------------

    /// `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return shape_err("matmul", format!("[{m}x{k}] x [{k2}x{n}]"));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// Elementwise sum; `b` may also be a scalar, broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        if self.value(a).shape() == self.value(b).shape() {
            let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
            return self.push("add", value, Op::Add(a, b), &[a, b]);
        }
        if self.value(b).is_scalar() {
            let s = self.value(b).data()[0];
            let value = self.value(a).map(|x| x + s);
            return self.push("add", value, Op::AddScalar(a, b), &[a, b]);
        }
        if self.value(a).is_scalar() {
            return self.add(b, a);
        }
        shape_err(
            "add",
            format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product; `b` may also be a scalar, broadcast over `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        if self.value(a).shape() == self.value(b).shape() {
            let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
            return self.push("mul", value, Op::Mul(a, b), &[a, b]);
        }
        if self.value(b).is_scalar() {
            let s = self.value(b).data()[0];
            let value = self.value(a).map(|x| x * s);
            return self.push("mul", value, Op::MulScalar(a, b), &[a, b]);
        }
        if self.value(a).is_scalar() {
            return self.mul(b, a);
        }
        shape_err(
            "mul",
            format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
        )
    }

    /// Multiplies by a constant factor.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).map(|x| x * factor);
        self.push("scale", value, Op::Scale(a, factor), &[a])
    }

    /// Adds a same-shape constant tensor (no gradient flows into it).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        self.check(a)?;
        if self.value(a).shape() != c.shape() {
            return shape_err(
                "add_const",
                format!("{:?} vs {:?}", self.value(a).shape(), c.shape()),
            );
        }
        let value = zip_map(self.value(a), c, |x, y| x + y);
        self.push("add_const", value, Op::AddConst(a), &[a])
    }

    /// Multiplies elementwise by a same-shape constant tensor.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        self.check(a)?;
        if self.value(a).shape() != c.shape() {
            return shape_err(
                "mul_const",
                format!("{:?} vs {:?}", self.value(a).shape(), c.shape()),
            );
        }
        let value = zip_map(self.value(a), c, |x, y| x * y);
        self.push("mul_const", value, Op::MulConst(a, c.data().to_vec()), &[a])
    }

    /// Replaces entries where `keep` is false with `fill`.
    pub fn masked_fill(&mut self, a: Var, keep: &[bool], fill: f64) -> Result<Var> {
        self.check(a)?;
        if keep.len() != self.value(a).len() {
            return shape_err(
                "masked_fill",
                format!("mask of {} for {} values", keep.len(), self.value(a).len()),
            );
        }
        let src = self.value(a);
        let data = src
            .data()
            .iter()
            .zip(keep)
            .map(|(&x, &k)| if k { x } else { fill })
            .collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.push("masked_fill", value, Op::MaskedFill(a, keep.to_vec()), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push("relu", value, Op::Relu(a), &[a])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a), &[a])
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = self.reduce_axis(a, axis, 1.0)?;
        self.push("sum_axis", value, Op::SumAxis(a, axis), &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check(a)?;
        let n = *self.value(a).shape().get(axis).unwrap_or(&1);
        let value = self.reduce_axis(a, axis, 1.0 / n as f64)?;
        self.push("mean_axis", value, Op::MeanAxis(a, axis), &[a])
    }

    fn reduce_axis(&self, a: Var, axis: usize, factor: f64) -> Result<Tensor> {
        self.check(a)?;
        let x = self.value(a);
        let (outer, n, inner) = x.axis_split(axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x.data()[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= factor);
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        Tensor::new(shape, out)
    }

    /// Transpose of a matrix.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let (r, c) = x.dims2()?;
        let value = Tensor::matrix(c, r, transpose_raw(x.data(), r, c))?;
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat", "no operands");
        };
        for &p in parts {
            self.check(p)?;
        }
        let base = self.value(first).shape().to_vec();
        if axis >= base.len() {
            return shape_err("concat", format!("axis {axis} for shape {base:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let x = self.value(p);
                let chunk = x.shape()[axis] * inner;
                data.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        self.push("concat", value, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let (outer, n, inner) = x.axis_split(axis)?;
        if len == 0 || start + len > n {
            return shape_err("narrow", format!("[{start}, {}) of axis size {n}", start + len));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            data.extend_from_slice(&x.data()[from..from + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        self.push("narrow", value, Op::Narrow { x: a, axis, start }, &[a])
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let (outer, n, inner) = x.axis_split(axis)?;
        let mut out = x.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| out[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (out[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[idx(j)] /= z;
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax(a, axis), &[a])
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let (outer, n, inner) = x.axis_split(axis)?;
        let mut out = x.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| out[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..n).map(|j| (out[idx(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..n {
                    out[idx(j)] -= lse;
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.push("log_softmax", value, Op::LogSoftmax(a, axis), &[a])
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        self.check(gain)?;
        self.check(bias)?;
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap_or(&1);
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return shape_err(
                "layer_norm",
                format!(
                    "gain/bias of {}/{} for width {d}",
                    self.value(gain).len(),
                    self.value(bias).len()
                ),
            );
        }
        let rows = xv.len() / d;
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        self.push("layer_norm", value, op, &[x, gain, bias])
    }

    /// Gathers rows of a `[V×d]` table; backward scatter-adds.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check(table)?;
        let t = self.value(table);
        let (v, d) = t.dims2()?;
        if ids.is_empty() {
            return shape_err("gather_rows", "empty id list");
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index { index: id, size: v });
            }
            data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::matrix(ids.len(), d, data)?;
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        self.push("gather_rows", value, op, &[table])
    }

    /// Picks `x[t, idx[t]]` from each row of a matrix, giving a vector.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        if idx.len() != r {
            return shape_err("pick", format!("{} indices for {r} rows", idx.len()));
        }
        let mut data = Vec::with_capacity(r);
        for (t, &j) in idx.iter().enumerate() {
            if j >= c {
                return Err(TensorError::Index { index: j, size: c });
            }
            data.push(xv.data()[t * c + j]);
        }
        let value = Tensor::vector(data)?;
        let op = Op::Pick {
            x,
            idx: idx.to_vec(),
        };
        self.push("pick", value, op, &[x])
    }

    /// Mean negative log-likelihood of `targets` over rows whose target is
    /// not `pad`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad: usize) -> Result<Var> {
        self.check(logits)?;
        let lv = self.value(logits);
        let (t_len, v) = lv.dims2()?;
        if targets.len() != t_len {
            return shape_err(
                "cross_entropy",
                format!("{} targets for {t_len} rows", targets.len()),
            );
        }
        let mut probs = vec![0.0; t_len * v];
        let mut total = 0.0;
        let mut count = 0;
        for (t, &target) in targets.iter().enumerate() {
            if target >= v {
                return Err(TensorError::Index {
                    index: target,
                    size: v,
                });
            }
            let row = &lv.data()[t * v..(t + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            for j in 0..v {
                probs[t * v + j] = (row[j] - max).exp() / z;
            }
            if target != pad {
                total -= row[target] - max - z.ln();
                count += 1;
            }
        }
        if count == 0 {
            return Err(TensorError::Degenerate(
                "every target position is padding".into(),
            ));
        }
        let value = Tensor::scalar(total / count as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            pad,
            probs,
            count,
        };
        self.push("cross_entropy", value, op, &[logits])
    }

    /// Inverted dropout. In eval mode, or with `rate == 0`, returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        self.check(x)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Parameter(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.value(x).shape().to_vec();
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mask = Tensor::new(shape, mask)?;
        self.mul_const(x, &mask)
    }

    /// Applies a named primitive.
    ///
    /// Known kinds: `add`, `sub`, `mul`, `relu`, `sum`, `transpose`,
    /// `softmax` (last axis), `log_softmax` (last axis), `matmul`, `concat0`.
    pub fn apply(&mut self, kind: &str, operands: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if operands.len() != n {
                return Err(TensorError::Contract(format!(
                    "`{kind}` takes {n} operands, got {}",
                    operands.len()
                )));
            }
            Ok(())
        };
        match kind {
            "add" | "sub" | "mul" | "matmul" => {
                arity(2)?;
                let (a, b) = (operands[0], operands[1]);
                match kind {
                    "add" => self.add(a, b),
                    "sub" => self.sub(a, b),
                    "mul" => self.mul(a, b),
                    _ => self.matmul(a, b),
                }
            }
            "relu" | "sum" | "transpose" | "softmax" | "log_softmax" => {
                arity(1)?;
                let a = operands[0];
                let last = self.value(a).rank().saturating_sub(1);
                match kind {
                    "relu" => self.relu(a),
                    "sum" => self.sum(a),
                    "transpose" => self.transpose(a),
                    "softmax" => self.softmax(a, last),
                    _ => self.log_softmax(a, last),
                }
            }
            "concat0" => self.concat(operands, 0),
            other => Err(TensorError::UnknownOp(other.to_string())),
        }
    }

    // ---- backward ----------------------------------------------------------

    /// Back-propagates from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward from non-scalar of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((i, g));
                continue;
            }
            self.backward_node(i, &g, &mut grads)?;
        }
        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            let g = Tensor::new(node.value.shape().to_vec(), g)?;
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g)?,
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contribution) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.nodes[a.0].requires_grad {
                    // dA = G · Bᵀ
                    let bt = transpose_raw(bv, k, n);
                    self.accumulate(grads, *a, matmul_raw(g, &bt, m, n, k));
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · G
                    let at = transpose_raw(av, m, k);
                    self.accumulate(grads, *b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::AddScalar(a, s) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *s, vec![g.iter().sum()]);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                self.accumulate(grads, *b, g.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).data()[0];
                let av = self.value(*a).data();
                self.accumulate(grads, *a, g.iter().map(|g| g * sv).collect());
                let ds = g.iter().zip(av).map(|(g, x)| g * x).sum();
                self.accumulate(grads, *s, vec![ds]);
            }
            Op::Scale(a, factor) => {
                self.accumulate(grads, *a, g.iter().map(|g| g * factor).collect());
            }
            Op::AddConst(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::MulConst(a, c) => {
                self.accumulate(grads, *a, g.iter().zip(c).map(|(g, c)| g * c).collect());
            }
            Op::MaskedFill(a, keep) => {
                let d = g
                    .iter()
                    .zip(keep)
                    .map(|(&g, &k)| if k { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(av)
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let x = self.value(*a);
                let (outer, n, inner) = x.axis_split(*axis)?;
                let factor = match self.nodes[i].op {
                    Op::MeanAxis(..) => 1.0 / n as f64,
                    _ => 1.0,
                };
                let mut d = vec![0.0; x.len()];
                for o in 0..outer {
                    for j in 0..n {
                        for k in 0..inner {
                            d[(o * n + j) * inner + k] = g[o * inner + k] * factor;
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2()?;
                // g is [c×r]
                self.accumulate(grads, *a, transpose_raw(g, c, r));
            }
            Op::Concat(parts, axis) => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).shape()[*axis];
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let from = (o * total + offset) * inner;
                        d.extend_from_slice(&g[from..from + len * inner]);
                    }
                    self.accumulate(grads, p, d);
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xv = self.value(*x);
                let (outer, n, inner) = xv.axis_split(*axis)?;
                let len = out.shape()[*axis];
                let mut d = vec![0.0; xv.len()];
                for o in 0..outer {
                    let to = (o * n + start) * inner;
                    let from = o * len * inner;
                    d[to..to + len * inner].copy_from_slice(&g[from..from + len * inner]);
                }
                self.accumulate(grads, *x, d);
            }
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = out.axis_split(*axis)?;
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + k;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            d[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, n, inner) = out.axis_split(*axis)?;
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + k;
                        let gsum: f64 = (0..n).map(|j| g[idx(j)]).sum();
                        for j in 0..n {
                            d[idx(j)] = g[idx(j)] - y[idx(j)].exp() * gsum;
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                let rows = xhat.len() / d;
                let mut dx = vec![0.0; xhat.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let span = r * d..(r + 1) * d;
                    let (gr, hr) = (&g[span.clone()], &xhat[span]);
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                    }
                    let scale = inv_std[r] / d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        dx[r * d + j] = scale * (d as f64 * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain);
                self.accumulate(grads, *bias, dbias);
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let (_, d) = t.dims2()?;
                let mut dt = vec![0.0; t.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::Pick { x, idx } => {
                let xv = self.value(*x);
                let (_, c) = xv.dims2()?;
                let mut d = vec![0.0; xv.len()];
                for (t, &j) in idx.iter().enumerate() {
                    d[t * c + j] = g[t];
                }
                self.accumulate(grads, *x, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad,
                probs,
                count,
            } => {
                let v = probs.len() / targets.len();
                let scale = g[0] / *count as f64;
                let mut d = vec![0.0; probs.len()];
                for (t, &target) in targets.iter().enumerate() {
                    if target == *pad {
                        continue;
                    }
                    for j in 0..v {
                        d[t * v + j] = probs[t * v + j] * scale;
                    }
                    d[t * v + target] -= scale;
                }
                self.accumulate(grads, *logits, d);
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
