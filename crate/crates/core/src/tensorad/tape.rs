use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernels::{self, broadcast_plan, broadcast_walk, gemm, reduce_to, split_axis};
use super::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize, sa: Vec<usize>, sb: Vec<usize> },
    Mul { a: usize, b: usize, sa: Vec<usize>, sb: Vec<usize> },
    Scale { a: usize, c: T },
    Reshape { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    Slice { a: usize, axis: usize, start: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Softmax { a: usize, axis: usize },
    LayerNorm { x: usize, gain: Option<usize>, bias: Option<usize>, xhat: Vec<T>, rstd: Vec<T> },
    Silu { a: usize },
    Embedding { table: usize, ids: Vec<usize> },
    Mse { a: usize, b: usize },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Silu { .. } => "silu",
            Op::Embedding { .. } => "embedding",
            Op::Mse { .. } => "mse",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records primitives in evaluation order for reverse-mode differentiation.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of every grad-requiring leaf after [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf. Leaves the loss does not depend on get zeros.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[usize]) -> Result<Var> {
        let node = self.nodes.len();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: op.name(), node });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(node))
    }

    /// Matrix product over the last two axes. `b` is either a single matrix
    /// shared across the batch or has the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("operands need rank >= 2, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dimensions differ: {sa:?} x {sb:?}")));
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); numel(&out_shape)];
        if sb.len() == 2 {
            let rows = numel(&sa[..sa.len() - 1]);
            gemm(rows, k, n, av, false, bv, false, &mut out, false);
        } else {
            if sb[..sb.len() - 2] != sa[..sa.len() - 2] {
                return Err(Error::shape("matmul", format!("batch axes differ: {sa:?} x {sb:?}")));
            }
            let batch = numel(&sa[..sa.len() - 2]);
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        self.push(out_shape, out, Op::MatMul { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    /// Element-wise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out_shape, sa, sb) = self.plan("add", a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); numel(&out_shape)];
        broadcast_walk(&out_shape, &sa, &sb, |o, i, j| out[o] = av[i] + bv[j]);
        self.push(out_shape, out, Op::Add { a: a.0, b: b.0, sa, sb }, &[a.0, b.0])
    }

    /// Element-wise product with numpy-style broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out_shape, sa, sb) = self.plan("mul", a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); numel(&out_shape)];
        broadcast_walk(&out_shape, &sa, &sb, |o, i, j| out[o] = av[i] * bv[j]);
        self.push(out_shape, out, Op::Mul { a: a.0, b: b.0, sa, sb }, &[a.0, b.0])
    }

    fn plan(&self, op: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
        broadcast_plan(self.shape(a), self.shape(b)).ok_or_else(|| {
            Error::shape(op, format!("cannot broadcast {:?} with {:?}", self.shape(a), self.shape(b)))
        })
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let x = self.value(a);
        let out = x.data().iter().map(|&v| v * c).collect();
        self.push(x.shape().to_vec(), out, Op::Scale { a: a.0, c }, &[a.0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if numel(shape) != x.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", x.shape())));
        }
        let data = x.data().to_vec();
        self.push(shape.to_vec(), data, Op::Reshape { a: a.0 }, &[a.0])
    }

    /// Reorders axes so output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let mut seen = vec![false; x.rank()];
        if perm.len() != x.rank() || perm.iter().any(|&p| p >= x.rank() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} is not a permutation of {:?}", x.shape())));
        }
        let (shape, data) = kernels::permute(x.data(), x.shape(), perm);
        self.push(shape, data, Op::Permute { a: a.0, perm: perm.to_vec() }, &[a.0])
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a).narrow(axis, start, len)?;
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Slice { a: a.0, axis, start }, &[a.0])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|v| self.value(*v)).collect();
        let t = Tensor::cat(&values, axis)?;
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Concat { parts: ids.clone(), axis }, &ids)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(Error::shape("softmax", format!("axis {axis} out of range for {:?}", x.shape())));
        }
        let y = kernels::softmax(x.data(), x.shape(), axis);
        self.push(x.shape().to_vec(), y, Op::Softmax { a: a.0, axis }, &[a.0])
    }

    /// Normalizes over the last axis, then applies optional per-feature gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        for p in [gain, bias].into_iter().flatten() {
            if self.shape(p) != [d] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("affine shape {:?} does not match feature size {d}", self.shape(p)),
                ));
            }
        }
        let rows = if d == 0 { 0 } else { xv.len() / d };
        let eps = T::lit(eps);
        let dn = T::from_usize(d).unwrap_or_else(T::one);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let src = xv.data();
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let s = T::one() / (var + eps).sqrt();
            rstd[r] = s;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
        }
        let g = gain.map(|v| self.value(v).data());
        let b = bias.map(|v| self.value(v).data());
        let mut out = xhat.clone();
        for row in out.chunks_mut(d.max(1)) {
            for (j, o) in row.iter_mut().enumerate() {
                if let Some(g) = g {
                    *o *= g[j];
                }
                if let Some(b) = b {
                    *o += b[j];
                }
            }
        }
        let shape = xv.shape().to_vec();
        let mut inputs = vec![x.0];
        inputs.extend(gain.map(|v| v.0));
        inputs.extend(bias.map(|v| v.0));
        let op = Op::LayerNorm {
            x: x.0,
            gain: gain.map(|v| v.0),
            bias: bias.map(|v| v.0),
            xhat,
            rstd,
        };
        self.push(shape, out, op, &inputs)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = x.data().iter().map(|&v| v * kernels::sigmoid(v)).collect();
        self.push(x.shape().to_vec(), out, Op::Silu { a: a.0 }, &[a.0])
    }

    /// Rows of a `[vocab, d]` table, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("embedding", format!("table must be 2-D, got {:?}", t.shape())));
        }
        let (vocab, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::shape("embedding", format!("id {bad} outside vocabulary of {vocab}")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let op = Op::Embedding {
            table: table.0,
            ids: ids.to_vec(),
        };
        self.push(vec![ids.len(), d], out, op, &[table.0])
    }

    /// Mean squared difference, as a rank-0 tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("mse", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        if x.is_empty() {
            return Err(Error::shape("mse", "empty operands"));
        }
        let n = T::from_usize(x.len()).unwrap_or_else(T::one);
        let s = kernels::compensated_sum(x.data().iter().zip(y.data()).map(|(&p, &q)| (p - q) * (p - q))) / n;
        self.push(Vec::new(), vec![s], Op::Mse { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
        }
        let out = self
            .nodes
            .iter()
            .enumerate()
            .map(|(id, n)| {
                if !(n.requires_grad && matches!(n.op, Op::Leaf)) {
                    return None;
                }
                let shape = n.value.shape().to_vec();
                let data = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![T::zero(); n.value.len()]);
                Some(Tensor::new(shape, data).expect("gradient shaped like its value"))
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let wants = |i: usize| self.nodes[i].requires_grad;
        let mut acc = |i: usize, d: Vec<T>| match &mut grads[i] {
            Some(v) => v.iter_mut().zip(d).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(d),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (sa, sb) = (av.shape(), bv.shape());
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                if sb.len() == 2 {
                    let rows = numel(&sa[..sa.len() - 1]);
                    if wants(*a) {
                        let mut da = vec![T::zero(); av.len()];
                        gemm(rows, n, k, g, false, bv.data(), true, &mut da, false);
                        acc(*a, da);
                    }
                    if wants(*b) {
                        let mut db = vec![T::zero(); bv.len()];
                        gemm(k, rows, n, av.data(), true, g, false, &mut db, false);
                        acc(*b, db);
                    }
                } else {
                    let batch = numel(&sa[..sa.len() - 2]);
                    if wants(*a) {
                        let mut da = vec![T::zero(); av.len()];
                        for i in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..(i + 1) * m * n],
                                false,
                                &bv.data()[i * k * n..(i + 1) * k * n],
                                true,
                                &mut da[i * m * k..(i + 1) * m * k],
                                false,
                            );
                        }
                        acc(*a, da);
                    }
                    if wants(*b) {
                        let mut db = vec![T::zero(); bv.len()];
                        for i in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &av.data()[i * m * k..(i + 1) * m * k],
                                true,
                                &g[i * m * n..(i + 1) * m * n],
                                false,
                                &mut db[i * k * n..(i + 1) * k * n],
                                false,
                            );
                        }
                        acc(*b, db);
                    }
                }
            }
            Op::Add { a, b, sa, sb } => {
                let out_shape = node.value.shape();
                if wants(*a) {
                    acc(*a, reduce_to(out_shape, sa, g, self.nodes[*a].value.len()));
                }
                if wants(*b) {
                    acc(*b, reduce_to(out_shape, sb, g, self.nodes[*b].value.len()));
                }
            }
            Op::Mul { a, b, sa, sb } => {
                let out_shape = node.value.shape();
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if wants(*a) {
                    let mut da = vec![T::zero(); av.len()];
                    broadcast_walk(out_shape, sa, sb, |o, i, j| da[i] += g[o] * bv[j]);
                    acc(*a, da);
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); bv.len()];
                    broadcast_walk(out_shape, sa, sb, |o, i, j| db[j] += g[o] * av[i]);
                    acc(*b, db);
                }
            }
            Op::Scale { a, c } => acc(*a, g.iter().map(|&v| v * *c).collect()),
            Op::Reshape { a } => acc(*a, g.to_vec()),
            Op::Permute { a, perm } => {
                let inv = kernels::inverse_perm(perm);
                let (_, d) = kernels::permute(g, node.value.shape(), &inv);
                acc(*a, d);
            }
            Op::Slice { a, axis, start } => {
                let src = self.nodes[*a].value.shape();
                let (outer, full, inner) = split_axis(src, *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![T::zero(); numel(src)];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*a, d);
            }
            Op::Concat { parts, axis } => {
                let (outer, full, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.shape()[*axis];
                    if wants(p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let s = (o * full + offset) * inner;
                            d.extend_from_slice(&g[s..s + len * inner]);
                        }
                        acc(p, d);
                    }
                    offset += len;
                }
            }
            Op::Softmax { a, axis } => {
                let d = kernels::softmax_backward(node.value.data(), g, node.value.shape(), *axis);
                acc(*a, d);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = *node.value.shape().last().unwrap_or(&1);
                let dn = T::from_usize(d).unwrap_or_else(T::one);
                let gv = gain.map(|p| self.nodes[p].value.data());
                if let Some(p) = gain.filter(|&p| wants(p)) {
                    let mut dg = vec![T::zero(); d];
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                    acc(p, dg);
                }
                if let Some(p) = bias.filter(|&p| wants(p)) {
                    let mut db = vec![T::zero(); d];
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                    acc(p, db);
                }
                if wants(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, s) in rstd.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let dxh: Vec<T> = g[span.clone()]
                            .iter()
                            .enumerate()
                            .map(|(j, &v)| gv.map_or(v, |gw| v * gw[j]))
                            .collect();
                        let xr = &xhat[span.clone()];
                        let m1 = dxh.iter().copied().sum::<T>() / dn;
                        let m2 = dxh.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for (j, o) in dx[span].iter_mut().enumerate() {
                            *o = *s * (dxh[j] - m1 - xr[j] * m2);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Silu { a } => {
                let x = self.nodes[*a].value.data();
                let d = x
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        let s = kernels::sigmoid(v);
                        gv * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                acc(*a, d);
            }
            Op::Embedding { table, ids } => {
                let t = &self.nodes[*table].value;
                let d = t.shape()[1];
                let mut dt = vec![T::zero(); t.len()];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += g[r * d + j];
                    }
                }
                acc(*table, dt);
            }
            Op::Mse { a, b } => {
                let (x, y) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                let n = T::from_usize(x.len()).unwrap_or_else(T::one);
                let c = g[0] * T::lit(2.0) / n;
                let diff: Vec<T> = x.iter().zip(y).map(|(&p, &q)| (p - q) * c).collect();
                if wants(*b) {
                    acc(*b, diff.iter().map(|&v| -v).collect());
                }
                if wants(*a) {
                    acc(*a, diff);
                }
            }
        }
    }
}

/// Conveniences built only from the primitives above.
impl<T: Scalar> Tape<T> {
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -T::one())?;
        self.add(a, nb)
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let row = self.reshape(a, &[1, n])?;
        let ones = self.constant(Tensor::ones(&[n, 1]));
        let s = self.matmul(row, ones)?;
        self.reshape(s, &[])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::from_usize(n.max(1)).unwrap_or_else(T::one))
    }

    pub fn transpose(&mut self, a: Var, i: usize, j: usize) -> Result<Var> {
        let mut perm: Vec<usize> = (0..self.value(a).rank()).collect();
        if i >= perm.len() || j >= perm.len() {
            return Err(Error::shape("transpose", format!("axes {i},{j} out of range")));
        }
        perm.swap(i, j);
        self.permute(a, &perm)
    }

    /// `x w + b` with `w: [in, out]` and optional `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut r = rng();
        let a = Tensor::<f64>::randn(&[5, 7], 1.0, &mut r);
        let b = Tensor::<f64>::randn(&[7, 3], 1.0, &mut r);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..7 {
                    s += a.at(&[i, k]) * b.at(&[k, j]);
                }
                assert!((tape.value(c).at(&[i, j]) - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_identity_and_shape_error() {
        let mut r = rng();
        let a = Tensor::<f64>::randn(&[4, 4], 1.0, &mut r);
        let mut tape = Tape::new();
        let va = tape.constant(a.clone());
        let i = tape.constant(Tensor::eye(4));
        let c = tape.matmul(va, i).unwrap();
        assert_eq!(tape.value(c), &a);

        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let y = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(x, y), Err(Error::Shape { .. })));
    }

    #[test]
    fn batched_matmul_matches_per_batch() {
        let mut r = rng();
        let a = Tensor::<f64>::randn(&[2, 3, 4, 5], 1.0, &mut r);
        let b = Tensor::<f64>::randn(&[2, 3, 5, 2], 1.0, &mut r);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 4, 2]);
        for p in 0..2 {
            for q in 0..3 {
                for i in 0..4 {
                    for j in 0..2 {
                        let s: f64 = (0..5).map(|k| a.at(&[p, q, i, k]) * b.at(&[p, q, k, j])).sum();
                        assert!((tape.value(c).at(&[p, q, i, j]) - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_properties() {
        let mut r = rng();
        let x = Tensor::<f64>::randn(&[3, 6], 2.0, &mut r);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = tape.softmax(v, 1).unwrap();
        for row in tape.value(y).data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let shifted = tape.constant(x.map(|v| v + 3.7));
        let ys = tape.softmax(shifted, 1).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(tape.value(ys).data()) {
            assert!((a - b).abs() <= 1e-12);
        }
        let c = tape.constant(Tensor::full(&[1, 5], 0.4));
        let yc = tape.softmax(c, 1).unwrap();
        assert!(tape.value(yc).data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn layer_norm_statistics() {
        let mut r = rng();
        // eps shrinks the variance to var / (var + eps), so rows need var >= 10 for 1e-6.
        let x = Tensor::<f64>::randn(&[4, 16], 10.0, &mut r).map(|v| v + 1.5);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = tape.layer_norm(v, None, None, 1e-5).unwrap();
        for row in tape.value(y).data().chunks(16) {
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6);
        }
        let flat = tape.constant(Tensor::full(&[2, 8], 5.0));
        let yf = tape.layer_norm(flat, None, None, 1e-5).unwrap();
        assert!(tape.value(yf).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_of_squares_gradient_is_exact() {
        let mut r = rng();
        let x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let sq = tape.mul(v, v).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        for (gi, xi) in g.get(v).unwrap().data().iter().zip(x.data()) {
            assert_eq!(*gi, 2.0 * xi);
        }
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let used = tape.param(Tensor::ones(&[3]));
        let unused = tape.param(Tensor::ones(&[2, 2]));
        let loss = tape.sum(used).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(unused).unwrap(), &Tensor::zeros(&[2, 2]));
        assert_eq!(g.get(used).unwrap(), &Tensor::ones(&[3]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(&[3]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_output_names_the_op() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[2], f64::MAX));
        let err = tape.scale(x, 10.0).unwrap_err();
        match err {
            Error::NonFinite { op, node } => {
                assert_eq!(op, "scale");
                assert_eq!(node, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn broadcasting_add_reduces_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::ones(&[2, 3, 4]));
        let b = tape.param(Tensor::ones(&[3, 1]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 4]);
        let loss = tape.sum(c).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(b).unwrap().data().iter().all(|&v| v == 8.0));
        assert!(g.get(a).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let mut tape = Tape::<f64>::new();
        let t = tape.param(Tensor::zeros(&[4, 2]));
        assert!(tape.embedding(t, &[1, 4]).is_err());
    }
}
