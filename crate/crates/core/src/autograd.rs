//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node on a
//! linear tape; [`Graph::backward`] walks the tape in reverse. Parameters live
//! in a [`ParamStore`] outside the graph and are bound into it by id, so a
//! graph is cheap to build per mini-batch and can be confined to one thread
//! while the store is shared read-only.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{self, s, Scalar, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmaxMasked { x: Var, keep: Vec<bool> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Mean { x: Var, axis: usize },
    Max { x: Var, arg: Vec<usize> },
    Reshape(Var),
    Dropout { x: Var, mask: Vec<T> },
    L2NormalizeRows { x: Var, norms: Vec<T> },
    LogClamp { x: Var, min: T },
    Sum(Var),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    bound: HashMap<ParamId, Var>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Graph<T> {
    /// Graph in evaluation mode: dropout is the identity.
    pub fn new() -> Self {
        Self::with_mode(false, 0)
    }

    /// Graph in training mode; dropout masks are drawn from a generator
    /// seeded with `seed`.
    pub fn training(seed: u64) -> Self {
        Self::with_mode(true, seed)
    }

    fn with_mode(training: bool, seed: u64) -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), bound: HashMap::new(), training, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    /// A tensor that never accumulates gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient on backward.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter. Frozen parameters are bound as constants.
    /// Binding the same id twice returns the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.bound.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_shape(self.nodes[v.0].value.shape().clone(), g.clone()))
    }

    fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    // ---- operations ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = tensor::transpose(self.value(a))?;
        Ok(self.derived(out, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("add: {} vs {}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_shape(va.shape().clone(), data);
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a rank-1 `bias` to every row (last axis) of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = *vx.dims().last().ok_or_else(|| Error::Shape("add_bias on scalar".into()))?;
        if vb.dims() != [c] {
            return Err(Error::Shape(format!("add_bias: bias {} does not match rows of {}", vb.shape(), vx.shape())));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let out = Tensor::from_shape(vx.shape().clone(), data);
        Ok(self.derived(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("mul: {} vs {}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_shape(va.shape().clone(), data);
        Ok(self.derived(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.derived(out, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        self.derived(out, Op::Relu(a), &[a])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = tensor::softmax(self.value(x), axis)?;
        Ok(self.derived(out, Op::Softmax { x, axis }, &[x]))
    }

    /// Row-wise log-softmax of a matrix over the entries where `keep` is
    /// true. Excluded entries output 0 and receive no gradient.
    pub fn log_softmax_masked(&mut self, x: Var, keep: Vec<bool>) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = vx.matrix_dims()?;
        if keep.len() != r * c {
            return Err(Error::Shape(format!("log_softmax mask of {} entries for {}", keep.len(), vx.shape())));
        }
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = vx.row(i);
            let kept = || (0..c).filter(|&j| keep[i * c + j]);
            let Some(max) = kept().map(|j| row[j]).reduce(T::max) else { continue };
            let lse = max + kept().map(|j| (row[j] - max).exp()).sum::<T>().ln();
            for j in kept() {
                out[i * c + j] = row[j] - lse;
            }
        }
        let out = Tensor::from_shape(vx.shape().clone(), out);
        Ok(self.derived(out, Op::LogSoftmaxMasked { x, keep }, &[x]))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let n = *vx.dims().last().ok_or_else(|| Error::Shape("layer_norm on scalar".into()))?;
        let (vg, vb) = (self.value(gain), self.value(bias));
        if vg.dims() != [n] || vb.dims() != [n] {
            return Err(Error::Shape(format!(
                "layer_norm: gain {} / bias {} do not match last axis of {}",
                vg.shape(),
                vb.shape(),
                vx.shape()
            )));
        }
        let nt = s::<T>(n as f64);
        let mut xhat = Vec::with_capacity(vx.numel());
        let mut inv_std = Vec::with_capacity(vx.numel() / n);
        let mut out = Vec::with_capacity(vx.numel());
        for row in vx.data().chunks(n) {
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let is = T::one() / (var + s(eps)).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * vg.data()[j] + vb.data()[j]);
            }
        }
        let out = Tensor::from_shape(vx.shape().clone(), out);
        Ok(self.derived(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let rank = self.value(*first).rank();
        if axis >= rank {
            return Err(Error::Shape(format!("concat axis {axis} out of range for rank {rank}")));
        }
        let mut dims = self.dims(*first).to_vec();
        dims[axis] = 0;
        for p in parts {
            let d = self.dims(*p);
            let compatible = d.len() == rank && (0..rank).all(|i| i == axis || d[i] == dims[i]);
            if !compatible {
                return Err(Error::Shape(format!(
                    "concat along axis {axis}: {} incompatible with {}",
                    self.value(*p).shape(),
                    self.value(*first).shape()
                )));
            }
            dims[axis] += d[axis];
        }
        let outer: usize = dims[..axis].iter().product();
        let mut data = Vec::with_capacity(dims.iter().product());
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let block: usize = v.dims()[axis..].iter().product();
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let out = Tensor::new(&dims, data)?;
        Ok(self.derived(out, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() || len == 0 || start + len > vx.dims()[axis] {
            return Err(Error::Shape(format!("narrow({axis}, {start}, {len}) out of range for {}", vx.shape())));
        }
        let (outer, alen, inner) = vx.shape().split_at_axis(axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            data.extend_from_slice(&vx.data()[base..base + len * inner]);
        }
        let mut dims = vx.dims().to_vec();
        dims[axis] = len;
        let out = Tensor::new(&dims, data)?;
        Ok(self.derived(out, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = tensor::mean_over_axis(self.value(x), axis)?;
        Ok(self.derived(out, Op::Mean { x, axis }, &[x]))
    }

    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() {
            return Err(Error::Shape(format!("max axis {axis} out of range for {}", vx.shape())));
        }
        let (outer, len, inner) = vx.shape().split_at_axis(axis);
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * len) * inner + i;
                for a in 1..len {
                    let idx = (o * len + a) * inner + i;
                    if vx.data()[idx] > vx.data()[best] {
                        best = idx;
                    }
                }
                out.push(vx.data()[best]);
                arg.push(best);
            }
        }
        let out = Tensor::from_shape(vx.shape().without_axis(axis), out);
        Ok(self.derived(out, Op::Max { x, arg }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(dims)?;
        Ok(self.derived(out, Op::Reshape(x), &[x]))
    }

    /// Inverted dropout with the graph's generator. Identity in evaluation
    /// mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.training || p == 0.0 {
            return x;
        }
        let n = self.value(x).numel();
        let mask = dropout_mask(&mut self.rng, n, p);
        self.apply_mask(x, mask)
    }

    /// Inverted dropout with a mask drawn from its own generator seeded with
    /// `seed`, independent of the graph's mode.
    pub fn dropout_seeded(&mut self, x: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = dropout_mask(&mut rng, self.value(x).numel(), p);
        Ok(self.apply_mask(x, mask))
    }

    fn apply_mask(&mut self, x: Var, mask: Vec<T>) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::from_shape(vx.shape().clone(), data);
        self.derived(out, Op::Dropout { x, mask }, &[x])
    }

    /// Scales each row of a matrix to unit L2 norm (norm floored at 1e-12).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (_, c) = vx.matrix_dims()?;
        let mut norms = Vec::new();
        let mut data = Vec::with_capacity(vx.numel());
        for row in vx.data().chunks(c) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(s(1e-12));
            norms.push(n);
            data.extend(row.iter().map(|&v| v / n));
        }
        let out = Tensor::from_shape(vx.shape().clone(), data);
        Ok(self.derived(out, Op::L2NormalizeRows { x, norms }, &[x]))
    }

    /// `ln(max(x, min))` elementwise; clamped entries get zero gradient.
    pub fn log_clamped(&mut self, x: Var, min: f64) -> Var {
        let min = s::<T>(min);
        let out = self.value(x).map(|v| v.max(min).ln());
        self.derived(out, Op::LogClamp { x, min }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.derived(out, Op::Sum(x), &[x])
    }

    // ---- backward --------------------------------------------------------

    /// Back-propagates from a scalar loss. Gradients on this graph are
    /// overwritten; use [`Graph::accumulate_into`] to add them to a store.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let v = self.value(loss);
        if v.numel() != 1 {
            return Err(Error::Contract(format!("backward from non-scalar loss of shape {}", v.shape())));
        }
        if !v.all_finite() {
            return Err(Error::Contract("backward from non-finite loss".into()));
        }
        self.backward_with(loss, Tensor::full(v.dims(), T::one()))
    }

    /// Back-propagates an explicit upstream gradient for `output`.
    pub fn backward_with(&mut self, output: Var, upstream: Tensor<T>) -> Result<()> {
        if upstream.shape() != self.value(output).shape() {
            return Err(Error::Shape(format!("upstream gradient {} for output {}", upstream.shape(), self.value(output).shape())));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[output.0] = Some(upstream.into_data());
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else { continue };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, delta: impl IntoIterator<Item = T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        for (s, d) in slot.iter_mut().zip(delta) {
            *s += d;
        }
    }

    fn acc_at(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        f(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]));
    }

    fn propagate(&mut self, idx: usize, g: &[T]) {
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        self.propagate_op(idx, &op, g);
        self.nodes[idx].op = op;
    }

    // Each arm computes parent deltas from read-only views before
    // accumulating, so the borrow of `self.nodes` ends first.
    fn propagate_op(&mut self, idx: usize, op: &Op<T>, g: &[T]) {
        match op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (va.dims()[0], va.dims()[1]);
                let n = vb.dims()[1];
                let ga = self.nodes[a.0].requires_grad.then(|| tensor::matmul_nt_kernel(g, vb.data(), m, n, k));
                let gb = self.nodes[b.0].requires_grad.then(|| tensor::matmul_tn_kernel(va.data(), g, m, k, n));
                if let Some(ga) = ga {
                    self.acc(a, ga);
                }
                if let Some(gb) = gb {
                    self.acc(b, gb);
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = (self.nodes[a.0].value.dims()[0], self.nodes[a.0].value.dims()[1]);
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                self.acc(a, d);
            }
            &Op::Add(a, b) => {
                self.acc(a, g.iter().copied());
                self.acc(b, g.iter().copied());
            }
            &Op::AddBias(x, b) => {
                let c = self.nodes[b.0].value.numel();
                let mut db = vec![T::zero(); c];
                for row in g.chunks(c) {
                    for (o, &v) in db.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                self.acc(x, g.iter().copied());
                self.acc(b, db);
            }
            &Op::Mul(a, b) => {
                let da: Vec<T> = g.iter().zip(self.nodes[b.0].value.data()).map(|(&g, &y)| g * y).collect();
                let db: Vec<T> = g.iter().zip(self.nodes[a.0].value.data()).map(|(&g, &x)| g * x).collect();
                self.acc(a, da);
                self.acc(b, db);
            }
            &Op::Scale(a, c) => self.acc(a, g.iter().map(|&v| v * c).collect::<Vec<_>>()),
            &Op::Relu(a) => {
                let d: Vec<T> =
                    g.iter().zip(self.nodes[a.0].value.data()).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }).collect();
                self.acc(a, d);
            }
            &Op::Softmax { x, axis } => {
                let y = &self.nodes[idx].value;
                let (outer, len, inner) = y.shape().split_at_axis(axis);
                let mut d = vec![T::zero(); y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot: T = (0..len).map(|a| g[at(a)] * y.data()[at(a)]).sum();
                        for a in 0..len {
                            d[at(a)] = y.data()[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
                self.acc(x, d);
            }
            &Op::LogSoftmaxMasked { x, ref keep } => {
                let y = &self.nodes[idx].value;
                let c = y.dims()[1];
                let mut d = vec![T::zero(); y.numel()];
                for (i, (grow, yrow)) in g.chunks(c).zip(y.data().chunks(c)).enumerate() {
                    let kept = |j: &usize| keep[i * c + j];
                    let gsum: T = (0..c).filter(kept).map(|j| grow[j]).sum();
                    for j in (0..c).filter(kept) {
                        d[i * c + j] = grow[j] - yrow[j].exp() * gsum;
                    }
                }
                self.acc(x, d);
            }
            &Op::LayerNorm { x, gain, bias, ref xhat, ref inv_std } => {
                let vg = self.nodes[gain.0].value.data();
                let n = vg.len();
                let nt = s::<T>(n as f64);
                let mut dgain = vec![T::zero(); n];
                let mut dbias = vec![T::zero(); n];
                let mut dx = vec![T::zero(); g.len()];
                for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for j in 0..n {
                        dgain[j] += grow[j] * hrow[j];
                        dbias[j] += grow[j];
                        let dh = grow[j] * vg[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hrow[j];
                    }
                    let k = inv_std[r] / nt;
                    for j in 0..n {
                        let dh = grow[j] * vg[j];
                        dx[r * n + j] = k * (nt * dh - sum_dh - hrow[j] * sum_dh_h);
                    }
                }
                self.acc(x, dx);
                self.acc(gain, dgain);
                self.acc(bias, dbias);
            }
            &Op::Concat { ref parts, axis } => {
                let out_dims = self.nodes[idx].value.dims().to_vec();
                let outer: usize = out_dims[..axis].iter().product();
                let out_block: usize = out_dims[axis..].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let block: usize = self.nodes[p.0].value.dims()[axis..].iter().product();
                    let mut d = Vec::with_capacity(outer * block);
                    for o in 0..outer {
                        let base = o * out_block + offset;
                        d.extend_from_slice(&g[base..base + block]);
                    }
                    self.acc(p, d);
                    offset += block;
                }
            }
            &Op::Narrow { x, axis, start } => {
                let (outer, alen, inner) = self.nodes[x.0].value.shape().split_at_axis(axis);
                let len = self.nodes[idx].value.dims()[axis];
                self.acc_at(x, |slot| {
                    for o in 0..outer {
                        let base = (o * alen + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, &v) in slot[base..base + len * inner].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                });
            }
            &Op::Mean { x, axis } => {
                let (outer, len, inner) = self.nodes[x.0].value.shape().split_at_axis(axis);
                let inv = T::one() / s::<T>(len as f64);
                self.acc_at(x, |slot| {
                    for o in 0..outer {
                        for a in 0..len {
                            for i in 0..inner {
                                slot[(o * len + a) * inner + i] += g[o * inner + i] * inv;
                            }
                        }
                    }
                });
            }
            &Op::Max { x, ref arg } => {
                self.acc_at(x, |slot| {
                    for (k, &a) in arg.iter().enumerate() {
                        slot[a] += g[k];
                    }
                });
            }
            &Op::Reshape(x) => self.acc(x, g.iter().copied()),
            &Op::Dropout { x, ref mask } => {
                let d: Vec<T> = g.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                self.acc(x, d);
            }
            &Op::L2NormalizeRows { x, ref norms } => {
                let y = &self.nodes[idx].value;
                let c = y.dims()[1];
                let mut d = Vec::with_capacity(g.len());
                for ((grow, yrow), &n) in g.chunks(c).zip(y.data().chunks(c)).zip(norms) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    d.extend(grow.iter().zip(yrow).map(|(&gv, &yv)| (gv - yv * dot) / n));
                }
                self.acc(x, d);
            }
            &Op::LogClamp { x, min } => {
                let d: Vec<T> =
                    g.iter().zip(self.nodes[x.0].value.data()).map(|(&g, &v)| if v > min { g / v } else { T::zero() }).collect();
                self.acc(x, d);
            }
            &Op::Sum(x) => {
                let n = self.nodes[x.0].value.numel();
                let gv = g[0];
                self.acc(x, std::iter::repeat_n(gv, n));
            }
        }
    }

    /// Adds this graph's parameter gradients into `store` (accumulating).
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (&id, &v) in &self.bound {
            if let Some(Some(g)) = self.grads.get(v.0) {
                let shape: Shape = self.nodes[v.0].value.shape().clone();
                store.accumulate_grad(id, &Tensor::from_shape(shape, g.clone()));
            }
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Inverted-dropout multipliers: 0 with probability `p`, else `1 / (1 - p)`.
pub fn dropout_mask<T: Scalar>(rng: &mut impl Rng, n: usize, p: f64) -> Vec<T> {
    let keep = s::<T>(1.0 / (1.0 - p));
    (0..n).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect()
}
