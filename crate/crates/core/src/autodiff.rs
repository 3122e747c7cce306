//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar result walks the record in reverse and
//! returns a [`Gradients`] table. A tape can be differentiated once; a second
//! call is rejected.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, VideoGeom};
use crate::tensor::{gemm, Element, Mat, Tensor};

/// Denominator floor for cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Sigmoid(usize),
    Relu(usize),
    MulChannel { x: usize, gain: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    TemporalDepthwise { x: usize, k: usize, geom: VideoGeom },
    TemporalFull { x: usize, w: usize, geom: VideoGeom, c_out: usize },
    GlobalAvgPool { x: usize, plane: usize },
    AvgPool2d { x: usize, planes: usize, h: usize, w: usize, factor: usize },
    Cosine { a: usize, b: usize, plane: usize, denom: Vec<T>, floored: Vec<bool> },
    Narrow { x: usize, outer: usize, axis_in: usize, inner: usize, start: usize, len: usize },
    Concat { inputs: Vec<(usize, usize)>, outer: usize, inner: usize },
    Pad { x: usize, outer: usize, axis_in: usize, inner: usize, before: usize, after: usize },
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    BatchNorm { x: usize, gamma: usize, beta: usize, geom: VideoGeom, xhat: Vec<T>, inv_std: Vec<T>, batch: bool },
    Dropout { x: usize, mask: Vec<T> },
    Linear { x: usize, w: usize, b: Option<usize>, rows: usize, k: usize, m: usize },
    MeanAxis { x: usize, outer: usize, axis_in: usize, inner: usize },
    MaxAxis { x: usize, outer: usize, axis_in: usize, inner: usize, argmax: Vec<usize> },
    Sum(usize),
    CrossEntropy { logits: usize, probs: Vec<T>, labels: Vec<usize>, classes: usize },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Record of operations for one forward pass.
pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Element> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

impl<T: Element> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Element> Copy for Var<'_, T> {}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn get_id(&self, id: usize) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of its shape if nothing reached it.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), consumed: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input. Gradients are reported only for leaves created with
    /// `requires_grad`.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn push(&self, value: Arc<Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn record(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'_, T> {
        let needs_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].needs_grad)
        };
        self.push(Arc::new(value), op, needs_grad)
    }

    fn value(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let shape0 = first.shape();
        if axis >= shape0.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range for {shape0:?}")));
        }
        let mut total = 0;
        let mut inputs = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            let compatible = s.len() == shape0.len()
                && s.iter().zip(&shape0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape(format!("concat along axis {axis}: {s:?} vs {shape0:?}")));
            }
            inputs.push((p.id, s[axis]));
            total += s[axis];
        }
        let outer: usize = shape0[..axis].iter().product();
        let inner: usize = shape0[axis + 1..].iter().product();
        let mut shape = shape0.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        for o in 0..outer {
            for (v, &(_, len)) in values.iter().zip(&inputs) {
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let ids: Vec<usize> = inputs.iter().map(|i| i.0).collect();
        Ok(self.record(Tensor::new(&shape, data)?, Op::Concat { inputs, outer, inner }, &ids))
    }

    /// Differentiates the scalar `loss` with respect to every leaf that
    /// requires a gradient.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Backward("loss was recorded on a different tape".into()));
        }
        if self.consumed.replace(true) {
            return Err(Error::Backward("tape has already been differentiated".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Backward(format!("loss must be a scalar, got shape {:?}", root.value.shape())));
        }
        if !root.value.all_finite() {
            return Err(Error::NonFinite { context: "loss passed to backward".into() });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), T::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut acc = Accumulator { nodes: &nodes, grads: &mut grads };
            propagate(&nodes, node, &g, &mut acc);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

struct Accumulator<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut Vec<Option<Tensor<T>>>,
}

impl<T: Element> Accumulator<'_, T> {
    fn wants(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    fn add(&mut self, id: usize, data: Vec<T>) {
        if !self.wants(id) {
            return;
        }
        match &mut self.grads[id] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(data) {
                    *e += d;
                }
            }
            slot @ None => {
                let shape = self.nodes[id].value.shape();
                *slot = Some(Tensor::new(shape, data).expect("gradient shape"));
            }
        }
    }
}

fn propagate<T: Element>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>, acc: &mut Accumulator<'_, T>) {
    let gd = g.data();
    let val = |id: usize| nodes[id].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc.add(*a, gd.to_vec());
            acc.add(*b, gd.to_vec());
        }
        Op::Sub(a, b) => {
            acc.add(*a, gd.to_vec());
            acc.add(*b, gd.iter().map(|&v| -v).collect());
        }
        Op::Mul(a, b) => {
            if acc.wants(*a) {
                acc.add(*a, gd.iter().zip(val(*b)).map(|(g, y)| *g * *y).collect());
            }
            if acc.wants(*b) {
                acc.add(*b, gd.iter().zip(val(*a)).map(|(g, x)| *g * *x).collect());
            }
        }
        Op::Scale(a, s) => acc.add(*a, gd.iter().map(|&v| v * *s).collect()),
        Op::AddScalar(a) => acc.add(*a, gd.to_vec()),
        Op::Sigmoid(a) => {
            let y = node.value.data();
            acc.add(*a, gd.iter().zip(y).map(|(g, s)| *g * *s * (T::one() - *s)).collect());
        }
        Op::Relu(a) => {
            let x = val(*a);
            acc.add(*a, gd.iter().zip(x).map(|(g, x)| if *x > T::zero() { *g } else { T::zero() }).collect());
        }
        Op::MulChannel { x, gain } => {
            let xs = val(*x);
            let gs = val(*gain);
            let plane = xs.len() / gs.len();
            if acc.wants(*x) {
                let mut dx = vec![T::zero(); xs.len()];
                for (i, (d, gp)) in dx.chunks_mut(plane).zip(gd.chunks(plane)).enumerate() {
                    let s = gs[i];
                    d.iter_mut().zip(gp).for_each(|(d, g)| *d = *g * s);
                }
                acc.add(*x, dx);
            }
            if acc.wants(*gain) {
                let dg = gd.chunks(plane).zip(xs.chunks(plane)).map(|(g, x)| dot(g, x)).collect();
                acc.add(*gain, dg);
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let need = (acc.wants(*x), acc.wants(*w), b.is_some_and(|b| acc.wants(b)));
            let grads = kernels::conv2d_backward(val(*x), val(*w), gd, geom, need);
            if let Some(dx) = grads.dx {
                acc.add(*x, dx);
            }
            if let Some(dw) = grads.dw {
                acc.add(*w, dw);
            }
            if let (Some(b), Some(db)) = (b, grads.db) {
                acc.add(*b, db);
            }
        }
        Op::TemporalDepthwise { x, k, geom } => {
            let (dx, dk) = kernels::temporal_depthwise_backward(val(*x), val(*k), gd, geom, acc.wants(*x), acc.wants(*k));
            if let Some(dx) = dx {
                acc.add(*x, dx);
            }
            if let Some(dk) = dk {
                acc.add(*k, dk);
            }
        }
        Op::TemporalFull { x, w, geom, c_out } => {
            let (dx, dw) =
                kernels::temporal_full_backward(val(*x), val(*w), gd, geom, *c_out, acc.wants(*x), acc.wants(*w));
            if let Some(dx) = dx {
                acc.add(*x, dx);
            }
            if let Some(dw) = dw {
                acc.add(*w, dw);
            }
        }
        Op::GlobalAvgPool { x, plane } => {
            let scale = T::one() / T::of(*plane as f64);
            let mut dx = Vec::with_capacity(gd.len() * plane);
            for g in gd {
                dx.extend(std::iter::repeat_n(*g * scale, *plane));
            }
            acc.add(*x, dx);
        }
        Op::AvgPool2d { x, planes, h, w, factor } => {
            acc.add(*x, kernels::avg_pool2d_backward(gd, *planes, *h, *w, *factor));
        }
        Op::Cosine { a, b, plane, denom, floored } => {
            let av = val(*a);
            let bv = val(*b);
            let cos = node.value.data();
            let mut da = acc.wants(*a).then(|| vec![T::zero(); av.len()]);
            let mut db = acc.wants(*b).then(|| vec![T::zero(); bv.len()]);
            for i in 0..cos.len() {
                let r = i * plane..(i + 1) * plane;
                let (pa, pb) = (&av[r.clone()], &bv[r.clone()]);
                let inv = T::one() / denom[i];
                let gi = gd[i];
                // d cos / da = b / D - cos * a / |a|^2 (D = |a||b| unless floored)
                let na = dot(pa, pa);
                let nb = dot(pb, pb);
                if let Some(da) = da.as_mut() {
                    let coef = if floored[i] || na == T::zero() { T::zero() } else { cos[i] / na };
                    for ((d, x), y) in da[r.clone()].iter_mut().zip(pa).zip(pb) {
                        *d = gi * (*y * inv - coef * *x);
                    }
                }
                if let Some(db) = db.as_mut() {
                    let coef = if floored[i] || nb == T::zero() { T::zero() } else { cos[i] / nb };
                    for ((d, x), y) in db[r.clone()].iter_mut().zip(pa).zip(pb) {
                        *d = gi * (*x * inv - coef * *y);
                    }
                }
            }
            if let Some(da) = da {
                acc.add(*a, da);
            }
            if let Some(db) = db {
                acc.add(*b, db);
            }
        }
        Op::Narrow { x, outer, axis_in, inner, start, len } => {
            let mut dx = vec![T::zero(); outer * axis_in * inner];
            for o in 0..*outer {
                let src = &gd[o * len * inner..(o + 1) * len * inner];
                dx[(o * axis_in + start) * inner..][..len * inner].copy_from_slice(src);
            }
            acc.add(*x, dx);
        }
        Op::Concat { inputs, outer, inner } => {
            let total: usize = inputs.iter().map(|i| i.1).sum();
            let mut offset = 0;
            for &(id, len) in inputs {
                if acc.wants(id) {
                    let mut dx = Vec::with_capacity(outer * len * inner);
                    for o in 0..*outer {
                        dx.extend_from_slice(&gd[(o * total + offset) * inner..][..len * inner]);
                    }
                    acc.add(id, dx);
                }
                offset += len;
            }
        }
        Op::Pad { x, outer, axis_in, inner, before, after } => {
            let total = before + axis_in + after;
            let mut dx = Vec::with_capacity(outer * axis_in * inner);
            for o in 0..*outer {
                dx.extend_from_slice(&gd[(o * total + before) * inner..][..axis_in * inner]);
            }
            acc.add(*x, dx);
        }
        Op::Reshape(x) => acc.add(*x, gd.to_vec()),
        Op::Permute { x, perm } => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            let (_, data) = permute_data(g.shape(), gd, &inverse);
            acc.add(*x, data);
        }
        Op::BatchNorm { x, gamma, beta, geom, xhat, inv_std, batch } => {
            let gam = val(*gamma);
            let count = T::of((geom.n * geom.t * geom.plane) as f64);
            let mut sum_dy = vec![T::zero(); geom.c];
            let mut sum_dy_xhat = vec![T::zero(); geom.c];
            for (i, chunk) in gd.chunks(geom.plane).enumerate() {
                let c = i % geom.c;
                let xh = &xhat[i * geom.plane..(i + 1) * geom.plane];
                sum_dy[c] += chunk.iter().copied().sum::<T>();
                sum_dy_xhat[c] += dot(chunk, xh);
            }
            if acc.wants(*x) {
                let mut dx = vec![T::zero(); gd.len()];
                for (i, (d, gchunk)) in dx.chunks_mut(geom.plane).zip(gd.chunks(geom.plane)).enumerate() {
                    let c = i % geom.c;
                    let scale = gam[c] * inv_std[c];
                    if *batch {
                        let xh = &xhat[i * geom.plane..(i + 1) * geom.plane];
                        let mean_dy = sum_dy[c] / count;
                        let mean_dy_xhat = sum_dy_xhat[c] / count;
                        for ((d, g), h) in d.iter_mut().zip(gchunk).zip(xh) {
                            *d = scale * (*g - mean_dy - *h * mean_dy_xhat);
                        }
                    } else {
                        for (d, g) in d.iter_mut().zip(gchunk) {
                            *d = scale * *g;
                        }
                    }
                }
                acc.add(*x, dx);
            }
            acc.add(*gamma, sum_dy_xhat);
            acc.add(*beta, sum_dy);
        }
        Op::Dropout { x, mask } => acc.add(*x, gd.iter().zip(mask).map(|(g, m)| *g * *m).collect()),
        Op::Linear { x, w, b, rows, k, m } => {
            if acc.wants(*x) {
                let mut dx = vec![T::zero(); rows * k];
                gemm(Mat::new(gd, *rows, *m), Mat::new(val(*w), *m, *k), &mut dx, false);
                acc.add(*x, dx);
            }
            if acc.wants(*w) {
                let mut dw = vec![T::zero(); m * k];
                gemm(Mat::new(gd, *rows, *m).t(), Mat::new(val(*x), *rows, *k), &mut dw, false);
                acc.add(*w, dw);
            }
            if let Some(b) = b {
                let mut db = vec![T::zero(); *m];
                for row in gd.chunks(*m) {
                    db.iter_mut().zip(row).for_each(|(d, g)| *d += *g);
                }
                acc.add(*b, db);
            }
        }
        Op::MeanAxis { x, outer, axis_in, inner } => {
            let scale = T::one() / T::of(*axis_in as f64);
            let mut dx = Vec::with_capacity(outer * axis_in * inner);
            for o in 0..*outer {
                let row = &gd[o * inner..(o + 1) * inner];
                for _ in 0..*axis_in {
                    dx.extend(row.iter().map(|&v| v * scale));
                }
            }
            acc.add(*x, dx);
        }
        Op::MaxAxis { x, outer, axis_in, inner, argmax } => {
            let mut dx = vec![T::zero(); outer * axis_in * inner];
            for o in 0..*outer {
                for i in 0..*inner {
                    let j = argmax[o * inner + i];
                    dx[(o * axis_in + j) * inner + i] = gd[o * inner + i];
                }
            }
            acc.add(*x, dx);
        }
        Op::Sum(x) => {
            let len = nodes[*x].value.len();
            acc.add(*x, vec![gd[0]; len]);
        }
        Op::CrossEntropy { logits, probs, labels, classes } => {
            let n = labels.len();
            let scale = gd[0] / T::of(n as f64);
            let mut dx = probs.clone();
            for (i, &y) in labels.iter().enumerate() {
                dx[i * classes + y] -= T::one();
            }
            dx.iter_mut().for_each(|v| *v *= scale);
            acc.add(*logits, dx);
        }
    }
}

fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data<T: Element>(shape: &[usize], data: &[T], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut index = vec![0usize; rank];
    for _ in 0..data.len() {
        let src: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for d in (0..rank).rev() {
            index[d] += 1;
            if index[d] < out_shape[d] {
                break;
            }
            index[d] = 0;
        }
    }
    (out_shape, out)
}

/// How [`Var::batch_norm`] normalizes.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a, T> {
    /// Statistics of the current batch.
    Batch,
    /// Stored running statistics.
    Running { mean: &'a [T], var: &'a [T] },
}

impl<'t, T: Element> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Shape("operands recorded on different tapes".into()))
        }
    }

    fn binary(self, other: Var<'t, T>, name: &str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, [usize; 2])> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!("{name}: {:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok((Tensor::new(a.shape(), data)?, [self.id, other.id]))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (v, ids) = self.binary(other, "add", |a, b| a + b)?;
        Ok(self.tape.record(v, Op::Add(ids[0], ids[1]), &ids))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (v, ids) = self.binary(other, "sub", |a, b| a - b)?;
        Ok(self.tape.record(v, Op::Sub(ids[0], ids[1]), &ids))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (v, ids) = self.binary(other, "mul", |a, b| a * b)?;
        Ok(self.tape.record(v, Op::Mul(ids[0], ids[1]), &ids))
    }

    pub fn scale(self, s: f64) -> Var<'t, T> {
        let s = T::of(s);
        let v = self.value().map(|x| x * s);
        self.tape.record(v, Op::Scale(self.id, s), &[self.id])
    }

    pub fn add_scalar(self, s: f64) -> Var<'t, T> {
        let s = T::of(s);
        let v = self.value().map(|x| x + s);
        self.tape.record(v, Op::AddScalar(self.id), &[self.id])
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let v = self.value().map(|x| {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        });
        self.tape.record(v, Op::Sigmoid(self.id), &[self.id])
    }

    pub fn relu(self) -> Var<'t, T> {
        let v = self.value().map(|x| if x > T::zero() { x } else { T::zero() });
        self.tape.record(v, Op::Relu(self.id), &[self.id])
    }

    pub fn sum(self) -> Var<'t, T> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.record(v, Op::Sum(self.id), &[self.id])
    }

    /// Multiplies every `H x W` plane by the matching entry of a
    /// `[.., C, 1, 1]` gain tensor.
    pub fn mul_channel(self, gain: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&gain)?;
        let (x, g) = (self.value(), gain.value());
        let (xs, gs) = (x.shape(), g.shape());
        let r = xs.len();
        if r < 2 || gs.len() != r || gs[..r - 2] != xs[..r - 2] || gs[r - 2..] != [1, 1] {
            return Err(Error::Shape(format!("mul_channel: input {xs:?} with gain {gs:?}")));
        }
        let plane = xs[r - 2] * xs[r - 1];
        let mut data = x.data().to_vec();
        for (chunk, s) in data.chunks_mut(plane).zip(g.data()) {
            chunk.iter_mut().for_each(|v| *v *= *s);
        }
        let out = Tensor::new(xs, data)?;
        Ok(self.tape.record(out, Op::MulChannel { x: self.id, gain: gain.id }, &[self.id, gain.id]))
    }

    /// Per-frame 2D convolution of `[N, T, C_in, H, W]` with a
    /// `[C_out, C_in, k, k]` kernel, `k` in {1, 3}, zero "same" padding.
    pub fn conv2d(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        self.same_tape(&weight)?;
        let x = self.value();
        let w = weight.value();
        let [n, t, c_in, h, wd] = x.dims5()?;
        let [c_out, wc_in, kh, kw] = match w.shape()[..] {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::Shape(format!("conv2d weight must be [C_out, C_in, k, k], got {:?}", w.shape()))),
        };
        if wc_in != c_in {
            return Err(Error::Shape(format!(
                "conv2d: input has C_in = {c_in} channels but weight expects C_in = {wc_in}"
            )));
        }
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::Shape(format!("conv2d: kernel must be 1x1 or 3x3, got {kh}x{kw}")));
        }
        let b = match bias {
            Some(b) => {
                self.same_tape(&b)?;
                let bv = b.value();
                if bv.shape() != [c_out] {
                    return Err(Error::Shape(format!("conv2d bias {:?} for C_out = {c_out}", bv.shape())));
                }
                Some((b.id, bv))
            }
            None => None,
        };
        let geom = ConvGeom { images: n * t, c_in, c_out, height: h, width: wd, kernel: kh };
        let data = kernels::conv2d_forward(x.data(), w.data(), b.as_ref().map(|(_, v)| v.data()), &geom);
        let out = Tensor::new(&[n, t, c_out, h, wd], data)?;
        let mut ids = vec![self.id, weight.id];
        ids.extend(b.as_ref().map(|(id, _)| *id));
        let op = Op::Conv2d { x: self.id, w: weight.id, b: b.map(|(id, _)| id), geom };
        Ok(self.tape.record(out, op, &ids))
    }

    /// Per-channel length-3 temporal convolution with a `[C, 3]` kernel and
    /// one frame of zero padding at both ends.
    pub fn temporal_depthwise(self, kernel: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&kernel)?;
        let x = self.value();
        let k = kernel.value();
        let [n, t, c, h, w] = x.dims5()?;
        if k.shape() != [c, 3] {
            return Err(Error::Shape(format!(
                "temporal kernel {:?} does not match {c} input channels (expected [{c}, 3])",
                k.shape()
            )));
        }
        let geom = VideoGeom { n, t, c, plane: h * w };
        let out = Tensor::new(x.shape(), kernels::temporal_depthwise_forward(x.data(), k.data(), &geom))?;
        Ok(self.tape.record(out, Op::TemporalDepthwise { x: self.id, k: kernel.id, geom }, &[self.id, kernel.id]))
    }

    /// Channel-mixing temporal convolution with a `[C_out, C_in, 3]` kernel.
    pub fn temporal_full(self, kernel: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&kernel)?;
        let x = self.value();
        let k = kernel.value();
        let [n, t, c, h, w] = x.dims5()?;
        let c_out = match k.shape()[..] {
            [co, ci, 3] if ci == c => co,
            _ => {
                return Err(Error::Shape(format!(
                    "temporal kernel {:?} does not match {c} input channels (expected [C_out, {c}, 3])",
                    k.shape()
                )))
            }
        };
        let geom = VideoGeom { n, t, c, plane: h * w };
        let data = kernels::temporal_full_forward(x.data(), k.data(), &geom, c_out);
        let out = Tensor::new(&[n, t, c_out, h, w], data)?;
        Ok(self.tape.record(out, Op::TemporalFull { x: self.id, w: kernel.id, geom, c_out }, &[self.id, kernel.id]))
    }

    /// Mean over the trailing two (spatial) axes; they become extent 1.
    pub fn global_avg_pool(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() < 2 {
            return Err(Error::Shape(format!("global_avg_pool needs spatial axes, got {s:?}")));
        }
        let plane = s[s.len() - 2] * s[s.len() - 1];
        let scale = T::one() / T::of(plane as f64);
        let data = x.data().chunks(plane).map(|p| p.iter().copied().sum::<T>() * scale).collect();
        let mut shape = s.to_vec();
        let r = shape.len();
        shape[r - 2] = 1;
        shape[r - 1] = 1;
        let out = Tensor::new(&shape, data)?;
        Ok(self.tape.record(out, Op::GlobalAvgPool { x: self.id, plane }, &[self.id]))
    }

    /// Non-overlapping `factor x factor` spatial average pooling.
    pub fn avg_pool2d(self, factor: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        let r = s.len();
        if r < 2 || factor == 0 || !s[r - 2].is_multiple_of(factor) || !s[r - 1].is_multiple_of(factor) {
            return Err(Error::Shape(format!("avg_pool2d: factor {factor} does not divide {s:?}")));
        }
        if factor == 1 {
            return Ok(self);
        }
        let (h, w) = (s[r - 2], s[r - 1]);
        let planes = x.len() / (h * w);
        let mut shape = s.to_vec();
        shape[r - 2] = h / factor;
        shape[r - 1] = w / factor;
        let out = Tensor::new(&shape, kernels::avg_pool2d_forward(x.data(), planes, h, w, factor))?;
        Ok(self.tape.record(out, Op::AvgPool2d { x: self.id, planes, h, w, factor }, &[self.id]))
    }

    /// Cosine similarity between matching `H x W` planes of two tensors of
    /// equal shape. The denominator is floored at [`COSINE_EPS`].
    pub fn cosine_per_channel(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let s = a.shape();
        if s != b.shape() || s.len() < 2 {
            return Err(Error::Shape(format!("cosine: {:?} vs {:?}", s, b.shape())));
        }
        let r = s.len();
        let plane = s[r - 2] * s[r - 1];
        let eps = T::of(COSINE_EPS);
        let planes = a.len() / plane.max(1);
        let mut data = Vec::with_capacity(planes);
        let mut denom = Vec::with_capacity(planes);
        let mut floored = Vec::with_capacity(planes);
        for (pa, pb) in a.data().chunks(plane).zip(b.data().chunks(plane)) {
            let d = (dot(pa, pa) * dot(pb, pb)).sqrt();
            let low = !(d >= eps);
            let d = if low { eps } else { d };
            data.push(dot(pa, pb) / d);
            denom.push(d);
            floored.push(low);
        }
        let mut shape = s.to_vec();
        shape[r - 2] = 1;
        shape[r - 1] = 1;
        let out = Tensor::new(&shape, data)?;
        Ok(self.tape.record(out, Op::Cosine { a: self.id, b: other.id, plane, denom, floored }, &[self.id, other.id]))
    }

    /// Sub-range `[start, start + len)` of `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::Shape(format!("narrow({axis}, {start}, {len}) of {s:?}")));
        }
        let (outer, axis_in, inner) = split_axis(s, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&x.data()[(o * axis_in + start) * inner..][..len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let out = Tensor::new(&shape, data)?;
        Ok(self.tape.record(out, Op::Narrow { x: self.id, outer, axis_in, inner, start, len }, &[self.id]))
    }

    /// Zero padding along `axis`.
    pub fn pad_axis(self, axis: usize, before: usize, after: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        if axis >= s.len() {
            return Err(Error::Shape(format!("pad axis {axis} of {s:?}")));
        }
        let (outer, axis_in, inner) = split_axis(s, axis);
        let total = before + axis_in + after;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            data.extend(std::iter::repeat_n(T::zero(), before * inner));
            data.extend_from_slice(&x.data()[o * axis_in * inner..(o + 1) * axis_in * inner]);
            data.extend(std::iter::repeat_n(T::zero(), after * inner));
        }
        let mut shape = s.to_vec();
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        Ok(self.tape.record(out, Op::Pad { x: self.id, outer, axis_in, inner, before, after }, &[self.id]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.record(out, Op::Reshape(self.id), &[self.id]))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let mut seen = vec![false; x.rank()];
        let valid = perm.len() == x.rank() && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::Shape(format!("invalid permutation {perm:?} for {:?}", x.shape())));
        }
        let (shape, data) = permute_data(x.shape(), x.data(), perm);
        let out = Tensor::new(&shape, data)?;
        Ok(self.tape.record(out, Op::Permute { x: self.id, perm: perm.to_vec() }, &[self.id]))
    }

    /// Per-channel normalization of `[N, T, C, H, W]` over `(N, T, H, W)`.
    ///
    /// Returns the output plus the batch mean and biased variance when batch
    /// statistics were used.
    pub fn batch_norm(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        stats: NormStats<'_, T>,
        eps: f64,
    ) -> Result<(Var<'t, T>, Option<(Vec<T>, Vec<T>)>)> {
        self.same_tape(&gamma)?;
        self.same_tape(&beta)?;
        let x = self.value();
        let [n, t, c, h, w] = x.dims5()?;
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::Shape(format!(
                "batch_norm over {c} channels with gamma {:?}, beta {:?}",
                gv.shape(),
                bv.shape()
            )));
        }
        let geom = VideoGeom { n, t, c, plane: h * w };
        let eps = T::of(eps);
        let (mean, var, batch_stats, batch) = match stats {
            NormStats::Batch => {
                let (m, v) = kernels::channel_stats(x.data(), &geom);
                (m.clone(), v.clone(), Some((m, v)), true)
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape("running statistics length mismatch".into()));
                }
                (mean.to_vec(), var.to_vec(), None, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let mut xhat = x.data().to_vec();
        let mut out = vec![T::zero(); xhat.len()];
        for (i, (xh, o)) in xhat.chunks_mut(geom.plane).zip(out.chunks_mut(geom.plane)).enumerate() {
            let ch = i % c;
            let (m, s, g, b) = (mean[ch], inv_std[ch], gv.data()[ch], bv.data()[ch]);
            for (xh, o) in xh.iter_mut().zip(o.iter_mut()) {
                *xh = (*xh - m) * s;
                *o = g * *xh + b;
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        let op = Op::BatchNorm { x: self.id, gamma: gamma.id, beta: beta.id, geom, xhat, inv_std, batch };
        Ok((self.tape.record(out, op, &[self.id, gamma.id, beta.id]), batch_stats))
    }

    /// Elementwise multiplication by a precomputed (already rescaled) mask.
    pub fn dropout_with_mask(self, mask: Vec<T>) -> Result<Var<'t, T>> {
        let x = self.value();
        if mask.len() != x.len() {
            return Err(Error::Shape(format!("dropout mask of {} for {} values", mask.len(), x.len())));
        }
        let data = x.data().iter().zip(&mask).map(|(v, m)| *v * *m).collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.tape.record(out, Op::Dropout { x: self.id, mask }, &[self.id]))
    }

    /// `[rows, k] x [m, k]^T + b` giving `[rows, m]`.
    pub fn linear(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        self.same_tape(&weight)?;
        let x = self.value();
        let w = weight.value();
        let (rows, k) = match x.shape()[..] {
            [r, k] => (r, k),
            _ => return Err(Error::Shape(format!("linear input must be [rows, k], got {:?}", x.shape()))),
        };
        let m = match w.shape()[..] {
            [m, wk] if wk == k => m,
            _ => return Err(Error::Shape(format!("linear weight {:?} for input features {k}", w.shape()))),
        };
        let mut data = vec![T::zero(); rows * m];
        gemm(Mat::new(x.data(), rows, k), Mat::new(w.data(), m, k).t(), &mut data, false);
        let mut ids = vec![self.id, weight.id];
        if let Some(b) = bias {
            self.same_tape(&b)?;
            let bv = b.value();
            if bv.shape() != [m] {
                return Err(Error::Shape(format!("linear bias {:?} for {m} outputs", bv.shape())));
            }
            for row in data.chunks_mut(m) {
                row.iter_mut().zip(bv.data()).for_each(|(v, b)| *v += *b);
            }
            ids.push(b.id);
        }
        let out = Tensor::new(&[rows, m], data)?;
        let op = Op::Linear { x: self.id, w: weight.id, b: bias.map(|b| b.id), rows, k, m };
        Ok(self.tape.record(out, op, &ids))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::Shape(format!("mean over axis {axis} of {s:?}")));
        }
        let (outer, axis_in, inner) = split_axis(s, axis);
        let scale = T::one() / T::of(axis_in as f64);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..axis_in {
                let src = &x.data()[(o * axis_in + a) * inner..][..inner];
                data[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, v)| *d += *v);
            }
        }
        data.iter_mut().for_each(|v| *v *= scale);
        let mut shape = s.to_vec();
        shape.remove(axis);
        let out = Tensor::new(&shape, data)?;
        Ok(self.tape.record(out, Op::MeanAxis { x: self.id, outer, axis_in, inner }, &[self.id]))
    }

    /// Maximum over `axis` (first index wins ties), removed from the shape.
    pub fn max_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::Shape(format!("max over axis {axis} of {s:?}")));
        }
        let (outer, axis_in, inner) = split_axis(s, axis);
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut val = x.data()[o * axis_in * inner + i];
                for a in 1..axis_in {
                    let v = x.data()[(o * axis_in + a) * inner + i];
                    if v > val {
                        best = a;
                        val = v;
                    }
                }
                data.push(val);
                argmax.push(best);
            }
        }
        let mut shape = s.to_vec();
        shape.remove(axis);
        let out = Tensor::new(&shape, data)?;
        Ok(self.tape.record(out, Op::MaxAxis { x: self.id, outer, axis_in, inner, argmax }, &[self.id]))
    }

    /// Mean softmax cross-entropy of `[N, M]` logits against class labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, m) = match x.shape()[..] {
            [n, m] => (n, m),
            _ => return Err(Error::Shape(format!("cross_entropy expects [N, M] scores, got {:?}", x.shape()))),
        };
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} score rows", labels.len())));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= m) {
            return Err(Error::Shape(format!("label {y} of sample {i} outside [0, {m})")));
        }
        let probs = crate::metrics::softmax_rows(x.data(), m);
        let mut total = T::zero();
        for (row, &y) in x.data().chunks(m).zip(labels) {
            total += crate::metrics::log_softmax_at(row, y);
        }
        let loss = -total / T::of(n as f64);
        let op = Op::CrossEntropy { logits: self.id, probs, labels: labels.to_vec(), classes: m };
        Ok(self.tape.record(Tensor::scalar(loss), op, &[self.id]))
    }
}
