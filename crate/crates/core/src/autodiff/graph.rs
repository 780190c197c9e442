//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records operations in execution order; [`Graph::backward`]
//! walks the tape once in reverse and accumulates gradients. A graph is
//! confined to one execution context; separate graphs may run in parallel.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<F> {
    Leaf,
    Add(NodeId, NodeId),
    Scale(NodeId, F),
    AddConst(NodeId, F),
    Mul(NodeId, NodeId),
    /// Per-channel bias: `b` has length `shape[0]` of `x`.
    AddBias(NodeId, NodeId),
    /// Multiply along `axis` by a vector `w` of matching length.
    MulAxis {
        x: NodeId,
        w: NodeId,
        axis: usize,
    },
    Conv1d {
        x: NodeId,
        k: NodeId,
        stride: usize,
        pad: usize,
    },
    IndexMap {
        x: NodeId,
        map: Rc<Vec<usize>>,
    },
    Reshape(NodeId),
    /// `w [M,N] . x [N,G] -> [M,G]`
    MatMul {
        w: NodeId,
        x: NodeId,
    },
    Swish(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Abs(NodeId),
    Recip(NodeId),
    Relu(NodeId),
    MaxConst(NodeId, F),
    ProdAll(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normalized: Tensor<F>,
        inv_std: F,
    },
    DropoutChannels {
        x: NodeId,
        mask: Vec<bool>,
        scale: F,
    },
    MeanAxis {
        x: NodeId,
        axis: usize,
    },
    SumAll(NodeId),
    BceWithLogit {
        logit: NodeId,
        label: F,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient computed by the last `backward` call; `None` for nodes that
    /// do not require gradients.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Insert a trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Insert a non-trainable leaf (inputs, fixed kernels).
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), needs))
    }

    pub fn scale(&mut self, x: NodeId, c: F) -> NodeId {
        let v = self.value(x).map(|t| t * c);
        let needs = self.needs(x);
        self.push(v, Op::Scale(x, c), needs)
    }

    pub fn add_const(&mut self, x: NodeId, c: F) -> NodeId {
        let v = self.value(x).map(|t| t + c);
        let needs = self.needs(x);
        self.push(v, Op::AddConst(x, c), needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul(a, b), needs))
    }

    /// `x + b` with `b` broadcast from the channel axis (axis 0).
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if bs.len() != 1 || xs.is_empty() || bs[0] != xs[0] {
            return Err(Error::Shape(format!("add_bias: {:?} vs {:?}", xs, bs)));
        }
        let chans = xs[0];
        let inner: usize = xs[1..].iter().product();
        let mut v = self.value(x).clone();
        {
            let bias = self.nodes[b.0].value.data().to_vec();
            let data = v.data_mut();
            for c in 0..chans {
                let bc = bias[c];
                for t in &mut data[c * inner..(c + 1) * inner] {
                    *t += bc;
                }
            }
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(v, Op::AddBias(x, b), needs))
    }

    /// Multiply along `axis` by a vector of weights.
    pub fn mul_axis(&mut self, x: NodeId, w: NodeId, axis: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        if ws.len() != 1 || axis >= xs.len() || ws[0] != xs[axis] {
            return Err(Error::Shape(format!(
                "mul_axis: {:?} axis {} vs {:?}",
                xs, axis, ws
            )));
        }
        let outer: usize = xs[..axis].iter().product();
        let n = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let weights = self.value(w).data().to_vec();
        let mut v = self.value(x).clone();
        {
            let data = v.data_mut();
            for o in 0..outer {
                for (i, &wi) in weights.iter().enumerate() {
                    let base = (o * n + i) * inner;
                    for t in &mut data[base..base + inner] {
                        *t *= wi;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(v, Op::MulAxis { x, w, axis }, needs))
    }

    /// 1D cross-correlation: `x [C_in, L]`, `k [C_out, C_in, K]`, symmetric
    /// zero padding `pad`, output `[C_out, (L + 2 pad - K) / stride + 1]`.
    pub fn conv1d(&mut self, x: NodeId, k: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = self.shape(x);
        let ks = self.shape(k);
        if xs.len() != 2 || ks.len() != 3 || ks[1] != xs[0] {
            return Err(Error::Shape(format!("conv1d: x {:?}, k {:?}", xs, ks)));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv1d: stride must be >= 1".into()));
        }
        let (c_in, l) = (xs[0], xs[1]);
        let (c_out, kw) = (ks[0], ks[2]);
        if kw > l + 2 * pad {
            return Err(Error::Shape(format!(
                "conv1d: kernel {} exceeds padded length {}",
                kw,
                l + 2 * pad
            )));
        }
        let l_out = (l + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[c_out, l_out]);
        {
            let xd = self.nodes[x.0].value.data();
            let kd = self.nodes[k.0].value.data();
            let od = out.data_mut();
            for co in 0..c_out {
                for ci in 0..c_in {
                    let xrow = &xd[ci * l..(ci + 1) * l];
                    let krow = &kd[(co * c_in + ci) * kw..(co * c_in + ci + 1) * kw];
                    for t in 0..l_out
                    {
                        let start = (t * stride) as isize - pad as isize;
                        let k0 = (-start).max(0) as usize;
                        let k1 = (l as isize - start).min(kw as isize).max(0) as usize;
                        if k0 >= k1 {
                            continue;
                        }
                        let xoff = (start + k0 as isize) as usize;
                        od[co * l_out + t] += dot(&xrow[xoff..xoff + (k1 - k0)], &krow[k0..k1]);
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(k);
        Ok(self.push(out, Op::Conv1d { x, k, stride, pad }, needs))
    }

    /// Gather: `out[i] = x[map[i]]`. The map is fixed (non-differentiable
    /// routing); backward scatter-adds.
    pub fn index_map(
        &mut self,
        x: NodeId,
        map: Rc<Vec<usize>>,
        out_shape: &[usize],
    ) -> Result<NodeId> {
        let n: usize = out_shape.iter().product();
        if n != map.len() {
            return Err(Error::Shape(format!(
                "index_map: map length {} vs shape {:?}",
                map.len(),
                out_shape
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n);
        for &i in map.iter() {
            if i >= src.len() {
                return Err(Error::Shape(format!(
                    "index_map: index {} out of range {}",
                    i,
                    src.len()
                )));
            }
            data.push(src[i]);
        }
        let v = Tensor::new(out_shape.to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(v, Op::IndexMap { x, map }, needs))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(v, Op::Reshape(x), needs))
    }

    /// `w [M,N] . x [N,G] -> [M,G]`
    pub fn matmul(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let ws = self.shape(w);
        let xs = self.shape(x);
        if ws.len() != 2 || xs.len() != 2 || ws[1] != xs[0] {
            return Err(Error::Shape(format!("matmul: {:?} . {:?}", ws, xs)));
        }
        let (m, n) = (ws[0], ws[1]);
        let g = xs[1];
        let mut out = Tensor::zeros(&[m, g]);
        {
            let wd = self.nodes[w.0].value.data();
            let xd = self.nodes[x.0].value.data();
            let od = out.data_mut();
            for i in 0..m {
                for j in 0..n {
                    let wij = wd[i * n + j];
                    let xrow = &xd[j * g..(j + 1) * g];
                    let orow = &mut od[i * g..(i + 1) * g];
                    for (o, &xv) in orow.iter_mut().zip(xrow) {
                        *o += wij * xv;
                    }
                }
            }
        }
        let needs = self.needs(w) || self.needs(x);
        Ok(self.push(out, Op::MatMul { w, x }, needs))
    }

    pub fn swish(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|t| t * sigmoid(t));
        let needs = self.needs(x);
        self.push(v, Op::Swish(x), needs)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|t| t.tanh());
        let needs = self.needs(x);
        self.push(v, Op::Tanh(x), needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(sigmoid);
        let needs = self.needs(x);
        self.push(v, Op::Sigmoid(x), needs)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|t| t.abs());
        let needs = self.needs(x);
        self.push(v, Op::Abs(x), needs)
    }

    /// Elementwise reciprocal; caller must keep inputs away from zero.
    pub fn recip(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|t| F::one() / t);
        let needs = self.needs(x);
        self.push(v, Op::Recip(x), needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|t| if t > F::zero() { t } else { F::zero() });
        let needs = self.needs(x);
        self.push(v, Op::Relu(x), needs)
    }

    pub fn max_const(&mut self, x: NodeId, c: F) -> NodeId {
        let v = self.value(x).map(|t| t.max(c));
        let needs = self.needs(x);
        self.push(v, Op::MaxConst(x, c), needs)
    }

    /// Product of all elements, yielding a scalar.
    pub fn prod_all(&mut self, x: NodeId) -> NodeId {
        let p = self
            .value(x)
            .data()
            .iter()
            .fold(F::one(), |acc, &t| acc * t);
        let needs = self.needs(x);
        self.push(Tensor::scalar(p), Op::ProdAll(x), needs)
    }

    /// Softmax over a 1-D tensor.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        if xs.len() != 1 || xs[0] == 0 {
            return Err(Error::InvalidArgument(format!(
                "softmax: expected non-empty 1-D tensor, got {:?}",
                xs
            )));
        }
        let d = self.value(x).data();
        let m = d.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let exps: Vec<F> = d.iter().map(|&t| (t - m).exp()).collect();
        let z: F = exps.iter().copied().sum();
        let v = Tensor::new(xs.to_vec(), exps.iter().map(|&e| e / z).collect())?;
        let needs = self.needs(x);
        Ok(self.push(v, Op::Softmax(x), needs))
    }

    /// Normalize over every element of `x`, then apply a per-channel affine
    /// transform (`gamma`, `beta` of length `shape[0]`). Keeping the affine
    /// parameters uniform over the remaining axes preserves equivariance for
    /// group-indexed features.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let chans = *xs.first().ok_or_else(|| {
            Error::Shape("layer_norm: input must have a channel axis".into())
        })?;
        if self.shape(gamma) != [chans] || self.shape(beta) != [chans] {
            return Err(Error::Shape(format!(
                "layer_norm: affine shapes {:?}/{:?} vs {} channels",
                self.shape(gamma),
                self.shape(beta),
                chans
            )));
        }
        let eps = F::of(1e-5);
        let xv = self.value(x);
        let n = F::of(xv.len() as f64);
        let mean = xv.mean();
        let var = xv.data().iter().map(|&t| (t - mean) * (t - mean)).sum::<F>() / n;
        let inv_std = F::one() / (var + eps).sqrt();
        let normalized = xv.map(|t| (t - mean) * inv_std);
        let inner: usize = xs[1..].iter().product();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut out = normalized.clone();
        {
            let od = out.data_mut();
            for c in 0..chans {
                for t in &mut od[c * inner..(c + 1) * inner] {
                    *t = *t * gd[c] + bd[c];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            needs,
        ))
    }

    /// Channel dropout: zero whole channels (axis 0) with probability `p`
    /// and rescale survivors by `1/(1-p)`. The mask is constant per pass.
    pub fn dropout_channels(
        &mut self,
        x: NodeId,
        p: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability {} outside [0, 1)",
                p
            )));
        }
        let xs = self.shape(x).to_vec();
        let chans = *xs
            .first()
            .ok_or_else(|| Error::Shape("dropout: input must have a channel axis".into()))?;
        let mask: Vec<bool> = (0..chans).map(|_| rng.gen::<f64>() >= p).collect();
        let scale = F::of(1.0 / (1.0 - p));
        let inner: usize = xs[1..].iter().product();
        let mut out = self.value(x).clone();
        {
            let od = out.data_mut();
            for (c, &keep) in mask.iter().enumerate() {
                let row = &mut od[c * inner..(c + 1) * inner];
                if keep {
                    for t in row {
                        *t *= scale;
                    }
                } else {
                    for t in row {
                        *t = F::zero();
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::DropoutChannels { x, mask, scale }, needs))
    }

    /// Mean over one axis.
    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || xs[axis] == 0 {
            return Err(Error::Shape(format!("mean_axis: {:?} axis {}", xs, axis)));
        }
        let outer: usize = xs[..axis].iter().product();
        let n = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let mut out_shape = xs.clone();
        out_shape.remove(axis);
        let mut out = Tensor::zeros(&out_shape);
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            let inv = F::one() / F::of(n as f64);
            for o in 0..outer {
                for i in 0..n {
                    let base = (o * n + i) * inner;
                    for t in 0..inner {
                        od[o * inner + t] += xd[base + t] * inv;
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::MeanAxis { x, axis }, needs))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: F = self.value(x).data().iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), needs)
    }

    /// Numerically stable binary cross-entropy on a single logit.
    pub fn bce_with_logit(&mut self, logit: NodeId, label: F) -> Result<NodeId> {
        if self.value(logit).len() != 1 {
            return Err(Error::Shape(format!(
                "bce_with_logit: expected a single logit, got {:?}",
                self.shape(logit)
            )));
        }
        let l = self.value(logit).data()[0];
        let loss = l.max(F::zero()) - l * label + (F::one() + (-l.abs()).exp()).ln();
        let needs = self.needs(logit);
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogit { logit, label }, needs))
    }

    /// Reverse pass from a scalar node; gradients are then available via
    /// [`Graph::grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(
                "backward: loss must be a scalar".into(),
            ));
        }
        self.grads = self.nodes.iter().map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), F::one()));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor<F>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor<F>) -> Result<()> {
        // Ops are moved out to appease the borrow checker; Leaf has no parents.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(*x, g.map(|t| t * c));
            }
            Op::AddConst(x, _) => self.accumulate(*x, g.clone()),
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let mut d = self.value(*b).clone();
                    for (t, &gv) in d.data_mut().iter_mut().zip(g.data()) {
                        *t *= gv;
                    }
                    self.accumulate(*a, d);
                }
                if self.needs(*b) {
                    let mut d = self.value(*a).clone();
                    for (t, &gv) in d.data_mut().iter_mut().zip(g.data()) {
                        *t *= gv;
                    }
                    self.accumulate(*b, d);
                }
            }
            Op::AddBias(x, b) => {
                if self.needs(*x) {
                    self.accumulate(*x, g.clone());
                }
                if self.needs(*b) {
                    let chans = self.shape(*b)[0];
                    let inner = g.len() / chans;
                    let mut db = Tensor::zeros(&[chans]);
                    for c in 0..chans {
                        db.data_mut()[c] =
                            g.data()[c * inner..(c + 1) * inner].iter().copied().sum();
                    }
                    self.accumulate(*b, db);
                }
            }
            Op::MulAxis { x, w, axis } => {
                let xs = self.shape(*x).to_vec();
                let outer: usize = xs[..*axis].iter().product();
                let n = xs[*axis];
                let inner: usize = xs[*axis + 1..].iter().product();
                if self.needs(*x) {
                    let weights = self.value(*w).data().to_vec();
                    let mut dx = g.clone();
                    let d = dx.data_mut();
                    for o in 0..outer {
                        for (iw, &wv) in weights.iter().enumerate() {
                            let base = (o * n + iw) * inner;
                            for t in &mut d[base..base + inner] {
                                *t *= wv;
                            }
                        }
                    }
                    self.accumulate(*x, dx);
                }
                if self.needs(*w) {
                    let xd = self.value(*x).data();
                    let mut dw = Tensor::zeros(&[n]);
                    for o in 0..outer {
                        for iw in 0..n {
                            let base = (o * n + iw) * inner;
                            let mut acc = F::zero();
                            for t in 0..inner {
                                acc += g.data()[base + t] * xd[base + t];
                            }
                            dw.data_mut()[iw] += acc;
                        }
                    }
                    self.accumulate(*w, dw);
                }
            }
            Op::Conv1d { x, k, stride, pad } => {
                let (stride, pad) = (*stride, *pad);
                let xs = self.shape(*x).to_vec();
                let ks = self.shape(*k).to_vec();
                let (c_in, l) = (xs[0], xs[1]);
                let (c_out, kw) = (ks[0], ks[2]);
                let l_out = g.shape()[1];
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(&xs);
                    {
                        let kd = self.value(*k).data();
                        let dxd = dx.data_mut();
                        for co in 0..c_out {
                            for ci in 0..c_in {
                                let krow =
                                    &kd[(co * c_in + ci) * kw..(co * c_in + ci + 1) * kw];
                                for t in 0..l_out {
                                    let gv = g.data()[co * l_out + t];
                                    if gv == F::zero() {
                                        continue;
                                    }
                                    let start = (t * stride) as isize - pad as isize;
                                    let k0 = (-start).max(0) as usize;
                                    let k1 =
                                        (l as isize - start).min(kw as isize).max(0) as usize;
                                    if k0 >= k1 {
                                        continue;
                                    }
                                    let xoff = (start + k0 as isize) as usize;
                                    let row = &mut dxd[ci * l + xoff..ci * l + xoff + (k1 - k0)];
                                    for (d, &kv) in row.iter_mut().zip(&krow[k0..k1]) {
                                        *d += gv * kv;
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(*x, dx);
                }
                if self.needs(*k) {
                    let mut dk = Tensor::zeros(&ks);
                    {
                        let xd = self.value(*x).data();
                        let dkd = dk.data_mut();
                        for co in 0..c_out {
                            for ci in 0..c_in {
                                let xrow = &xd[ci * l..(ci + 1) * l];
                                let krow = &mut dkd
                                    [(co * c_in + ci) * kw..(co * c_in + ci + 1) * kw];
                                for t in 0..l_out {
                                    let gv = g.data()[co * l_out + t];
                                    if gv == F::zero() {
                                        continue;
                                    }
                                    let start = (t * stride) as isize - pad as isize;
                                    let k0 = (-start).max(0) as usize;
                                    let k1 =
                                        (l as isize - start).min(kw as isize).max(0) as usize;
                                    if k0 >= k1 {
                                        continue;
                                    }
                                    let xoff = (start + k0 as isize) as usize;
                                    for (kk, &xv) in
                                        (k0..k1).zip(&xrow[xoff..xoff + (k1 - k0)])
                                    {
                                        krow[kk] += gv * xv;
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(*k, dk);
                }
            }
            Op::IndexMap { x, map } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                for (o, &srci) in map.iter().enumerate() {
                    dx.data_mut()[srci] += g.data()[o];
                }
                self.accumulate(*x, dx);
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(*x, g.clone().reshaped(&shape)?);
            }
            Op::MatMul { w, x } => {
                let ws = self.shape(*w).to_vec();
                let (m, n) = (ws[0], ws[1]);
                let gcols = g.shape()[1];
                if self.needs(*w) {
                    let xd = self.value(*x).data();
                    let mut dw = Tensor::zeros(&ws);
                    {
                        let dwd = dw.data_mut();
                        for i in 0..m {
                            let grow = &g.data()[i * gcols..(i + 1) * gcols];
                            for j in 0..n {
                                let xrow = &xd[j * gcols..(j + 1) * gcols];
                                dwd[i * n + j] = dot(grow, xrow);
                            }
                        }
                    }
                    self.accumulate(*w, dw);
                }
                if self.needs(*x) {
                    let wd = self.value(*w).data();
                    let mut dx = Tensor::zeros(self.shape(*x));
                    {
                        let dxd = dx.data_mut();
                        for i in 0..m {
                            let grow = &g.data()[i * gcols..(i + 1) * gcols];
                            for j in 0..n {
                                let wij = wd[i * n + j];
                                let xrow = &mut dxd[j * gcols..(j + 1) * gcols];
                                for (d, &gv) in xrow.iter_mut().zip(grow) {
                                    *d += wij * gv;
                                }
                            }
                        }
                    }
                    self.accumulate(*x, dx);
                }
            }
            Op::Swish(x) => {
                let mut dx = g.clone();
                for (d, &t) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    let s = sigmoid(t);
                    *d *= s + t * s * (F::one() - s);
                }
                self.accumulate(*x, dx);
            }
            Op::Tanh(x) => {
                let mut dx = g.clone();
                for (d, &t) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    let y = t.tanh();
                    *d *= F::one() - y * y;
                }
                self.accumulate(*x, dx);
            }
            Op::Recip(x) => {
                let mut dx = g.clone();
                for (d, &t) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    *d *= -(F::one() / (t * t));
                }
                self.accumulate(*x, dx);
            }
            Op::Sigmoid(x) => {
                let mut dx = g.clone();
                for (d, &t) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    let s = sigmoid(t);
                    *d *= s * (F::one() - s);
                }
                self.accumulate(*x, dx);
            }
            Op::Abs(x) => {
                let mut dx = g.clone();
                for (d, &t) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    *d *= if t > F::zero() {
                        F::one()
                    } else if t < F::zero() {
                        -F::one()
                    } else {
                        F::zero()
                    };
                }
                self.accumulate(*x, dx);
            }
            Op::Relu(x) => {
                let mut dx = g.clone();
                for (d, &t) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if t <= F::zero() {
                        *d = F::zero();
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::MaxConst(x, c) => {
                let c = *c;
                let mut dx = g.clone();
                for (d, &t) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if t <= c {
                        *d = F::zero();
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::ProdAll(x) => {
                let xd = self.value(*x).data().to_vec();
                let gv = g.data()[0];
                let mut dx = Tensor::zeros(self.shape(*x));
                for (i, d) in dx.data_mut().iter_mut().enumerate() {
                    let mut p = F::one();
                    for (j, &t) in xd.iter().enumerate() {
                        if j != i {
                            p = p * t;
                        }
                    }
                    *d = gv * p;
                }
                self.accumulate(*x, dx);
            }
            Op::Softmax(x) => {
                let y = self.nodes[i].value.data().to_vec();
                let inner: F = g.data().iter().zip(&y).map(|(&gv, &yv)| gv * yv).sum();
                let mut dx = Tensor::zeros(self.shape(*x));
                for ((d, &gv), &yv) in dx.data_mut().iter_mut().zip(g.data()).zip(&y) {
                    *d = yv * (gv - inner);
                }
                self.accumulate(*x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let xs = self.shape(*x).to_vec();
                let chans = xs[0];
                let inner: usize = xs[1..].iter().product();
                let n = F::of((chans * inner) as f64);
                let gd = self.value(*gamma).data().to_vec();
                // d(normalized)
                let mut dn: Vec<F> = Vec::with_capacity(g.len());
                for c in 0..chans {
                    for t in 0..inner {
                        dn.push(g.data()[c * inner + t] * gd[c]);
                    }
                }
                if self.needs(*x) {
                    let mean_dn: F = dn.iter().copied().sum::<F>() / n;
                    let mean_dn_xhat: F = dn
                        .iter()
                        .zip(normalized.data())
                        .map(|(&a, &b)| a * b)
                        .sum::<F>()
                        / n;
                    let mut dx = Tensor::zeros(&xs);
                    for ((d, &dni), &xh) in dx
                        .data_mut()
                        .iter_mut()
                        .zip(&dn)
                        .zip(normalized.data())
                    {
                        *d = *inv_std * (dni - mean_dn - xh * mean_dn_xhat);
                    }
                    self.accumulate(*x, dx);
                }
                if self.needs(*gamma) {
                    let mut dg = Tensor::zeros(&[chans]);
                    for c in 0..chans {
                        let mut acc = F::zero();
                        for t in 0..inner {
                            acc += g.data()[c * inner + t] * normalized.data()[c * inner + t];
                        }
                        dg.data_mut()[c] = acc;
                    }
                    self.accumulate(*gamma, dg);
                }
                if self.needs(*beta) {
                    let mut db = Tensor::zeros(&[chans]);
                    for c in 0..chans {
                        db.data_mut()[c] =
                            g.data()[c * inner..(c + 1) * inner].iter().copied().sum();
                    }
                    self.accumulate(*beta, db);
                }
            }
            Op::DropoutChannels { x, mask, scale } => {
                let chans = mask.len();
                let inner = g.len() / chans;
                let mut dx = g.clone();
                for (c, &keep) in mask.iter().enumerate() {
                    let row = &mut dx.data_mut()[c * inner..(c + 1) * inner];
                    if keep {
                        for t in row {
                            *t *= *scale;
                        }
                    } else {
                        for t in row {
                            *t = F::zero();
                        }
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::MeanAxis { x, axis } => {
                let xs = self.shape(*x).to_vec();
                let outer: usize = xs[..*axis].iter().product();
                let n = xs[*axis];
                let inner: usize = xs[*axis + 1..].iter().product();
                let inv = F::one() / F::of(n as f64);
                let mut dx = Tensor::zeros(&xs);
                {
                    let d = dx.data_mut();
                    for o in 0..outer {
                        for iw in 0..n {
                            let base = (o * n + iw) * inner;
                            for t in 0..inner {
                                d[base + t] = g.data()[o * inner + t] * inv;
                            }
                        }
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::SumAll(x) => {
                let gv = g.data()[0];
                self.accumulate(*x, Tensor::full(self.shape(*x), gv));
            }
            Op::BceWithLogit { logit, label } => {
                let l = self.value(*logit).data()[0];
                let d = (sigmoid(l) - *label) * g.data()[0];
                let mut dx = Tensor::zeros(self.shape(*logit));
                dx.data_mut()[0] = d;
                self.accumulate(*logit, dx);
            }
        }
        self.nodes[i].op = op;
        Ok(())
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Fixed-order dot product with four-way unrolling.
fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (F::zero(), F::zero(), F::zero(), F::zero());
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut rest = F::zero();
    for i in chunks * 4..n {
        rest += a[i] * b[i];
    }
    ((s0 + s1) + (s2 + s3)) + rest
}
