//! Recorded-expression reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to it; [`Tape::backward`]
//! replays the record in reverse, accumulating adjoints. Handles ([`Var`])
//! carry the id of the tape that produced them, so asking one tape about
//! another's tensor is an explicit error instead of silent garbage.
//!
//! The forward pass delegates to the kernels in [`crate::numerics::ops`];
//! values of every intermediate stay resident until the tape is dropped.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numerics::ops;
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::{for_each_index, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape_id: u64,
    index: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Matmul { a: usize, b: usize },
    TransposeLast { a: usize },
    Softmax { a: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: T },
    Relu { a: usize },
    Sqrt { a: usize },
    Scale { a: usize, c: T },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    MeanAxis { a: usize, axis: usize },
    SumAxis { a: usize, axis: usize },
    SumAll { a: usize },
    Reshape { a: usize },
    EuclideanSq { a: usize, b: usize },
    NllLoss { probs: usize, labels: Vec<usize> },
    Conv2d { x: usize, w: usize },
    AvgPool2 { x: usize },
    GlobalAvgPool { x: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T = f64> {
    id: u64,
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by one backward pass, indexed by the same [`Var`]
/// handles as the forward values.
#[derive(Debug)]
pub struct Gradients<T = f64> {
    tape_id: u64,
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to the tensor behind `var`.
    /// A handle from any other tape was not on the recorded computation
    /// path and is rejected.
    pub fn get(&self, var: Var) -> Result<&Tensor<T>> {
        if var.tape_id != self.tape_id || var.index >= self.grads.len() {
            return Err(Error::NotOnTape);
        }
        Ok(&self.grads[var.index])
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    /// Number of recorded tensors (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape_id: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.tape_id != self.id || var.index >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(var.index)
    }

    fn val(&self, index: usize) -> &Tensor<T> {
        &self.nodes[index].value
    }

    /// Records a leaf holding a copy of `t`.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.clone(), Op::Leaf)
    }

    /// Forward value of a recorded tensor.
    pub fn value(&self, var: Var) -> Result<&Tensor<T>> {
        Ok(self.val(self.check(var)?))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = ops::matmul(self.val(ia), self.val(ib))?;
        Ok(self.push(value, Op::Matmul { a: ia, b: ib }))
    }

    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = ops::transpose_last(self.val(ia))?;
        Ok(self.push(value, Op::TransposeLast { a: ia }))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let value = ops::softmax(self.val(ia), axis)?;
        Ok(self.push(value, Op::Softmax { a: ia, axis }))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let value = ops::layer_normalize(self.val(ix), self.val(ig), self.val(ib), eps)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: ix,
                gain: ig,
                bias: ib,
                eps,
            },
        ))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = ops::relu(self.val(ia));
        Ok(self.push(value, Op::Relu { a: ia }))
    }

    /// Elementwise square root. Differentiable only away from zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = ops::sqrt_elem(self.val(ia));
        Ok(self.push(value, Op::Sqrt { a: ia }))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let ia = self.check(a)?;
        let value = ops::scale(self.val(ia), c);
        Ok(self.push(value, Op::Scale { a: ia, c }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = ops::add_broadcast(self.val(ia), self.val(ib))?;
        Ok(self.push(value, Op::Add { a: ia, b: ib }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = ops::mul_broadcast(self.val(ia), self.val(ib))?;
        Ok(self.push(value, Op::Mul { a: ia, b: ib }))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let value = ops::mean_axis(self.val(ia), axis)?;
        Ok(self.push(value, Op::MeanAxis { a: ia, axis }))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let value = ops::sum_axis(self.val(ia), axis)?;
        Ok(self.push(value, Op::SumAxis { a: ia, axis }))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = ops::sum_all(self.val(ia));
        Ok(self.push(value, Op::SumAll { a: ia }))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.val(ia).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { a: ia }))
    }

    pub fn euclidean_sq(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = ops::euclidean_sq(self.val(ia), self.val(ib))?;
        Ok(self.push(value, Op::EuclideanSq { a: ia, b: ib }))
    }

    /// Mean negative log-likelihood of the true classes under `probs`
    /// [Q, n]. `labels` are episode-local class indices, one per row.
    pub fn nll_loss(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let ip = self.check(probs)?;
        let p = self.val(ip);
        if p.rank() != 2 || p.shape()[0] != labels.len() {
            return Err(Error::ShapeExpectation {
                op: "nll_loss",
                expected: format!("[{}, n] probabilities", labels.len()),
                got: p.shape().to_vec(),
            });
        }
        let n = p.shape()[1];
        let q = labels.len();
        let mut acc = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            if y >= n {
                return Err(Error::LabelOutOfRange { label: y, way: n });
            }
            acc = acc - p.data()[i * n + y].ln();
        }
        let value = Tensor::scalar(acc / T::from_f64(q as f64));
        Ok(self.push(
            value,
            Op::NllLoss {
                probs: ip,
                labels: labels.to_vec(),
            },
        ))
    }

    pub fn conv2d_same(&mut self, x: Var, w: Var) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let value = ops::conv2d_same(self.val(ix), self.val(iw))?;
        Ok(self.push(value, Op::Conv2d { x: ix, w: iw }))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let value = ops::avg_pool2(self.val(ix))?;
        Ok(self.push(value, Op::AvgPool2 { x: ix }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let value = ops::global_avg_pool(self.val(ix))?;
        Ok(self.push(value, Op::GlobalAvgPool { x: ix }))
    }

    /// Reverse pass from a scalar loss. Returns the adjoint of every
    /// recorded tensor; leaves not influencing the loss get zero.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let il = self.check(loss)?;
        if self.val(il).len() != 1 {
            return Err(Error::LossNotScalar(self.val(il).shape().to_vec()));
        }
        let mut grads: Vec<Vec<T>> = self
            .nodes
            .iter()
            .map(|n| vec![T::zero(); n.value.len()])
            .collect();
        grads[il][0] = T::one();

        for idx in (0..self.nodes.len()).rev() {
            // Split so the input adjoints can be mutated while this node's
            // adjoint is read.
            let (before, rest) = grads.split_at_mut(idx);
            let g = rest[0].clone();
            if g.iter().all(|v| *v == T::zero()) {
                continue;
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    self.backward_matmul(*a, *b, &node.value, &g, before);
                }
                Op::TransposeLast { a } => {
                    let gt = Tensor::from_vec(node.value.shape().to_vec(), g).unwrap();
                    let gt = ops::transpose_last(&gt).unwrap();
                    accumulate(&mut before[*a], gt.data());
                }
                Op::Softmax { a, axis } => {
                    let s = &node.value;
                    let (outer, n, inner) = lane_split(s.shape(), *axis);
                    let da = &mut before[*a];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |t: usize| o * n * inner + t * inner + i;
                            let mut dot = T::zero();
                            for t in 0..n {
                                dot = dot + g[at(t)] * s.data()[at(t)];
                            }
                            for t in 0..n {
                                da[at(t)] =
                                    da[at(t)] + s.data()[at(t)] * (g[at(t)] - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    self.backward_layer_norm(*x, *gain, *bias, *eps, &g, before);
                }
                Op::Relu { a } => {
                    let xv = self.val(*a);
                    let da = &mut before[*a];
                    for i in 0..g.len() {
                        if xv.data()[i] > T::zero() {
                            da[i] = da[i] + g[i];
                        }
                    }
                }
                Op::Sqrt { a } => {
                    let out = &node.value;
                    let half = T::from_f64(0.5);
                    let da = &mut before[*a];
                    for i in 0..g.len() {
                        da[i] = da[i] + g[i] * half / out.data()[i];
                    }
                }
                Op::Scale { a, c } => {
                    let da = &mut before[*a];
                    for i in 0..g.len() {
                        da[i] = da[i] + g[i] * *c;
                    }
                }
                Op::Add { a, b } => {
                    let out_shape = node.value.shape().to_vec();
                    reduce_into(&g, &out_shape, self.val(*a).shape(), &mut before[*a]);
                    reduce_into(&g, &out_shape, self.val(*b).shape(), &mut before[*b]);
                }
                Op::Mul { a, b } => {
                    self.backward_mul(*a, *b, &node.value, &g, before);
                }
                Op::MeanAxis { a, axis } => {
                    let shape = self.val(*a).shape();
                    let (outer, n, inner) = lane_split(shape, *axis);
                    let inv = T::one() / T::from_f64(n as f64);
                    let da = &mut before[*a];
                    for o in 0..outer {
                        for t in 0..n {
                            for i in 0..inner {
                                da[o * n * inner + t * inner + i] =
                                    da[o * n * inner + t * inner + i] + g[o * inner + i] * inv;
                            }
                        }
                    }
                }
                Op::SumAxis { a, axis } => {
                    let shape = self.val(*a).shape();
                    let (outer, n, inner) = lane_split(shape, *axis);
                    let da = &mut before[*a];
                    for o in 0..outer {
                        for t in 0..n {
                            for i in 0..inner {
                                da[o * n * inner + t * inner + i] =
                                    da[o * n * inner + t * inner + i] + g[o * inner + i];
                            }
                        }
                    }
                }
                Op::SumAll { a } => {
                    let da = &mut before[*a];
                    for v in da.iter_mut() {
                        *v = *v + g[0];
                    }
                }
                Op::Reshape { a } => {
                    accumulate(&mut before[*a], &g);
                }
                Op::EuclideanSq { a, b } => {
                    let av = self.val(*a);
                    let bv = self.val(*b);
                    let (p, m) = (av.shape()[0], av.shape()[1]);
                    let r = bv.shape()[0];
                    let two = T::from_f64(2.0);
                    for i in 0..p {
                        for j in 0..r {
                            let gij = g[i * r + j];
                            if gij == T::zero() {
                                continue;
                            }
                            for d in 0..m {
                                let diff = av.data()[i * m + d] - bv.data()[j * m + d];
                                before[*a][i * m + d] =
                                    before[*a][i * m + d] + gij * two * diff;
                                before[*b][j * m + d] =
                                    before[*b][j * m + d] - gij * two * diff;
                            }
                        }
                    }
                }
                Op::NllLoss { probs, labels } => {
                    let p = self.val(*probs);
                    let n = p.shape()[1];
                    let inv_q = T::one() / T::from_f64(labels.len() as f64);
                    let dp = &mut before[*probs];
                    for (i, &y) in labels.iter().enumerate() {
                        dp[i * n + y] =
                            dp[i * n + y] - g[0] * inv_q / p.data()[i * n + y];
                    }
                }
                Op::Conv2d { x, w } => {
                    self.backward_conv2d(*x, *w, &g, before);
                }
                Op::AvgPool2 { x } => {
                    let xs = self.val(*x).shape();
                    let (b, h, wd, c) = (xs[0], xs[1], xs[2], xs[3]);
                    let (oh, ow) = (h / 2, wd / 2);
                    let quarter = T::from_f64(0.25);
                    let dx = &mut before[*x];
                    for bi in 0..b {
                        for i in 0..oh {
                            for j in 0..ow {
                                for ci in 0..c {
                                    let go = g[((bi * oh + i) * ow + j) * c + ci] * quarter;
                                    for (u, v) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                        let xi = ((bi * h + 2 * i + u) * wd + 2 * j + v) * c + ci;
                                        dx[xi] = dx[xi] + go;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::GlobalAvgPool { x } => {
                    let xs = self.val(*x).shape();
                    let (b, h, wd, c) = (xs[0], xs[1], xs[2], xs[3]);
                    let inv = T::one() / T::from_f64((h * wd) as f64);
                    let dx = &mut before[*x];
                    for bi in 0..b {
                        for i in 0..h {
                            for j in 0..wd {
                                for ci in 0..c {
                                    let xi = ((bi * h + i) * wd + j) * c + ci;
                                    dx[xi] = dx[xi] + g[bi * c + ci] * inv;
                                }
                            }
                        }
                    }
                }
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, data)| Tensor::from_vec(self.nodes[i].value.shape().to_vec(), data).unwrap())
            .collect();
        Ok(Gradients {
            tape_id: self.id,
            grads,
        })
    }

    fn backward_matmul(&self, a: usize, b: usize, out: &Tensor<T>, g: &[T], before: &mut [Vec<T>]) {
        let av = self.val(a);
        let bv = self.val(b);
        let (r, k) = (av.shape()[av.rank() - 2], av.shape()[av.rank() - 1]);
        let c = bv.shape()[bv.rank() - 1];
        let batch = &out.shape()[..out.rank() - 2];
        let a_batch = &av.shape()[..av.rank() - 2];
        let b_batch = &bv.shape()[..bv.rank() - 2];
        let a_strides = av.strides()[..av.rank() - 2].to_vec();
        let b_strides = bv.strides()[..bv.rank() - 2].to_vec();
        // Accumulating through the broadcast offset map performs the sum
        // over stretched batch axes implicitly. Local buffers sidestep the
        // a == b aliasing case.
        let mut da = vec![T::zero(); av.len()];
        let mut db = vec![T::zero(); bv.len()];
        let mut out_off = 0;
        for_each_index(batch, |idx| {
            let a_off = broadcast_offset_local(idx, a_batch, &a_strides);
            let b_off = broadcast_offset_local(idx, b_batch, &b_strides);
            for i in 0..r {
                for j in 0..c {
                    let go = g[out_off + i * c + j];
                    if go == T::zero() {
                        continue;
                    }
                    for t in 0..k {
                        da[a_off + i * k + t] =
                            da[a_off + i * k + t] + go * bv.data()[b_off + t * c + j];
                        db[b_off + t * c + j] =
                            db[b_off + t * c + j] + go * av.data()[a_off + i * k + t];
                    }
                }
            }
            out_off += r * c;
        });
        accumulate(&mut before[a], &da);
        accumulate(&mut before[b], &db);
    }

    fn backward_mul(&self, a: usize, b: usize, out: &Tensor<T>, g: &[T], before: &mut [Vec<T>]) {
        let av = self.val(a);
        let bv = self.val(b);
        let (sa, sb) = (av.strides(), bv.strides());
        let mut da = vec![T::zero(); av.len()];
        let mut db = vec![T::zero(); bv.len()];
        let mut flat = 0;
        for_each_index(out.shape(), |idx| {
            let a_off = broadcast_offset_local(idx, av.shape(), &sa);
            let b_off = broadcast_offset_local(idx, bv.shape(), &sb);
            da[a_off] = da[a_off] + bv.data()[b_off] * g[flat];
            db[b_off] = db[b_off] + av.data()[a_off] * g[flat];
            flat += 1;
        });
        accumulate(&mut before[a], &da);
        accumulate(&mut before[b], &db);
    }

    fn backward_layer_norm(
        &self,
        x: usize,
        gain: usize,
        bias: usize,
        eps: T,
        g: &[T],
        before: &mut [Vec<T>],
    ) {
        let xv = self.val(x);
        let gv = self.val(gain);
        let m = *xv.shape().last().unwrap();
        let rows = xv.len() / m;
        let inv_m = T::one() / T::from_f64(m as f64);
        for row in 0..rows {
            let xs = &xv.data()[row * m..(row + 1) * m];
            let gs = &g[row * m..(row + 1) * m];
            let mut mean = T::zero();
            for &v in xs {
                mean = mean + v;
            }
            mean = mean * inv_m;
            let mut var = T::zero();
            for &v in xs {
                let d = v - mean;
                var = var + d * d;
            }
            var = var * inv_m;
            let inv_std = T::one() / (var + eps).sqrt();

            // gy = upstream * gain; the x adjoint needs its mean and its
            // correlation with the normalized row.
            let mut mean_gy = T::zero();
            let mut mean_gy_h = T::zero();
            for j in 0..m {
                let h = (xs[j] - mean) * inv_std;
                let gy = gs[j] * gv.data()[j];
                mean_gy = mean_gy + gy;
                mean_gy_h = mean_gy_h + gy * h;
                before[gain][j] = before[gain][j] + gs[j] * h;
                before[bias][j] = before[bias][j] + gs[j];
            }
            mean_gy = mean_gy * inv_m;
            mean_gy_h = mean_gy_h * inv_m;
            for j in 0..m {
                let h = (xs[j] - mean) * inv_std;
                let gy = gs[j] * gv.data()[j];
                before[x][row * m + j] =
                    before[x][row * m + j] + (gy - mean_gy - h * mean_gy_h) * inv_std;
            }
        }
    }

    fn backward_conv2d(&self, x: usize, w: usize, g: &[T], before: &mut [Vec<T>]) {
        let xv = self.val(x);
        let wv = self.val(w);
        let (b, h, wd, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (kh, kw, cout) = (wv.shape()[0], wv.shape()[1], wv.shape()[3]);
        let (ph, pw) = (kh / 2, kw / 2);
        let xi = |bi: usize, i: usize, j: usize, c: usize| ((bi * h + i) * wd + j) * cin + c;
        let wi =
            |di: usize, dj: usize, ci: usize, co: usize| ((di * kw + dj) * cin + ci) * cout + co;
        let mut dx = vec![T::zero(); xv.len()];
        let mut dw = vec![T::zero(); wv.len()];
        for bi in 0..b {
            for i in 0..h {
                for j in 0..wd {
                    let g_base = ((bi * h + i) * wd + j) * cout;
                    for di in 0..kh {
                        let si = i + di;
                        if si < ph || si - ph >= h {
                            continue;
                        }
                        for dj in 0..kw {
                            let sj = j + dj;
                            if sj < pw || sj - pw >= wd {
                                continue;
                            }
                            for ci in 0..cin {
                                let x_idx = xi(bi, si - ph, sj - pw, ci);
                                let xval = xv.data()[x_idx];
                                for co in 0..cout {
                                    let go = g[g_base + co];
                                    dx[x_idx] = dx[x_idx] + go * wv.data()[wi(di, dj, ci, co)];
                                    dw[wi(di, dj, ci, co)] =
                                        dw[wi(di, dj, ci, co)] + go * xval;
                                }
                            }
                        }
                    }
                }
            }
        }
        accumulate(&mut before[x], &dx);
        accumulate(&mut before[w], &dw);
    }
}

fn lane_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

fn accumulate<T: Scalar>(dst: &mut [T], src: &[T]) {
    for i in 0..dst.len() {
        dst[i] = dst[i] + src[i];
    }
}

/// Sums `g` (shaped `out_shape`) down to `target_shape`, accumulating into
/// `dst`. Inverse of broadcasting in the forward direction.
fn reduce_into<T: Scalar>(g: &[T], out_shape: &[usize], target_shape: &[usize], dst: &mut [T]) {
    let mut strides = vec![1usize; target_shape.len()];
    for i in (0..target_shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * target_shape[i + 1];
    }
    let mut flat = 0;
    for_each_index(out_shape, |idx| {
        let off = broadcast_offset_local(idx, target_shape, &strides);
        dst[off] = dst[off] + g[flat];
        flat += 1;
    });
}

fn broadcast_offset_local(out_idx: &[usize], shape: &[usize], strides: &[usize]) -> usize {
    let skip = out_idx.len() - shape.len();
    let mut flat = 0;
    for (axis, &extent) in shape.iter().enumerate() {
        let i = if extent == 1 { 0 } else { out_idx[skip + axis] };
        flat += i * strides[axis];
    }
    flat
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(&Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        match tape.backward(x) {
            Err(Error::LossNotScalar(shape)) => assert_eq!(shape, vec![1, 2]),
            other => panic!("expected LossNotScalar, got {other:?}"),
        }
    }

    #[test]
    fn foreign_var_is_rejected() {
        let mut tape_a = Tape::<f64>::new();
        let mut tape_b = Tape::<f64>::new();
        let xa = tape_a.input(&Tensor::scalar(1.0));
        let xb = tape_b.input(&Tensor::scalar(2.0));
        assert!(matches!(tape_a.matmul(xa, xb), Err(Error::NotOnTape)));
        let grads = tape_b.backward(xb).unwrap();
        assert!(matches!(grads.get(xa), Err(Error::NotOnTape)));
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(&Tensor::scalar(3.0));
        let unused = tape.input(&Tensor::scalar(5.0));
        let loss = tape.scale(x, 2.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matmul_chain_gradient_hand_checked() {
        // loss = sum(A B) with A = [[1, 2]], B = [[3], [4]]:
        // dA = [[3, 4]], dB = [[1], [2]].
        let mut tape = Tape::<f64>::new();
        let a = tape.input(&Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = tape.input(&Tensor::from_vec(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn softmax_nll_gradient_is_probs_minus_onehot() {
        // d loss / d logits = (softmax(logits) - onehot) / Q, the classic
        // cross-entropy identity, here with Q = 1.
        let mut tape = Tape::<f64>::new();
        let logits = tape.input(&Tensor::from_rows(&[vec![0.2, -0.7, 1.1]]).unwrap());
        let probs = tape.softmax(logits, 1).unwrap();
        let loss = tape.nll_loss(probs, &[2]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let p = tape.value(probs).unwrap().data().to_vec();
        let want = [p[0], p[1], p[2] - 1.0];
        let got = grads.get(logits).unwrap();
        for i in 0..3 {
            assert!((got.data()[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn broadcast_add_reduces_gradient_to_row_shape() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(&Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let row = tape.input(&Tensor::from_rows(&[vec![0.5, -0.5]]).unwrap());
        let s = tape.add(a, row).unwrap();
        let loss = tape.sum_all(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(row).unwrap().shape(), &[1, 2]);
        assert_eq!(grads.get(row).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(grads.get(a).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn nll_loss_rejects_out_of_range_label() {
        let mut tape = Tape::<f64>::new();
        let p = tape.input(&Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap());
        match tape.nll_loss(p, &[2]) {
            Err(Error::LabelOutOfRange { label: 2, way: 2 }) => {}
            other => panic!("expected LabelOutOfRange, got {other:?}"),
        }
    }

    #[test]
    fn same_input_used_twice_accumulates() {
        // loss = sum(x * x) => d/dx = 2x.
        let mut tape = Tape::<f64>::new();
        let x = tape.input(&Tensor::from_rows(&[vec![1.5, -2.0]]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, -4.0]);
    }
}
