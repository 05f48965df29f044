//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. Nodes are created in topological order, so
//! the backward sweep simply walks the tape in reverse.

use std::collections::HashSet;

use super::kernels::{self, ConvGeom, DeconvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

/// Non-trainable state of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Scalar> BnStats<T> {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::from_f64_lossy(eps),
            momentum: T::from_f64_lossy(momentum),
        }
    }
}

enum Op<T> {
    Leaf,
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Deconv {
        x: Var,
        w: Var,
        geom: DeconvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(Var),
    AvgPool2(Var),
    Concat(Vec<Var>),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Max {
        x: Var,
        /// Flat input index of each output's maximum; `usize::MAX` for empty groups.
        argmax: Vec<usize>,
    },
    Scatter {
        x: Var,
        targets: Vec<usize>,
    },
    Dot {
        x: Var,
        weights: Vec<T>,
    },
    /// Scalar produced outside the tape with known local gradients.
    Scalar {
        inputs: Vec<Var>,
        grads: Vec<Vec<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<String>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Recording of one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() && inputs.iter().all(|v| self.value(*v).is_finite()) {
            return Err(Error::NonFinite(format!(
                "{} produced a non-finite value from finite inputs",
                op_name(&op)
            )));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant (or, if `requires_grad` is set, a differentiable input).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad;
        let value = Tensor {
            grad: None,
            ..t
        };
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a named parameter; its gradient is reported by [`Graph::param_grads`].
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        let v = self.input(Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            requires_grad: t.requires_grad,
            grad: None,
        });
        self.nodes[v.0].param = Some(name.to_string());
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Cross-correlation of `x [N,C_in,H,W]` with `w [C_out,C_in,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::config(format!("conv2d expects 4-d input and weight, got {xs:?} and {ws:?}")));
        }
        if ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::config(format!("conv2d weight {ws:?} does not fit input {xs:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::config(format!("conv2d bias {:?} does not match {} outputs", self.shape(b), ws[0])));
            }
        }
        let k = ws[2];
        let (h_out, w_out) = match (
            kernels::conv_out_size(xs[2], k, stride, pad),
            kernels::conv_out_size(xs[3], k, stride, pad),
        ) {
            (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
            _ => {
                return Err(Error::config(format!(
                    "conv2d output would be empty for input {xs:?}, kernel {k}, stride {stride}, pad {pad}"
                )))
            }
        };
        let geom = ConvGeom {
            n: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            k,
            stride,
            pad,
            h_out,
            w_out,
        };
        let mut out = vec![T::zero(); geom.n * geom.c_out * h_out * w_out];
        kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let value = Tensor::new(vec![geom.n, geom.c_out, h_out, w_out], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Transposed convolution with `w [C_in,C_out,k,k]`, `k == stride`, no padding.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] {
            return Err(Error::config(format!(
                "conv_transpose2d weight {ws:?} does not fit input {xs:?}"
            )));
        }
        if ws[2] != ws[3] || ws[2] != stride || stride == 0 {
            return Err(Error::config(format!(
                "conv_transpose2d requires kernel == stride, got kernel {:?} and stride {stride}",
                &ws[2..]
            )));
        }
        let geom = DeconvGeom {
            n: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[1],
            k: stride,
        };
        let shape = vec![geom.n, geom.c_out, geom.h * stride, geom.w * stride];
        let mut out = vec![T::zero(); shape.iter().product()];
        kernels::deconv_forward(&geom, self.value(x).data(), self.value(w).data(), &mut out);
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Deconv { x, w, geom }, &[x, w])
    }

    /// Per-channel normalization of `[N, C, ...]` followed by `gamma·x̂ + beta`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: &mut BnStats<T>, mode: BnMode) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::config(format!("batch_norm expects at least 2 dims, got {xs:?}")));
        }
        let (n, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.running_mean.len() != c || stats.running_var.len() != c {
            return Err(Error::config(format!("batch_norm parameters do not match {c} channels")));
        }
        let count = n * inner;
        let data = self.value(x).data();
        let (mean, inv_std) = match mode {
            BnMode::Train => {
                if count < 2 {
                    return Err(Error::DegenerateBatch(count));
                }
                let cnt = T::from_usize(count).unwrap();
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let vals = || (0..n).flat_map(move |b| data[(b * c + ch) * inner..(b * c + ch + 1) * inner].iter().copied());
                    let m = vals().sum::<T>() / cnt;
                    let v = vals().map(|x| (x - m) * (x - m)).sum::<T>() / cnt;
                    mean[ch] = m;
                    var[ch] = v;
                }
                let mom = stats.momentum;
                let unbias = cnt / (cnt - T::one());
                for ch in 0..c {
                    stats.running_mean[ch] = (T::one() - mom) * stats.running_mean[ch] + mom * mean[ch];
                    stats.running_var[ch] = (T::one() - mom) * stats.running_var[ch] + mom * var[ch] * unbias;
                }
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + stats.eps).sqrt()).collect();
                (mean, inv_std)
            }
            BnMode::Eval => (
                stats.running_mean.clone(),
                stats.running_var.iter().map(|&v| T::one() / (v + stats.eps).sqrt()).collect(),
            ),
        };
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); data.len()];
        for b in 0..n {
            for ch in 0..c {
                let range = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                let (m, s, g, be) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
                for (o, &v) in out[range.clone()].iter_mut().zip(&data[range]) {
                    *o = g * ((v - m) * s) + be;
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train: mode == BnMode::Train,
            },
            &[x, gamma, beta],
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let out = src.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(src.shape().to_vec(), out)?;
        self.push(value, Op::Relu(x), &[x])
    }

    /// 2×2 mean pooling with stride 2 over the last two axes.
    pub fn avg_pool2x2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(Error::config(format!("avg_pool2x2 needs even spatial dims, got {xs:?}")));
        }
        let (h, w) = (xs[2], xs[3]);
        let planes = xs[0] * xs[1];
        let mut out = vec![T::zero(); planes * h * w / 4];
        kernels::avg_pool2_forward(planes, h, w, self.value(x).data(), &mut out);
        let value = Tensor::new(vec![xs[0], xs[1], h / 2, w / 2], out)?;
        self.push(value, Op::AvgPool2(x), &[x])
    }

    /// Stacks `[N, C_i, ...]` inputs along the channel axis in argument order.
    pub fn channel_concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::config("channel_concat needs at least one input"))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() < 2 {
            return Err(Error::config(format!("channel_concat expects [N, C, ...], got {s0:?}")));
        }
        let mut channels = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(Error::config(format!("channel_concat shape mismatch: {s0:?} vs {s:?}")));
            }
            channels += s[1];
        }
        let n = s0[0];
        let inner: usize = s0[2..].iter().product();
        let mut out = Vec::with_capacity(n * channels * inner);
        for b in 0..n {
            for &v in xs {
                let t = self.value(v);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let mut shape = s0;
        shape[1] = channels;
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Concat(xs.to_vec()), xs)
    }

    /// `x [M, D_in] · w [D_in, D_out] + b [D_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::config(format!("linear: input {xs:?} does not fit weight {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[1]] {
                return Err(Error::config(format!("linear: bias {:?} does not fit weight {ws:?}", self.shape(b))));
            }
        }
        let (m, k, n) = (xs[0], xs[1], ws[1]);
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            out.chunks_exact_mut(n).for_each(|row| row.copy_from_slice(bias));
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(m, k, n, self.value(x).data(), k, 1, self.value(w).data(), n, 1, beta, &mut out, n, 1);
        let value = Tensor::new(vec![m, n], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Linear { x, w, b }, &inputs)
    }

    /// Maximum along `axis`. `mask`, when given, has one entry per element of
    /// the dimensions up to and including `axis` (`true` = participates).
    /// Groups with no participating element reduce to 0; ties go to the lowest index.
    pub fn max_over_axis(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::config(format!("max_over_axis: axis {axis} out of range for {xs:?}")));
        }
        let outer: usize = xs[..axis].iter().product();
        let len = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        if let Some(m) = mask {
            if m.len() != outer * len {
                return Err(Error::config(format!(
                    "max_over_axis: mask has {} entries, expected {}",
                    m.len(),
                    outer * len
                )));
            }
        }
        let data = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = vec![usize::MAX; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best: Option<(usize, T)> = None;
                for j in 0..len {
                    if mask.is_some_and(|m| !m[o * len + j]) {
                        continue;
                    }
                    let idx = (o * len + j) * inner + i;
                    if best.is_none_or(|(_, bv)| data[idx] > bv) {
                        best = Some((idx, data[idx]));
                    }
                }
                if let Some((idx, v)) = best {
                    out[o * inner + i] = v;
                    argmax[o * inner + i] = idx;
                }
            }
        }
        let mut shape: Vec<usize> = xs[..axis].to_vec();
        shape.extend_from_slice(&xs[axis + 1..]);
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Max { x, argmax }, &[x])
    }

    /// Writes rows of `x [P, C]` into a zero `[N, C, H, W]` grid at
    /// `(sample, row, col)`. Duplicate cells violate the pillar invariant.
    pub fn scatter_to_grid(&mut self, x: Var, coords: &[[usize; 3]], n: usize, h: usize, w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0] != coords.len() {
            return Err(Error::config(format!(
                "scatter: features {xs:?} do not match {} coordinates",
                coords.len()
            )));
        }
        let c = xs[1];
        let mut seen = HashSet::with_capacity(coords.len());
        let mut targets = Vec::with_capacity(coords.len());
        for &[s, r, col] in coords {
            if s >= n || r >= h || col >= w {
                return Err(Error::Invariant(format!("pillar coordinate {:?} outside {n}x{h}x{w}", [s, r, col])));
            }
            if !seen.insert((s, r, col)) {
                return Err(Error::Invariant(format!("duplicate pillar coordinate {:?}", [s, r, col])));
            }
            targets.push(s * c * h * w + r * w + col);
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * h * w];
        for (p, &base) in targets.iter().enumerate() {
            for ch in 0..c {
                out[base + ch * h * w] = src[p * c + ch];
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.push(value, Op::Scatter { x, targets }, &[x])
    }

    /// `Σ x ⊙ weights` as a scalar.
    pub fn dot(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(Error::config("dot: weight length does not match input"));
        }
        let s = self.value(x).data().iter().zip(&weights).map(|(&a, &b)| a * b).sum();
        self.push(Tensor::new(vec![1], vec![s])?, Op::Dot { x, weights }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        self.dot(x, vec![T::one(); n])
    }

    /// Records a scalar computed outside the tape together with its gradient
    /// with respect to each input.
    pub fn custom_scalar(&mut self, inputs: &[Var], value: T, grads: Vec<Vec<T>>) -> Result<Var> {
        if inputs.len() != grads.len() || inputs.iter().zip(&grads).any(|(v, g)| self.value(*v).numel() != g.len()) {
            return Err(Error::config("custom_scalar: gradient shapes do not match inputs"));
        }
        self.push(
            Tensor::new(vec![1], vec![value])?,
            Op::Scalar {
                inputs: inputs.to_vec(),
                grads,
            },
            inputs,
        )
    }

    /// Reverse sweep from the scalar `loss`. Only leaves that require
    /// gradients (and the path to them) are differentiated.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::config(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(node, &gy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(x) => self.accumulate(grads, *x, gy.to_vec()),
            Op::Conv2d { x, w, b, geom } => {
                let mut dx = self.wants(*x).then(|| vec![T::zero(); self.value(*x).numel()]);
                let mut dw = self.wants(*w).then(|| vec![T::zero(); self.value(*w).numel()]);
                let mut db = b.filter(|b| self.wants(*b)).map(|_| vec![T::zero(); geom.c_out]);
                kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gy,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Deconv { x, w, geom } => {
                let mut dx = self.wants(*x).then(|| vec![T::zero(); self.value(*x).numel()]);
                let mut dw = self.wants(*w).then(|| vec![T::zero(); self.value(*w).numel()]);
                kernels::deconv_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gy,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let xv = self.value(*x);
                let xs = xv.shape();
                let (n, c) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let data = xv.data();
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                        for (&g, &v) in gy[r.clone()].iter().zip(&data[r]) {
                            dgamma[ch] = dgamma[ch] + g * (v - mean[ch]) * inv_std[ch];
                            dbeta[ch] = dbeta[ch] + g;
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); data.len()];
                    let cnt = T::from_usize(n * inner).unwrap();
                    for b in 0..n {
                        for ch in 0..c {
                            let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                            let (m, s, g) = (mean[ch], inv_std[ch], gv[ch]);
                            for ((o, &dy), &v) in dx[r.clone()].iter_mut().zip(&gy[r.clone()]).zip(&data[r]) {
                                *o = if *train {
                                    // dx = γ·s/M · (M·dy − Σdy − x̂·Σ(dy·x̂))
                                    g * s / cnt * (cnt * dy - dbeta[ch] - (v - m) * s * dgamma[ch])
                                } else {
                                    g * s * dy
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Relu(x) => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(gy)
                    .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::AvgPool2(x) => {
                let xs = self.shape(*x);
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                kernels::avg_pool2_backward(xs[0] * xs[1], xs[2], xs[3], gy, &mut dx);
                self.accumulate(grads, *x, dx);
            }
            Op::Concat(xs) => {
                let shape = node.value.shape();
                let (n, total) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let mut offset = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    if self.wants(v) {
                        let mut dx = Vec::with_capacity(n * c * inner);
                        for b in 0..n {
                            let start = (b * total + offset) * inner;
                            dx.extend_from_slice(&gy[start..start + c * inner]);
                        }
                        self.accumulate(grads, v, dx);
                    }
                    offset += c;
                }
            }
            Op::Linear { x, w, b } => {
                let (m, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let n = self.shape(*w)[1];
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); m * k];
                    T::gemm(m, n, k, gy, n, 1, self.value(*w).data(), 1, n, T::zero(), &mut dx, k, 1);
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); k * n];
                    T::gemm(k, m, n, self.value(*x).data(), 1, k, gy, n, 1, T::zero(), &mut dw, n, 1);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); n];
                    for row in gy.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(a, &g)| *a = *a + g);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Max { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&idx, &g) in argmax.iter().zip(gy) {
                    if idx != usize::MAX {
                        dx[idx] = dx[idx] + g;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Scatter { x, targets } => {
                let shape = node.value.shape();
                let plane = shape[2] * shape[3];
                let c = self.shape(*x)[1];
                let mut dx = vec![T::zero(); targets.len() * c];
                for (p, &base) in targets.iter().enumerate() {
                    for ch in 0..c {
                        dx[p * c + ch] = gy[base + ch * plane];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Dot { x, weights } => {
                let g = gy[0];
                self.accumulate(grads, *x, weights.iter().map(|&w| w * g).collect());
            }
            Op::Scalar { inputs, grads: local } => {
                let g = gy[0];
                for (&v, lg) in inputs.iter().zip(local) {
                    self.accumulate(grads, v, lg.iter().map(|&d| d * g).collect());
                }
            }
        }
    }

    /// Gradients of every named parameter, in recording order.
    pub fn param_grads<'a>(&'a self, grads: &'a Gradients<T>) -> impl Iterator<Item = (&'a str, &'a [T])> + 'a {
        self.nodes.iter().enumerate().filter_map(move |(i, node)| {
            let name = node.param.as_deref()?;
            let g = grads.grads[i].as_deref()?;
            Some((name, g))
        })
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Reshape(_) => "reshape",
        Op::Conv2d { .. } => "conv2d",
        Op::Deconv { .. } => "conv_transpose2d",
        Op::BatchNorm { .. } => "batch_norm",
        Op::Relu(_) => "relu",
        Op::AvgPool2(_) => "avg_pool2x2",
        Op::Concat(_) => "channel_concat",
        Op::Linear { .. } => "linear",
        Op::Max { .. } => "max_over_axis",
        Op::Scatter { .. } => "scatter",
        Op::Dot { .. } => "dot",
        Op::Scalar { .. } => "custom_scalar",
    }
}
