//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and returns a [`Grads`]
//! table. Graphs are cheap to build and are meant to be thrown away after
//! each step.

use crate::float::{cst, Float};
use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, strides, sum_to_shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// One crop-and-resize window: `(batch index, y0, x0, side)`.
pub type CropBox = (usize, usize, usize, usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sqrt(Var),
    Square(Var),
    MatMul { a: Var, b: Var, tb: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Upsample2x(Var),
    AvgPool2(Var),
    PixelShuffle(Var, usize),
    InstanceNorm { x: Var, eps: f64 },
    CropResize { x: Var, boxes: Vec<CropBox>, size: usize },
    Sum(Var),
    SumAxes(Var),
    Reshape(Var),
    Concat { xs: Vec<Var>, axis: usize },
    Gather0 { x: Var, idx: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize> },
}

struct Node<T: Float> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, Var)>,
    frozen: Vec<(ParamId, Var)>,
    freeze: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), frozen: Vec::new(), freeze: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked (e.g. inputs of a gradient penalty).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    /// While on, [`Graph::param`] binds parameters as constants, e.g. to
    /// run a discriminator inside the generator's loss.
    pub fn set_freeze_params(&mut self, on: bool) {
        self.freeze = on;
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if self.freeze {
            if let Some(&(_, v)) = self.frozen.iter().find(|(p, _)| *p == id) {
                return v;
            }
            let v = self.constant(store.get(id).clone());
            self.frozen.push((id, v));
            return v;
        }
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, store.trainable(id));
        self.params.push((id, v));
        v
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(cst(v)))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op) -> Var {
        let v = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(v, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = broadcast_shape(ta.shape(), tb.shape()).unwrap_or_else(|e| panic!("{e}"));
        let sa = broadcast_strides(ta.shape(), &out);
        let sb = broadcast_strides(tb.shape(), &out);
        let mut res = Tensor::zeros(&out);
        let (da, db) = (ta.data(), tb.data());
        let rd = res.data_mut();
        for_each_broadcast(&out, &sa, &sb, |o, i, j| rd[o] = f(da[i], db[j]));
        let ng = self.ng(a) || self.ng(b);
        self.push(res, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = cst::<T>(c);
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let k = cst::<T>(c);
        self.unary(x, |v| v * k, Op::MulScalar(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.mul_scalar(x, -1.0)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = cst::<T>(slope);
        self.unary(x, |v| if v > T::zero() { v } else { v * s }, Op::LeakyRelu(x, slope))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// 2-D product `a·b` (or `a·bᵀ` when `tb`).
    pub fn matmul(&mut self, a: Var, b: Var, tb: bool) -> Var {
        let (ta, tbv) = (self.value(a), self.value(b));
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (kb, n) = if tb { (tbv.shape()[1], tbv.shape()[0]) } else { (tbv.shape()[0], tbv.shape()[1]) };
        assert_eq!(k, kb, "matmul inner dims {:?} x {:?} (tb={tb})", ta.shape(), tbv.shape());
        let mut out = Tensor::zeros(&[m, n]);
        let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
        unsafe {
            T::gemm(
                m, k, n, T::one(),
                ta.data().as_ptr(), k as isize, 1,
                tbv.data().as_ptr(), rsb, csb,
                T::zero(), out.data_mut().as_mut_ptr(), n as isize, 1,
            );
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul { a, b, tb }, ng)
    }

    /// `x·wᵀ + b` with `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w, true);
        match b {
            Some(b) => self.add(y, b),
            None => y,
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = {
            let tb = b.map(|b| self.value(b));
            assert_eq!(self.shape(x)[1], self.shape(w)[1], "conv2d channel mismatch");
            kernels::conv2d_forward(self.value(x), self.value(w), tb, stride, pad)
        };
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let v = kernels::upsample2x(self.value(x));
        let ng = self.ng(x);
        self.push(v, Op::Upsample2x(x), ng)
    }

    pub fn avgpool2(&mut self, x: Var) -> Var {
        let v = kernels::avgpool2(self.value(x));
        let ng = self.ng(x);
        self.push(v, Op::AvgPool2(x), ng)
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Var {
        let v = kernels::pixel_shuffle(self.value(x), r);
        let ng = self.ng(x);
        self.push(v, Op::PixelShuffle(x, r), ng)
    }

    /// Per-sample, per-channel normalisation over the spatial axes.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let (n, c, h, w) = kernels::dims4(t.shape());
        let hw = h * w;
        let mut out = Tensor::zeros(t.shape());
        let inv = cst::<T>(1.0 / hw as f64);
        let e = cst::<T>(eps);
        for p in 0..n * c {
            let s = &t.data()[p * hw..(p + 1) * hw];
            let mean = s.iter().copied().sum::<T>() * inv;
            let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv;
            let r = T::one() / (var + e).sqrt();
            for (o, &v) in out.data_mut()[p * hw..(p + 1) * hw].iter_mut().zip(s) {
                *o = (v - mean) * r;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::InstanceNorm { x, eps }, ng)
    }

    /// Square crops of `x` (one per box), each bilinearly resized to `size`.
    pub fn crop_resize(&mut self, x: Var, boxes: &[CropBox], size: usize) -> Var {
        let t = self.value(x);
        let (_, c, _, _) = kernels::dims4(t.shape());
        let parts: Vec<Tensor<T>> = boxes
            .iter()
            .map(|&(b, y0, x0, side)| {
                let one = t.index0(b).reshape(&[1, c, t.shape()[2], t.shape()[3]]).unwrap();
                kernels::resize_bilinear(&kernels::crop2d(&one, y0, x0, side, side), size, size)
            })
            .collect();
        let v = Tensor::cat0(&parts).unwrap();
        let ng = self.ng(x);
        self.push(v, Op::CropResize { x, boxes: boxes.to_vec(), size }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(v, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Sum over `axes`, keeping them as size-1 dims.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Var {
        let t = self.value(x);
        let mut shape = t.shape().to_vec();
        for &a in axes {
            shape[a] = 1;
        }
        let st = broadcast_strides(&shape, t.shape());
        let zero = vec![0; t.rank()];
        let mut out = Tensor::zeros(&shape);
        let (td, od) = (t.data(), out.data_mut());
        for_each_broadcast(t.shape(), &st, &zero, |i, o, _| od[o] += td[i]);
        let ng = self.ng(x);
        self.push(out, Op::SumAxes(x), ng)
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Var {
        let n: usize = axes.iter().map(|&a| self.shape(x)[a]).product();
        let s = self.sum_axes(x, axes);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape).unwrap_or_else(|e| panic!("{e}"));
        let ng = self.ng(x);
        self.push(v, Op::Reshape(x), ng)
    }

    /// Flattens all axes after the first.
    pub fn flatten(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        let first = self.shape(xs[0]).to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            assert!(
                s.len() == first.len() && s[..axis] == first[..axis] && s[axis + 1..] == first[axis + 1..],
                "concat shape mismatch"
            );
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let ng = xs.iter().any(|&v| self.ng(v));
        self.push(Tensor::new(&shape, data).unwrap(), Op::Concat { xs: xs.to_vec(), axis }, ng)
    }

    /// Rows `idx` of `x` along axis 0 (repeats allowed).
    pub fn gather0(&mut self, x: Var, idx: &[usize]) -> Var {
        let t = self.value(x);
        let parts: Vec<Tensor<T>> = idx.iter().map(|&i| t.index0(i)).collect();
        let v = Tensor::stack(&parts).unwrap();
        let ng = self.ng(x);
        self.push(v, Op::Gather0 { x, idx: idx.to_vec() }, ng)
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let t = self.value(logits);
        let (n, k) = (t.shape()[0], t.shape()[1]);
        assert_eq!(n, labels.len());
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = &t.data()[i * k..(i + 1) * k];
            total += log_sum_exp(row) - row[y];
        }
        let v = Tensor::scalar(total / cst(n as f64));
        let ng = self.ng(logits);
        self.push(v, Op::CrossEntropy { logits, labels: labels.to_vec() }, ng)
    }

    /// `x / sqrt(Σ x² + eps)` along axis 1 of a 2-D tensor.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let sq = self.square(x);
        let s = self.sum_axes(sq, &[1]);
        let s = self.add_scalar(s, eps);
        let n = self.sqrt(s);
        self.div(x, n)
    }

    /// Runs reverse mode from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads, params: self.params.clone() }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.ng(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, sum_to_shape(g, self.shape(*a)));
                acc(*b, sum_to_shape(g, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                acc(*a, sum_to_shape(g, self.shape(*a)));
                acc(*b, sum_to_shape(&g.scale(-T::one()), self.shape(*b)));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, sum_to_shape(&self.bmul(g, *b, |g, b| g * b), self.shape(*a)));
                }
                if self.ng(*b) {
                    acc(*b, sum_to_shape(&self.bmul(g, *a, |g, a| g * a), self.shape(*b)));
                }
            }
            Op::Div(a, b) => {
                if self.ng(*a) {
                    acc(*a, sum_to_shape(&self.bmul(g, *b, |g, b| g / b), self.shape(*a)));
                }
                if self.ng(*b) {
                    // d(a/b)/db = -y/b
                    let gy = g.zip_map(y, |g, y| -g * y);
                    acc(*b, sum_to_shape(&self.bmul(&gy, *b, |g, b| g / b), self.shape(*b)));
                }
            }
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::MulScalar(x, c) => acc(*x, g.scale(cst(*c))),
            Op::LeakyRelu(x, s) => {
                let s = cst::<T>(*s);
                acc(*x, g.zip_map(self.value(*x), |g, v| if v > T::zero() { g } else { g * s }));
            }
            Op::Tanh(x) => acc(*x, g.zip_map(y, |g, y| g * (T::one() - y * y))),
            Op::Sigmoid(x) => acc(*x, g.zip_map(y, |g, y| g * y * (T::one() - y))),
            Op::Exp(x) => acc(*x, g.zip_map(y, |g, y| g * y)),
            Op::Log(x) => acc(*x, g.zip_map(self.value(*x), |g, v| g / v)),
            Op::Softplus(x) => acc(*x, g.zip_map(self.value(*x), |g, v| g * sigmoid(v))),
            // zero subgradient at the kink keeps ‖x - x‖ differentiable
            Op::Sqrt(x) => acc(*x, g.zip_map(y, |g, y| if y > T::zero() { g / (y + y) } else { T::zero() })),
            Op::Square(x) => acc(*x, g.zip_map(self.value(*x), |g, v| g * (v + v))),
            Op::MatMul { a, b, tb } => {
                let (ta, tbv) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = g.shape()[1];
                if self.ng(*a) {
                    // ga = g·bᵀ (or g·b when b was transposed)
                    let mut ga = Tensor::zeros(ta.shape());
                    let (rsb, csb) = if *tb { (k as isize, 1) } else { (1, n as isize) };
                    unsafe {
                        T::gemm(
                            m, n, k, T::one(),
                            g.data().as_ptr(), n as isize, 1,
                            tbv.data().as_ptr(), rsb, csb,
                            T::zero(), ga.data_mut().as_mut_ptr(), k as isize, 1,
                        );
                    }
                    acc(*a, ga);
                }
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(tbv.shape());
                    unsafe {
                        if *tb {
                            // gb[n,k] = gᵀ·a
                            T::gemm(
                                n, m, k, T::one(),
                                g.data().as_ptr(), 1, n as isize,
                                ta.data().as_ptr(), k as isize, 1,
                                T::zero(), gb.data_mut().as_mut_ptr(), k as isize, 1,
                            );
                        } else {
                            // gb[k,n] = aᵀ·g
                            T::gemm(
                                k, m, n, T::one(),
                                ta.data().as_ptr(), 1, k as isize,
                                g.data().as_ptr(), n as isize, 1,
                                T::zero(), gb.data_mut().as_mut_ptr(), n as isize, 1,
                            );
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (gx, gw, gb) =
                    kernels::conv2d_backward(self.value(*x), self.value(*w), g, *stride, *pad, self.ng(*x));
                if let Some(gx) = gx {
                    acc(*x, gx);
                }
                acc(*w, gw);
                if let Some(b) = b {
                    acc(*b, gb);
                }
            }
            Op::Upsample2x(x) => acc(*x, kernels::upsample2x_backward(g)),
            Op::AvgPool2(x) => acc(*x, kernels::avgpool2_backward(g)),
            Op::PixelShuffle(x, r) => acc(*x, kernels::pixel_shuffle_backward(g, *r)),
            Op::InstanceNorm { x, eps } => {
                let t = self.value(*x);
                let (n, c, h, w) = kernels::dims4(t.shape());
                let hw = h * w;
                let inv = cst::<T>(1.0 / hw as f64);
                let e = cst::<T>(*eps);
                let mut gx = Tensor::zeros(t.shape());
                for p in 0..n * c {
                    let r = p * hw..(p + 1) * hw;
                    let s = &t.data()[r.clone()];
                    let mean = s.iter().copied().sum::<T>() * inv;
                    let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv;
                    let rstd = T::one() / (var + e).sqrt();
                    let (gs, ys) = (&g.data()[r.clone()], &y.data()[r.clone()]);
                    let mg = gs.iter().copied().sum::<T>() * inv;
                    let mgy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() * inv;
                    for ((o, &gi), &yi) in gx.data_mut()[r].iter_mut().zip(gs).zip(ys) {
                        *o = rstd * (gi - mg - yi * mgy);
                    }
                }
                acc(*x, gx);
            }
            Op::CropResize { x, boxes, size } => {
                let t = self.value(*x);
                let (_, c, h, w) = kernels::dims4(t.shape());
                let mut gx = Tensor::zeros(t.shape());
                let per = c * size * size;
                for (k, &(b, y0, x0, side)) in boxes.iter().enumerate() {
                    let gk = Tensor::new(&[1, c, *size, *size], g.data()[k * per..(k + 1) * per].to_vec()).unwrap();
                    let gc = kernels::resize_bilinear_backward(&gk, side, side);
                    let plane = c * h * w;
                    let dst = &mut gx.data_mut()[b * plane..(b + 1) * plane];
                    for ch in 0..c {
                        for yy in 0..side {
                            for xx in 0..side {
                                dst[(ch * h + y0 + yy) * w + x0 + xx] += gc.data()[(ch * side + yy) * side + xx];
                            }
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Sum(x) => acc(*x, Tensor::full(self.shape(*x), g.item())),
            Op::SumAxes(x) => {
                let out = self.shape(*x).to_vec();
                let st = broadcast_strides(g.shape(), &out);
                let zero = vec![0; out.len()];
                let mut gx = Tensor::zeros(&out);
                let (gd, xd) = (g.data(), gx.data_mut());
                for_each_broadcast(&out, &st, &zero, |o, a, _| xd[o] = gd[a]);
                acc(*x, gx);
            }
            Op::Reshape(x) => acc(*x, g.clone().reshape(self.shape(*x)).unwrap()),
            Op::Concat { xs, axis } => {
                let s = g.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis];
                let mut off = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis] * inner;
                    let mut part = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        let base = o * total * inner + off;
                        part.extend_from_slice(&g.data()[base..base + len]);
                    }
                    off += len;
                    acc(v, Tensor::new(self.shape(v), part).unwrap());
                }
            }
            Op::Gather0 { x, idx } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                let inner = g.numel() / idx.len().max(1);
                for (k, &i) in idx.iter().enumerate() {
                    for (a, &b) in gx.data_mut()[i * inner..(i + 1) * inner]
                        .iter_mut()
                        .zip(&g.data()[k * inner..(k + 1) * inner])
                    {
                        *a += b;
                    }
                }
                acc(*x, gx);
            }
            Op::CrossEntropy { logits, labels } => {
                let t = self.value(*logits);
                let k = t.shape()[1];
                let scale = g.item() / cst(labels.len() as f64);
                let mut gl = Tensor::zeros(t.shape());
                for (i, &lab) in labels.iter().enumerate() {
                    let row = &t.data()[i * k..(i + 1) * k];
                    let lse = log_sum_exp(row);
                    for j in 0..k {
                        let p = (row[j] - lse).exp();
                        let target = if j == lab { T::one() } else { T::zero() };
                        gl.data_mut()[i * k + j] = (p - target) * scale;
                    }
                }
                acc(*logits, gl);
            }
        }
    }

    /// `f(g, other)` with `other` broadcast to `g`'s shape.
    fn bmul(&self, g: &Tensor<T>, other: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let o = self.value(other);
        let out = g.shape().to_vec();
        let so = broadcast_strides(o.shape(), &out);
        let sg = strides(&out);
        let mut res = Tensor::zeros(&out);
        let (gd, od) = (g.data(), o.data());
        let rd = res.data_mut();
        for_each_broadcast(&out, &sg, &so, |i, a, b| rd[i] = f(gd[a], od[b]));
        res
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T: Float> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Float> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of each parameter that was bound into the graph.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> + '_ {
        self.params.iter().filter_map(|&(id, v)| self.get(v).map(|g| (id, g)))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|&(_, v)| self.get(v))
    }
}

pub fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Float>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

pub fn log_sum_exp<T: Float>(row: &[T]) -> T {
    let m = row.iter().copied().fold(row[0], |a, b| a.max(b));
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}
