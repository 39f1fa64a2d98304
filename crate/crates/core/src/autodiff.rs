//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in execution order. Each recorded
//! node owns its output value; [`Graph::backward`] walks the record in
//! reverse, visiting every operation once, and accumulates gradients into
//! the leaves that were created with gradient tracking on.
//!
//! ```
//! use semiseg_core::{Graph, Shape, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, -2.0, 3.0]).unwrap();
//! let x = g.leaf(x.tracked());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
//! ```

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::conv;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    Softmax(Var),
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample(Var),
    Concat(Var, Var),
    NarrowBatch {
        input: Var,
        start: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    /// Scalar-valued function whose local gradients were computed during
    /// the forward pass.
    Custom(Vec<(Var, Vec<T>)>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients reach it only if `tensor.track_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.track_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Records an untracked leaf.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_track_grad(false);
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a tracked leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Branch taken by every piecewise op so far: one flag per ReLU input
    /// element (positive or not) and the winning position of every max-pool
    /// window. Two evaluations with equal patterns lie on the same smooth
    /// piece of the recorded function.
    pub fn branch_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(input) => {
                    out.extend(
                        self.value(*input)
                            .data()
                            .iter()
                            .map(|&v| u32::from(v > T::zero())),
                    );
                }
                Op::MaxPool { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    /// Clears the gradient buffers of all leaves.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// 3x3 convolution (stride 1, zero padding 1) or 1x1 convolution,
    /// selected by the kernel extent of `weight` (outC, inC, k, k).
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        let bs = self.shape(bias);
        if ws.height != ws.width || !(ws.height == 3 || ws.height == 1) {
            return shape_err(format!(
                "conv2d supports 3x3 or 1x1 kernels, got weight {ws}"
            ));
        }
        if ws.channels != xs.channels {
            return shape_err(format!(
                "conv2d input has {} channels but weight expects {} (weight {ws})",
                xs.channels, ws.channels
            ));
        }
        if bs.numel() != ws.batch {
            return shape_err(format!(
                "conv2d bias {bs} does not match {} output channels",
                ws.batch
            ));
        }
        if xs.height == 0 || xs.width == 0 {
            return shape_err(format!("conv2d input {xs} has empty spatial extent"));
        }
        let out = conv_forward(
            self.value(input).data(),
            xs,
            self.value(weight).data(),
            ws,
            self.value(bias).data(),
        );
        let out = Tensor::from_vec(Shape::new(xs.batch, ws.batch, xs.height, xs.width), out)?;
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            out,
            Op::Conv {
                input,
                weight,
                bias,
            },
            ng,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let out = Tensor::from_vec(x.shape(), data).expect("same shape");
        let ng = self.needs(input);
        self.push(out, Op::Relu(input), ng)
    }

    /// Per-pixel softmax across channels, stabilized by the channel maximum.
    pub fn softmax_channels(&mut self, logits: Var) -> Result<Var> {
        let s = self.shape(logits);
        if s.channels == 0 {
            return shape_err("softmax over zero channels");
        }
        let out = softmax_forward(self.value(logits).data(), s);
        let out = Tensor::from_vec(s, out)?;
        let ng = self.needs(logits);
        Ok(self.push(out, Op::Softmax(logits), ng))
    }

    /// 2x2 max-pool with stride 2. Ties resolve to the first element in
    /// row-major order within the window.
    pub fn downsample2(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        if !s.height.is_multiple_of(2) || !s.width.is_multiple_of(2) {
            return shape_err(format!(
                "downsample2 requires even spatial extents, got {s}"
            ));
        }
        let (oh, ow) = (s.height / 2, s.width / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(s.numel() / 4);
        let mut argmax = Vec::with_capacity(s.numel() / 4);
        for plane in 0..s.batch * s.channels {
            let base = plane * s.plane();
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = base + 2 * y * s.width + 2 * xo;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * s.width + 2 * xo + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let out = Tensor::from_vec(Shape::new(s.batch, s.channels, oh, ow), out)?;
        let ng = self.needs(input);
        Ok(self.push(out, Op::MaxPool { input, argmax }, ng))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, input: Var) -> Var {
        let s = self.shape(input);
        let (oh, ow) = (s.height * 2, s.width * 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(s.numel() * 4);
        for plane in 0..s.batch * s.channels {
            let base = plane * s.plane();
            for y in 0..oh {
                let row = &x[base + (y / 2) * s.width..base + (y / 2 + 1) * s.width];
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
        let out = Tensor::from_vec(Shape::new(s.batch, s.channels, oh, ow), out).expect("shape");
        let ng = self.needs(input);
        self.push(out, Op::Upsample(input), ng)
    }

    /// Stacks `a` then `b` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if (sa.batch, sa.height, sa.width) != (sb.batch, sb.height, sb.width) {
            return shape_err(format!("concat_channels of {sa} and {sb}"));
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(sa.numel() + sb.numel());
        for n in 0..sa.batch {
            out.extend_from_slice(&xa[n * sa.item()..(n + 1) * sa.item()]);
            out.extend_from_slice(&xb[n * sb.item()..(n + 1) * sb.item()]);
        }
        let shape = Shape::new(sa.batch, sa.channels + sb.channels, sa.height, sa.width);
        let out = Tensor::from_vec(shape, out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat(a, b), ng))
    }

    /// Batch items `start..start + len`.
    pub fn narrow_batch(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(input).narrow_batch(start, len)?;
        let ng = self.needs(input);
        Ok(self.push(out, Op::NarrowBatch { input, start }, ng))
    }

    /// Splits along the batch axis into `parts` equal chunks.
    pub fn chunk_batch(&mut self, input: Var, parts: usize) -> Result<Vec<Var>> {
        let b = self.shape(input).batch;
        if parts == 0 || !b.is_multiple_of(parts) {
            return shape_err(format!("cannot split batch of {b} into {parts} chunks"));
        }
        let len = b / parts;
        (0..parts)
            .map(|i| self.narrow_batch(input, i * len, len))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, |ga, gb| Op::Add(ga, gb))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, |ga, gb| Op::Mul(ga, gb))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: impl Fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err(format!("elementwise op on {sa} and {sb}"));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y));
        let out = Tensor::from_vec(sa, data.collect())?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, op(a, b), ng))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let x = self.value(input);
        let out = Tensor::from_vec(x.shape(), x.data().iter().map(|&v| v * factor).collect())
            .expect("same shape");
        let ng = self.needs(input);
        self.push(out, Op::Scale(input, factor), ng)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total: f64 = self.value(input).data().iter().map(|v| v.as_f64()).sum();
        let ng = self.needs(input);
        self.push(Tensor::scalar(T::from_f64_lossy(total)), Op::Sum(input), ng)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let total: f64 = x.data().iter().map(|v| v.as_f64()).sum();
        let n = x.numel().max(1) as f64;
        let ng = self.needs(input);
        self.push(
            Tensor::scalar(T::from_f64_lossy(total / n)),
            Op::Mean(input),
            ng,
        )
    }

    /// Records a scalar whose gradient with respect to each input was
    /// computed alongside its value. Gradients must match input lengths.
    pub fn custom_scalar(&mut self, value: T, local_grads: Vec<(Var, Vec<T>)>) -> Result<Var> {
        for (v, g) in &local_grads {
            if g.len() != self.value(*v).numel() {
                return shape_err(format!(
                    "local gradient of length {} for input of shape {}",
                    g.len(),
                    self.shape(*v)
                ));
            }
        }
        let ng = local_grads.iter().any(|(v, _)| self.needs(*v));
        Ok(self.push(Tensor::scalar(value), Op::Custom(local_grads), ng))
    }

    /// Propagates d`loss`/d(leaf) into every tracked leaf reachable from
    /// `loss`. Gradients add to whatever the leaves already hold.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.value(loss).numel();
        if n != 1 {
            return Err(Error::NonScalarLoss(n));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g);
            } else {
                let node = &self.nodes[i];
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
        }
        Ok(())
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: &Var| nodes[v.0].needs_grad;
        match op {
            Op::Leaf => unreachable!(),
            Op::Conv {
                input,
                weight,
                bias,
            } => {
                let x = &nodes[input.0].value;
                let w = &nodes[weight.0].value;
                let (dx, dw, db) =
                    conv_backward(x.data(), x.shape(), w.data(), w.shape(), g, wants(input));
                if wants(input) {
                    accumulate(grads, *input, dx.expect("input grad requested"));
                }
                if wants(weight) {
                    accumulate(grads, *weight, dw);
                }
                if wants(bias) {
                    accumulate(grads, *bias, db);
                }
            }
            Op::Relu(input) => {
                let x = nodes[input.0].value.data();
                let d = x
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > T::zero() { gi } else { T::zero() });
                accumulate(grads, *input, d.collect());
            }
            Op::Softmax(input) => {
                accumulate(grads, *input, softmax_backward(out.data(), out.shape(), g));
            }
            Op::MaxPool { input, argmax } => {
                let mut d = vec![T::zero(); nodes[input.0].value.numel()];
                for (&idx, &gi) in argmax.iter().zip(g) {
                    d[idx as usize] = d[idx as usize] + gi;
                }
                accumulate(grads, *input, d);
            }
            Op::Upsample(input) => {
                let s = nodes[input.0].value.shape();
                let ow = s.width * 2;
                let mut d = vec![T::zero(); s.numel()];
                for plane in 0..s.batch * s.channels {
                    let src = &g[plane * s.plane() * 4..(plane + 1) * s.plane() * 4];
                    let dst = &mut d[plane * s.plane()..(plane + 1) * s.plane()];
                    for (yo, row) in src.chunks(ow).enumerate() {
                        let drow = &mut dst[(yo / 2) * s.width..(yo / 2 + 1) * s.width];
                        for (xo, &gi) in row.iter().enumerate() {
                            drow[xo / 2] = drow[xo / 2] + gi;
                        }
                    }
                }
                accumulate(grads, *input, d);
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let item = sa.item() + sb.item();
                if wants(a) {
                    let d = (0..sa.batch)
                        .flat_map(|n| g[n * item..n * item + sa.item()].iter().copied())
                        .collect();
                    accumulate(grads, *a, d);
                }
                if wants(b) {
                    let d = (0..sb.batch)
                        .flat_map(|n| g[n * item + sa.item()..(n + 1) * item].iter().copied())
                        .collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::NarrowBatch { input, start } => {
                let s = nodes[input.0].value.shape();
                let mut d = vec![T::zero(); s.numel()];
                d[start * s.item()..start * s.item() + g.len()].copy_from_slice(g);
                accumulate(grads, *input, d);
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        accumulate(grads, *v, g.to_vec());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if wants(a) {
                    accumulate(
                        grads,
                        *a,
                        g.iter().zip(xb).map(|(&gi, &y)| gi * y).collect(),
                    );
                }
                if wants(b) {
                    accumulate(
                        grads,
                        *b,
                        g.iter().zip(xa).map(|(&gi, &x)| gi * x).collect(),
                    );
                }
            }
            Op::Scale(input, factor) => {
                accumulate(grads, *input, g.iter().map(|&gi| gi * *factor).collect());
            }
            Op::Sum(input) => {
                accumulate(grads, *input, vec![g[0]; nodes[input.0].value.numel()]);
            }
            Op::Mean(input) => {
                let n = nodes[input.0].value.numel();
                let gi = g[0] / T::from_usize(n.max(1)).expect("count fits");
                accumulate(grads, *input, vec![gi; n]);
            }
            Op::Custom(locals) => {
                for (v, local) in locals {
                    if wants(v) {
                        accumulate(grads, *v, local.iter().map(|&l| l * g[0]).collect());
                    }
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, d: Vec<T>) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(&d).for_each(|(a, &b)| *a = *a + b),
        slot @ None => *slot = Some(d),
    }
}

pub(crate) fn softmax_forward<T: Scalar>(x: &[T], s: Shape) -> Vec<T> {
    let plane = s.plane();
    let mut out = vec![T::zero(); x.len()];
    for n in 0..s.batch {
        let base = n * s.item();
        for p in 0..plane {
            let at = |c: usize| base + c * plane + p;
            let max = (0..s.channels)
                .map(|c| x[at(c)])
                .fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for c in 0..s.channels {
                let e = (x[at(c)] - max).exp();
                out[at(c)] = e;
                total = total + e;
            }
            for c in 0..s.channels {
                out[at(c)] = out[at(c)] / total;
            }
        }
    }
    out
}

fn softmax_backward<T: Scalar>(y: &[T], s: Shape, g: &[T]) -> Vec<T> {
    let plane = s.plane();
    let mut d = vec![T::zero(); y.len()];
    for n in 0..s.batch {
        let base = n * s.item();
        for p in 0..plane {
            let at = |c: usize| base + c * plane + p;
            let dot = (0..s.channels).fold(T::zero(), |acc, c| acc + g[at(c)] * y[at(c)]);
            for c in 0..s.channels {
                d[at(c)] = y[at(c)] * (g[at(c)] - dot);
            }
        }
    }
    d
}

fn view<T>(rows: usize, cols: usize, data: &[T]) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((rows, cols), data).expect("matrix extents")
}

fn view_mut<T>(rows: usize, cols: usize, data: &mut [T]) -> ArrayViewMut2<'_, T> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("matrix extents")
}

fn conv_forward<T: Scalar>(x: &[T], xs: Shape, w: &[T], ws: Shape, bias: &[T]) -> Vec<T> {
    let (oc, ic, k) = (ws.batch, ws.channels, ws.height);
    let hw = xs.plane();
    let mut out = vec![T::zero(); xs.batch * oc * hw];
    for (i, plane) in out.chunks_mut(hw).enumerate() {
        plane.fill(bias[i % oc]);
    }
    if k == 3 {
        let p = conv::Plane {
            h: xs.height,
            w: xs.width,
        };
        for (item, dst) in x.chunks_exact(xs.item()).zip(out.chunks_exact_mut(oc * hw)) {
            let acc = conv::conv3(&conv::pad(item, ic, p), ic, w, oc, p);
            conv::add_compact(&acc, oc, p, dst);
        }
    } else {
        let wm = view(oc, ic, w);
        for n in 0..xs.batch {
            let item = view(ic, hw, &x[n * xs.item()..(n + 1) * xs.item()]);
            let dst = &mut out[n * oc * hw..(n + 1) * oc * hw];
            general_mat_mul(T::one(), &wm, &item, T::one(), &mut view_mut(oc, hw, dst));
        }
    }
    out
}

type ConvGrads<T> = (Option<Vec<T>>, Vec<T>, Vec<T>);

fn conv_backward<T: Scalar>(
    x: &[T],
    xs: Shape,
    w: &[T],
    ws: Shape,
    g: &[T],
    want_input: bool,
) -> ConvGrads<T> {
    let (oc, ic, k) = (ws.batch, ws.channels, ws.height);
    let hw = xs.plane();
    let mut db = vec![T::zero(); oc];
    for (i, plane) in g.chunks(hw).enumerate() {
        db[i % oc] = db[i % oc] + plane.iter().copied().sum::<T>();
    }
    let mut dw = vec![T::zero(); w.len()];
    let mut dx = want_input.then(|| vec![T::zero(); x.len()]);
    if k == 1 {
        let wm = view(oc, ic, w);
        for n in 0..xs.batch {
            let item = view(ic, hw, &x[n * xs.item()..(n + 1) * xs.item()]);
            let gm = view(oc, hw, &g[n * oc * hw..(n + 1) * oc * hw]);
            general_mat_mul(
                T::one(),
                &gm,
                &item.t(),
                T::one(),
                &mut view_mut(oc, ic, &mut dw),
            );
            if let Some(dx) = dx.as_mut() {
                let dst = &mut dx[n * xs.item()..(n + 1) * xs.item()];
                general_mat_mul(T::one(), &wm.t(), &gm, T::one(), &mut view_mut(ic, hw, dst));
            }
        }
        return (dx, dw, db);
    }

    // the input gradient is the transposed convolution of G, i.e. a 3x3
    // convolution with the 180-degree rotated kernels of W transposed
    let p = conv::Plane {
        h: xs.height,
        w: xs.width,
    };
    let flipped = want_input.then(|| conv::transposed_kernels(w, oc, ic));
    for n in 0..xs.batch {
        let xp = conv::pad(&x[n * xs.item()..(n + 1) * xs.item()], ic, p);
        let gp = conv::pad(&g[n * oc * hw..(n + 1) * oc * hw], oc, p);
        conv::kernel_grad(&xp, ic, &gp, p, &mut dw);
        if let (Some(dx), Some(kf)) = (dx.as_mut(), flipped.as_ref()) {
            let acc = conv::conv3(&gp, oc, kf, ic, p);
            conv::add_compact(&acc, ic, p, &mut dx[n * xs.item()..(n + 1) * xs.item()]);
        }
    }
    (dx, dw, db)
}
