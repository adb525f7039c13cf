//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] is an append-only arena of values. Each operation pushes a node
//! holding its output and, when recording, the context its adjoint needs.
//! Inputs always precede the nodes that consume them, so the backward sweep is
//! a single reverse pass over the arena.

use super::conv::{self, Conv2dOptions};
use super::ops::{self, BatchNormSaved, LayerNormSaved};
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Detached,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        opts: Conv2dOptions,
    },
    ChannelShuffle {
        x: Var,
        groups: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape {
        x: Var,
    },
    Transpose {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    DivGuarded {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    Relu {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BatchNormSaved<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: LayerNormSaved<T>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    AvgPool {
        x: Var,
        k: usize,
        stride: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    ResizeBilinear {
        x: Var,
    },
    UpsampleNearest {
        x: Var,
        factor: usize,
    },
    SumAxis {
        x: Var,
    },
    MaxAxis {
        x: Var,
        argmax: Vec<usize>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    FocusedMap {
        x: Var,
        p: f64,
    },
    SumAll {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        grad: Tensor<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Detached => "detached",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelShuffle { .. } => "channel_shuffle",
            Op::Narrow { .. } => "split",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::DivGuarded { .. } => "div_guarded",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Gelu { .. } => "gelu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::BatchNorm { .. } => "batch_norm",
            Op::BatchNormEval { .. } => "batch_norm_eval",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MatMul { .. } => "matmul",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::AvgPool { .. } => "avg_pool",
            Op::MaxPool { .. } => "max_pool",
            Op::ResizeBilinear { .. } => "upsample_bilinear",
            Op::UpsampleNearest { .. } => "upsample_nearest",
            Op::SumAxis { .. } => "sum_axis",
            Op::MaxAxis { .. } => "max_axis",
            Op::Softmax { .. } => "softmax",
            Op::FocusedMap { .. } => "focused_map",
            Op::SumAll { .. } => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Value arena plus operation tape.
///
/// A graph created with [`Graph::inference`] keeps values only; it records no
/// operations and cannot be differentiated.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    record: bool,
    fault: Option<String>,
    conv_macs: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            fault: None,
            conv_macs: 0,
        }
    }

    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by convolutions recorded so far.
    pub fn conv_macs(&self) -> u64 {
        self.conv_macs
    }

    /// Test fixture: corrupts the backward rule of the named op (scales its
    /// input gradients by 1.5) so checking harnesses can prove they detect it.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, op: &str) {
        self.fault = Some(op.to_string());
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf: receives a gradient in [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// Leaf that never needs a gradient (data, fixed weights).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let (op, requires_grad) = match op {
            Op::Leaf => (Op::Leaf, requires_grad && self.record),
            _ if !self.record => (Op::Detached, false),
            op => (op, requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, rg)
    }

    // -- structural ----------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, opts: Conv2dOptions) -> Result<Var> {
        let y = conv::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), opts)?;
        self.conv_macs += conv::ConvGeometry::new(self.shape(x), self.shape(w), None, opts)?.macs();
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(y, &inputs, Op::Conv2d { x, w, b, opts }))
    }

    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let y = ops::channel_shuffle(self.value(x), groups)?;
        Ok(self.push(y, &[x], Op::ChannelShuffle { x, groups }))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let y = ops::narrow(self.value(x), axis, start, len)?;
        Ok(self.push(y, &[x], Op::Narrow { x, axis, start }))
    }

    /// Splits `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let total: usize = sizes.iter().sum();
        let extent = self.shape(x).get(axis).copied().unwrap_or(0);
        if total != extent {
            return Err(Error::dim(
                "split",
                "channel",
                format!("sizes {sizes:?} do not sum to extent {extent}"),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.narrow(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// Splits the channel axis into two equal halves.
    pub fn split_halves(&mut self, x: Var) -> Result<(Var, Var)> {
        let c = self.value(x).dims4("split")?.1;
        if c % 2 != 0 {
            return Err(Error::Config(format!("split: channel count {c} is odd")));
        }
        let parts = self.split(x, 1, &[c / 2, c / 2])?;
        Ok((parts[0], parts[1]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat(&tensors, axis)?;
        Ok(self.push(
            y,
            parts,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, &[x], Op::Reshape { x }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let y = ops::transpose_last2(self.value(x))?;
        Ok(self.push(y, &[x], Op::Transpose { x }))
    }

    /// N×C×H×W → N×(H·W)×C.
    pub fn map_to_tokens(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("map_to_tokens")?;
        let flat = self.reshape(x, &[n, c, h * w])?;
        self.transpose(flat)
    }

    /// N×(H·W)×C → N×C×H×W.
    pub fn tokens_to_map(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, l, c) = self.value(x).dims3("tokens_to_map")?;
        if l != h * w {
            return Err(Error::dim(
                "tokens_to_map",
                "inner",
                format!("{l} tokens cannot form a {h}×{w} map"),
            ));
        }
        let t = self.transpose(x)?;
        self.reshape(t, &[n, c, h, w])
    }

    // -- elementwise ---------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::binary(self.value(a), self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(y, &[a, b], Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::binary(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(y, &[a, b], Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::binary(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(y, &[a, b], Op::Mul { a, b }))
    }

    /// `a / b` with `b` broadcast into `a`; entries where `b == 0` give zero.
    pub fn div_guarded(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::div_guarded(self.value(a), self.value(b))?;
        Ok(self.push(y, &[a, b], Op::DivGuarded { a, b }))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let y = self.value(x).map(|v| v * s);
        self.push(y, &[x], Op::Scale { x, s })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // Written as a comparison so NaN propagates (`max` would drop it).
        let y = self
            .value(x)
            .map(|v| if v < T::zero() { T::zero() } else { v });
        self.push(y, &[x], Op::Relu { x })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(ops::gelu);
        self.push(y, &[x], Op::Gelu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(ops::sigmoid);
        self.push(y, &[x], Op::Sigmoid { x })
    }

    // -- normalization -------------------------------------------------------

    /// Batch normalization with statistics of the current batch. Returns the
    /// output and the batch (mean, biased variance) per channel.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (y, saved) =
            ops::batch_norm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let (mean, var) = (saved.mean.clone(), saved.var.clone());
        let v = self.push(
            y,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            },
        );
        Ok((v, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var> {
        let c = self.value(x).dims4("batch_norm")?.1;
        if mean.shape() != [c]
            || var.shape() != [c]
            || self.shape(gamma) != [c]
            || self.shape(beta) != [c]
        {
            return Err(Error::dim(
                "batch_norm",
                "channel",
                format!("statistics do not match {c} channels"),
            ));
        }
        let (scale, shift) =
            ops::batch_norm_eval_coeffs(self.value(gamma), self.value(beta), mean, var, eps);
        let (_, _, h, w) = self.value(x).dims4("batch_norm")?;
        let plane = h * w;
        let mut y = self.value(x).clone();
        for (i, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
            let (s, b) = (scale[i % c], shift[i % c]);
            chunk.iter_mut().for_each(|v| *v = *v * s + b);
        }
        let inv_std = var
            .data()
            .iter()
            .map(|&v| T::one() / (v + T::of(eps)).sqrt())
            .collect();
        Ok(self.push(
            y,
            &[x, gamma, beta],
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: mean.data().to_vec(),
                inv_std,
            },
        ))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (y, saved) = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            y,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                saved,
            },
        ))
    }

    // -- products ------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, &[a, b], Op::MatMul { a, b }))
    }

    // -- pooling / resampling ------------------------------------------------

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(y, &[x], Op::GlobalAvgPool { x }))
    }

    pub fn avg_pool(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let y = ops::avg_pool2d(self.value(x), k, stride)?;
        Ok(self.push(y, &[x], Op::AvgPool { x, k, stride }))
    }

    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (y, argmax) = ops::max_pool2d(self.value(x), k, stride)?;
        Ok(self.push(y, &[x], Op::MaxPool { x, argmax }))
    }

    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let y = ops::resize_bilinear(self.value(x), oh, ow)?;
        Ok(self.push(y, &[x], Op::ResizeBilinear { x }))
    }

    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::Config("upsample factor must be >= 1".into()));
        }
        let (_, _, h, w) = self.value(x).dims4("upsample_bilinear")?;
        self.resize_bilinear(x, h * factor, w * factor)
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let y = ops::upsample_nearest(self.value(x), factor)?;
        Ok(self.push(y, &[x], Op::UpsampleNearest { x, factor }))
    }

    // -- reductions ----------------------------------------------------------

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = ops::sum_axis(self.value(x), axis)?;
        Ok(self.push(y, &[x], Op::SumAxis { x }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::dim("mean_axis", "rank", "axis out of range"))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (y, argmax) = ops::max_axis(self.value(x), axis)?;
        Ok(self.push(y, &[x], Op::MaxAxis { x, argmax }))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = ops::softmax(self.value(x), axis)?;
        Ok(self.push(y, &[x], Op::Softmax { x, axis }))
    }

    pub fn focused_map(&mut self, x: Var, p: f64) -> Result<Var> {
        let y = ops::focused_map(self.value(x), p)?;
        Ok(self.push(y, &[x], Op::FocusedMap { x, p }))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, &[x], Op::SumAll { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[u32],
        ignore_index: Option<u32>,
    ) -> Result<Var> {
        let (loss, grad) = ops::cross_entropy(self.value(logits), labels, ignore_index)?;
        Ok(self.push(
            Tensor::scalar(loss),
            &[logits],
            Op::CrossEntropy { logits, grad },
        ))
    }

    // -- backward ------------------------------------------------------------

    /// Reverse sweep from a scalar `root`. Consumes the tape.
    pub fn backward(self, root: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward on an empty tape".into()));
        }
        if !self.record {
            return Err(Error::Usage(
                "backward on an inference graph (no tape was recorded)".into(),
            ));
        }
        let root_numel = self.nodes[root.0].value.numel();
        if root_numel != 1 {
            return Err(Error::Usage(format!(
                "backward root must be a scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), T::one()));
        let fault = self.fault.clone();
        let mut nodes = self.nodes;
        for i in (0..=root.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let op = std::mem::replace(&mut nodes[i].op, Op::Detached);
            if matches!(op, Op::Leaf) {
                grads[i] = Some(g);
                nodes[i].op = Op::Leaf;
                continue;
            }
            let corrupt = fault.as_deref() == Some(op.name());
            let mut sink = Sink {
                nodes: &nodes,
                grads: &mut grads,
                corrupt,
            };
            backward_op(&mut sink, op, &nodes[i].value, g)?;
        }
        Ok(Gradients {
            grads,
            shapes: nodes
                .into_iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }
}

struct Sink<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Tensor<T>>],
    corrupt: bool,
}

impl<T: Scalar> Sink<'_, T> {
    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn acc(&mut self, v: Var, mut g: Tensor<T>) {
        if !self.wants(v) {
            return;
        }
        if self.corrupt {
            let k = T::of(1.5);
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }
}

fn backward_op<T: Scalar>(
    s: &mut Sink<'_, T>,
    op: Op<T>,
    out: &Tensor<T>,
    g: Tensor<T>,
) -> Result<()> {
    match op {
        Op::Leaf | Op::Detached => {}
        Op::Conv2d { x, w, b, opts } => {
            let grads = conv::conv2d_backward(
                s.val(x),
                s.val(w),
                opts,
                &g,
                s.wants(x),
                b.is_some_and(|b| s.wants(b)),
            )?;
            if let Some(dx) = grads.input {
                s.acc(x, dx);
            }
            s.acc(w, grads.weight);
            if let (Some(b), Some(db)) = (b, grads.bias) {
                s.acc(b, db);
            }
        }
        Op::ChannelShuffle { x, groups } => {
            s.acc(x, ops::channel_unshuffle(&g, groups));
        }
        Op::Narrow { x, axis, start } => {
            let full = s.val(x).shape().to_vec();
            s.acc(x, ops::narrow_backward(&g, &full, axis, start));
        }
        Op::Concat { parts, axis } => {
            let mut start = 0;
            for p in parts {
                let len = s.val(p).shape()[axis];
                let piece = ops::narrow(&g, axis, start, len)?;
                s.acc(p, piece);
                start += len;
            }
        }
        Op::Reshape { x } => {
            let shape = s.val(x).shape().to_vec();
            s.acc(x, g.reshape(&shape)?);
        }
        Op::Transpose { x } => {
            s.acc(x, ops::transpose_last2(&g)?);
        }
        Op::Add { a, b } => {
            let bs = s.val(b).shape().to_vec();
            s.acc(b, ops::reduce_to(&g, &bs));
            s.acc(a, g);
        }
        Op::Sub { a, b } => {
            let bs = s.val(b).shape().to_vec();
            s.acc(b, ops::reduce_to(&g, &bs).map(|v| -v));
            s.acc(a, g);
        }
        Op::Mul { a, b } => {
            let (av, bv) = (s.val(a), s.val(b));
            let da = ops::binary(&g, bv, "mul", |x, y| x * y)?;
            let db = if s.wants(b) {
                let full = ops::binary(&g, av, "mul", |x, y| x * y)?;
                Some(ops::reduce_to(&full, bv.shape()))
            } else {
                None
            };
            s.acc(a, da);
            if let Some(db) = db {
                s.acc(b, db);
            }
        }
        Op::DivGuarded { a, b } => {
            let (da, db) = ops::div_guarded_backward(s.val(a), s.val(b), &g);
            s.acc(a, da);
            s.acc(b, db);
        }
        Op::Scale { x, s: k } => {
            s.acc(x, g.map(|v| v * k));
        }
        Op::Relu { x } => {
            let xv = s.val(x);
            let d = xv
                .data()
                .iter()
                .zip(g.data())
                .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                .collect();
            s.acc(x, Tensor::from_parts(g.shape().to_vec(), d));
        }
        Op::Gelu { x } => {
            let xv = s.val(x);
            let d = xv
                .data()
                .iter()
                .zip(g.data())
                .map(|(&x, &g)| g * ops::gelu_grad(x))
                .collect();
            s.acc(x, Tensor::from_parts(g.shape().to_vec(), d));
        }
        Op::Sigmoid { x } => {
            let d = out
                .data()
                .iter()
                .zip(g.data())
                .map(|(&y, &g)| g * y * (T::one() - y))
                .collect();
            s.acc(x, Tensor::from_parts(g.shape().to_vec(), d));
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            saved,
        } => {
            let (dx, dg, db) = ops::batch_norm_train_backward(&g, s.val(gamma), &saved);
            s.acc(x, dx);
            s.acc(gamma, dg);
            s.acc(beta, db);
        }
        Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean,
            inv_std,
        } => {
            let (n, c, h, w) = g.dims4("batch_norm")?;
            let plane = h * w;
            let xv = s.val(x);
            let gm = s.val(gamma);
            let mut dx = vec![T::zero(); g.numel()];
            let mut dg = vec![T::zero(); c];
            let mut db = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * plane;
                    let k = gm.data()[ch] * inv_std[ch];
                    for i in off..off + plane {
                        dx[i] = g.data()[i] * k;
                        dg[ch] += g.data()[i] * (xv.data()[i] - mean[ch]) * inv_std[ch];
                        db[ch] += g.data()[i];
                    }
                }
            }
            s.acc(x, Tensor::from_parts(g.shape().to_vec(), dx));
            s.acc(gamma, Tensor::from_parts(vec![c], dg));
            s.acc(beta, Tensor::from_parts(vec![c], db));
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            saved,
        } => {
            let (dx, dg, db) = ops::layer_norm_backward(&g, s.val(gamma), &saved);
            s.acc(x, dx);
            s.acc(gamma, dg);
            s.acc(beta, db);
        }
        Op::MatMul { a, b } => {
            let (da, db) = ops::matmul_backward(s.val(a), s.val(b), &g);
            s.acc(a, da);
            s.acc(b, db);
        }
        Op::GlobalAvgPool { x } => {
            let shape = s.val(x).shape().to_vec();
            s.acc(x, ops::global_avg_pool_backward(&g, &shape));
        }
        Op::AvgPool { x, k, stride } => {
            let shape = s.val(x).shape().to_vec();
            s.acc(x, ops::avg_pool2d_backward(&g, &shape, k, stride));
        }
        Op::MaxPool { x, argmax } | Op::MaxAxis { x, argmax } => {
            let shape = s.val(x).shape().to_vec();
            s.acc(x, ops::scatter_to(&g, &argmax, &shape));
        }
        Op::ResizeBilinear { x } => {
            let shape = s.val(x).shape().to_vec();
            s.acc(x, ops::resize_bilinear_backward(&g, &shape));
        }
        Op::UpsampleNearest { x, factor } => {
            let shape = s.val(x).shape().to_vec();
            s.acc(x, ops::upsample_nearest_backward(&g, &shape, factor));
        }
        Op::SumAxis { x } => {
            let shape = s.val(x).shape().to_vec();
            s.acc(x, ops::expand(&g, &shape));
        }
        Op::Softmax { x, axis } => {
            s.acc(x, ops::softmax_backward(out, &g, axis));
        }
        Op::FocusedMap { x, p } => {
            let d = ops::focused_map_backward(s.val(x), out, &g, p);
            s.acc(x, d);
        }
        Op::SumAll { x } => {
            let gv = g.data()[0];
            let shape = s.val(x).shape().to_vec();
            s.acc(x, Tensor::full(&shape, gv));
        }
        Op::CrossEntropy { logits, grad } => {
            let gv = g.data()[0];
            s.acc(logits, grad.map(|v| v * gv));
        }
    }
    Ok(())
}

/// Result of a backward sweep: gradients of the leaves (and of any node that
/// was reached), zeros elsewhere.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, or zeros of its shape when no path reaches it.
    pub fn get(&self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn get_ref(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}
