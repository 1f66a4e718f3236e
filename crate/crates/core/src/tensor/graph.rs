use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{self, ConvGeom};
use super::Tensor;
use crate::error::{invalid, shape_err, Error, Result};

/// Arithmetic used inside convolution GEMMs. Everything outside the GEMM
/// (bias, reductions, accumulation across tiles and samples) is always `f64`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// `f64` throughout; used for gradient checks and oracles.
    #[default]
    Exact,
    /// `f32` GEMM operands; used for training throughput.
    Fast,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a batch-norm node normalizes its input.
#[derive(Clone, Debug)]
pub enum BatchNormInput<'a> {
    /// Normalize by the batch statistics.
    Train { eps: f64 },
    /// Normalize by fixed running statistics.
    Eval { mean: &'a [f64], var: &'a [f64], eps: f64 },
}

/// Statistics observed by a train-mode batch-norm node.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: NodeId, kernel: NodeId, bias: Option<NodeId>, dilation: usize },
    MaxPool2 { input: NodeId, argmax: Vec<usize> },
    Upsample2 { input: NodeId },
    LeakyRelu { input: NodeId, slope: f64 },
    Sigmoid { input: NodeId },
    BatchNorm { input: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor, inv_std: Vec<f64>, batch: bool },
    Dropout { input: NodeId, mask: Vec<f64> },
    Concat { a: NodeId, b: NodeId, channels_a: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { input: NodeId, factor: f64 },
    Sum { input: NodeId },
    Linear { input: NodeId, weight: NodeId, bias: Option<NodeId> },
    AddRowBias { input: NodeId, bias: NodeId },
    Transpose2 { input: NodeId },
    Reshape { input: NodeId },
    SoftDice { pred: NodeId, target: NodeId, eps: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::Upsample2 { .. } => "upsample_nearest2",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Dropout { .. } => "dropout",
            Op::Concat { .. } => "concat",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::Linear { .. } => "linear",
            Op::AddRowBias { .. } => "add_row_bias",
            Op::Transpose2 { .. } => "transpose2",
            Op::Reshape { .. } => "reshape",
            Op::SoftDice { .. } => "soft_dice",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernel, bias, .. } => {
                let mut v = vec![input, kernel];
                v.extend(bias);
                v
            }
            Op::Linear { input, weight, bias } => {
                let mut v = vec![input, weight];
                v.extend(bias);
                v
            }
            Op::BatchNorm { input, gamma, beta, .. } => vec![input, gamma, beta],
            Op::Concat { a, b, .. } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![a, b],
            Op::AddRowBias { input, bias } => vec![input, bias],
            Op::SoftDice { pred, target, .. } => vec![pred, target],
            Op::MaxPool2 { input, .. }
            | Op::Upsample2 { input }
            | Op::LeakyRelu { input, .. }
            | Op::Sigmoid { input }
            | Op::Dropout { input, .. }
            | Op::Scale { input, .. }
            | Op::Sum { input }
            | Op::Transpose2 { input }
            | Op::Reshape { input } => vec![input],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of tensor operations. Nodes are stored in creation order,
/// which is always a valid topological order; [`Graph::backward`] walks it in
/// reverse, visiting each node once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
    precision: Precision,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(NodeId, Vec<usize>)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a parameter leaf, if one reached
    /// it. Intermediate gradients are released during the backward sweep.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter leaf in registration order. Parameters
    /// the loss does not depend on get zeros.
    pub fn params(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|(id, shape)| self.get(*id).cloned().unwrap_or_else(|| Tensor::zeros(shape)))
            .collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Graph {
            precision,
            ..Self::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Parameter leaves in registration order.
    pub fn param_ids(&self) -> &[NodeId] {
        &self.params
    }

    /// A constant leaf; no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A trainable leaf; [`Gradients::params`] reports it in registration order.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.params.push(id);
        id
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Which side of every kink the recorded pass fell on: the sign of each
    /// (leaky) ReLU input and each max-pool argmax. Passes with equal patterns
    /// lie in the same linear piece of those operations.
    pub fn kink_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::LeakyRelu { input, .. } => {
                    out.extend(self.nodes[input.0].value.data().iter().map(|&v| (v >= 0.0) as usize));
                }
                Op::MaxPool2 { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: Option<NodeId>, dilation: usize) -> Result<NodeId> {
        let y = ops::conv2d_with(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            dilation,
            self.precision,
        )?;
        self.push(y, Op::Conv2d { input, kernel, bias, dilation })
    }

    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let (y, argmax) = ops::maxpool2(self.value(input))?;
        self.push(y, Op::MaxPool2 { input, argmax })
    }

    pub fn upsample2(&mut self, input: NodeId) -> Result<NodeId> {
        let y = ops::upsample_nearest2(self.value(input))?;
        self.push(y, Op::Upsample2 { input })
    }

    pub fn leaky_relu(&mut self, input: NodeId, slope: f64) -> Result<NodeId> {
        let y = ops::leaky_relu(self.value(input), slope)?;
        self.push(y, Op::LeakyRelu { input, slope })
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        self.leaky_relu(input, 0.0)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> Result<NodeId> {
        let y = ops::sigmoid(self.value(input));
        self.push(y, Op::Sigmoid { input })
    }

    /// Batch norm over (N, H, W). In train mode the observed batch
    /// statistics are returned so the caller can update running averages.
    pub fn batchnorm2d(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        how: BatchNormInput<'_>,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        let (mean, inv_std, stats): (Vec<f64>, Vec<f64>, _) = match how {
            BatchNormInput::Train { eps } => {
                let count = n * h * w;
                if count < 2 {
                    return Err(invalid!("batchnorm in train mode needs N*H*W >= 2, got {count}"));
                }
                let (mean, var) = ops::channel_moments(x)?;
                let inv = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                (mean.clone(), inv, Some(BatchStats { mean, var, count }))
            }
            BatchNormInput::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err!("batchnorm running statistics do not match {c} channels"));
                }
                (mean.to_vec(), var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect(), None)
            }
        };
        let (xhat, y) = ops::batchnorm_apply(x, self.value(gamma), self.value(beta), &mean, &inv_std)?;
        let batch = stats.is_some();
        let id = self.push(y, Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch })?;
        Ok((id, stats))
    }

    pub fn dropout<R: Rng + ?Sized>(&mut self, input: NodeId, p: f64, rng: &mut R) -> Result<NodeId> {
        let mask = ops::dropout_mask(self.value(input).numel(), p, rng)?;
        let mut y = self.value(input).clone();
        for (v, m) in y.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.push(y, Op::Dropout { input, mask })
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        let channels_a = self.value(a).shape()[1];
        self.push(y, Op::Concat { a, b, channels_a })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> Result<NodeId> {
        let y = self.value(input).map(|v| v * factor);
        self.push(y, Op::Scale { input, factor })
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let y = Tensor::scalar(self.value(input).sum());
        self.push(y, Op::Sum { input })
    }

    pub fn mean(&mut self, input: NodeId) -> Result<NodeId> {
        let n = self.value(input).numel() as f64;
        let s = self.sum(input)?;
        self.scale(s, 1.0 / n)
    }

    /// `x [M,K] * w [K,N] (+ bias [N])`.
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let y = ops::linear(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        self.push(y, Op::Linear { input, weight, bias })
    }

    /// Adds `bias [N]` to every row of `x [M,N]`.
    pub fn add_row_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let (_, n) = x.dims2()?;
        let b = self.value(bias);
        if b.shape() != [n] {
            return Err(shape_err!("row bias must be [{n}], got {:?}", b.shape()));
        }
        let mut y = x.clone();
        for row in y.data_mut().chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        self.push(y, Op::AddRowBias { input, bias })
    }

    pub fn transpose2(&mut self, input: NodeId) -> Result<NodeId> {
        let y = ops::transpose2(self.value(input))?;
        self.push(y, Op::Transpose2 { input })
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let y = self.value(input).clone().reshape(shape)?;
        self.push(y, Op::Reshape { input })
    }

    /// Soft Dice loss of `pred` against a target mask, as a `[1]` tensor.
    pub fn soft_dice(&mut self, pred: NodeId, target: NodeId, eps: f64) -> Result<NodeId> {
        let l = ops::soft_dice(self.value(pred), self.value(target), eps)?;
        self.push(Tensor::scalar(l), Op::SoftDice { pred, target, eps })
    }

    /// Reverse-mode gradients of a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got shape {:?}", lv.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if !gout.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", node.op.name())));
            }
            for (input, g) in self.local_grads(node, &gout)? {
                accumulate(&mut grads[input.0], g)?;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(gout);
            }
        }
        let params = self
            .params
            .iter()
            .map(|&id| (id, self.value(id).shape().to_vec()))
            .collect();
        Ok(Gradients { grads, params })
    }

    /// Vector-Jacobian products of one node, for the inputs that need them.
    fn local_grads(&self, node: &Node, gout: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { input, kernel, bias, dilation } => {
                let x = self.value(input);
                let k = self.value(kernel);
                ConvGeom::new(x.shape(), k.shape(), dilation)?;
                let need_b = bias.is_some_and(|b| self.needs(b));
                let g = ops::conv2d_backward(x, k, gout, dilation, self.needs(input), self.needs(kernel), need_b, self.precision)?;
                out.extend(g.input.map(|t| (input, t)));
                out.extend(g.kernel.map(|t| (kernel, t)));
                if let (Some(b), Some(t)) = (bias, g.bias) {
                    out.push((b, t));
                }
            }
            Op::MaxPool2 { input, argmax } => {
                out.push((*input, ops::maxpool2_backward(self.value(*input).shape(), argmax, gout)?));
            }
            &Op::Upsample2 { input } => out.push((input, ops::upsample_nearest2_backward(gout)?)),
            &Op::LeakyRelu { input, slope } => {
                out.push((input, ops::leaky_relu_backward(self.value(input), slope, gout)?));
            }
            &Op::Sigmoid { input } => {
                out.push((input, node.value.zip_map(gout, |s, g| g * s * (1.0 - s))?));
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch } => {
                let (n, c, h, w) = gout.dims4()?;
                let plane = h * w;
                let count = (n * plane) as f64;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let r = (i * c + ch) * plane..(i * c + ch + 1) * plane;
                        for (g, xh) in gout.data()[r.clone()].iter().zip(&xhat.data()[r]) {
                            dbeta[ch] += g;
                            dgamma[ch] += g * xh;
                        }
                    }
                }
                if self.needs(*input) {
                    let mut dx = gout.clone();
                    for i in 0..n {
                        for ch in 0..c {
                            let r = (i * c + ch) * plane..(i * c + ch + 1) * plane;
                            let scale = gam[ch] * inv_std[ch];
                            for (d, xh) in dx.data_mut()[r.clone()].iter_mut().zip(&xhat.data()[r]) {
                                *d = if *batch {
                                    scale * (*d - dbeta[ch] / count - xh * dgamma[ch] / count)
                                } else {
                                    scale * *d
                                };
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                out.push((*gamma, Tensor::new(vec![c], dgamma)?));
                out.push((*beta, Tensor::new(vec![c], dbeta)?));
            }
            Op::Dropout { input, mask } => {
                let mut dx = gout.clone();
                for (d, m) in dx.data_mut().iter_mut().zip(mask) {
                    *d *= m;
                }
                out.push((*input, dx));
            }
            &Op::Concat { a, b, channels_a } => {
                let (ga, gb) = ops::split_channels(gout, channels_a)?;
                out.push((a, ga));
                out.push((b, gb));
            }
            &Op::Add { a, b } => {
                out.push((a, gout.clone()));
                out.push((b, gout.clone()));
            }
            &Op::Sub { a, b } => {
                out.push((a, gout.clone()));
                out.push((b, gout.map(|g| -g)));
            }
            &Op::Mul { a, b } => {
                out.push((a, gout.zip_map(self.value(b), |g, y| g * y)?));
                out.push((b, gout.zip_map(self.value(a), |g, x| g * x)?));
            }
            &Op::Scale { input, factor } => out.push((input, gout.map(|g| g * factor))),
            &Op::Sum { input } => {
                let g = gout.item()?;
                out.push((input, Tensor::full(self.value(input).shape(), g)));
            }
            &Op::Linear { input, weight, bias } => {
                let (dx, dw, db) = ops::linear_backward(self.value(input), self.value(weight), gout)?;
                out.push((input, dx));
                out.push((weight, dw));
                if let Some(b) = bias {
                    out.push((b, db));
                }
            }
            &Op::AddRowBias { input, bias } => {
                let (_, n) = gout.dims2()?;
                let mut db = vec![0.0; n];
                for row in gout.data().chunks(n) {
                    for (acc, g) in db.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                out.push((input, gout.clone()));
                out.push((bias, Tensor::new(vec![n], db)?));
            }
            &Op::Transpose2 { input } => out.push((input, ops::transpose2(gout)?)),
            &Op::Reshape { input } => {
                out.push((input, gout.clone().reshape(self.value(input).shape())?));
            }
            &Op::SoftDice { pred, target, eps } => {
                let g = gout.item()?;
                let d = ops::soft_dice_backward(self.value(pred), self.value(target), eps)?;
                out.push((pred, d.map(|v| v * g)));
            }
        }
        out.retain(|(id, _)| self.needs(*id));
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            acc.expect_same_shape(&g)?;
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    Ok(())
}
