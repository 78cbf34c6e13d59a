//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Each operator call evaluates eagerly and appends a record holding its
//! inputs and any forward intermediates the backward pass needs. Records are
//! appended in evaluation order, so the tape is always topologically sorted.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ops::{self, BatchNormParams, BatchStats, ConvGeometry, Mode, Padding, PoolGeometry};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, geom: ConvGeometry },
    BiasAdd { input: Var, bias: Var },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64>, mode: Mode },
    Relu { input: Var },
    MaxPool { input: Var, argmax: Vec<usize> },
    AvgPool { input: Var, geom: PoolGeometry },
    Dense { input: Var, weight: Var, bias: Option<Var> },
    Add { a: Var, b: Var },
    Reshape { input: Var },
    SoftmaxCrossEntropy { logits: Var, probs: Tensor, labels: Vec<usize> },
    Sum { input: Var },
    WeightedSum { input: Var, weights: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of the loss with respect to every trainable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads.iter().map(|(&v, t)| (v, t))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, trainable: false, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is produced for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, trainable: false, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A trainable parameter; `backward` returns its gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, trainable: true, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let geom = ops::conv_geometry(self.value(input), self.value(kernel), stride, padding)?;
        let out = ops::conv2d_with(self.value(input), self.value(kernel), &geom);
        Ok(self.push(out, Op::Conv2d { input, kernel, geom }, &[input, kernel]))
    }

    pub fn bias_add(&mut self, input: Var, bias: Var) -> Result<Var> {
        let out = ops::bias_add(self.value(input), self.value(bias))?;
        Ok(self.push(out, Op::BiasAdd { input, bias }, &[input, bias]))
    }

    /// Batch normalization with `gamma`/`beta` taken from the tape; `params`
    /// supplies the moving statistics and epsilon. Training mode also returns
    /// the batch statistics for the caller's moving-average update.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        params: &BatchNormParams,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let f = ops::batchnorm_forward(self.value(input), self.value(gamma), self.value(beta), params, mode)?;
        let v = self.push(
            f.out,
            Op::BatchNorm { input, gamma, beta, xhat: f.xhat, inv_std: f.inv_std, mode },
            &[input, gamma, beta],
        );
        Ok((v, f.stats))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        self.push(out, Op::Relu { input }, &[input])
    }

    pub fn maxpool(&mut self, input: Var, size: usize, stride: usize, padding: Padding) -> Result<Var> {
        let geom = ops::pool_geometry(self.value(input), size, stride, padding)?;
        let (out, argmax) = ops::maxpool_forward(self.value(input), &geom);
        Ok(self.push(out, Op::MaxPool { input, argmax }, &[input]))
    }

    pub fn avgpool(&mut self, input: Var, size: usize, stride: usize, padding: Padding) -> Result<Var> {
        let geom = ops::pool_geometry(self.value(input), size, stride, padding)?;
        let out = ops::avgpool_forward(self.value(input), &geom);
        Ok(self.push(out, Op::AvgPool { input, geom }, &[input]))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = ops::dense(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(out, Op::Dense { input, weight, bias }, &inputs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { input }, &[input]))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, probs, labels: labels.to_vec() },
            &[logits],
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).sum();
        self.push(Tensor::scalar(s), Op::Sum { input }, &[input])
    }

    /// `sum(input * weights)` with constant weights.
    pub fn weighted_sum(&mut self, input: Var, weights: Tensor) -> Result<Var> {
        if weights.shape() != self.value(input).shape() {
            return Err(Error::shape(format!(
                "weighted_sum weights {:?} vs input {:?}",
                weights.shape(),
                self.value(input).shape()
            )));
        }
        let s = self.value(input).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { input, weights }, &[input]))
    }

    /// One reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(&node.op, &dy, &mut grads);
        }

        let mut out = Gradients::default();
        for (idx, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[idx];
            if node.trainable {
                let g = g.unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.grads.insert(Var(idx), g);
            }
        }
        Ok(out)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, geom } => {
                let (dx, dk) = ops::conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    geom,
                    dy,
                    self.needs(*input),
                    self.needs(*kernel),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, dx);
                }
                if let Some(dk) = dk {
                    self.accumulate(grads, *kernel, dk);
                }
            }
            Op::BiasAdd { input, bias } => {
                self.accumulate(grads, *bias, ops::channel_sums(dy));
                self.accumulate(grads, *input, dy.clone());
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, mode } => {
                let (dx, dg, db) = ops::batchnorm_backward(dy, xhat, inv_std, self.value(*gamma), *mode);
                self.accumulate(grads, *input, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::Relu { input } => {
                let x = self.value(*input);
                let g = dy.zip_with(x, |d, xv| if xv > 0.0 { d } else { 0.0 }).unwrap();
                self.accumulate(grads, *input, g);
            }
            Op::MaxPool { input, argmax } => {
                let mut g = Tensor::zeros(self.value(*input).shape());
                let gd = g.data_mut();
                for (&src, &d) in argmax.iter().zip(dy.data()) {
                    gd[src] += d;
                }
                self.accumulate(grads, *input, g);
            }
            Op::AvgPool { input, geom } => {
                self.accumulate(grads, *input, ops::avgpool_backward(dy, geom));
            }
            Op::Dense { input, weight, bias } => {
                let (dx, dw) = ops::dense_backward(self.value(*input), self.value(*weight), dy, self.needs(*input));
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, dx);
                }
                self.accumulate(grads, *weight, dw);
                if let Some(b) = bias {
                    self.accumulate(grads, *b, ops::channel_sums(dy));
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Reshape { input } => {
                let g = dy.clone().reshape(self.value(*input).shape()).unwrap();
                self.accumulate(grads, *input, g);
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let c = probs.channels();
                let n = labels.len() as f64;
                let scale = dy.data()[0] / n;
                let mut g = probs.clone();
                for (row, &label) in g.data_mut().chunks_exact_mut(c).zip(labels) {
                    row[label] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                self.accumulate(grads, *logits, g);
            }
            Op::Sum { input } => {
                let g = Tensor::full(self.value(*input).shape(), dy.data()[0]);
                self.accumulate(grads, *input, g);
            }
            Op::WeightedSum { input, weights } => {
                self.accumulate(grads, *input, weights.scale(dy.data()[0]));
            }
        }
    }
}
