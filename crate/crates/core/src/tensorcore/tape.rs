//! Reverse-mode differentiation over a linear tape of layer-level operations.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeometry};
use super::layer::{require_params, LayerKind, LayerSpec};
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Dense {
        x: usize,
        w: usize,
        b: usize,
        in_f: usize,
        out_f: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geometry: ConvGeometry,
    },
    Relu {
        x: usize,
    },
    MaxPool2 {
        x: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: usize,
        area: usize,
    },
    Reshape {
        x: usize,
    },
    SoftmaxCe {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sum {
        x: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn resolve(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::usage("value was not recorded on this tape"));
        }
        Ok(v.index)
    }

    /// Records a differentiable input (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient (data).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.resolve(v)?].value)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Applies one layer. Values match [`super::layer::forward`] exactly.
    pub fn layer(&mut self, layer: &LayerSpec, params: Option<(Var, Var)>, x: Var) -> Result<Var> {
        let xi = self.resolve(x)?;
        let pidx = match params {
            Some((w, b)) => Some((self.resolve(w)?, self.resolve(b)?)),
            None => None,
        };
        let input = &self.nodes[xi].value;
        let shape = input.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::config(format!(
                "layer '{}': input {shape:?} lacks a batch axis",
                layer.name
            )));
        }
        let batch = shape[0];
        let sample = &shape[1..];
        let mut out_shape = vec![batch];
        out_shape.extend(layer.output_shape(sample)?);
        let xd = input.data();
        let param_tensors = pidx.map(|(w, b)| (&self.nodes[w].value, &self.nodes[b].value));
        let (data, op) = match layer.kind {
            LayerKind::Dense {
                in_features,
                out_features,
            } => {
                let (w, b) = require_params(layer, param_tensors)?;
                let (wi, bi) = pidx.expect("checked by require_params");
                (
                    kernels::dense_forward(batch, in_features, out_features, xd, w.data(), b.data()),
                    Op::Dense {
                        x: xi,
                        w: wi,
                        b: bi,
                        in_f: in_features,
                        out_f: out_features,
                    },
                )
            }
            LayerKind::Conv2d { .. } => {
                let (w, b) = require_params(layer, param_tensors)?;
                let (wi, bi) = pidx.expect("checked by require_params");
                let geometry = layer.conv_geometry(sample)?;
                (
                    kernels::conv2d_forward(&geometry, batch, xd, w.data(), b.data()),
                    Op::Conv2d {
                        x: xi,
                        w: wi,
                        b: bi,
                        geometry,
                    },
                )
            }
            LayerKind::Relu => (xd.iter().map(|v| v.max(0.0)).collect(), Op::Relu { x: xi }),
            LayerKind::MaxPool2 => {
                let (out, argmax) =
                    kernels::maxpool2_forward(batch, sample[0], sample[1], sample[2], xd);
                (out, Op::MaxPool2 { x: xi, argmax })
            }
            LayerKind::GlobalAvgPool => {
                let area = sample[1] * sample[2];
                (
                    kernels::global_avg_pool_forward(batch * sample[0], area, xd),
                    Op::GlobalAvgPool { x: xi, area },
                )
            }
            LayerKind::Flatten => (xd.to_vec(), Op::Reshape { x: xi }),
        };
        let needs = self.needs(xi) || pidx.is_some_and(|(w, b)| self.needs(w) || self.needs(b));
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, op, needs))
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.resolve(logits)?;
        let value = &self.nodes[li].value;
        let &[batch, classes] = value.shape() else {
            return Err(Error::usage(format!(
                "cross-entropy expects [batch, classes] logits, got {:?}",
                value.shape()
            )));
        };
        if labels.len() != batch {
            return Err(Error::data(format!(
                "{} labels for a batch of {batch}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::data(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let (loss, probs) = kernels::softmax_cross_entropy(batch, classes, value.data(), labels);
        let needs = self.needs(li);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits: li,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xi = self.resolve(x)?;
        let v = &self.nodes[xi].value;
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|a| a * factor).collect(),
        )?;
        let needs = self.needs(xi);
        Ok(self.push(out, Op::Scale { x: xi, factor }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.resolve(a)?, self.resolve(b)?);
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if va.shape() != vb.shape() {
            return Err(Error::usage(format!(
                "add of mismatched shapes {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect(),
        )?;
        let needs = self.needs(ai) || self.needs(bi);
        Ok(self.push(out, Op::Add { a: ai, b: bi }, needs))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.resolve(x)?;
        let total = self.nodes[xi].value.data().iter().sum();
        let needs = self.needs(xi);
        Ok(self.push(Tensor::scalar(total), Op::Sum { x: xi }, needs))
    }

    /// Propagates d(loss)/d(node) back through the tape. `loss` must be a
    /// scalar recorded on this tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.resolve(loss)?;
        if self.nodes[li].value.numel() != 1 {
            return Err(Error::usage(format!(
                "backward from a non-scalar of shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn propagate(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |target: usize, g: &[f64]| {
            if !self.nodes[target].needs_grad {
                return;
            }
            match &mut grads[target] {
                Some(existing) => existing.iter_mut().zip(g).for_each(|(e, v)| *e += v),
                slot => *slot = Some(g.to_vec()),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Dense {
                x,
                w,
                b,
                in_f,
                out_f,
            } => {
                let batch = self.nodes[x].value.shape()[0];
                let mut dw = vec![0.0; in_f * out_f];
                let mut db = vec![0.0; out_f];
                let dx = kernels::dense_backward(
                    batch,
                    in_f,
                    out_f,
                    self.nodes[x].value.data(),
                    self.nodes[w].value.data(),
                    dy,
                    &mut dw,
                    &mut db,
                    self.needs(x),
                );
                acc(w, &dw);
                acc(b, &db);
                if let Some(dx) = dx {
                    acc(x, &dx);
                }
            }
            &Op::Conv2d { x, w, b, geometry } => {
                let batch = self.nodes[x].value.shape()[0];
                let mut dw = vec![0.0; self.nodes[w].value.numel()];
                let mut db = vec![0.0; geometry.c_out];
                let dx = kernels::conv2d_backward(
                    &geometry,
                    batch,
                    self.nodes[x].value.data(),
                    self.nodes[w].value.data(),
                    dy,
                    &mut dw,
                    &mut db,
                    self.needs(x),
                );
                acc(w, &dw);
                acc(b, &db);
                if let Some(dx) = dx {
                    acc(x, &dx);
                }
            }
            &Op::Relu { x } => {
                let dx: Vec<f64> = self.nodes[x]
                    .value
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                acc(x, &dx);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![0.0; self.nodes[*x].value.numel()];
                for (&src, &g) in argmax.iter().zip(dy) {
                    dx[src] += g;
                }
                acc(*x, &dx);
            }
            &Op::GlobalAvgPool { x, area } => {
                let mut dx = vec![0.0; self.nodes[x].value.numel()];
                for (plane, &g) in dx.chunks_mut(area).zip(dy) {
                    plane.fill(g / area as f64);
                }
                acc(x, &dx);
            }
            &Op::Reshape { x } => acc(x, dy),
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let batch = labels.len();
                let classes = probs.len() / batch;
                let scale = dy[0] / batch as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (n, &l) in labels.iter().enumerate() {
                    dx[n * classes + l] -= scale;
                }
                acc(*logits, &dx);
            }
            &Op::Scale { x, factor } => {
                let dx: Vec<f64> = dy.iter().map(|g| g * factor).collect();
                acc(x, &dx);
            }
            &Op::Add { a, b } => {
                acc(a, dy);
                acc(b, dy);
            }
            &Op::Sum { x } => {
                let dx = vec![dy[0]; self.nodes[x].value.numel()];
                acc(x, &dx);
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to a recorded value. Differentiable leaves that
    /// the loss does not depend on get an all-zero gradient.
    pub fn wrt(&self, v: Var) -> Result<&[f64]> {
        if v.tape != self.tape || v.index >= self.grads.len() {
            return Err(Error::usage("value was not recorded on this tape"));
        }
        self.grads[v.index]
            .as_deref()
            .ok_or_else(|| Error::usage("no gradient flows to this value"))
    }
}
