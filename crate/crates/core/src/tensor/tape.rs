use std::sync::Arc;

use super::ops::{self, Affine};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a tape entry was produced, with whatever the backward pass needs.
#[derive(Debug, Clone)]
pub enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, pad: usize, stride: usize },
    Relu { x: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Resize { x: Var },
    Warp { x: Var, affine: Affine },
    Concat { xs: Vec<Var> },
    SliceChannels { x: Var, c0: usize },
    Crop { x: Var, y0: isize, x0: isize },
    Paste { base: Var, patch: Var, y0: usize, x0: usize },
    Add { a: Var, b: Var },
    Sum { x: Var },
    Scale { x: Var, k: T },
    /// Scalar whose input gradients were computed in the forward pass.
    Fused { inputs: Vec<Var>, grads: Vec<Tensor<T>> },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Execution record for reverse-mode differentiation.
///
/// With recording off every result is stored as a constant, so nothing
/// upstream of it can receive gradient.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

/// Gradients indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), recording: true }
    }

    pub fn forward_only() -> Self {
        Tape { nodes: Vec::new(), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// A trainable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.param_shared(Arc::new(value))
    }

    pub fn param_shared(&mut self, value: Arc<Tensor<T>>) -> Var {
        let needs_grad = self.recording;
        self.push_raw(value, Op::Leaf, needs_grad)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.constant_shared(Arc::new(value))
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Shared handle to a value, valid after the tape is dropped.
    pub fn shared(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push_raw(&mut self, value: Arc<Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let value = Arc::new(value);
        if needs_grad {
            self.push_raw(value, op, true)
        } else {
            self.push_raw(value, Op::Leaf, false)
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize, stride: usize) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), pad, stride)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(y, Op::Conv2d { x, w, b, pad, stride }, &inputs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu { x }, &[x])
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let out = ops::group_norm(self.value(x), groups, self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(out.y, Op::GroupNorm { x, gamma, beta, mean: out.mean, rstd: out.rstd }, &[x, gamma, beta]))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = ops::max_pool2(self.value(x))?;
        Ok(self.push(y, Op::MaxPool2 { x, argmax }, &[x]))
    }

    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = ops::bilinear_resize(self.value(x), out_h, out_w)?;
        Ok(self.push(y, Op::Resize { x }, &[x]))
    }

    pub fn warp(&mut self, x: Var, affine: Affine) -> Var {
        let y = ops::bilinear_warp(self.value(x), &affine);
        self.push(y, Op::Warp { x, affine }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat_channels(&vals)?;
        Ok(self.push(y, Op::Concat { xs: xs.to_vec() }, xs))
    }

    pub fn slice_channels(&mut self, x: Var, c0: usize, c1: usize) -> Var {
        let y = ops::slice_channels(self.value(x), c0, c1);
        self.push(y, Op::SliceChannels { x, c0 }, &[x])
    }

    pub fn crop(&mut self, x: Var, y0: isize, x0: isize, h: usize, w: usize) -> Var {
        let y = ops::crop(self.value(x), y0, x0, h, w);
        self.push(y, Op::Crop { x, y0, x0 }, &[x])
    }

    pub fn paste(&mut self, base: Var, patch: Var, y0: usize, x0: usize) -> Result<Var> {
        let y = ops::paste(self.value(base), self.value(patch), y0, x0)?;
        Ok(self.push(y, Op::Paste { base, patch, y0, x0 }, &[base, patch]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("add: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let mut y = va.clone();
        y.add_assign(vb);
        Ok(self.push(y, Op::Add { a, b }, &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum { x }, &[x])
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let y = self.value(x).map(|v| v * k);
        self.push(y, Op::Scale { x, k }, &[x])
    }

    /// Records a scalar computed outside the tape together with its gradient
    /// with respect to each input.
    pub fn fused(&mut self, value: T, inputs: &[Var], grads: Vec<Tensor<T>>) -> Result<Var> {
        if inputs.len() != grads.len() {
            return Err(Error::Shape("fused op needs one gradient per input".into()));
        }
        for (v, g) in inputs.iter().zip(&grads) {
            if self.value(*v).shape() != g.shape() {
                return Err(Error::Shape(format!("fused gradient {:?} vs input {:?}", g.shape(), self.value(*v).shape())));
            }
        }
        Ok(self.push(Tensor::scalar(value), Op::Fused { inputs: inputs.to_vec(), grads }, inputs))
    }

    /// Reverse pass from a scalar. Entries are visited once, newest first.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::NoGraph("loss is not on this tape".into()));
        }
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NoGraph(format!("loss must be a scalar, got shape {:?}", root.value.shape())));
        }
        if !root.needs_grad {
            return Err(Error::NoGraph("loss was not recorded against any parameter".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(dy);
                continue;
            }
            self.backprop_node(&node.op, &node.value, &dy, &mut grads)?;
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, op: &Op<T>, out: &Tensor<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, pad, stride } => {
                let need_dx = self.nodes[x.0].needs_grad;
                let g = ops::conv2d_backward(self.value(*x), self.value(*w), dy, *pad, *stride, need_dx)?;
                if let Some(dx) = g.dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, g.dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, g.db);
                }
            }
            Op::Relu { x } => {
                let dx = ops::relu_backward(self.value(*x), dy);
                self.accumulate(grads, *x, dx);
            }
            Op::GroupNorm { x, gamma, beta, mean, rstd } => {
                let g = ops::group_norm_backward(self.value(*x), self.value(*gamma), mean, rstd, dy);
                self.accumulate(grads, *x, g.dx);
                self.accumulate(grads, *gamma, g.dgamma);
                self.accumulate(grads, *beta, g.dbeta);
            }
            Op::MaxPool2 { x, argmax } => {
                let dx = ops::max_pool2_backward(self.value(*x).shape(), argmax, dy);
                self.accumulate(grads, *x, dx);
            }
            Op::Resize { x } => {
                let dx = ops::bilinear_resize_backward(self.value(*x).shape(), dy);
                self.accumulate(grads, *x, dx);
            }
            Op::Warp { x, affine } => {
                let dx = ops::bilinear_warp_backward(dy, affine);
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { xs } => {
                let mut c0 = 0;
                for &x in xs {
                    let c = self.value(x).shape()[0];
                    self.accumulate(grads, x, ops::slice_channels(dy, c0, c0 + c));
                    c0 += c;
                }
            }
            Op::SliceChannels { x, c0 } => {
                let (c, h, w) = self.value(*x).chw();
                let mut dx = Tensor::zeros(&[c, h, w]);
                let n = dy.len();
                dx.data_mut()[c0 * h * w..c0 * h * w + n].copy_from_slice(dy.data());
                self.accumulate(grads, *x, dx);
            }
            Op::Crop { x, y0, x0 } => {
                let dx = ops::crop_backward(self.value(*x).shape(), *y0, *x0, dy);
                self.accumulate(grads, *x, dx);
            }
            Op::Paste { base, patch, y0, x0 } => {
                let (db, dp) = ops::paste_backward(self.value(*patch).shape(), *y0, *x0, dy);
                self.accumulate(grads, *base, db);
                self.accumulate(grads, *patch, dp);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Sum { x } => {
                let g = dy.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), g));
            }
            Op::Scale { x, k } => {
                let k = *k;
                self.accumulate(grads, *x, dy.map(|v| v * k));
            }
            Op::Fused { inputs, grads: saved } => {
                let g = dy.data()[0];
                for (v, sg) in inputs.iter().zip(saved) {
                    self.accumulate(grads, *v, sg.map(|s| s * g));
                }
            }
        }
        debug_assert_eq!(out.len(), dy.len());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn(&[2, 3, 3], |i| i as f64));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_without_graph_fails() {
        let mut tape = Tape::<f64>::forward_only();
        let x = tape.param(Tensor::full(&[1, 2, 2], 1.0));
        let s = tape.sum(x);
        assert!(tape.backward(s).is_err());
        let tape = Tape::<f64>::new();
        assert!(tape.backward(Var(0)).is_err());
    }

    #[test]
    fn reused_param_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::full(&[1, 1, 2], 2.0));
        let a = tape.scale(x, 3.0);
        let b = tape.add(a, x).unwrap();
        let s = tape.sum(b);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn constants_get_no_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::full(&[1, 1, 2], 2.0));
        let c = tape.constant(Tensor::full(&[1, 1, 2], 5.0));
        let y = tape.add(x, c).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(x).is_some());
    }
}
