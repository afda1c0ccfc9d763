//! Tape-based reverse-mode autodiff over the handful of ops the detector
//! and the quantization losses need.
//!
//! Values are computed eagerly as nodes are recorded; [`Graph::backward`]
//! walks the tape once in reverse. Fake-quant nodes use the straight-through
//! estimator from [`crate::quant::ste_grad`].

use alloc::vec;
use alloc::vec::Vec;


use super::conv::{conv2d_backward, conv2d_forward};
use crate::quant::{ste_grad, QuantParams};
use crate::tgpl::{focal_value_grad, l1_value_grad};
use crate::{Error, Real, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, stride: usize, pad: usize },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    FakeQuant { x: Var, scale: Var, fraction: Option<Var>, bits: u32 },
    Focal { pred: Var, target: Tensor<T> },
    L1 { pred: Var, target: Tensor<T>, mask: Vec<bool> },
    SqDiff { a: Var, b: Var, weight: f64 },
    Linear { terms: Vec<(Var, f64)> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Graph { nodes: Vec::new() }
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Result<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref()).ok_or(Error::NotOnTrace(v.0))
    }

    pub fn take(&mut self, v: Var) -> Result<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take()).ok_or(Error::NotOnTrace(v.0))
    }
}

fn scalar_of<T: Real>(t: &Tensor<T>) -> f64 {
    t.data()[0].as_f64()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        scalar_of(self.value(v))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = conv2d_forward(self.value(input), self.value(weight), self.value(bias).data(), stride, pad)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(y, Op::Conv2d { input, weight, bias, stride, pad }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(y, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(x);
        self.push(y, Op::Sigmoid(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch { context: "add", expected: va.shape().to_vec(), got: vb.shape().to_vec() });
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let y = Tensor::from_vec(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    /// Fake quantization of `x` with a learnable scale (shape `[1]`) and optional
    /// rounding fractions `h = theta / scale` (same shape as `x`).
    pub fn fake_quant(&mut self, x: Var, scale: Var, fraction: Option<Var>, bits: u32) -> Result<Var> {
        let p = QuantParams::symmetric(self.scalar(scale), bits)?;
        let xv = self.value(x);
        if let Some(f) = fraction {
            if self.value(f).shape() != xv.shape() {
                return Err(Error::ShapeMismatch {
                    context: "rounding fractions",
                    expected: xv.shape().to_vec(),
                    got: self.value(f).shape().to_vec(),
                });
            }
        }
        let fr = fraction.map(|f| self.value(f).data());
        let mut out = Vec::with_capacity(xv.numel());
        for (i, &v) in xv.data().iter().enumerate() {
            let theta = fr.map_or(0.0, |h| h[i].as_f64().clamp(0.0, 1.0) * p.scale);
            out.push(T::from_f64(p.value(p.code(v.as_f64(), theta))));
        }
        let y = Tensor::from_vec(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(scale) || fraction.is_some_and(|f| self.rg(f));
        Ok(self.push(y, Op::FakeQuant { x, scale, fraction, bits }, rg))
    }

    /// Penalty-reduced focal loss of heatmap probabilities against a Gaussian target.
    pub fn focal(&mut self, pred: Var, target: Tensor<T>) -> Result<Var> {
        let (v, _) = focal_value_grad(self.value(pred), &target, false)?;
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(T::from_f64(v)), Op::Focal { pred, target }, rg))
    }

    /// Masked mean absolute error; `mask` is `(N, H, W)` over an `(N, R, H, W)` prediction.
    pub fn l1_masked(&mut self, pred: Var, target: Tensor<T>, mask: Vec<bool>) -> Result<Var> {
        let (v, _) = l1_value_grad(self.value(pred), &target, &mask, false)?;
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(T::from_f64(v)), Op::L1 { pred, target, mask }, rg))
    }

    /// `weight * sum (a - b)^2`.
    pub fn sq_diff(&mut self, a: Var, b: Var, weight: f64) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch { context: "sq_diff", expected: va.shape().to_vec(), got: vb.shape().to_vec() });
        }
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(T::from_f64(weight * s)), Op::SqDiff { a, b, weight }, rg))
    }

    /// `sum_k c_k * s_k` over scalar nodes.
    pub fn linear(&mut self, terms: &[(Var, f64)]) -> Var {
        let v: f64 = terms.iter().map(|&(x, c)| c * self.scalar(x)).sum();
        let rg = terms.iter().any(|&(x, _)| self.rg(x));
        self.push(Tensor::scalar(T::from_f64(v)), Op::Linear { terms: terms.to_vec() }, rg)
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::ShapeMismatch { context: "backward loss", expected: vec![1], got: self.value(loss).shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(go) = grads[i].take() else { continue };
            let mut acc = |v: Var, g: Tensor<T>| accumulate(&self.nodes, &mut grads, v, g);
            match &node.op {
                Op::Leaf => {
                    leaf_grads.push((i, go));
                    continue;
                }
                Op::Conv2d { input, weight, bias, stride, pad } => {
                    let cg = conv2d_backward(self.value(*input), self.value(*weight), &go, *stride, *pad, self.rg(*input), self.rg(*weight))?;
                    if let Some(dx) = cg.input {
                        acc(*input, dx);
                    }
                    if let Some(dw) = cg.weight {
                        acc(*weight, dw);
                    }
                    acc(*bias, Tensor::from_vec(&[cg.bias.len()], cg.bias)?);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let data = go.data().iter().zip(xv.data()).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }).collect();
                    acc(*x, Tensor::from_vec(xv.shape(), data)?);
                }
                Op::Sigmoid(x) => {
                    let data = go.data().iter().zip(node.value.data()).map(|(&g, &y)| g * y * (T::one() - y)).collect();
                    acc(*x, Tensor::from_vec(node.value.shape(), data)?);
                }
                Op::Add(a, b) => {
                    acc(*a, go.clone());
                    acc(*b, go);
                }
                Op::FakeQuant { x, scale, fraction, bits } => {
                    let p = QuantParams::symmetric(self.scalar(*scale), *bits)?;
                    let xv = self.value(*x);
                    let fr = fraction.map(|f| self.value(f).data());
                    let mut dx = Vec::with_capacity(xv.numel());
                    let mut dh = Vec::with_capacity(if fr.is_some() { xv.numel() } else { 0 });
                    let mut ds = 0.0f64;
                    for (k, (&v, &g)) in xv.data().iter().zip(go.data()).enumerate() {
                        let theta = fr.map_or(0.0, |h| h[k].as_f64().clamp(0.0, 1.0) * p.scale);
                        let s = ste_grad(&p, v.as_f64(), theta);
                        let g = g.as_f64();
                        dx.push(T::from_f64(g * s.d_x));
                        if fr.is_some() {
                            dh.push(T::from_f64(g * s.d_theta * p.scale));
                        }
                        ds += g * s.d_scale;
                    }
                    acc(*x, Tensor::from_vec(xv.shape(), dx)?);
                    if let Some(f) = fraction {
                        acc(*f, Tensor::from_vec(xv.shape(), dh)?);
                    }
                    acc(*scale, Tensor::scalar(T::from_f64(ds)));
                }
                Op::Focal { pred, target } => {
                    let (_, g) = focal_value_grad(self.value(*pred), target, true)?;
                    let k = go.data()[0];
                    let g = g.expect("requested").map(|v| v * k);
                    acc(*pred, g);
                }
                Op::L1 { pred, target, mask } => {
                    let (_, g) = l1_value_grad(self.value(*pred), target, mask, true)?;
                    let k = go.data()[0];
                    acc(*pred, g.expect("requested").map(|v| v * k));
                }
                Op::SqDiff { a, b, weight } => {
                    let k = go.data()[0] * T::from_f64(2.0 * weight);
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let da: Vec<T> = va.data().iter().zip(vb.data()).map(|(&x, &y)| k * (x - y)).collect();
                    let db: Vec<T> = da.iter().map(|&v| -v).collect();
                    acc(*a, Tensor::from_vec(va.shape(), da)?);
                    acc(*b, Tensor::from_vec(vb.shape(), db)?);
                }
                Op::Linear { terms } => {
                    let g = go.data()[0];
                    for &(x, c) in terms {
                        acc(x, Tensor::scalar(g * T::from_f64(c)));
                    }
                }
            }
        }
        for (i, g) in leaf_grads {
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(t) => t.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_conv_sum_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(&[1, 2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap());
        let w = g.param(Tensor::from_vec(&[1, 2, 1, 1], vec![0.5, -1.0]).unwrap());
        let b = g.param(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        let z = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        // sum(y) through a linear combination of (y - 0)^2 would be quadratic;
        // use fake add + sq to stay linear in w: d/dw sum(y) = sum over positions of x
        let ones = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let yp = g.add(y, ones).unwrap();
        let l = g.sq_diff(yp, z, 0.5).unwrap();
        let grads = g.backward(l).unwrap();
        // dL/dy = y + 1; dL/dw_c = sum_p (y_p + 1) x_{c,p}
        let yv = g.value(y).data().to_vec();
        for c in 0..2 {
            let e: f64 = (0..4).map(|p| (yv[p] + 1.0) * (c * 4 + p) as f64).sum();
            assert!((grads.get(w).unwrap().data()[c] - e).abs() < 1e-12);
        }
        assert!(matches!(grads.get(x), Err(Error::NotOnTrace(_))));
    }

    #[test]
    fn unused_param_is_not_on_trace() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::scalar(1.0));
        let b = g.param(Tensor::scalar(2.0));
        let l = g.linear(&[(a, 3.0)]);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0]);
        assert!(grads.get(b).is_err());
    }
}
