use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;


use super::conv::{conv2d_forward, ConvGeom};
use crate::quant::{fake_quant, QuantParams, RoundingOffsets};
use crate::{Error, Real, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Full,
    Quantized,
}

/// Where a layer sits in the detector graph. Backbone layers run in order;
/// both heads read the last backbone output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRole {
    Backbone,
    HeatmapHead,
    RegressionHead,
}

/// One convolution with batch-norm already folded into `weight`/`bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec<T = f32> {
    pub name: String,
    pub role: LayerRole,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
    pub activation: Activation,
    pub w_quant: Option<QuantParams>,
    pub a_quant: Option<QuantParams>,
    pub theta: Option<RoundingOffsets>,
    pub precision: Precision,
    /// Must stay full precision (first/last layers).
    pub fp_exempt: bool,
}

impl<T: Real> LayerSpec<T> {
    pub fn new(name: &str, role: LayerRole, weight: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize, activation: Activation) -> Result<Self> {
        let l = LayerSpec {
            name: name.to_string(),
            role,
            weight,
            bias,
            stride,
            padding,
            activation,
            w_quant: None,
            a_quant: None,
            theta: None,
            precision: Precision::Full,
            fp_exempt: false,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn geom(&self) -> Result<ConvGeom> {
        ConvGeom::from_weight(&self.weight, self.stride, self.padding)
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.geom()?;
        if self.bias.numel() != g.out_ch {
            return Err(Error::LengthMismatch { left: g.out_ch, right: self.bias.numel() });
        }
        if let Some(t) = &self.theta {
            if self.w_quant.is_none() {
                return Err(Error::InvalidConfig(alloc::format!("layer `{}` has rounding offsets but no weight quantizer", self.name)));
            }
            if t.shape() != self.weight.shape() {
                return Err(Error::ShapeMismatch {
                    context: "rounding offsets",
                    expected: self.weight.shape().to_vec(),
                    got: t.shape().to_vec(),
                });
            }
        }
        if self.precision == Precision::Quantized && (self.w_quant.is_none() || self.a_quant.is_none()) {
            return Err(Error::InvalidConfig(alloc::format!("quantized layer `{}` lacks quantizers", self.name)));
        }
        Ok(())
    }

    pub fn is_quantized(&self) -> bool {
        self.precision == Precision::Quantized
    }

    /// Weights as the layer sees them: fake-quantized (with offsets) when quantized.
    pub fn effective_weight(&self) -> Result<Tensor<T>> {
        match (self.precision, &self.w_quant) {
            (Precision::Quantized, Some(p)) => fake_quant(&self.weight, p, self.theta.as_ref()),
            _ => Ok(self.weight.clone()),
        }
    }

    /// Conv + activation on an input batch, applying the input and weight
    /// quantizers when the layer is quantized.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let q_in;
        let x = match (self.precision, &self.a_quant) {
            (Precision::Quantized, Some(p)) => {
                q_in = fake_quant(input, p, None)?;
                &q_in
            }
            _ => input,
        };
        let w = self.effective_weight()?;
        let mut y = conv2d_forward(x, &w, self.bias.data(), self.stride, self.padding)?;
        if self.activation == Activation::Relu {
            relu_inplace(&mut y);
        }
        Ok(y)
    }

    pub fn cast<U: Real>(&self) -> LayerSpec<U> {
        LayerSpec {
            name: self.name.clone(),
            role: self.role,
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            stride: self.stride,
            padding: self.padding,
            activation: self.activation,
            w_quant: self.w_quant,
            a_quant: self.a_quant,
            theta: self.theta.clone(),
            precision: self.precision,
            fp_exempt: self.fp_exempt,
        }
    }
}

pub fn relu_inplace<T: Real>(t: &mut Tensor<T>) {
    t.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
}

pub fn sigmoid<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Folds `gamma * (conv - mean) / sqrt(var + eps) + beta` into the conv.
pub fn fold_batchnorm<T: Real>(
    conv_w: &Tensor<T>,
    conv_b: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (out_ch, ..) = conv_w.dims4()?;
    for (len, _) in [(conv_b.numel(), 0), (gamma.len(), 1), (beta.len(), 2), (mean.len(), 3), (var.len(), 4)] {
        if len != out_ch {
            return Err(Error::LengthMismatch { left: out_ch, right: len });
        }
    }
    if let Some((channel, v)) = var.iter().enumerate().find(|(_, v)| **v < T::zero()) {
        return Err(Error::NegativeVariance { channel, value: v.as_f64() });
    }
    let per = conv_w.numel() / out_ch;
    let mut w = conv_w.clone();
    let mut b = conv_b.clone();
    for o in 0..out_ch {
        let k = gamma[o] / (var[o] + eps).sqrt();
        w.data_mut()[o * per..(o + 1) * per].iter_mut().for_each(|v| *v *= k);
        b.data_mut()[o] = (conv_b.data()[o] - mean[o]) * k + beta[o];
    }
    Ok((w, b))
}

/// Inference-mode batch norm over NCHW (reference path for fold checks).
pub fn batchnorm_forward<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T], mean: &[T], var: &[T], eps: T) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let mut y = x.clone();
    for b in 0..n {
        for ch in 0..c {
            let k = gamma[ch] / (var[ch] + eps).sqrt();
            let base = (b * c + ch) * h * w;
            y.data_mut()[base..base + h * w]
                .iter_mut()
                .for_each(|v| *v = (*v - mean[ch]) * k + beta[ch]);
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T = f32> {
    pub layers: Vec<LayerSpec<T>>,
    pub input_channels: usize,
}

impl<T: Real> Network<T> {
    pub fn new(layers: Vec<LayerSpec<T>>, input_channels: usize) -> Result<Self> {
        let net = Network { layers, input_channels };
        net.validate()?;
        Ok(net)
    }

    /// Channel chaining along the backbone; each head reads the backbone output.
    pub fn validate(&self) -> Result<()> {
        let mut ch = self.input_channels;
        let mut seen_head = false;
        for l in &self.layers {
            l.validate()?;
            let g = l.geom()?;
            match l.role {
                LayerRole::Backbone => {
                    if seen_head {
                        return Err(Error::InvalidConfig(alloc::format!("backbone layer `{}` after a head", l.name)));
                    }
                    if g.in_ch != ch {
                        return Err(Error::ShapeMismatch { context: "layer chaining", expected: vec![ch], got: vec![g.in_ch] });
                    }
                    ch = g.out_ch;
                }
                _ => {
                    seen_head = true;
                    if g.in_ch != ch {
                        return Err(Error::ShapeMismatch { context: "head input", expected: vec![ch], got: vec![g.in_ch] });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn layer(&self, name: &str) -> Result<&LayerSpec<T>> {
        self.layers.iter().find(|l| l.name == name).ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn layer_mut(&mut self, name: &str) -> Result<&mut LayerSpec<T>> {
        self.layers.iter_mut().find(|l| l.name == name).ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.layers.iter().position(|l| l.name == name).ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn backbone(&self) -> impl Iterator<Item = &LayerSpec<T>> {
        self.layers.iter().filter(|l| l.role == LayerRole::Backbone)
    }

    pub fn head(&self, role: LayerRole) -> Option<&LayerSpec<T>> {
        self.layers.iter().find(|l| l.role == role)
    }

    /// Runs the backbone in order. `stop_after` returns that layer's output
    /// (a head name evaluates that head on the backbone output); `None`
    /// returns the backbone output.
    pub fn forward(&self, input: &Tensor<T>, stop_after: Option<&str>) -> Result<Tensor<T>> {
        if let Some(name) = stop_after {
            self.layer(name)?;
        }
        let (_, c, ..) = input.dims4()?;
        if c != self.input_channels {
            return Err(Error::ShapeMismatch { context: "network input", expected: vec![self.input_channels], got: vec![c] });
        }
        let mut x = input.clone();
        for l in self.backbone() {
            x = l.forward(&x)?;
            if stop_after == Some(l.name.as_str()) {
                return Ok(x);
            }
        }
        if let Some(name) = stop_after {
            return self.layer(name)?.forward(&x);
        }
        Ok(x)
    }

    /// Backbone inputs of every backbone layer plus the final backbone output.
    pub fn backbone_trace(&self, input: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut acts = vec![input.clone()];
        for l in self.backbone() {
            let y = l.forward(acts.last().expect("non-empty"))?;
            acts.push(y);
        }
        Ok(acts)
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network { layers: self.layers.iter().map(|l| l.cast()).collect(), input_channels: self.input_channels }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::conv::conv2d_forward;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn rt(shape: &[usize], seed: &mut u64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| lcg(seed)).collect()).unwrap()
    }

    #[test]
    fn identity_bn_is_unchanged() {
        let mut s = 5;
        let w = rt(&[2, 1, 3, 3], &mut s);
        let b = rt(&[2], &mut s);
        let (fw, fb) = fold_batchnorm(&w, &b, &[1.0, 1.0], &[0.0, 0.0], &[0.0, 0.0], &[1.0, 1.0], 0.0).unwrap();
        assert_eq!((fw, fb), (w, b));
    }

    #[test]
    fn pure_scale_doubles_weights() {
        let mut s = 6;
        let w = rt(&[2, 1, 3, 3], &mut s);
        let b = Tensor::zeros(&[2]);
        let (fw, _) = fold_batchnorm(&w, &b, &[2.0, 2.0], &[0.0, 0.0], &[0.0, 0.0], &[1.0, 1.0], 0.0).unwrap();
        assert_eq!(fw, w.map(|v| 2.0 * v));
    }

    #[test]
    fn negative_variance_is_rejected() {
        let w = Tensor::<f64>::zeros(&[1, 1, 1, 1]);
        let b = Tensor::zeros(&[1]);
        let e = fold_batchnorm(&w, &b, &[1.0], &[0.0], &[0.0], &[-1.0], 0.0).unwrap_err();
        assert!(matches!(e, Error::NegativeVariance { channel: 0, .. }));
    }

    #[test]
    fn folded_matches_unfolded_on_random_input() {
        let mut s = 7;
        let x = rt(&[2, 3, 6, 6], &mut s);
        let w = rt(&[4, 3, 3, 3], &mut s);
        let b = rt(&[4], &mut s);
        let gamma: Vec<f64> = (0..4).map(|_| lcg(&mut s) + 1.5).collect();
        let beta: Vec<f64> = (0..4).map(|_| lcg(&mut s)).collect();
        let mean: Vec<f64> = (0..4).map(|_| lcg(&mut s)).collect();
        let var: Vec<f64> = (0..4).map(|_| lcg(&mut s) + 1.1).collect();
        let y = conv2d_forward(&x, &w, b.data(), 1, 1).unwrap();
        let unfolded = batchnorm_forward(&y, &gamma, &beta, &mean, &var, 1e-5).unwrap();
        let (fw, fb) = fold_batchnorm(&w, &b, &gamma, &beta, &mean, &var, 1e-5).unwrap();
        let folded = conv2d_forward(&x, &fw, fb.data(), 1, 1).unwrap();
        for (a, e) in folded.data().iter().zip(unfolded.data()) {
            assert!((a - e).abs() < 1e-10);
        }
    }

    fn two_layer_net(seed: &mut u64) -> Network<f64> {
        let l1 = LayerSpec::new("a", LayerRole::Backbone, rt(&[3, 2, 3, 3], seed), rt(&[3], seed), 1, 1, Activation::Relu).unwrap();
        let l2 = LayerSpec::new("b", LayerRole::Backbone, rt(&[2, 3, 3, 3], seed), rt(&[2], seed), 2, 1, Activation::Relu).unwrap();
        let h = LayerSpec::new("h", LayerRole::HeatmapHead, rt(&[1, 2, 1, 1], seed), rt(&[1], seed), 1, 0, Activation::None).unwrap();
        Network::new(vec![l1, l2, h], 2).unwrap()
    }

    #[test]
    fn forward_composes_layers_and_stops() {
        let mut s = 8;
        let net = two_layer_net(&mut s);
        let x = rt(&[1, 2, 6, 6], &mut s);
        let mut a = conv2d_forward(&x, &net.layers[0].weight, net.layers[0].bias.data(), 1, 1).unwrap();
        relu_inplace(&mut a);
        assert_eq!(net.forward(&x, Some("a")).unwrap(), a);
        let mut b = conv2d_forward(&a, &net.layers[1].weight, net.layers[1].bias.data(), 2, 1).unwrap();
        relu_inplace(&mut b);
        assert_eq!(net.forward(&x, None).unwrap(), b);
        let h = conv2d_forward(&b, &net.layers[2].weight, net.layers[2].bias.data(), 1, 0).unwrap();
        assert_eq!(net.forward(&x, Some("h")).unwrap(), h);
        assert!(matches!(net.forward(&x, Some("zzz")), Err(Error::UnknownLayer(_))));
    }

    #[test]
    fn identity_network_is_identity() {
        let mut w = Tensor::<f64>::zeros(&[2, 2, 1, 1]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        let l = LayerSpec::new("id", LayerRole::Backbone, w, Tensor::zeros(&[2]), 1, 0, Activation::None).unwrap();
        let net = Network::new(vec![l], 2).unwrap();
        let mut s = 9;
        let x = rt(&[1, 2, 3, 3], &mut s);
        assert_eq!(net.forward(&x, None).unwrap(), x);
    }

    #[test]
    fn theta_requires_weight_quantizer() {
        let mut s = 10;
        let mut l = LayerSpec::new("a", LayerRole::Backbone, rt(&[1, 1, 1, 1], &mut s), rt(&[1], &mut s), 1, 0, Activation::None).unwrap();
        l.theta = Some(RoundingOffsets::zeros(&[1, 1, 1, 1]));
        assert!(l.validate().is_err());
    }
}
