//! 2-D cross-correlation via im2col + GEMM.
//!
//! Every output element is produced by one GEMM dot product in a fixed
//! order, so results do not depend on how callers split batches.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{gemm, Mat};
use crate::{Error, Real, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn from_weight<T: Real>(weight: &Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let (out_ch, in_ch, kh, kw) = weight.dims4()?;
        Ok(ConvGeom { in_ch, out_ch, kh, kw, stride: stride.max(1), pad })
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.pad, w + 2 * self.pad);
        if hp < self.kh || wp < self.kw {
            return Err(Error::ShapeMismatch {
                context: "conv2d spatial size",
                expected: vec![self.kh, self.kw],
                got: vec![h, w],
            });
        }
        Ok(((hp - self.kh) / self.stride + 1, (wp - self.kw) / self.stride + 1))
    }

    fn k(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize, col: &mut [T]) {
    let np = oh * ow;
    for c in 0..g.in_ch {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * np..(row + 1) * np];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let d = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        d.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    for (ox, dv) in d.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *dv = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize, dx: &mut [T]) {
    let np = oh * ow;
    for c in 0..g.in_ch {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * np..(row + 1) * np];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (c * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dx[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_input<T: Real>(input: &Tensor<T>, g: &ConvGeom) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = input.dims4()?;
    if c != g.in_ch {
        return Err(Error::ShapeMismatch {
            context: "conv2d input channels",
            expected: vec![n, g.in_ch, h, w],
            got: input.shape().to_vec(),
        });
    }
    Ok((n, h, w))
}

/// `out[n, o] = bias[o] + sum_{c,ky,kx} w[o, c, ky, kx] * x[n, c, oy*s+ky-p, ox*s+kx-p]`.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &[T],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::from_weight(weight, stride, pad)?;
    if bias.len() != g.out_ch {
        return Err(Error::LengthMismatch { left: g.out_ch, right: bias.len() });
    }
    let (n, h, w) = check_input(input, &g)?;
    let (oh, ow) = g.out_hw(h, w)?;
    let np = oh * ow;
    let mut out = Tensor::zeros(&[n, g.out_ch, oh, ow]);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.k() * np] };
    let per_in = g.in_ch * h * w;
    for b in 0..n {
        let x = &input.data()[b * per_in..(b + 1) * per_in];
        let dst = &mut out.data_mut()[b * g.out_ch * np..(b + 1) * g.out_ch * np];
        for (o, row) in dst.chunks_mut(np).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[o]);
        }
        let cols: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(x, h, w, &g, oh, ow, &mut col);
            &col
        };
        gemm(Mat::new(weight.data(), g.out_ch, g.k()), Mat::new(cols, g.k(), np), T::one(), dst);
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Vec<T>,
}

/// Adjoint of [`conv2d_forward`]. Input and weight gradients are only
/// computed when asked for.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_input: bool,
    need_weight: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::from_weight(weight, stride, pad)?;
    let (n, h, w) = check_input(input, &g)?;
    let (oh, ow) = g.out_hw(h, w)?;
    let np = oh * ow;
    if grad_out.shape() != [n, g.out_ch, oh, ow] {
        return Err(Error::ShapeMismatch {
            context: "conv2d grad_out",
            expected: vec![n, g.out_ch, oh, ow],
            got: grad_out.shape().to_vec(),
        });
    }
    let k = g.k();
    let mut dw = need_weight.then(|| Tensor::zeros(weight.shape()));
    let mut db = vec![T::zero(); g.out_ch];
    let mut dx = need_input.then(|| Tensor::zeros(input.shape()));
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * np] };
    let mut dcol = vec![T::zero(); k * np];
    let per_in = g.in_ch * h * w;
    for b in 0..n {
        let x = &input.data()[b * per_in..(b + 1) * per_in];
        let go = &grad_out.data()[b * g.out_ch * np..(b + 1) * g.out_ch * np];
        for (o, row) in go.chunks(np).enumerate() {
            db[o] += row.iter().copied().sum::<T>();
        }
        if let Some(dw) = dw.as_mut() {
            let cols: &[T] = if g.is_pointwise() {
                x
            } else {
                im2col(x, h, w, &g, oh, ow, &mut col);
                &col
            };
            // dW += dOut (out_ch x np) * cols^T (np x k)
            gemm(Mat::new(go, g.out_ch, np), Mat::t(cols, np, k), T::one(), dw.data_mut());
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = W^T (k x out_ch) * dOut (out_ch x np)
            gemm(Mat::t(weight.data(), k, g.out_ch), Mat::new(go, g.out_ch, np), T::zero(), &mut dcol);
            let dst = &mut dx.data_mut()[b * per_in..(b + 1) * per_in];
            if g.is_pointwise() {
                dst.iter_mut().zip(&dcol).for_each(|(d, &v)| *d += v);
            } else {
                col2im(&dcol, h, w, &g, oh, ow, dst);
            }
        }
    }
    Ok(ConvGrads { input: dx, weight: dw, bias: db })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn rand_tensor(shape: &[usize], seed: &mut u64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| lcg(seed)).collect()).unwrap()
    }

    /// Six nested loops straight from the definition.
    fn naive(x: &Tensor<f64>, wt: &Tensor<f64>, b: &[f64], s: usize, p: usize) -> Tensor<f64> {
        let (n, c, h, w) = x.dims4().unwrap();
        let (o, _, kh, kw) = wt.dims4().unwrap();
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (w + 2 * p - kw) / s + 1;
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        for bn in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[oc];
                        for ic in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += wt.data()[((oc * c + ic) * kh + ky) * kw + kx]
                                            * x.data()[((bn * c + ic) * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((bn * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut seed = 1;
        let x = rand_tensor(&[2, 3, 5, 4], &mut seed);
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let y = conv2d_forward(&x, &w, &[0.0; 3], 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut seed = 2;
        let x = rand_tensor(&[1, 2, 4, 4], &mut seed);
        let w = Tensor::zeros(&[3, 2, 3, 3]);
        let y = conv2d_forward(&x, &w, &[0.5, -1.0, 2.0], 1, 1).unwrap();
        for (o, row) in y.data().chunks(16).enumerate() {
            assert!(row.iter().all(|&v| v == [0.5, -1.0, 2.0][o]));
        }
    }

    #[test]
    fn matches_naive_reference() {
        let mut seed = 3;
        for &(s, p) in &[(1, 1), (2, 1), (1, 0), (2, 0)] {
            let x = rand_tensor(&[2, 3, 7, 6], &mut seed);
            let w = rand_tensor(&[4, 3, 3, 3], &mut seed);
            let b: Vec<f64> = (0..4).map(|_| lcg(&mut seed)).collect();
            let y = conv2d_forward(&x, &w, &b, s, p).unwrap();
            let r = naive(&x, &w, &b, s, p);
            assert_eq!(y.shape(), r.shape());
            for (a, e) in y.data().iter().zip(r.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f64>::zeros(&[1, 3, 3, 3]);
        assert!(matches!(conv2d_forward(&x, &w, &[0.0], 1, 1), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn pointwise_weight_grad_is_spatial_sum() {
        let mut seed = 4;
        let x = rand_tensor(&[1, 2, 3, 3], &mut seed);
        let w = rand_tensor(&[1, 2, 1, 1], &mut seed);
        let go = Tensor::full(&[1, 1, 3, 3], 1.0);
        let g = conv2d_backward(&x, &w, &go, 1, 0, true, true).unwrap();
        for c in 0..2 {
            let s: f64 = x.data()[c * 9..(c + 1) * 9].iter().sum();
            assert!((g.weight.as_ref().unwrap().data()[c] - s).abs() < 1e-12);
        }
        assert_eq!(g.bias, vec![9.0]);
    }
}
