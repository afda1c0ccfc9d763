//! Uniform signed symmetric fake quantization.
//!
//! All integer codes are computed in `f64` regardless of the tensor element
//! type, so `f32` and `f64` tensors holding the same values quantize to the
//! same integers. Rounding is half-away-from-zero.

use alloc::vec::Vec;

use num_traits::Float;

use crate::{Error, Real, Result, Tensor};

/// Largest supported bit-width; codes must stay exactly representable.
pub const MAX_BITS: u32 = 24;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
    pub bits: u8,
    pub q_min: i32,
    pub q_max: i32,
}

impl QuantParams {
    /// Signed symmetric parameters: `q in [-2^(b-1), 2^(b-1) - 1]`, zero-point 0.
    pub fn symmetric(scale: f64, bits: u32) -> Result<Self> {
        if !(2..=MAX_BITS).contains(&bits) {
            return Err(Error::InvalidBits(bits));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidScale(scale));
        }
        let half = 1i32 << (bits - 1);
        Ok(QuantParams { scale, zero_point: 0, bits: bits as u8, q_min: -half, q_max: half - 1 })
    }

    pub fn with_scale(&self, scale: f64) -> Result<Self> {
        QuantParams::symmetric(scale, self.bits as u32)
    }

    pub fn validate(&self) -> Result<()> {
        let expected = QuantParams::symmetric(self.scale, self.bits as u32)?;
        if expected != *self {
            return Err(Error::InvalidConfig(alloc::format!(
                "quantization parameters not signed-symmetric: {self:?}"
            )));
        }
        Ok(())
    }

    /// Integer code of `v` with an additive offset `theta` (weight units).
    #[inline]
    pub fn code(&self, v: f64, theta: f64) -> i32 {
        let r = Float::round((v + theta) / self.scale) + self.zero_point as f64;
        r.max(self.q_min as f64).min(self.q_max as f64) as i32
    }

    #[inline]
    pub fn value(&self, code: i32) -> f64 {
        (code - self.zero_point) as f64 * self.scale
    }

    /// Smallest and largest representable real values.
    pub fn bounds(&self) -> (f64, f64) {
        (self.value(self.q_min), self.value(self.q_max))
    }
}

/// Per-weight rounding offsets `theta`, constrained to `[0, scale]` at read time.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundingOffsets {
    theta: Tensor<f32>,
}

impl RoundingOffsets {
    pub fn new(theta: Tensor<f32>) -> Result<Self> {
        theta.check_finite()?;
        Ok(RoundingOffsets { theta })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        RoundingOffsets { theta: Tensor::zeros(shape) }
    }

    /// Offsets from rounding fractions `h = theta / scale`.
    pub fn from_fractions(fractions: &Tensor<f32>, scale: f64) -> Self {
        let theta = fractions.map(|h| (h.as_f64().clamp(0.0, 1.0) * scale) as f32);
        RoundingOffsets { theta }
    }

    pub fn theta(&self) -> &Tensor<f32> {
        &self.theta
    }

    pub fn shape(&self) -> &[usize] {
        self.theta.shape()
    }

    /// `theta[i]` clamped into `[0, scale]`.
    #[inline]
    pub fn offset(&self, i: usize, scale: f64) -> f64 {
        (self.theta.data()[i] as f64).clamp(0.0, scale)
    }

    /// `theta / scale` per element, in `[0, 1]`.
    pub fn fractions(&self, scale: f64) -> Tensor<f32> {
        self.theta.map(|t| ((t as f64).clamp(0.0, scale) / scale) as f32)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i32>,
}

fn check_offsets<T: Real>(x: &Tensor<T>, theta: Option<&RoundingOffsets>) -> Result<()> {
    match theta {
        Some(t) if t.shape() != x.shape() => Err(Error::ShapeMismatch {
            context: "rounding offsets",
            expected: x.shape().to_vec(),
            got: t.shape().to_vec(),
        }),
        _ => Ok(()),
    }
}

/// `clamp(round((x + theta) / s) + z, q_min, q_max)`; `theta` absent means zero.
pub fn quantize_with_offset<T: Real>(
    x: &Tensor<T>,
    p: &QuantParams,
    theta: Option<&RoundingOffsets>,
) -> Result<IntTensor> {
    p.validate()?;
    check_offsets(x, theta)?;
    let mut data = Vec::with_capacity(x.numel());
    for (i, &v) in x.data().iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        let off = theta.map_or(0.0, |t| t.offset(i, p.scale));
        data.push(p.code(v.as_f64(), off));
    }
    Ok(IntTensor { shape: x.shape().to_vec(), data })
}

pub fn quantize<T: Real>(x: &Tensor<T>, p: &QuantParams) -> Result<IntTensor> {
    quantize_with_offset(x, p, None)
}

pub fn dequantize<T: Real>(q: &IntTensor, p: &QuantParams) -> Result<Tensor<T>> {
    p.validate()?;
    let mut data = Vec::with_capacity(q.data.len());
    for (index, &value) in q.data.iter().enumerate() {
        if value < p.q_min || value > p.q_max {
            return Err(Error::OutOfRange { index, value, q_min: p.q_min, q_max: p.q_max });
        }
        data.push(T::from_f64(p.value(value)));
    }
    Tensor::from_vec(&q.shape, data)
}

/// Scale covering `[x_min, x_max]` with `2^bits - 1` steps.
pub fn scale_from_range(x_min: f64, x_max: f64, bits: u32) -> Result<QuantParams> {
    if !(x_max > x_min) || !x_min.is_finite() || !x_max.is_finite() {
        return Err(Error::EmptyRange { min: x_min, max: x_max });
    }
    if !(2..=MAX_BITS).contains(&bits) {
        return Err(Error::InvalidBits(bits));
    }
    let steps = ((1u64 << bits) - 1) as f64;
    QuantParams::symmetric((x_max - x_min) / steps, bits)
}

/// Quantize-then-dequantize, optionally with adaptive rounding offsets.
pub fn fake_quant<T: Real>(
    x: &Tensor<T>,
    p: &QuantParams,
    theta: Option<&RoundingOffsets>,
) -> Result<Tensor<T>> {
    let q = quantize_with_offset(x, p, theta)?;
    dequantize(&q, p)
}

/// `max_i |x_i - fake_quant(x)_i|`.
pub fn round_trip_error_bound<T: Real>(x: &Tensor<T>, p: &QuantParams) -> Result<f64> {
    let fq = fake_quant(x, p, None)?;
    Ok(x.data()
        .iter()
        .zip(fq.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
        .fold(0.0, f64::max))
}

/// Straight-through partials of one fake-quantized element.
///
/// Inside the clamp range the output passes `x` and `theta` through with unit
/// slope; the scale partial holds the integer fixed (`d(n*s)/ds = n`), which
/// is also the slope at the clamp bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteGrad {
    pub d_x: f64,
    pub d_theta: f64,
    pub d_scale: f64,
}

#[inline]
pub fn ste_grad(p: &QuantParams, v: f64, theta: f64) -> SteGrad {
    let raw = Float::round((v + theta) / p.scale) + p.zero_point as f64;
    let code = p.code(v, theta);
    let inside = raw >= p.q_min as f64 && raw <= p.q_max as f64;
    let pass = if inside { 1.0 } else { 0.0 };
    SteGrad { d_x: pass, d_theta: pass, d_scale: (code - p.zero_point) as f64 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn quantize_rounds_and_clamps() {
        let p = QuantParams::symmetric(1.0, 8).unwrap();
        assert_eq!(quantize(&t(&[3.6]), &p).unwrap().data, vec![4]);
        assert_eq!(quantize(&t(&[300.0]), &p).unwrap().data, vec![127]);
        assert_eq!(quantize(&t(&[-200.0]), &p).unwrap().data, vec![-128]);
        // ties go away from zero
        assert_eq!(quantize(&t(&[2.5, -2.5]), &p).unwrap().data, vec![3, -3]);
    }

    #[test]
    fn quantize_reports_non_finite_index() {
        let p = QuantParams::symmetric(1.0, 8).unwrap();
        assert_eq!(quantize(&t(&[1.0, f64::NAN]), &p), Err(Error::NonFinite { index: 1 }));
    }

    #[test]
    fn invalid_scale_rejected() {
        assert!(matches!(QuantParams::symmetric(0.0, 8), Err(Error::InvalidScale(_))));
        assert!(matches!(QuantParams::symmetric(-1.0, 8), Err(Error::InvalidScale(_))));
        assert!(matches!(QuantParams::symmetric(1.0, 1), Err(Error::InvalidBits(1))));
    }

    #[test]
    fn dequantize_examples() {
        let q = |v: i32| IntTensor { shape: vec![1], data: vec![v] };
        let p1 = QuantParams::symmetric(1.0, 8).unwrap();
        assert_eq!(dequantize::<f64>(&q(4), &p1).unwrap().data(), &[4.0]);
        let p2 = QuantParams::symmetric(0.02, 8).unwrap();
        assert_eq!(dequantize::<f64>(&q(0), &p2).unwrap().data(), &[0.0]);
        let p3 = QuantParams::symmetric(0.5, 8).unwrap();
        assert_eq!(dequantize::<f64>(&q(-128), &p3).unwrap().data(), &[-64.0]);
        assert!(matches!(dequantize::<f64>(&q(128), &p3), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn scale_from_range_examples() {
        let p = scale_from_range(-1.0, 1.0, 8).unwrap();
        assert!((p.scale - 2.0 / 255.0).abs() < 1e-15);
        assert_eq!(p.zero_point, 0);
        assert_eq!((p.q_min, p.q_max), (-128, 127));
        assert_eq!(scale_from_range(-127.5, 127.5, 8).unwrap().scale, 1.0);
        let p4 = scale_from_range(-8.0, 8.0, 4).unwrap();
        assert!((p4.scale - 16.0 / 15.0).abs() < 1e-15);
        assert_eq!((p4.q_min, p4.q_max), (-8, 7));
        assert!(matches!(scale_from_range(1.0, 1.0, 8), Err(Error::EmptyRange { .. })));
    }

    #[test]
    fn fake_quant_examples() {
        let p = QuantParams::symmetric(1.0, 8).unwrap();
        assert_eq!(fake_quant(&t(&[3.6]), &p, None).unwrap().data(), &[4.0]);
        let up = RoundingOffsets::new(Tensor::from_vec(&[1], vec![0.6]).unwrap()).unwrap();
        assert_eq!(fake_quant(&t(&[3.4]), &p, Some(&up)).unwrap().data(), &[4.0]);
        let zero = RoundingOffsets::zeros(&[1]);
        assert_eq!(fake_quant(&t(&[3.4]), &p, Some(&zero)).unwrap().data(), &[3.0]);
        let bad = RoundingOffsets::zeros(&[2]);
        assert!(matches!(fake_quant(&t(&[3.4]), &p, Some(&bad)), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn offsets_are_clamped_to_one_step() {
        let p = QuantParams::symmetric(1.0, 8).unwrap();
        let big = RoundingOffsets::new(Tensor::from_vec(&[2], vec![5.0, -3.0]).unwrap()).unwrap();
        let out = fake_quant(&t(&[3.4, 3.4]), &p, Some(&big)).unwrap();
        assert_eq!(out.data(), &[4.0, 3.0]);
    }

    #[test]
    fn round_trip_bound_examples() {
        let p = scale_from_range(-1.0, 1.0, 8).unwrap();
        let grid: Vec<f64> = (0..1000).map(|i| -1.0 + 2.0 * i as f64 / 999.0).collect();
        // the top of [-1, 1] sits above q_max * s, so restrict to the representable span
        let (lo, hi) = p.bounds();
        let inside: Vec<f64> = grid.into_iter().filter(|v| *v >= lo && *v <= hi).collect();
        assert!(round_trip_error_bound(&t(&inside), &p).unwrap() <= 1.0 / 255.0 + 1e-12);
        let exact: Vec<f64> = (-5..5).map(|k| k as f64 * p.scale).collect();
        assert_eq!(round_trip_error_bound(&t(&exact), &p).unwrap(), 0.0);
    }

    #[test]
    fn ste_partials() {
        let p = QuantParams::symmetric(0.5, 4).unwrap(); // codes in [-8, 7]
        let g = ste_grad(&p, 1.1, 0.0);
        assert_eq!(g, SteGrad { d_x: 1.0, d_theta: 1.0, d_scale: 2.0 });
        let g = ste_grad(&p, 100.0, 0.0);
        assert_eq!(g, SteGrad { d_x: 0.0, d_theta: 0.0, d_scale: 7.0 });
        let g = ste_grad(&p, -100.0, 0.0);
        assert_eq!(g.d_scale, -8.0);
    }
}
