//! Losses used during quantization: pseudo-labels rendered from the float
//! model, penalty-reduced focal loss, masked L1, the task-guided combination,
//! the local reconstruction term and the weighted total.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::detector::{decode_boxes, encode_box, nms_bev, Box3D, DetectorOutput, GridConfig, REG_CHANNELS};
use crate::nn::conv2d_forward;
use crate::{Error, Real, Result, Tensor};

/// Heatmap predictions are clamped to `[FOCAL_CLAMP, 1 - FOCAL_CLAMP]` before logs.
pub const FOCAL_CLAMP: f64 = 1e-4;
/// Minimum overlap used by the Gaussian radius heuristic.
pub const GAUSSIAN_OVERLAP: f64 = 0.1;
/// Radius floor in head cells.
pub const MIN_RADIUS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha_reg: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha_reg: 0.25, lambda1: 1.0, lambda2: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("alpha_reg", self.alpha_reg), ("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{n} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_same<T: Real>(ctx: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { context: ctx, expected: a.shape().to_vec(), got: b.shape().to_vec() });
    }
    Ok(())
}

/// Focal loss value and optionally its gradient w.r.t. `pred`.
///
/// Cells with `target >= 1` are positives. The clamp passes zero gradient.
pub fn focal_value_grad<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, want_grad: bool) -> Result<(f64, Option<Tensor<T>>)> {
    check_same("focal loss", pred, target)?;
    let lo = FOCAL_CLAMP;
    let hi = 1.0 - FOCAL_CLAMP;
    let n_pos = target.data().iter().filter(|t| t.as_f64() >= 1.0).count();
    let norm = 1.0 / n_pos.max(1) as f64;
    let mut sum = 0.0;
    let mut grad = if want_grad { Vec::with_capacity(pred.numel()) } else { Vec::new() };
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let raw = p.as_f64();
        let p = raw.clamp(lo, hi);
        let inside = raw > lo && raw < hi;
        let t = t.as_f64();
        let (v, g) = if t >= 1.0 {
            let q = 1.0 - p;
            (-q * q * Float::ln(p), 2.0 * q * Float::ln(p) - q * q / p)
        } else {
            let wgt = Float::powi(1.0 - t, 4);
            let l = Float::ln(1.0 - p);
            (-wgt * p * p * l, -wgt * (2.0 * p * l - p * p / (1.0 - p)))
        };
        sum += v;
        if want_grad {
            grad.push(T::from_f64(if inside { g * norm } else { 0.0 }));
        }
    }
    let grad = if want_grad { Some(Tensor::from_vec(pred.shape(), grad)?) } else { None };
    Ok((sum * norm, grad))
}

/// Masked L1 value and optionally its gradient. `pred` is `(N, R, H, W)`
/// (or `(R, H, W)`), `mask` covers `N * H * W` cells.
pub fn l1_value_grad<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    mask: &[bool],
    want_grad: bool,
) -> Result<(f64, Option<Tensor<T>>)> {
    check_same("l1 loss", pred, target)?;
    let s = pred.shape();
    let (n, r, hw) = match s.len() {
        4 => (s[0], s[1], s[2] * s[3]),
        3 => (1, s[0], s[1] * s[2]),
        _ => return Err(Error::ShapeMismatch { context: "l1 loss rank", expected: vec![0, 0, 0, 0], got: s.to_vec() }),
    };
    if mask.len() != n * hw {
        return Err(Error::LengthMismatch { left: n * hw, right: mask.len() });
    }
    let count = mask.iter().filter(|&&m| m).count();
    let mut grad = if want_grad { vec![T::zero(); pred.numel()] } else { Vec::new() };
    if count == 0 {
        let grad = if want_grad { Some(Tensor::from_vec(s, grad)?) } else { None };
        return Ok((0.0, grad));
    }
    let denom = (count * r) as f64;
    let (pd, td) = (pred.data(), target.data());
    let mut sum = 0.0;
    for b in 0..n {
        for cell in 0..hw {
            if !mask[b * hw + cell] {
                continue;
            }
            for c in 0..r {
                let k = (b * r + c) * hw + cell;
                let d = pd[k].as_f64() - td[k].as_f64();
                sum += Float::abs(d);
                if want_grad {
                    let sg = if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    grad[k] = T::from_f64(sg / denom);
                }
            }
        }
    }
    let grad = if want_grad { Some(Tensor::from_vec(s, grad)?) } else { None };
    Ok((sum / denom, grad))
}

pub fn focal_loss<T: Real>(pred_heatmap: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    Ok(focal_value_grad(pred_heatmap, target, false)?.0)
}

pub fn l1_reg_loss<T: Real>(pred_reg: &Tensor<T>, target_reg: &Tensor<T>, mask: &[bool]) -> Result<f64> {
    Ok(l1_value_grad(pred_reg, target_reg, mask, false)?.0)
}

/// Gaussian radius (in cells) for a box footprint of `height x width` cells,
/// the smallest of the three corner-shift cases that keeps IoU >= `min_overlap`.
pub fn gaussian_radius(height: f64, width: f64, min_overlap: f64) -> f64 {
    let o = min_overlap;
    let root = |a: f64, b: f64, c: f64| (b + Float::sqrt((b * b - 4.0 * a * c).max(0.0))) / 2.0;
    let r1 = root(1.0, height + width, width * height * (1.0 - o) / (1.0 + o));
    let r2 = root(4.0, 2.0 * (height + width), (1.0 - o) * width * height);
    let r3 = root(4.0 * o, -2.0 * o * (height + width), (o - 1.0) * width * height);
    r1.min(r2).min(r3)
}

/// Splat a Gaussian peak of height 1 at `(col, row)` into an `h x w` plane with
/// element-wise max.
pub fn draw_gaussian(plane: &mut [f32], w: usize, h: usize, col: usize, row: usize, radius: usize) {
    let sigma = (2 * radius + 1) as f64 / 6.0;
    let r = radius as i64;
    for dy in -r..=r {
        for dx in -r..=r {
            let (y, x) = (row as i64 + dy, col as i64 + dx);
            if y < 0 || x < 0 || y as usize >= h || x as usize >= w {
                continue;
            }
            let v = Float::exp(-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)) as f32;
            let slot = &mut plane[y as usize * w + x as usize];
            if v > *slot {
                *slot = v;
            }
        }
    }
}

/// Detection targets for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub boxes: Vec<Box3D>,
    /// `(classes, H, W)`.
    pub heatmap_target: Tensor<f32>,
    /// `(REG_CHANNELS, H, W)`.
    pub reg_target: Tensor<f32>,
    /// `H * W`, true at positive centers.
    pub reg_mask: Vec<bool>,
}

/// Targets for a batch, shapes `(N, classes, H, W)` and `(N, R, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTargets<T = f32> {
    pub heatmap: Tensor<T>,
    pub reg: Tensor<T>,
    pub mask: Vec<bool>,
}

impl PseudoLabels {
    pub fn positives(&self) -> usize {
        self.reg_mask.iter().filter(|&&m| m).count()
    }

    pub fn stack<T: Real>(items: &[&PseudoLabels]) -> Result<BatchTargets<T>> {
        let batched = |t: &Tensor<f32>| -> Result<Tensor<T>> {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            t.cast().reshape(&shape)
        };
        let hm: Vec<Tensor<T>> = items.iter().map(|p| batched(&p.heatmap_target)).collect::<Result<_>>()?;
        let rg: Vec<Tensor<T>> = items.iter().map(|p| batched(&p.reg_target)).collect::<Result<_>>()?;
        Ok(BatchTargets {
            heatmap: Tensor::stack_batch(&hm.iter().collect::<Vec<_>>())?,
            reg: Tensor::stack_batch(&rg.iter().collect::<Vec<_>>())?,
            mask: items.iter().flat_map(|p| p.reg_mask.iter().copied()).collect(),
        })
    }
}

/// Render heatmap / regression targets for `boxes` on the head grid.
///
/// Boxes whose center falls outside the grid are dropped. When two boxes share
/// a center cell the first one owns the regression target.
pub fn render_targets(boxes: &[Box3D], grid: &GridConfig, classes: usize) -> PseudoLabels {
    let (w, h) = grid.head_size();
    let mut heat = vec![0.0f32; classes * h * w];
    let mut reg = vec![0.0f32; REG_CHANNELS * h * w];
    let mut mask = vec![false; h * w];
    let mut kept = Vec::new();
    let cell = grid.head_cell();
    for b in boxes {
        if b.cls >= classes {
            continue;
        }
        let Some((col, row)) = grid.head_index(b.x, b.y) else { continue };
        let (hx, hy) = b.half_extents();
        let radius = (Float::floor(gaussian_radius(2.0 * hy / cell, 2.0 * hx / cell, GAUSSIAN_OVERLAP)) as usize).max(MIN_RADIUS);
        draw_gaussian(&mut heat[b.cls * h * w..(b.cls + 1) * h * w], w, h, col, row, radius);
        kept.push(*b);
        let k = row * w + col;
        if mask[k] {
            continue;
        }
        mask[k] = true;
        for (c, v) in encode_box(b, grid, col, row).iter().enumerate() {
            reg[c * h * w + k] = *v as f32;
        }
    }
    PseudoLabels {
        boxes: kept,
        heatmap_target: Tensor::from_vec(&[classes, h, w], heat).expect("sized"),
        reg_target: Tensor::from_vec(&[REG_CHANNELS, h, w], reg).expect("sized"),
        reg_mask: mask,
    }
}

/// Pseudo-labels for one frame from the float model's output (batch of one).
pub fn make_pseudo_labels<T: Real>(
    fp_out: &DetectorOutput<T>,
    gamma: f64,
    k: usize,
    nms_iou: f64,
    grid: &GridConfig,
) -> PseudoLabels {
    let classes = fp_out.heatmap.shape()[1];
    let boxes = nms_bev(&decode_boxes(fp_out, grid, gamma, k), nms_iou);
    render_targets(&boxes, grid, classes)
}

/// Focal + `alpha_reg` * L1 of a (partially quantized) output against targets.
pub fn tgpl_loss<T: Real>(q_out: &DetectorOutput<T>, labels: &BatchTargets<T>, w: &LossWeights) -> Result<f64> {
    let cls = focal_loss(&q_out.heatmap, &labels.heatmap)?;
    let reg = l1_reg_loss(&q_out.regression, &labels.reg, &labels.mask)?;
    Ok(cls + w.alpha_reg * reg)
}

/// `||W * I - W_hat * I||_F^2 / N` for a batch `I` of shape `(N, C, H, W)`.
pub fn local_recon_loss<T: Real>(w: &Tensor<T>, w_hat: &Tensor<T>, input: &Tensor<T>, stride: usize, pad: usize) -> Result<f64> {
    check_same("reconstruction weights", w, w_hat)?;
    let diff = Tensor::from_vec(w.shape(), w.data().iter().zip(w_hat.data()).map(|(&a, &b)| a - b).collect())?;
    let zero = vec![T::zero(); w.shape()[0]];
    let y = conv2d_forward(input, &diff, &zero, stride, pad)?;
    let n = input.shape()[0].max(1);
    Ok(y.data().iter().map(|v| Float::powi(v.as_f64(), 2)).sum::<f64>() / n as f64)
}

pub fn total_loss(local: f64, tgpl: f64, w: &LossWeights) -> f64 {
    w.lambda1 * local + w.lambda2 * tgpl
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn focal_perfect_is_near_zero() {
        let pred = t(&[4], &[1.0 - 1e-4, 1e-9, 1e-9, 1e-9]);
        let tgt = t(&[4], &[1.0, 0.0, 0.0, 0.0]);
        assert!(focal_loss(&pred, &tgt).unwrap() < 1e-7);
    }

    #[test]
    fn focal_half_everywhere_hand_computed() {
        let pred = t(&[4], &[0.5; 4]);
        let tgt = t(&[4], &[1.0, 0.0, 0.0, 0.0]);
        let ln2 = core::f64::consts::LN_2;
        let expected = 0.25 * ln2 + 3.0 * 0.25 * ln2;
        assert!((focal_loss(&pred, &tgt).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn focal_monotone_toward_target() {
        let tgt = t(&[1], &[1.0]);
        let a = focal_loss(&t(&[1], &[0.2]), &tgt).unwrap();
        let b = focal_loss(&t(&[1], &[0.4]), &tgt).unwrap();
        assert!(b < a);
    }

    #[test]
    fn focal_shape_mismatch() {
        assert!(focal_loss(&t(&[2], &[0.5, 0.5]), &t(&[1], &[1.0])).is_err());
    }

    #[test]
    fn l1_examples() {
        let r = REG_CHANNELS;
        let zero = Tensor::<f64>::zeros(&[r, 1, 2]);
        assert_eq!(l1_reg_loss(&zero, &zero, &[true, false]).unwrap(), 0.0);
        let mut off = zero.clone();
        off.data_mut()[0] = 0.5;
        assert!((l1_reg_loss(&off, &zero, &[true, false]).unwrap() - 0.5 / r as f64).abs() < 1e-15);
        assert_eq!(l1_reg_loss(&off, &zero, &[false, false]).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let w = |a, b| LossWeights { alpha_reg: 0.25, lambda1: a, lambda2: b };
        assert_eq!(total_loss(0.2, 0.3, &w(1.0, 0.0)), 0.2);
        assert_eq!(total_loss(0.2, 0.3, &w(0.0, 1.0)), 0.3);
        assert!((total_loss(0.2, 0.3, &w(1.0, 1.0)) - 0.5).abs() < 1e-15);
    }

    fn car(x: f64, y: f64, score: f64) -> Box3D {
        Box3D { x, y, z: 0.8, h: 1.6, w: 1.9, l: 4.5, yaw: 0.0, cls: 0, score }
    }

    #[test]
    fn single_box_peak() {
        let g = GridConfig::default();
        let (cx, cy) = g.head_center(10, 10);
        let pl = render_targets(&[car(cx, cy, 0.9)], &g, 2);
        let (w, h) = g.head_size();
        assert_eq!(pl.heatmap_target.data()[10 * w + 10], 1.0);
        assert_eq!(pl.positives(), 1);
        assert_eq!(pl.heatmap_target.data().iter().filter(|&&v| v == 1.0).count(), 1);
        assert!(pl.heatmap_target.data()[h * w..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shared_center_single_mask_entry() {
        let g = GridConfig::default();
        let (cx, cy) = g.head_center(20, 30);
        let pl = render_targets(&[car(cx, cy, 0.9), car(cx + 0.2, cy - 0.1, 0.8)], &g, 2);
        assert_eq!(pl.positives(), 1);
        let a = render_targets(&[car(cx, cy, 0.9)], &g, 2);
        let b = render_targets(&[car(cx + 0.2, cy - 0.1, 0.8)], &g, 2);
        for ((&m, &x), &y) in pl.heatmap_target.data().iter().zip(a.heatmap_target.data()).zip(b.heatmap_target.data()) {
            assert_eq!(m, x.max(y));
        }
    }

    #[test]
    fn pseudo_label_gamma_filter() {
        let g = GridConfig::default();
        let (w, h) = g.head_size();
        let mut hm = Tensor::<f32>::zeros(&[1, 2, h, w]);
        for (i, s) in [0.05f32, 0.5, 0.9].iter().enumerate() {
            hm.data_mut()[10 * w + 10 + 20 * i] = *s;
        }
        let mut reg = Tensor::<f32>::zeros(&[1, REG_CHANNELS, h, w]);
        for k in 0..h * w {
            reg.data_mut()[7 * h * w + k] = 1.0;
            for c in 3..6 {
                reg.data_mut()[c * h * w + k] = 0.5;
            }
        }
        let pl = make_pseudo_labels(&DetectorOutput { heatmap: hm, regression: reg }, 0.1, 500, 0.2, &g);
        assert_eq!(pl.boxes.len(), 2);
    }

    #[test]
    fn local_recon_identity_and_impulse() {
        let w = t(&[2, 3, 1, 1], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]);
        let input = t(&[1, 3, 1, 1], &[1.0, 1.0, 1.0]);
        assert_eq!(local_recon_loss(&w, &w, &input, 1, 0).unwrap(), 0.0);
        // impulse per input channel -> sum of squared kernel differences
        let mut imp = Tensor::<f64>::zeros(&[1, 3, 1, 3]);
        for c in 0..3 {
            imp.data_mut()[c * 3 + c] = 1.0;
        }
        let wh = t(&[2, 3, 1, 1], &[0.0, -0.2, 0.25, 0.4, 0.55, -0.6]);
        let e: f64 = w.data().iter().zip(wh.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!((local_recon_loss(&w, &wh, &imp, 1, 0).unwrap() - e).abs() < 1e-15);
    }

    #[test]
    fn radius_is_positive_and_grows() {
        let a = gaussian_radius(2.0, 4.0, 0.1);
        let b = gaussian_radius(4.0, 8.0, 0.1);
        assert!(a > 0.0 && b > a);
    }
}
