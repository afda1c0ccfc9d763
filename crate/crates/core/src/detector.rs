//! The quantization target: pillarization of a point cloud into a BEV grid,
//! a small center-heatmap detector, box decoding and BEV NMS.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use num_traits::Float;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::nn::{sigmoid, Activation, LayerRole, LayerSpec, Network};
use crate::{Error, Real, Result, Tensor};

/// Pillar feature channels: mean x, mean y, mean z, mean reflectance,
/// normalized point count, mean |x| + |y|.
pub const NUM_FEATURES: usize = 6;
/// Regression channels: dx, dy, z, ln h, ln w, ln l, sin yaw, cos yaw.
pub const REG_CHANNELS: usize = 8;
/// Point count at which the count channel saturates.
pub const COUNT_NORM: f32 = 32.0;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    /// `(x, y, z, reflectance)` in meters / `[0, 1]`.
    pub points: Vec<[f32; 4]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub h: f64,
    pub w: f64,
    pub l: f64,
    pub yaw: f64,
    pub cls: usize,
    pub score: f64,
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_yaw(a: f64) -> f64 {
    let two_pi = 2.0 * core::f64::consts::PI;
    let mut r = a % two_pi;
    if r <= -core::f64::consts::PI {
        r += two_pi;
    } else if r > core::f64::consts::PI {
        r -= two_pi;
    }
    r
}

impl Box3D {
    /// Half extents of the axis-aligned footprint of the rotated box.
    pub fn half_extents(&self) -> (f64, f64) {
        let (s, c) = (Float::abs(Float::sin(self.yaw)), Float::abs(Float::cos(self.yaw)));
        (0.5 * (c * self.l + s * self.w), 0.5 * (s * self.l + c * self.w))
    }

    pub fn distance(&self) -> f64 {
        Float::sqrt(self.x * self.x + self.y * self.y)
    }
}

/// Axis-aligned BEV IoU of two boxes' footprints.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let (ax, ay) = a.half_extents();
    let (bx, by) = b.half_extents();
    let ix = ((a.x + ax).min(b.x + bx) - (a.x - ax).max(b.x - bx)).max(0.0);
    let iy = ((a.y + ay).min(b.y + by) - (a.y - ay).max(b.y - by)).max(0.0);
    let inter = ix * iy;
    let union = 4.0 * ax * ay + 4.0 * bx * by - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig {
    pub voxel_size: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Downsampling from the pillar grid to the detector heads.
    pub head_stride: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { voxel_size: 0.5, x_min: -32.0, x_max: 32.0, y_min: -32.0, y_max: 32.0, head_stride: 2 }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0) || !(self.x_max > self.x_min) || !(self.y_max > self.y_min) || self.head_stride == 0 {
            return Err(Error::InvalidConfig(format!("invalid grid {self:?}")));
        }
        Ok(())
    }

    /// `(width, height)` in pillars.
    pub fn size(&self) -> (usize, usize) {
        (
            Float::round((self.x_max - self.x_min) / self.voxel_size) as usize,
            Float::round((self.y_max - self.y_min) / self.voxel_size) as usize,
        )
    }

    /// `(width, height)` of the head output.
    pub fn head_size(&self) -> (usize, usize) {
        let (w, h) = self.size();
        (w.div_ceil(self.head_stride), h.div_ceil(self.head_stride))
    }

    pub fn head_cell(&self) -> f64 {
        self.voxel_size * self.head_stride as f64
    }

    /// World coordinates of a head cell center.
    pub fn head_center(&self, col: usize, row: usize) -> (f64, f64) {
        let c = self.head_cell();
        (self.x_min + (col as f64 + 0.5) * c, self.y_min + (row as f64 + 0.5) * c)
    }

    /// Head cell `(col, row)` containing a world point, if inside the grid.
    pub fn head_index(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = self.head_cell();
        let (w, h) = self.head_size();
        let col = Float::floor((x - self.x_min) / c);
        let row = Float::floor((y - self.y_min) / c);
        if col < 0.0 || row < 0.0 || col as usize >= w || row as usize >= h {
            return None;
        }
        Some((col as usize, row as usize))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PillarGrid {
    /// `(NUM_FEATURES, H, W)`.
    pub features: Tensor<f32>,
    /// `H * W`, row-major.
    pub occupancy: Vec<bool>,
    pub config: GridConfig,
}

impl PillarGrid {
    pub fn occupancy_fraction(&self) -> f64 {
        self.occupancy.iter().filter(|&&o| o).count() as f64 / self.occupancy.len().max(1) as f64
    }

    /// Features as a batch of one, `(1, C, H, W)`.
    pub fn input(&self) -> Tensor<f32> {
        let s = self.features.shape();
        self.features.clone().reshape(&[1, s[0], s[1], s[2]]).expect("same size")
    }
}

/// Scatter points into pillars and compute the fixed 6-channel encoding.
pub fn pillarize(pc: &PointCloud, cfg: &GridConfig) -> PillarGrid {
    let (w, h) = cfg.size();
    let mut sums = vec![[0.0f64; NUM_FEATURES]; w * h];
    let mut counts = vec![0u32; w * h];
    for p in &pc.points {
        let (x, y) = (p[0] as f64, p[1] as f64);
        if !(x >= cfg.x_min && x < cfg.x_max && y >= cfg.y_min && y < cfg.y_max) || !p.iter().all(|v| v.is_finite()) {
            continue;
        }
        let col = (Float::floor((x - cfg.x_min) / cfg.voxel_size) as usize).min(w - 1);
        let row = (Float::floor((y - cfg.y_min) / cfg.voxel_size) as usize).min(h - 1);
        let k = row * w + col;
        let s = &mut sums[k];
        s[0] += x;
        s[1] += y;
        s[2] += p[2] as f64;
        s[3] += p[3] as f64;
        s[5] += Float::abs(x) + Float::abs(y);
        counts[k] += 1;
    }
    let mut features = Tensor::zeros(&[NUM_FEATURES, h, w]);
    let plane = w * h;
    let f = features.data_mut();
    for k in 0..plane {
        let n = counts[k];
        if n == 0 {
            continue;
        }
        let inv = 1.0 / n as f64;
        for c in [0, 1, 2, 3, 5] {
            f[c * plane + k] = (sums[k][c] * inv) as f32;
        }
        f[4 * plane + k] = (n as f32).min(COUNT_NORM) / COUNT_NORM;
    }
    PillarGrid { features, occupancy: counts.iter().map(|&n| n > 0).collect(), config: *cfg }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    pub grid: GridConfig,
    pub channels: usize,
    /// Number of backbone convs (the first one has stride `grid.head_stride`).
    pub backbone_layers: usize,
    pub num_classes: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig { grid: GridConfig::default(), channels: 16, backbone_layers: 5, num_classes: 2 }
    }
}

/// Freshly initialized detector: He-normal 3x3 backbone, 1x1 heads.
///
/// The first backbone conv and both heads are marked full-precision exempt.
pub fn build_detector(cfg: &DetectorConfig, seed: u64) -> Result<Network<f32>> {
    if cfg.backbone_layers < 2 || cfg.channels == 0 || cfg.num_classes == 0 {
        return Err(Error::InvalidConfig(format!("invalid detector config {cfg:?}")));
    }
    let mut rng = rand::rngs::ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |shape: &[usize], std: f64| -> Tensor<f32> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (std * z) as f32
        }).collect();
        Tensor::from_vec(shape, data).expect("sized")
    };
    let c = cfg.channels;
    let mut layers = Vec::new();
    for i in 0..cfg.backbone_layers {
        let in_ch = if i == 0 { NUM_FEATURES } else { c };
        let std = Float::sqrt(2.0 / (in_ch * 9) as f64);
        let stride = if i == 0 { cfg.grid.head_stride } else { 1 };
        let mut l = LayerSpec::new(
            &format!("conv{}", i + 1),
            LayerRole::Backbone,
            normal(&[c, in_ch, 3, 3], std),
            Tensor::zeros(&[c]),
            stride,
            1,
            Activation::Relu,
        )?;
        l.fp_exempt = i == 0;
        layers.push(l);
    }
    let prior = -Float::ln((1.0 - 0.1f64) / 0.1) as f32;
    let mut hm = LayerSpec::new(
        "head_heatmap",
        LayerRole::HeatmapHead,
        normal(&[cfg.num_classes, c, 1, 1], 0.01),
        Tensor::full(&[cfg.num_classes], prior),
        1,
        0,
        Activation::None,
    )?;
    hm.fp_exempt = true;
    let mut reg = LayerSpec::new(
        "head_regression",
        LayerRole::RegressionHead,
        normal(&[REG_CHANNELS, c, 1, 1], 0.01),
        Tensor::zeros(&[REG_CHANNELS]),
        1,
        0,
        Activation::None,
    )?;
    reg.fp_exempt = true;
    layers.push(hm);
    layers.push(reg);
    Network::new(layers, NUM_FEATURES)
}

/// Heatmap probabilities and regression maps, both batched `(N, C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput<T = f32> {
    pub heatmap: Tensor<T>,
    pub regression: Tensor<T>,
}

impl<T: Real> DetectorOutput<T> {
    pub fn batch_len(&self) -> usize {
        self.heatmap.shape()[0]
    }

    pub fn item(&self, i: usize) -> Self {
        DetectorOutput { heatmap: self.heatmap.batch_item(i), regression: self.regression.batch_item(i) }
    }
}

/// Heads applied to an already computed backbone feature map.
pub fn heads_forward<T: Real>(net: &Network<T>, features: &Tensor<T>) -> Result<DetectorOutput<T>> {
    let hm = net.head(LayerRole::HeatmapHead).ok_or_else(|| Error::UnknownLayer("heatmap head".into()))?;
    let reg = net.head(LayerRole::RegressionHead).ok_or_else(|| Error::UnknownLayer("regression head".into()))?;
    Ok(DetectorOutput { heatmap: sigmoid(&hm.forward(features)?), regression: reg.forward(features)? })
}

/// Full detector on a batch of pillar feature maps `(N, C, H, W)`.
pub fn predict<T: Real>(net: &Network<T>, input: &Tensor<T>) -> Result<DetectorOutput<T>> {
    let f = net.forward(input, None)?;
    heads_forward(net, &f)
}

pub fn detector_forward(net: &Network<f32>, grid: &PillarGrid) -> Result<DetectorOutput<f32>> {
    predict(net, &grid.input())
}

/// Regression target of `b` relative to head cell `(col, row)`.
pub fn encode_box(b: &Box3D, cfg: &GridConfig, col: usize, row: usize) -> [f64; REG_CHANNELS] {
    let (cx, cy) = cfg.head_center(col, row);
    let cell = cfg.head_cell();
    [
        (b.x - cx) / cell,
        (b.y - cy) / cell,
        b.z,
        Float::ln(b.h),
        Float::ln(b.w),
        Float::ln(b.l),
        Float::sin(b.yaw),
        Float::cos(b.yaw),
    ]
}

pub fn decode_box(reg: &[f64; REG_CHANNELS], cfg: &GridConfig, col: usize, row: usize, cls: usize, score: f64) -> Box3D {
    let (cx, cy) = cfg.head_center(col, row);
    let cell = cfg.head_cell();
    let clamp_exp = |v: f64| Float::exp(v.clamp(-6.0, 6.0));
    Box3D {
        x: cx + reg[0] * cell,
        y: cy + reg[1] * cell,
        z: reg[2],
        h: clamp_exp(reg[3]),
        w: clamp_exp(reg[4]),
        l: clamp_exp(reg[5]),
        yaw: normalize_yaw(Float::atan2(reg[6], reg[7])),
        cls,
        score,
    }
}

fn score_order(a: &Box3D, b: &Box3D) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.x.partial_cmp(&b.x).unwrap_or(Ordering::Equal))
        .then(a.y.partial_cmp(&b.y).unwrap_or(Ordering::Equal))
}

/// Local-maximum peaks of one sample's heatmap above `score_floor`, best
/// `max_boxes` by score.
pub fn decode_boxes<T: Real>(out: &DetectorOutput<T>, cfg: &GridConfig, score_floor: f64, max_boxes: usize) -> Vec<Box3D> {
    let (_, classes, h, w) = out.heatmap.dims4().expect("batched heatmap");
    let hm = &out.heatmap.data()[..classes * h * w];
    let reg = &out.regression.data()[..REG_CHANNELS * h * w];
    let mut boxes = Vec::new();
    for c in 0..classes {
        let plane = &hm[c * h * w..(c + 1) * h * w];
        for row in 0..h {
            for col in 0..w {
                let s = plane[row * w + col];
                if s.as_f64() < score_floor {
                    continue;
                }
                let mut peak = true;
                'nb: for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (r, q) = (row as i64 + dy, col as i64 + dx);
                        if (dy != 0 || dx != 0) && r >= 0 && q >= 0 && (r as usize) < h && (q as usize) < w && plane[r as usize * w + q as usize] > s {
                            peak = false;
                            break 'nb;
                        }
                    }
                }
                if !peak {
                    continue;
                }
                let mut r = [0.0; REG_CHANNELS];
                for (k, v) in r.iter_mut().enumerate() {
                    *v = reg[(k * h + row) * w + col].as_f64();
                }
                boxes.push(decode_box(&r, cfg, col, row, c, s.as_f64()));
            }
        }
    }
    boxes.sort_by(score_order);
    boxes.truncate(max_boxes);
    boxes
}

/// Greedy class-agnostic NMS on axis-aligned BEV IoU.
pub fn nms_bev(boxes: &[Box3D], iou_threshold: f64) -> Vec<Box3D> {
    let mut sorted = boxes.to_vec();
    sorted.sort_by(score_order);
    let mut keep: Vec<Box3D> = Vec::new();
    for b in sorted {
        if keep.iter().all(|k| bev_iou(k, &b) < iou_threshold) {
            keep.push(b);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: f64, y: f64, score: f64) -> Box3D {
        Box3D { x, y, z: 0.8, h: 1.6, w: 2.0, l: 4.0, yaw: 0.0, cls: 0, score }
    }

    #[test]
    fn single_point_lands_in_first_pillar() {
        let cfg = GridConfig { voxel_size: 0.1, x_min: 0.0, x_max: 1.0, y_min: 0.0, y_max: 1.0, head_stride: 2 };
        let g = pillarize(&PointCloud { points: vec![[0.05, 0.05, 0.0, 0.5]] }, &cfg);
        assert!(g.occupancy[0]);
        assert_eq!(g.occupancy.iter().filter(|&&o| o).count(), 1);
        let plane = 100;
        let f = g.features.data();
        assert!((f[0] - 0.05).abs() < 1e-7 && (f[plane] - 0.05).abs() < 1e-7 && f[2 * plane] == 0.0);
        assert_eq!(f[3 * plane], 0.5);
    }

    #[test]
    fn empty_cloud_gives_empty_grid() {
        let g = pillarize(&PointCloud::default(), &GridConfig::default());
        assert!(g.occupancy.iter().all(|&o| !o));
        assert!(g.features.data().iter().all(|&v| v == 0.0));
        assert_eq!(g.features.shape(), &[NUM_FEATURES, 128, 128]);
    }

    #[test]
    fn out_of_range_points_dropped() {
        let g = pillarize(&PointCloud { points: vec![[40.0, 0.0, 0.0, 0.1], [0.0, -32.5, 0.0, 0.1]] }, &GridConfig::default());
        assert_eq!(g.occupancy_fraction(), 0.0);
    }

    #[test]
    fn iou_basics() {
        assert!((bev_iou(&bx(0.0, 0.0, 1.0), &bx(0.0, 0.0, 1.0)) - 1.0).abs() < 1e-12);
        assert_eq!(bev_iou(&bx(0.0, 0.0, 1.0), &bx(10.0, 0.0, 1.0)), 0.0);
        // half overlap along x: inter 2x2, union 8+8-4
        assert!((bev_iou(&bx(0.0, 0.0, 1.0), &bx(2.0, 0.0, 1.0)) - 4.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn nms_examples() {
        let kept = nms_bev(&[bx(0.0, 0.0, 0.8), bx(0.0, 0.0, 0.9)], 0.2);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        assert_eq!(nms_bev(&[bx(0.0, 0.0, 0.8), bx(20.0, 0.0, 0.9)], 0.2).len(), 2);
    }

    #[test]
    fn encode_decode_roundtrip() {
        let cfg = GridConfig::default();
        let b = Box3D { x: 3.3, y: -7.9, z: 0.9, h: 1.7, w: 1.9, l: 4.4, yaw: 0.3, cls: 1, score: 0.7 };
        let (col, row) = cfg.head_index(b.x, b.y).unwrap();
        let r = encode_box(&b, &cfg, col, row);
        let d = decode_box(&r, &cfg, col, row, 1, 0.7);
        for (a, e) in [(d.x, b.x), (d.y, b.y), (d.z, b.z), (d.h, b.h), (d.w, b.w), (d.l, b.l), (d.yaw, b.yaw)] {
            assert!((a - e).abs() < 1e-12);
        }
    }

    fn output_with_peaks(peaks: &[(usize, usize, f32)], h: usize, w: usize) -> DetectorOutput<f32> {
        let mut hm = Tensor::zeros(&[1, 1, h, w]);
        for &(r, c, s) in peaks {
            hm.data_mut()[r * w + c] = s;
        }
        let mut reg = Tensor::zeros(&[1, REG_CHANNELS, h, w]);
        // unit sizes, yaw 0
        for k in 0..h * w {
            reg.data_mut()[7 * h * w + k] = 1.0;
        }
        DetectorOutput { heatmap: hm, regression: reg }
    }

    #[test]
    fn decode_examples() {
        let cfg = GridConfig::default();
        let out = output_with_peaks(&[], 64, 64);
        assert!(decode_boxes(&out, &cfg, 0.1, 500).is_empty());
        let out = output_with_peaks(&[(10, 12, 0.9)], 64, 64);
        let b = decode_boxes(&out, &cfg, 0.1, 500);
        assert_eq!(b.len(), 1);
        let (cx, cy) = cfg.head_center(12, 10);
        assert_eq!((b[0].x, b[0].y), (cx, cy));
        let peaks: Vec<(usize, usize, f32)> =
            (0..600).map(|i| (2 * (i / 30), 2 * (i % 30), 0.2 + 0.7 * (i as f32) / 600.0)).collect();
        let out = output_with_peaks(&peaks, 64, 64);
        let b = decode_boxes(&out, &cfg, 0.1, 500);
        assert_eq!(b.len(), 500);
        assert!(b.windows(2).all(|p| p[0].score >= p[1].score));
        assert!((b[499].score - (0.2 + 0.7 * 100.0 / 600.0) as f32 as f64).abs() < 1e-6);
    }
}
