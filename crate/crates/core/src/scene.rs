//! Synthetic LiDAR-like scenes: non-overlapping boxes sampled on a flat
//! ground plane, surface points thinning out with range, ground clutter.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;
use rand::{Rng, RngExt, SeedableRng};
use rand_distr::{Distribution, Normal};

use crate::detector::{bev_iou, normalize_yaw, Box3D, PointCloud};
use crate::{Error, Result};

pub const VEHICLE: usize = 0;
pub const PEDESTRIAN: usize = 1;
pub const CLASS_NAMES: [&str; 2] = ["vehicle", "pedestrian"];

/// Inclusive-exclusive range `[lo, hi)` for uniform sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Span {
    pub lo: f64,
    pub hi: f64,
}

impl Span {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Span { lo, hi }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.hi <= self.lo {
            self.lo
        } else {
            rng.random_range(self.lo..self.hi)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassShape {
    pub length: Span,
    pub width: Span,
    pub height: Span,
    pub reflectance: Span,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    /// Object count, inclusive bounds.
    pub n_objects: (usize, usize),
    /// Probability an object is a vehicle; otherwise a pedestrian.
    pub vehicle_fraction: f64,
    pub vehicle: ClassShape,
    pub pedestrian: ClassShape,
    /// Surface points per square meter of visible surface (roof plus two
    /// sides) at the reference distance.
    pub density: f64,
    pub reference_distance: f64,
    /// Density scales as `(reference_distance / d)^falloff` beyond the reference distance.
    pub falloff: f64,
    /// Ground / vertical clutter points per scene.
    pub clutter_points: usize,
    /// Fraction of clutter standing above the ground (poles, vegetation).
    pub tall_clutter_fraction: f64,
    /// Objects are placed with `|x|, |y| <= sensor_range`.
    pub sensor_range: f64,
    pub min_distance: f64,
    /// Standard deviation of yaw jitter around the two axis directions (radians).
    pub yaw_jitter: f64,
    /// Clearance kept between object footprints (meters).
    pub clearance: f64,
    pub max_attempts: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            n_objects: (4, 12),
            vehicle_fraction: 0.6,
            vehicle: ClassShape {
                length: Span::new(3.8, 5.0),
                width: Span::new(1.7, 2.1),
                height: Span::new(1.4, 1.8),
                reflectance: Span::new(0.4, 0.9),
            },
            pedestrian: ClassShape {
                length: Span::new(0.6, 1.0),
                width: Span::new(0.6, 1.0),
                height: Span::new(1.5, 1.9),
                reflectance: Span::new(0.2, 0.6),
            },
            density: 6.0,
            reference_distance: 5.0,
            falloff: 1.0,
            clutter_points: 1500,
            tall_clutter_fraction: 0.05,
            sensor_range: 30.0,
            min_distance: 3.0,
            yaw_jitter: 0.05,
            clearance: 0.5,
            max_attempts: 2000,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("scene spec: {m}")));
        if self.n_objects.0 > self.n_objects.1 {
            return bad("n_objects min > max");
        }
        if !(0.0..=1.0).contains(&self.vehicle_fraction) || !(0.0..=1.0).contains(&self.tall_clutter_fraction) {
            return bad("fractions must lie in [0, 1]");
        }
        if !(self.density >= 0.0) || !(self.falloff >= 0.0) || !(self.reference_distance > 0.0) {
            return bad("densities must be >= 0");
        }
        for c in [&self.vehicle, &self.pedestrian] {
            if !(c.length.lo > 0.0 && c.width.lo > 0.0 && c.height.lo > 0.0) {
                return bad("sizes must be positive");
            }
        }
        if !(self.sensor_range > self.min_distance) {
            return bad("sensor range must exceed min distance");
        }
        Ok(())
    }

    /// Expected surface-point count for a visible area at distance `d`.
    pub fn points_for(&self, area: f64, d: f64) -> f64 {
        self.density * area * Float::powf(self.reference_distance / d.max(self.reference_distance), self.falloff)
    }
}

fn padded(b: &Box3D, pad: f64) -> Box3D {
    Box3D { l: b.l + 2.0 * pad, w: b.w + 2.0 * pad, ..*b }
}

/// One scene. Deterministic in `(spec, seed)`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<(PointCloud, Vec<Box3D>)> {
    spec.validate()?;
    let mut rng = rand::rngs::ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(spec.n_objects.0..=spec.n_objects.1);
    let mut boxes: Vec<Box3D> = Vec::with_capacity(n);
    let range = Span::new(-spec.sensor_range, spec.sensor_range);
    let mut attempts = 0;
    let jitter = Normal::new(0.0, spec.yaw_jitter.max(0.0)).map_err(|e| Error::InvalidConfig(format!("{e}")))?;
    while boxes.len() < n {
        attempts += 1;
        if attempts > spec.max_attempts {
            return Err(Error::Placement { objects: n, attempts: spec.max_attempts });
        }
        let cls = if rng.random::<f64>() < spec.vehicle_fraction { VEHICLE } else { PEDESTRIAN };
        let shape = if cls == VEHICLE { &spec.vehicle } else { &spec.pedestrian };
        let (x, y) = (range.sample(&mut rng), range.sample(&mut rng));
        let (l, w, h) = (shape.length.sample(&mut rng), shape.width.sample(&mut rng), shape.height.sample(&mut rng));
        let base = if rng.random::<bool>() { 0.0 } else { core::f64::consts::FRAC_PI_2 };
        let yaw = normalize_yaw(base + jitter.sample(&mut rng));
        let b = Box3D { x, y, z: h / 2.0, h, w, l, yaw, cls, score: 1.0 };
        let (hx, hy) = b.half_extents();
        if Float::sqrt(x * x + y * y) < spec.min_distance || x.abs() + hx > spec.sensor_range || y.abs() + hy > spec.sensor_range {
            continue;
        }
        let p = padded(&b, spec.clearance / 2.0);
        if boxes.iter().any(|o| bev_iou(&padded(o, spec.clearance / 2.0), &p) > 0.0) {
            continue;
        }
        boxes.push(b);
    }

    let mut points = Vec::new();
    for b in &boxes {
        let shape = if b.cls == VEHICLE { &spec.vehicle } else { &spec.pedestrian };
        let expected = spec.points_for(b.l * b.w + b.h * (b.l + b.w), b.distance());
        let count = (Float::round(expected) as usize).max(1);
        let (s, c) = (Float::sin(b.yaw), Float::cos(b.yaw));
        for _ in 0..count {
            // half the returns on the roof, the rest on the side faces
            let (u, v, z) = if rng.random::<bool>() {
                (rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, b.h)
            } else {
                let t: f64 = rng.random();
                let z = rng.random::<f64>() * b.h;
                let per = b.l + b.w;
                let along = t * 2.0 * per;
                let (u, v) = if along < b.l {
                    (along / b.l - 0.5, -0.5)
                } else if along < per {
                    (0.5, (along - b.l) / b.w - 0.5)
                } else if along < per + b.l {
                    (0.5 - (along - per) / b.l, 0.5)
                } else {
                    (-0.5, 0.5 - (along - per - b.l) / b.w)
                };
                (u, v, z)
            };
            let (lu, lv) = (u * b.l, v * b.w);
            points.push([
                (b.x + c * lu - s * lv) as f32,
                (b.y + s * lu + c * lv) as f32,
                z as f32,
                shape.reflectance.sample(&mut rng) as f32,
            ]);
        }
    }
    let ground = Normal::new(0.0, 0.05).expect("valid");
    let extent = Span::new(-spec.sensor_range - 2.0, spec.sensor_range + 2.0);
    for _ in 0..spec.clutter_points {
        let (x, y) = (extent.sample(&mut rng), extent.sample(&mut rng));
        let tall = rng.random::<f64>() < spec.tall_clutter_fraction;
        let z = if tall { rng.random::<f64>() * 2.5 } else { ground.sample(&mut rng) };
        let r = if tall { rng.random_range(0.1..0.5) } else { rng.random_range(0.0..0.2) };
        points.push([x as f32, y as f32, z as f32, r as f32]);
    }
    Ok((PointCloud { points }, boxes))
}
