//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors, so a typo can never silently fall back to a default.

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use pillarq_core::calib::CalibMethod;
use pillarq_core::detector::GridConfig;
use pillarq_core::pipeline::{Granularity, PipelineConfig, TrainConfig};
use pillarq_core::scene::SceneSpec;

use crate::{Error, Result};

/// What `calibrate` / `quantize` run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// The full pipeline (grid search, task-guided scales, adaptive rounding).
    LidarPtq,
    /// Calibration only.
    Calibrate(CalibMethod),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::LidarPtq => "lidar_ptq",
            Method::Calibrate(m) => m.name(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s == "lidar_ptq" {
            return Some(Method::LidarPtq);
        }
        CalibMethod::parse(s).map(Method::Calibrate)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    /// Drives scene generation, FP training, calibration sampling and the pipeline.
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub scene: SceneSpec,
    pub grid: GridConfig,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
    pub method: Method,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            seed: 0,
            n_train: 2000,
            n_val: 200,
            scene: SceneSpec::default(),
            grid: GridConfig::default(),
            train: TrainConfig::default(),
            pipeline: PipelineConfig::default(),
            method: Method::LidarPtq,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for key `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{v}` for key `{key}`"))),
    }
}

impl Settings {
    /// Sets one key. Values are validated as a whole by [`Settings::validate`].
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (t, p, s, g) = (&mut self.train, &mut self.pipeline, &mut self.scene, &mut self.grid);
        match key {
            "seed" => self.seed = parse(key, v)?,
            "n_train" => self.n_train = parse(key, v)?,
            "n_val" => self.n_val = parse(key, v)?,
            "method" => self.method = Method::parse(v).ok_or_else(|| Error::Config(format!("unknown method `{v}`")))?,

            "scene_objects_min" => s.n_objects.0 = parse(key, v)?,
            "scene_objects_max" => s.n_objects.1 = parse(key, v)?,
            "scene_vehicle_fraction" => s.vehicle_fraction = parse(key, v)?,
            "scene_density" => s.density = parse(key, v)?,
            "scene_falloff" => s.falloff = parse(key, v)?,
            "scene_clutter_points" => s.clutter_points = parse(key, v)?,
            "scene_sensor_range" => s.sensor_range = parse(key, v)?,

            "voxel_size" => g.voxel_size = parse(key, v)?,
            "x_min" => g.x_min = parse(key, v)?,
            "x_max" => g.x_max = parse(key, v)?,
            "y_min" => g.y_min = parse(key, v)?,
            "y_max" => g.y_max = parse(key, v)?,
            "head_stride" => g.head_stride = parse(key, v)?,

            "channels" => t.detector.channels = parse(key, v)?,
            "backbone_layers" => t.detector.backbone_layers = parse(key, v)?,
            "train_epochs" => t.epochs = parse(key, v)?,
            "train_min_epochs" => t.min_epochs = parse(key, v)?,
            "train_lr" => t.lr = parse(key, v)?,
            "train_lr_decay" => t.lr_decay = parse(key, v)?,
            "train_batch" => t.batch = parse(key, v)?,
            "ap_floor" => t.ap_floor = parse(key, v)?,
            "eval_iou" => t.eval_iou = parse(key, v)?,
            "score_floor" => t.decode.score_floor = parse(key, v)?,
            "max_boxes" => t.decode.max_boxes = parse(key, v)?,
            "decode_nms_iou" => t.decode.nms_iou = parse(key, v)?,

            "bits_w" => p.bits_w = parse(key, v)?,
            "bits_a" => p.bits_a = parse(key, v)?,
            "calib_frames" => p.calib_frames = parse(key, v)?,
            "iters" => p.iters = parse(key, v)?,
            "lr_scale" => p.lr_scale = parse(key, v)?,
            "lr_theta" => p.lr_theta = parse(key, v)?,
            "batch" => p.batch = parse(key, v)?,
            "granularity" => p.granularity = Granularity::parse(v).ok_or_else(|| Error::Config(format!("unknown granularity `{v}`")))?,
            "block_size" => p.block_size = parse(key, v)?,
            "alpha_reg" => p.loss.alpha_reg = parse(key, v)?,
            "lambda1" => p.loss.lambda1 = parse(key, v)?,
            "lambda2" => p.loss.lambda2 = parse(key, v)?,
            "gamma" => p.gamma = parse(key, v)?,
            "top_k" => p.top_k = parse(key, v)?,
            "nms_iou" => p.nms_iou = parse(key, v)?,
            "adaptive_rounding" => p.adaptive_rounding = parse_bool(key, v)?,
            "freeze_weight_scale" => p.freeze_weight_scale = parse_bool(key, v)?,
            "tgpl" => p.tgpl = parse_bool(key, v)?,
            "checkpoint_every" => p.checkpoint_every = parse(key, v)?,
            "checkpoint_frames" => p.checkpoint_frames = parse(key, v)?,
            "search_candidates" => p.search.candidates = parse(key, v)?,
            "search_alpha" => p.search.alpha = parse(key, v)?,
            "search_beta" => p.search.beta = parse(key, v)?,
            "search_literal" => p.search.literal_sweep = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (t, p, s, g) = (&self.train, &self.pipeline, &self.scene, &self.grid);
        vec![
            ("seed", self.seed.to_string()),
            ("n_train", self.n_train.to_string()),
            ("n_val", self.n_val.to_string()),
            ("method", self.method.name().to_string()),
            ("scene_objects_min", s.n_objects.0.to_string()),
            ("scene_objects_max", s.n_objects.1.to_string()),
            ("scene_vehicle_fraction", s.vehicle_fraction.to_string()),
            ("scene_density", s.density.to_string()),
            ("scene_falloff", s.falloff.to_string()),
            ("scene_clutter_points", s.clutter_points.to_string()),
            ("scene_sensor_range", s.sensor_range.to_string()),
            ("voxel_size", g.voxel_size.to_string()),
            ("x_min", g.x_min.to_string()),
            ("x_max", g.x_max.to_string()),
            ("y_min", g.y_min.to_string()),
            ("y_max", g.y_max.to_string()),
            ("head_stride", g.head_stride.to_string()),
            ("channels", t.detector.channels.to_string()),
            ("backbone_layers", t.detector.backbone_layers.to_string()),
            ("train_epochs", t.epochs.to_string()),
            ("train_min_epochs", t.min_epochs.to_string()),
            ("train_lr", t.lr.to_string()),
            ("train_lr_decay", t.lr_decay.to_string()),
            ("train_batch", t.batch.to_string()),
            ("ap_floor", t.ap_floor.to_string()),
            ("eval_iou", t.eval_iou.to_string()),
            ("score_floor", t.decode.score_floor.to_string()),
            ("max_boxes", t.decode.max_boxes.to_string()),
            ("decode_nms_iou", t.decode.nms_iou.to_string()),
            ("bits_w", p.bits_w.to_string()),
            ("bits_a", p.bits_a.to_string()),
            ("calib_frames", p.calib_frames.to_string()),
            ("iters", p.iters.to_string()),
            ("lr_scale", p.lr_scale.to_string()),
            ("lr_theta", p.lr_theta.to_string()),
            ("batch", p.batch.to_string()),
            ("granularity", p.granularity.name().to_string()),
            ("block_size", p.block_size.to_string()),
            ("alpha_reg", p.loss.alpha_reg.to_string()),
            ("lambda1", p.loss.lambda1.to_string()),
            ("lambda2", p.loss.lambda2.to_string()),
            ("gamma", p.gamma.to_string()),
            ("top_k", p.top_k.to_string()),
            ("nms_iou", p.nms_iou.to_string()),
            ("adaptive_rounding", p.adaptive_rounding.to_string()),
            ("freeze_weight_scale", p.freeze_weight_scale.to_string()),
            ("tgpl", p.tgpl.to_string()),
            ("checkpoint_every", p.checkpoint_every.to_string()),
            ("checkpoint_frames", p.checkpoint_frames.to_string()),
            ("search_candidates", p.search.candidates.to_string()),
            ("search_alpha", p.search.alpha.to_string()),
            ("search_beta", p.search.beta.to_string()),
            ("search_literal", p.search.literal_sweep.to_string()),
        ]
    }

    /// `key = value` lines that [`Settings::parse`] reads back to the same settings.
    pub fn render(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Settings::default();
        s.apply_text(text)?;
        Ok(s)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: key `{k}` given twice", i + 1)));
            }
            self.set(k, v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// `key=value` command-line override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Training settings with the shared grid and seed filled in.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train;
        t.detector.grid = self.grid;
        t.seed = self.seed;
        t
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        let mut p = self.pipeline;
        p.grid = self.grid;
        p.seed = self.seed;
        p
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: pillarq_core::Error| Error::Config(e.to_string());
        self.scene.validate().map_err(cfg)?;
        self.grid.validate().map_err(cfg)?;
        self.pipeline_config().validate().map_err(cfg)?;
        let t = &self.train;
        if t.batch == 0 || t.min_epochs > t.epochs || !(t.lr > 0.0) || !(0.0..=1.0).contains(&t.eval_iou) || !(0.0..=1.0).contains(&t.ap_floor) {
            return Err(Error::Config("invalid training settings".into()));
        }
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::Config("n_train and n_val must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parses_back() {
        let mut s = Settings::default();
        s.set("lr_theta", "0.001").unwrap();
        s.set("granularity", "block").unwrap();
        s.set("method", "entropy").unwrap();
        assert_eq!(Settings::parse(&s.render()).unwrap(), s);
    }

    #[test]
    fn unknown_and_repeated_keys_fail() {
        assert!(matches!(Settings::parse("nope = 1"), Err(Error::Config(_))));
        assert!(matches!(Settings::parse("iters = 1\niters = 2"), Err(Error::Config(_))));
        assert!(matches!(Settings::parse("iters = -1"), Err(Error::Config(_))));
        assert!(matches!(Settings::parse("tgpl = maybe"), Err(Error::Config(_))));
    }

    #[test]
    fn comments_and_blank_lines() {
        let s = Settings::parse("# header\n\n iters = 7  # inline\n").unwrap();
        assert_eq!(s.pipeline.iters, 7);
    }

    #[test]
    fn every_entry_is_a_settable_key() {
        let mut s = Settings::default();
        for (k, v) in Settings::default().entries() {
            s.set(k, &v).unwrap();
        }
        assert_eq!(s, Settings::default());
    }
}
