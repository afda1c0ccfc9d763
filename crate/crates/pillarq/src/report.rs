//! JSON and CSV artifacts.
//!
//! JSON objects come from structs, so key order is the field order and stays
//! stable between runs. Nothing time-dependent goes into them.

use std::path::Path;

use serde::Serialize;

use pillarq_core::eval::{EvalReport, RangeRow, RANGE_LABELS};
use pillarq_core::nn::{Network, Precision};
use pillarq_core::pipeline::RunLog;
use pillarq_core::scene::CLASS_NAMES;

use crate::dataset::{Access, AccessKind};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ClassJson {
    pub class: String,
    pub ap: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub gt: usize,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct BucketJson {
    pub bucket: String,
    pub ap: f64,
    pub gt: usize,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EvalJson {
    pub iou: f64,
    pub frames: usize,
    pub mean_ap: f64,
    pub classes: Vec<ClassJson>,
    pub range: Vec<BucketJson>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub yaw_l1: f64,
}

pub fn class_name(i: usize) -> String {
    CLASS_NAMES.get(i).map_or_else(|| format!("class{i}"), |s| s.to_string())
}

impl EvalJson {
    pub fn new(r: &EvalReport, iou: f64, frames: usize) -> Self {
        EvalJson {
            iou,
            frames,
            mean_ap: r.mean_ap,
            classes: r
                .per_class
                .iter()
                .enumerate()
                .map(|(i, c)| ClassJson { class: class_name(i), ap: c.ap, tp: c.tp, fp: c.fp, fn_: c.fn_, gt: c.gt })
                .collect(),
            range: (0..3).map(|k| BucketJson { bucket: RANGE_LABELS[k].into(), ap: r.range_ap[k], gt: r.range_gt[k] }).collect(),
            tp: r.tp(),
            fp: r.fp(),
            fn_: r.fn_(),
            yaw_l1: r.yaw_l1,
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct LayerJson {
    pub name: String,
    pub precision: &'static str,
    pub weight_scale: Option<f64>,
    pub activation_scale: Option<f64>,
    pub bits_w: Option<u8>,
    pub bits_a: Option<u8>,
    /// Weights whose offset changes the plain rounding result.
    pub rounding_offsets: usize,
}

pub fn layer_table(net: &Network<f32>) -> Vec<LayerJson> {
    net.layers
        .iter()
        .map(|l| LayerJson {
            name: l.name.clone(),
            precision: if l.precision == Precision::Quantized { "int" } else { "fp" },
            weight_scale: l.w_quant.map(|p| p.scale),
            activation_scale: l.a_quant.map(|p| p.scale),
            bits_w: l.w_quant.map(|p| p.bits),
            bits_a: l.a_quant.map(|p| p.bits),
            rounding_offsets: match (&l.theta, &l.w_quant) {
                (Some(t), Some(p)) => l
                    .weight
                    .data()
                    .iter()
                    .enumerate()
                    .filter(|&(i, &w)| p.code(w as f64, t.offset(i, p.scale)) != p.code(w as f64, 0.0))
                    .count(),
                _ => 0,
            },
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, PartialEq, Default)]
pub struct AccessJson {
    pub manifest_reads: usize,
    pub point_cloud_reads: usize,
    pub label_reads: usize,
}

impl AccessJson {
    pub fn new(log: &[Access]) -> Self {
        let n = |k| log.iter().filter(|a| a.kind == k).count();
        AccessJson { manifest_reads: n(AccessKind::Manifest), point_cloud_reads: n(AccessKind::PointCloud), label_reads: n(AccessKind::Label) }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct UnitJson {
    pub unit: String,
    pub layers: Vec<String>,
    pub chosen_iter: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MseJson {
    pub layer: String,
    pub initial: f64,
    #[serde(rename = "final")]
    pub final_: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct QuantizeJson {
    pub method: String,
    pub bits_w: u32,
    pub bits_a: u32,
    pub seed: u64,
    pub calibration_frames: Vec<usize>,
    pub layers: Vec<LayerJson>,
    pub units: Vec<UnitJson>,
    pub layer_mse: Vec<MseJson>,
    pub file_access: AccessJson,
}

impl QuantizeJson {
    pub fn add_log(&mut self, log: &RunLog) {
        self.units = log
            .units
            .iter()
            .map(|u| UnitJson {
                unit: u.unit.clone(),
                layers: u.layers.clone(),
                chosen_iter: u.chosen_iter,
                initial_objective: u.initial_total,
                final_objective: u.final_total,
            })
            .collect();
        self.layer_mse = log.layer_mse.iter().map(|m| MseJson { layer: m.layer.clone(), initial: m.initial, final_: m.final_ }).collect();
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct TrainJson {
    pub seed: u64,
    pub epochs_run: usize,
    pub epoch_ap: Vec<f64>,
    pub final_ap: f64,
    pub ap_floor: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CompareRow {
    pub name: String,
    pub model: String,
    pub eval: EvalJson,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RangeJson {
    pub name: String,
    pub mean_ap: f64,
    pub range_ap: [f64; 3],
    pub mean_drop: f64,
    pub range_drop: [f64; 3],
}

impl From<&RangeRow> for RangeJson {
    fn from(r: &RangeRow) -> Self {
        RangeJson { name: r.name.clone(), mean_ap: r.mean_ap, range_ap: r.range_ap, mean_drop: r.mean_drop, range_drop: r.range_drop }
    }
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::format(path, e.to_string()))?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Writes a header and rows with the `csv` crate.
pub fn write_csv<R: AsRef<[String]>>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = R>) -> Result<()> {
    let err = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r.as_ref()).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn run_log_rows(log: &RunLog) -> Vec<Vec<String>> {
    log.records.iter().map(|r| vec![r.iter.to_string(), r.unit.clone(), r.local.to_string(), r.tgpl.to_string(), r.total.to_string()]).collect()
}

pub fn access_rows(log: &[Access]) -> Vec<Vec<String>> {
    log.iter().map(|a| vec![a.kind.to_string(), a.path.clone()]).collect()
}

/// Fixed-width text table for the terminal.
pub fn text_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let s: Vec<String> = cells.iter().zip(&width).map(|(c, w)| format!("{c:<w$}")).collect();
        s.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    for r in rows {
        out += &line(r.iter().map(String::as_str).collect());
    }
    out
}
