//! BEV average precision, overall and by range bucket.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::detector::{bev_iou, Box3D};
use crate::{Error, Result};

/// Upper edges of the near and middle range buckets (meters).
pub const RANGE_EDGES: [f64; 2] = [10.0, 20.0];
pub const RANGE_LABELS: [&str; 3] = ["0-10m", "10-20m", "20m+"];
/// Number of recall sample points for interpolated AP.
pub const RECALL_POINTS: usize = 101;

pub fn range_bucket(d: f64) -> usize {
    RANGE_EDGES.iter().take_while(|&&e| d >= e).count()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassStats {
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub gt: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub per_class: Vec<ClassStats>,
    pub mean_ap: f64,
    /// Mean AP over classes inside each range bucket.
    pub range_ap: [f64; 3],
    pub range_gt: [usize; 3],
    /// Mean absolute yaw error of matched predictions (radians).
    pub yaw_l1: f64,
}

impl EvalReport {
    pub fn tp(&self) -> usize {
        self.per_class.iter().map(|c| c.tp).sum()
    }

    pub fn fp(&self) -> usize {
        self.per_class.iter().map(|c| c.fp).sum()
    }

    pub fn fn_(&self) -> usize {
        self.per_class.iter().map(|c| c.fn_).sum()
    }
}

fn cmp_f64(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).unwrap_or(Ordering::Equal)
}

/// 101-point interpolated AP from precision/recall points.
pub fn interpolated_ap(points: &[(f64, f64)]) -> f64 {
    // points: (recall, precision)
    let mut total = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let best = points.iter().filter(|p| p.0 >= r - 1e-12).map(|p| p.1).fold(0.0, f64::max);
        total += best;
    }
    total / RECALL_POINTS as f64
}

struct Matched {
    stats: ClassStats,
    yaw_err: f64,
}

fn eval_class(preds: &[Vec<Box3D>], gts: &[Vec<Box3D>], cls: usize, iou: f64) -> Matched {
    let mut order: Vec<(usize, &Box3D)> =
        preds.iter().enumerate().flat_map(|(s, v)| v.iter().filter(|b| b.cls == cls).map(move |b| (s, b))).collect();
    // score desc, then a fixed spatial tie-break so input order never matters
    order.sort_by(|a, b| {
        cmp_f64(b.1.score, a.1.score).then(a.0.cmp(&b.0)).then(cmp_f64(a.1.x, b.1.x)).then(cmp_f64(a.1.y, b.1.y))
    });
    let gt_count: usize = gts.iter().map(|g| g.iter().filter(|b| b.cls == cls).count()).sum();
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut pr = Vec::new();
    let mut yaw_err = 0.0;
    for (i, &(s, p)) in order.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts[s].iter().enumerate() {
            if g.cls != cls || used[s][j] {
                continue;
            }
            let v = bev_iou(p, g);
            if v >= iou && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, _)) => {
                used[s][j] = true;
                tp += 1;
                let d = crate::detector::normalize_yaw(p.yaw - gts[s][j].yaw).abs();
                yaw_err += d;
            }
            None => fp += 1,
        }
        // tied scores form one operating point
        let last_of_tie = order.get(i + 1).is_none_or(|n| n.1.score != p.score);
        if last_of_tie && gt_count > 0 {
            pr.push((tp as f64 / gt_count as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    let ap = if gt_count == 0 { None } else { Some(interpolated_ap(&pr)) };
    Matched { stats: ClassStats { ap, tp, fp, fn_: gt_count - tp, gt: gt_count }, yaw_err }
}

fn mean_present(aps: impl Iterator<Item = Option<f64>>) -> f64 {
    let v: Vec<f64> = aps.flatten().collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Greedy score-ordered one-to-one matching at BEV IoU >= `iou_thresh`.
///
/// For a range bucket both predictions and ground truth are restricted to
/// centers inside the bucket.
pub fn evaluate(preds: &[Vec<Box3D>], gts: &[Vec<Box3D>], iou_thresh: f64, classes: usize) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::LengthMismatch { left: preds.len(), right: gts.len() });
    }
    let mut per_class = Vec::with_capacity(classes);
    let (mut yaw, mut matched) = (0.0, 0usize);
    for c in 0..classes {
        let m = eval_class(preds, gts, c, iou_thresh);
        yaw += m.yaw_err;
        matched += m.stats.tp;
        per_class.push(m.stats);
    }
    let mean_ap = mean_present(per_class.iter().map(|c| c.ap));
    let mut range_ap = [0.0; 3];
    let mut range_gt = [0usize; 3];
    for (b, slot) in range_ap.iter_mut().enumerate() {
        let keep = |v: &Vec<Box3D>| -> Vec<Box3D> { v.iter().filter(|x| range_bucket(x.distance()) == b).copied().collect() };
        let bp: Vec<Vec<Box3D>> = preds.iter().map(keep).collect();
        let bg: Vec<Vec<Box3D>> = gts.iter().map(keep).collect();
        range_gt[b] = bg.iter().map(|v| v.iter().filter(|x| x.cls < classes).count()).sum();
        *slot = mean_present((0..classes).map(|c| eval_class(&bp, &bg, c, iou_thresh).stats.ap));
    }
    Ok(EvalReport { per_class, mean_ap, range_ap, range_gt, yaw_l1: if matched > 0 { yaw / matched as f64 } else { 0.0 } })
}

/// One row of the range comparison; drops are relative to the reference row.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeRow {
    pub name: String,
    pub mean_ap: f64,
    pub range_ap: [f64; 3],
    pub mean_drop: f64,
    pub range_drop: [f64; 3],
}

pub fn relative_drop(reference: f64, value: f64) -> f64 {
    if reference > 0.0 {
        (reference - value) / reference
    } else {
        0.0
    }
}

/// Range table for evaluated variants; the first report is the reference.
pub fn range_ablation(variants: &[(String, EvalReport)]) -> Result<Vec<RangeRow>> {
    if variants.len() < 2 {
        return Err(Error::InsufficientData { requested: 2, available: variants.len() });
    }
    let r = &variants[0].1;
    Ok(variants
        .iter()
        .map(|(name, e)| RangeRow {
            name: name.clone(),
            mean_ap: e.mean_ap,
            range_ap: e.range_ap,
            mean_drop: relative_drop(r.mean_ap, e.mean_ap),
            range_drop: core::array::from_fn(|k| relative_drop(r.range_ap[k], e.range_ap[k])),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: f64, y: f64, cls: usize, score: f64) -> Box3D {
        Box3D { x, y, z: 0.8, h: 1.6, w: 2.0, l: 4.0, yaw: 0.0, cls, score }
    }

    #[test]
    fn perfect_detector() {
        let g = vec![vec![bx(5.0, 0.0, 0, 1.0), bx(15.0, 3.0, 1, 1.0)], vec![bx(-25.0, 0.0, 0, 1.0)]];
        let r = evaluate(&g, &g, 0.5, 2).unwrap();
        assert_eq!(r.mean_ap, 1.0);
        assert_eq!(r.range_ap, [1.0; 3]);
        assert_eq!(r.per_class[0].ap, Some(1.0));
    }

    #[test]
    fn empty_predictions() {
        let g = vec![vec![bx(5.0, 0.0, 0, 1.0)]];
        let r = evaluate(&[vec![]], &g, 0.5, 1).unwrap();
        assert_eq!(r.mean_ap, 0.0);
        assert_eq!(r.per_class[0].fn_, 1);
    }

    #[test]
    fn tied_tp_and_fp() {
        // one operating point at recall 1, precision 1/2
        let g = vec![vec![bx(5.0, 0.0, 0, 1.0)]];
        let p = vec![vec![bx(5.0, 0.0, 0, 0.7), bx(-8.0, 0.0, 0, 0.7)]];
        let r = evaluate(&p, &g, 0.5, 1).unwrap();
        assert!((r.mean_ap - 0.5).abs() < 1e-12);
        let q = vec![vec![bx(-8.0, 0.0, 0, 0.7), bx(5.0, 0.0, 0, 0.7)]];
        assert_eq!(evaluate(&q, &g, 0.5, 1).unwrap(), r);
    }

    #[test]
    fn ranked_tp_then_fp() {
        // recall 1 reached at precision 1 -> AP 1
        let g = vec![vec![bx(5.0, 0.0, 0, 1.0)]];
        let p = vec![vec![bx(5.0, 0.0, 0, 0.9), bx(-8.0, 0.0, 0, 0.3)]];
        assert_eq!(evaluate(&p, &g, 0.5, 1).unwrap().mean_ap, 1.0);
        // fp ranked first: precision at recall 1 is 1/2
        let p = vec![vec![bx(5.0, 0.0, 0, 0.3), bx(-8.0, 0.0, 0, 0.9)]];
        assert!((evaluate(&p, &g, 0.5, 1).unwrap().mean_ap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn buckets_partition_gt() {
        let g = vec![vec![bx(5.0, 0.0, 0, 1.0), bx(12.0, 0.0, 0, 1.0), bx(0.0, 25.0, 1, 1.0)]];
        let r = evaluate(&g, &g, 0.5, 2).unwrap();
        assert_eq!(r.range_gt.iter().sum::<usize>(), 3);
        assert_eq!(range_bucket(9.99), 0);
        assert_eq!(range_bucket(10.0), 1);
        assert_eq!(range_bucket(31.0), 2);
    }

    #[test]
    fn self_comparison_has_zero_drop() {
        let g = vec![vec![bx(5.0, 0.0, 0, 1.0)]];
        let e = evaluate(&g, &g, 0.5, 1).unwrap();
        let rows = range_ablation(&[("fp".into(), e.clone()), ("fp".into(), e)]).unwrap();
        assert_eq!(rows[1].range_drop, [0.0; 3]);
        assert_eq!(rows[1].mean_drop, 0.0);
    }
}
