//! Rotated-box overlap, non-maximum suppression and 40-point average precision.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::boxes::{Box3D, Detection, Object, ObjectClass};

const AREA_EPS: f64 = 1e-12;

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum();
    0.5 * twice.abs()
}

/// Sutherland–Hodgman: clips `subject` by each edge of the convex,
/// counter-clockwise polygon `clip`.
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (dc, dp) = (cross(a, b, cur), cross(a, b, prev));
            if dc >= 0.0 {
                if dp < 0.0 {
                    out.push(intersect(prev, cur, dp, dc));
                }
                out.push(cur);
            } else if dp >= 0.0 {
                out.push(intersect(prev, cur, dp, dc));
            }
        }
    }
    out
}

fn intersect(p: [f64; 2], q: [f64; 2], dp: f64, dq: f64) -> [f64; 2] {
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Area of the overlap of two bird's-eye footprints.
pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    let d = (a.cx - b.cx).hypot(a.cy - b.cy);
    if d >= a.bev_radius() + b.bev_radius() {
        return 0.0;
    }
    polygon_area(&clip_polygon(&a.bev_corners(), &b.bev_corners()))
}

/// Bird's-eye IoU of two oriented boxes; 0 if either footprint is degenerate.
pub fn rotated_iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let (aa, ab) = (a.bev_area(), b.bev_area());
    if aa <= AREA_EPS || ab <= AREA_EPS {
        return 0.0;
    }
    let inter = bev_intersection(a, b);
    let union = aa + ab - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Volumetric IoU: footprint overlap times vertical overlap.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let (va, vb) = (a.volume(), b.volume());
    if va <= AREA_EPS || vb <= AREA_EPS {
        return 0.0;
    }
    let dz = a.z_max().min(b.z_max()) - a.z_min().max(b.z_min());
    if dz <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection(a, b) * dz;
    (inter / (va + vb - inter)).clamp(0.0, 1.0)
}

/// Greedy class-wise suppression. Returns indices into `dets` in keep order
/// (descending score, ties by index).
pub fn nms_bev_indices(dets: &[Detection], iou_thr: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept
            .iter()
            .any(|&k| dets[k].class == dets[i].class && rotated_iou_bev(&dets[k].bbox, &dets[i].bbox) > iou_thr);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

pub fn nms_bev(dets: &[Detection], iou_thr: f64) -> Vec<Detection> {
    nms_bev_indices(dets, iou_thr).into_iter().map(|i| dets[i]).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum IouMode {
    Bev,
    ThreeD,
}

impl IouMode {
    pub fn iou(self, a: &Box3D, b: &Box3D) -> f64 {
        match self {
            IouMode::Bev => rotated_iou_bev(a, b),
            IouMode::ThreeD => iou_3d(a, b),
        }
    }
}

/// Number of recall positions, `i/40` for `i = 1..=40`.
pub const RECALL_POINTS: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Indexed by [`ObjectClass::index`].
    pub iou_thresholds: [f64; 3],
    pub nms_iou: f64,
    pub mode: IouMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: [0.7, 0.5, 0.5],
            nms_iou: 0.01,
            mode: IouMode::ThreeD,
        }
    }
}

/// One frame of predictions and ground truth.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Frame {
    pub detections: Vec<Detection>,
    pub objects: Vec<Object>,
}

/// Matches one class over all frames and returns `(scores, is_tp)` sorted by
/// descending score, together with the ground-truth count.
fn match_class(frames: &[Frame], class: ObjectClass, iou_thr: f64, mode: IouMode) -> (Vec<(f64, bool)>, usize) {
    let mut marks = Vec::new();
    let mut n_gt = 0;
    for frame in frames {
        let gts: Vec<&Box3D> = frame.objects.iter().filter(|o| o.class == class).map(|o| &o.bbox).collect();
        n_gt += gts.len();
        let mut dets: Vec<&Detection> = frame.detections.iter().filter(|d| d.class == class).collect();
        // stable sort keeps input order among equal scores
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut taken = vec![false; gts.len()];
        for d in dets {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let iou = mode.iou(&d.bbox, gt);
                if iou >= iou_thr && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            marks.push((d.score, best.is_some()));
        }
    }
    marks.sort_by(|a, b| b.0.total_cmp(&a.0));
    (marks, n_gt)
}

/// Interpolated precision averaged over the 40 recall positions.
/// `None` when the class has no ground truth.
pub fn ap_r40_from_marks(marks: &[(f64, bool)], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut curve = Vec::with_capacity(marks.len());
    let mut tp = 0usize;
    for (i, &(_, hit)) in marks.iter().enumerate() {
        tp += hit as usize;
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let total: f64 = (1..=RECALL_POINTS)
        .map(|i| {
            let r = i as f64 / RECALL_POINTS as f64;
            curve
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|&(_, p)| p)
                .fold(0.0, f64::max)
        })
        .sum();
    Some(total / RECALL_POINTS as f64)
}

/// AP of one class over a set of frames.
pub fn ap_r40(frames: &[Frame], class: ObjectClass, iou_thr: f64, mode: IouMode) -> Option<f64> {
    let (marks, n_gt) = match_class(frames, class, iou_thr, mode);
    ap_r40_from_marks(&marks, n_gt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Classes without ground truth are absent.
    pub per_class: BTreeMap<ObjectClass, f64>,
    pub map: f64,
}

pub fn evaluate_set(frames: &[Frame], cfg: &EvalConfig) -> EvalResult {
    let mut per_class = BTreeMap::new();
    for class in ObjectClass::ALL {
        match ap_r40(frames, class, cfg.iou_thresholds[class.index()], cfg.mode) {
            Some(ap) => {
                per_class.insert(class, ap);
            }
            None => warn!("no {class} ground truth; class excluded from mAP"),
        }
    }
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    EvalResult { per_class, map }
}

/// Fraction of ground-truth objects of `class` covered by some same-class
/// detection at `iou_thr` (each detection used once, greedy by score).
pub fn recall(frames: &[Frame], class: ObjectClass, iou_thr: f64, mode: IouMode) -> Option<f64> {
    let (marks, n_gt) = match_class(frames, class, iou_thr, mode);
    (n_gt > 0).then(|| marks.iter().filter(|m| m.1).count() as f64 / n_gt as f64)
}
