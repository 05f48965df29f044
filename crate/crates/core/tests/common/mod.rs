//! Brute-force reference implementations and random instance generators.
//!
//! Shared by the core oracle tests and the acceptance suite.

#![allow(dead_code)]

use std::f64::consts::PI;

use rand::Rng;

use densepillars::boxes::{Box3D, Detection, Object, ObjectClass};
use densepillars::detector::{encode_box, AnchorConfig, AnchorLabel, AnchorSet, Targets, BOX_DIM};
use densepillars::eval::rotated_iou_bev;
use densepillars::pillar::GridSpec;

fn inside_bev(b: &Box3D, x: f64, y: f64) -> bool {
    let [lx, ly, _] = b.to_local(x, y, b.cz);
    lx.abs() <= 0.5 * b.l && ly.abs() <= 0.5 * b.w
}

fn bev_bounds(a: &Box3D, b: &Box3D) -> (f64, f64, f64, f64) {
    let mut lo = (f64::INFINITY, f64::INFINITY);
    let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for [x, y] in a.bev_corners().into_iter().chain(b.bev_corners()) {
        lo = (lo.0.min(x), lo.1.min(y));
        hi = (hi.0.max(x), hi.1.max(y));
    }
    (lo.0, lo.1, hi.0, hi.1)
}

/// Bird's-eye IoU by jittered stratified sampling: one uniform sample in
/// each cell of a `side × side` lattice over the joint bounding rectangle.
pub fn mc_iou_bev(a: &Box3D, b: &Box3D, side: usize, rng: &mut impl Rng) -> f64 {
    let (x0, y0, x1, y1) = bev_bounds(a, b);
    let (dx, dy) = ((x1 - x0) / side as f64, (y1 - y0) / side as f64);
    let (mut inter, mut union) = (0u64, 0u64);
    for i in 0..side {
        for j in 0..side {
            let x = x0 + (i as f64 + rng.random::<f64>()) * dx;
            let y = y0 + (j as f64 + rng.random::<f64>()) * dy;
            let (ia, ib) = (inside_bev(a, x, y), inside_bev(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Volumetric IoU by stratified sampling on a `side³` lattice.
pub fn mc_iou_3d(a: &Box3D, b: &Box3D, side: usize, rng: &mut impl Rng) -> f64 {
    let (x0, y0, x1, y1) = bev_bounds(a, b);
    let (z0, z1) = (a.z_min().min(b.z_min()), a.z_max().max(b.z_max()));
    let d = [(x1 - x0) / side as f64, (y1 - y0) / side as f64, (z1 - z0) / side as f64];
    let (mut inter, mut union) = (0u64, 0u64);
    for i in 0..side {
        for j in 0..side {
            let x = x0 + (i as f64 + rng.random::<f64>()) * d[0];
            let y = y0 + (j as f64 + rng.random::<f64>()) * d[1];
            let (fa, fb) = (inside_bev(a, x, y), inside_bev(b, x, y));
            if !fa && !fb {
                continue;
            }
            for k in 0..side {
                let z = z0 + (k as f64 + rng.random::<f64>()) * d[2];
                let ia = fa && z >= a.z_min() && z <= a.z_max();
                let ib = fb && z >= b.z_min() && z <= b.z_max();
                inter += (ia && ib) as u64;
                union += (ia || ib) as u64;
            }
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Pairs of boxes that overlap often but not always.
pub fn random_pair(rng: &mut impl Rng) -> (Box3D, Box3D) {
    let mut one = |cx: f64, cy: f64, spread: f64| {
        Box3D::new(
            cx + rng.random_range(-spread..spread),
            cy + rng.random_range(-spread..spread),
            rng.random_range(-1.0..0.0),
            rng.random_range(0.4..2.5),
            rng.random_range(0.5..5.0),
            rng.random_range(0.5..2.0),
            rng.random_range(-PI..PI),
        )
    };
    let a = one(0.0, 0.0, 5.0);
    let b = one(a.cx, a.cy, 2.0);
    (a, b)
}

/// Pick the best remaining detection, drop everything of its class that
/// overlaps it beyond the threshold, repeat.
pub fn brute_nms(dets: &[Detection], thr: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..dets.len()).collect();
    let mut kept = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive {
            if dets[i].score > dets[best].score || (dets[i].score == dets[best].score && i < best) {
                best = i;
            }
        }
        kept.push(best);
        alive.retain(|&i| {
            i != best && !(dets[i].class == dets[best].class && rotated_iou_bev(&dets[i].bbox, &dets[best].bbox) > thr)
        });
    }
    kept
}

/// Full anchor × object IoU matrix, no spatial pruning.
///
/// Ties go to the lower object index for anchors and to the lower anchor
/// index for each object's forced match; forced matches are applied in
/// object order.
pub fn brute_assign(anchors: &AnchorSet, objects: &[Object], cfg: &AnchorConfig) -> Targets {
    let n = anchors.len();
    let iou: Vec<Vec<f64>> = (0..n)
        .map(|a| {
            objects
                .iter()
                .map(|o| {
                    if o.class == anchors.class_of(a) {
                        rotated_iou_bev(&anchors.boxes[a], &o.bbox)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let mut labels = vec![AnchorLabel::Negative; n];
    for a in 0..n {
        let ac = &cfg.classes[anchors.class_of(a).index()];
        let mut best: Option<(usize, f64)> = None;
        for (g, &v) in iou[a].iter().enumerate() {
            if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        let top = best.map_or(0.0, |b| b.1);
        labels[a] = match best {
            Some((g, v)) if v >= ac.matched => AnchorLabel::Positive(g),
            _ if top < ac.unmatched => AnchorLabel::Negative,
            _ => AnchorLabel::Ignore,
        };
    }
    for g in 0..objects.len() {
        let mut best: Option<(usize, f64)> = None;
        for (a, row) in iou.iter().enumerate() {
            if row[g] > 0.0 && best.is_none_or(|(_, b)| row[g] > b) {
                best = Some((a, row[g]));
            }
        }
        if let Some((a, _)) = best {
            labels[a] = AnchorLabel::Positive(g);
        }
    }
    let mut boxes = vec![[0.0; BOX_DIM]; n];
    let mut dirs = vec![0u8; n];
    for a in 0..n {
        if let AnchorLabel::Positive(g) = labels[a] {
            boxes[a] = encode_box(&objects[g].bbox, &anchors.boxes[a]);
            dirs[a] = (objects[g].bbox.yaw >= 0.0) as u8;
        }
    }
    Targets { labels, boxes, dirs }
}

/// An 8 m square grid of 1 m pillars: 4×4 anchor cells, 96 anchors.
pub fn small_grid() -> GridSpec {
    GridSpec {
        x_range: (0.0, 8.0),
        y_range: (0.0, 8.0),
        pillar_size: (1.0, 1.0),
        ..GridSpec::default()
    }
}

pub fn random_anchor_config(rng: &mut impl Rng) -> AnchorConfig {
    let mut cfg = AnchorConfig::default();
    for ac in &mut cfg.classes {
        ac.size = (rng.random_range(0.6..2.5), rng.random_range(0.8..4.0), rng.random_range(0.8..2.0));
        ac.unmatched = rng.random_range(0.1..0.5);
        ac.matched = ac.unmatched + rng.random_range(0.0..0.3);
    }
    cfg
}

pub fn random_objects(rng: &mut impl Rng, max: usize) -> Vec<Object> {
    let n = rng.random_range(0..=max);
    (0..n)
        .map(|_| Object {
            class: ObjectClass::ALL[rng.random_range(0..3)],
            bbox: Box3D::new(
                rng.random_range(-1.0..9.0),
                rng.random_range(-1.0..9.0),
                -1.0,
                rng.random_range(0.5..2.5),
                rng.random_range(0.5..4.5),
                1.5,
                // a quarter of the objects sit exactly on an anchor rotation
                if rng.random_bool(0.25) { 0.0 } else { rng.random_range(-PI..PI) },
            ),
        })
        .collect()
}

pub fn random_detections(rng: &mut impl Rng, max: usize) -> Vec<Detection> {
    let n = rng.random_range(0..=max);
    (0..n)
        .map(|_| Detection {
            class: ObjectClass::ALL[rng.random_range(0..3)],
            bbox: Box3D::new(
                rng.random_range(0.0..6.0),
                rng.random_range(0.0..6.0),
                -1.0,
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..4.0),
                1.5,
                rng.random_range(-PI..PI),
            ),
            // coarse scores so that ties occur
            score: rng.random_range(0..8) as f64 / 8.0,
        })
        .collect()
}
