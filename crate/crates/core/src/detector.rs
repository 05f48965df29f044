//! Multi-scale neck, anchor head, box coding, target assignment, the training
//! loss and post-processing.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::boxes::{wrap_angle, Box3D, Detection, ObjectClass};
use crate::error::{Error, Result};
use crate::eval::{nms_bev, rotated_iou_bev};
use crate::params::{Forward, ParamStore};
use crate::pillar::GridSpec;
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub const NUM_CLASSES: usize = 3;
pub const ROTATIONS: [f64; 2] = [0.0, FRAC_PI_2];
pub const ANCHORS_PER_CELL: usize = NUM_CLASSES * ROTATIONS.len();
pub const BOX_DIM: usize = 7;
pub const DIR_BINS: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeckSpec {
    pub in_channels: [usize; 3],
    pub upsample_strides: [usize; 3],
    pub out_channels: [usize; 3],
}

impl Default for NeckSpec {
    fn default() -> Self {
        Self {
            in_channels: [64, 128, 256],
            upsample_strides: [1, 2, 4],
            out_channels: [128, 128, 128],
        }
    }
}

impl NeckSpec {
    pub fn fused_channels(&self) -> usize {
        self.out_channels.iter().sum()
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl rand::Rng) {
        for i in 0..3 {
            let s = self.upsample_strides[i];
            store.insert_deconv(format!("neck.deblock{}.weight", i + 1), self.in_channels[i], self.out_channels[i], s, rng);
            store.insert_bn(&format!("neck.deblock{}.bn", i + 1), self.out_channels[i]);
        }
    }
}

/// Upsamples each tap to the stride-2 resolution and concatenates.
pub fn fpn_forward<T: Scalar>(fwd: &mut Forward<'_, T>, taps: &[Var; 3], spec: &NeckSpec) -> Result<Var> {
    let mut ups = Vec::with_capacity(3);
    for (i, &tap) in taps.iter().enumerate() {
        let c = fwd.graph.shape(tap)[1];
        if c != spec.in_channels[i] {
            return Err(Error::config(format!(
                "neck input {} has {c} channels, expected {}",
                i + 1,
                spec.in_channels[i]
            )));
        }
        let w = fwd.param(&format!("neck.deblock{}.weight", i + 1))?;
        let y = fwd.graph.conv_transpose2d(tap, w, spec.upsample_strides[i])?;
        let y = fwd.batch_norm(&format!("neck.deblock{}.bn", i + 1), y)?;
        ups.push(fwd.graph.relu(y)?);
    }
    let s0 = fwd.graph.shape(ups[0])[2..].to_vec();
    for u in &ups[1..] {
        if fwd.graph.shape(*u)[2..] != s0[..] {
            return Err(Error::config("neck branches disagree on spatial size"));
        }
    }
    fwd.graph.channel_concat(&ups)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorClass {
    pub class: ObjectClass,
    /// `(w, l, h)`.
    pub size: (f64, f64, f64),
    pub z_center: f64,
    pub matched: f64,
    pub unmatched: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    /// Ordered as [`ObjectClass::ALL`].
    pub classes: [AnchorClass; 3],
    /// Feature-map stride relative to the pillar grid.
    pub feature_stride: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        let entry = |class: ObjectClass, z_center, matched, unmatched| AnchorClass {
            class,
            size: class.typical_size(),
            z_center,
            matched,
            unmatched,
        };
        Self {
            classes: [
                entry(ObjectClass::Car, -1.0, 0.6, 0.45),
                entry(ObjectClass::Pedestrian, -0.6, 0.5, 0.35),
                entry(ObjectClass::Cyclist, -0.6, 0.5, 0.35),
            ],
            feature_stride: 2,
        }
    }
}

/// Anchors tiled over the head's feature map, indexed
/// `((row·W + col)·3 + class)·2 + rotation`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub boxes: Vec<Box3D>,
    pub height: usize,
    pub width: usize,
    pub origin: (f64, f64),
    pub cell: (f64, f64),
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn class_of(&self, a: usize) -> ObjectClass {
        ObjectClass::ALL[(a % ANCHORS_PER_CELL) / ROTATIONS.len()]
    }

    /// Anchors of `class` whose cell lies within `radius` meters of `(x, y)`.
    fn near(&self, x: f64, y: f64, radius: f64, class: ObjectClass) -> impl Iterator<Item = usize> + '_ {
        let span = |v: f64, o: f64, c: f64, n: usize| {
            let lo = ((v - radius - o) / c - 0.5).floor().max(0.0) as usize;
            let hi = (((v + radius - o) / c - 0.5).ceil().max(-1.0) + 1.0).min(n as f64) as usize;
            lo..hi.max(lo)
        };
        let rows = span(y, self.origin.1, self.cell.1, self.height);
        let cols = span(x, self.origin.0, self.cell.0, self.width);
        rows.flat_map(move |r| cols.clone().map(move |c| (r, c))).flat_map(move |(r, c)| {
            let base = (r * self.width + c) * ANCHORS_PER_CELL + class.index() * ROTATIONS.len();
            base..base + ROTATIONS.len()
        })
    }
}

pub fn generate_anchors(grid: &GridSpec, cfg: &AnchorConfig) -> Result<AnchorSet> {
    let (nx, ny) = grid.dims()?;
    let s = cfg.feature_stride;
    if s == 0 || nx % s != 0 || ny % s != 0 {
        return Err(Error::config(format!("feature stride {s} does not divide the {ny}×{nx} grid")));
    }
    let (height, width) = (ny / s, nx / s);
    let cell = (grid.pillar_size.0 * s as f64, grid.pillar_size.1 * s as f64);
    let origin = (grid.x_range.0, grid.y_range.0);
    let mut boxes = Vec::with_capacity(height * width * ANCHORS_PER_CELL);
    for row in 0..height {
        let cy = origin.1 + (row as f64 + 0.5) * cell.1;
        for col in 0..width {
            let cx = origin.0 + (col as f64 + 0.5) * cell.0;
            for ac in &cfg.classes {
                let (w, l, h) = ac.size;
                for &yaw in &ROTATIONS {
                    boxes.push(Box3D::new(cx, cy, ac.z_center, w, l, h, yaw));
                }
            }
        }
    }
    Ok(AnchorSet {
        boxes,
        height,
        width,
        origin,
        cell,
    })
}

/// Residual of `gt` relative to `anchor`.
pub fn encode_box(gt: &Box3D, anchor: &Box3D) -> [f64; BOX_DIM] {
    let d = anchor.w.hypot(anchor.l);
    [
        (gt.cx - anchor.cx) / d,
        (gt.cy - anchor.cy) / d,
        (gt.cz - anchor.cz) / anchor.h,
        (gt.w / anchor.w).ln(),
        (gt.l / anchor.l).ln(),
        (gt.h / anchor.h).ln(),
        gt.yaw - anchor.yaw,
    ]
}

pub fn decode_box(delta: &[f64; BOX_DIM], anchor: &Box3D) -> Box3D {
    let d = anchor.w.hypot(anchor.l);
    Box3D::new(
        anchor.cx + delta[0] * d,
        anchor.cy + delta[1] * d,
        anchor.cz + delta[2] * anchor.h,
        anchor.w * delta[3].exp(),
        anchor.l * delta[4].exp(),
        anchor.h * delta[5].exp(),
        anchor.yaw + delta[6],
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignore,
}

/// Per-anchor training targets for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub labels: Vec<AnchorLabel>,
    /// Encoded residuals; meaningful for positives only.
    pub boxes: Vec<[f64; BOX_DIM]>,
    /// 1 when the matched object's yaw is non-negative.
    pub dirs: Vec<u8>,
}

impl Targets {
    pub fn num_positive(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, AnchorLabel::Positive(_)))
            .count()
    }
}

/// Class-wise IoU matching with forced best-anchor matches.
///
/// Anchors reach IoU > 0 only with objects inside their neighbourhood, so
/// overlaps are evaluated on a spatial window around each object; every
/// anchor outside all windows has IoU 0 and is negative.
pub fn assign_targets(anchors: &AnchorSet, objects: &[crate::boxes::Object], cfg: &AnchorConfig) -> Targets {
    let n = anchors.len();
    let mut best_iou = vec![0.0f64; n];
    let mut best_gt = vec![usize::MAX; n];
    let mut forced: Vec<Option<usize>> = vec![None; objects.len()];
    let anchor_radius: Vec<f64> = cfg
        .classes
        .iter()
        .map(|ac| 0.5 * ac.size.0.hypot(ac.size.1))
        .collect();
    for (g, obj) in objects.iter().enumerate() {
        let c = obj.class.index();
        let radius = obj.bbox.bev_radius() + anchor_radius[c];
        let mut gt_best: Option<(usize, f64)> = None;
        let mut candidates: Vec<usize> = anchors.near(obj.bbox.cx, obj.bbox.cy, radius, obj.class).collect();
        candidates.sort_unstable();
        for a in candidates {
            let iou = rotated_iou_bev(&anchors.boxes[a], &obj.bbox);
            if iou > best_iou[a] {
                best_iou[a] = iou;
                best_gt[a] = g;
            }
            if iou > 0.0 && gt_best.is_none_or(|(_, b)| iou > b) {
                gt_best = Some((a, iou));
            }
        }
        forced[g] = gt_best.map(|(a, _)| a);
    }
    let mut labels: Vec<AnchorLabel> = (0..n)
        .map(|a| {
            let ac = &cfg.classes[anchors.class_of(a).index()];
            if best_gt[a] != usize::MAX && best_iou[a] >= ac.matched {
                AnchorLabel::Positive(best_gt[a])
            } else if best_iou[a] < ac.unmatched {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();
    for (g, a) in forced.iter().enumerate() {
        if let Some(a) = *a {
            labels[a] = AnchorLabel::Positive(g);
        }
    }
    let mut boxes = vec![[0.0; BOX_DIM]; n];
    let mut dirs = vec![0u8; n];
    for (a, l) in labels.iter().enumerate() {
        if let AnchorLabel::Positive(g) = *l {
            boxes[a] = encode_box(&objects[g].bbox, &anchors.boxes[a]);
            dirs[a] = (objects[g].bbox.yaw >= 0.0) as u8;
        }
    }
    Targets { labels, boxes, dirs }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub in_channels: usize,
    /// Prior foreground probability used to initialize the class bias.
    pub prior: f64,
    pub init_std: f64,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            in_channels: 384,
            prior: 0.01,
            init_std: 0.01,
        }
    }
}

impl HeadSpec {
    pub fn outputs() -> [(&'static str, usize); 3] {
        [
            ("cls", ANCHORS_PER_CELL * NUM_CLASSES),
            ("box", ANCHORS_PER_CELL * BOX_DIM),
            ("dir", ANCHORS_PER_CELL * DIR_BINS),
        ]
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl rand::Rng) {
        let dist = rand_distr::Normal::new(0.0, self.init_std).unwrap();
        for (name, c_out) in Self::outputs() {
            let w = Tensor::from_fn(vec![c_out, self.in_channels, 1, 1], |_| {
                T::from_f64_lossy(rand_distr::Distribution::sample(&dist, rng))
            });
            store.insert(format!("head.{name}.weight"), w);
            let bias = if name == "cls" {
                -((1.0 - self.prior) / self.prior).ln()
            } else {
                0.0
            };
            store.insert(format!("head.{name}.bias"), Tensor::full(vec![c_out], T::from_f64_lossy(bias)));
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    /// `[N, 18, H, W]`
    pub cls: Var,
    /// `[N, 42, H, W]`
    pub boxes: Var,
    /// `[N, 12, H, W]`
    pub dir: Var,
}

pub fn head_forward<T: Scalar>(fwd: &mut Forward<'_, T>, fused: Var) -> Result<HeadOutputs> {
    let mut outs = [fused; 3];
    for (i, (name, _)) in HeadSpec::outputs().into_iter().enumerate() {
        let w = fwd.param(&format!("head.{name}.weight"))?;
        let b = fwd.param(&format!("head.{name}.bias"))?;
        outs[i] = fwd.graph.conv2d(fused, w, Some(b), 1, 0)?;
    }
    Ok(HeadOutputs {
        cls: outs[0],
        boxes: outs[1],
        dir: outs[2],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_beta: f64,
    pub loc_weight: f64,
    pub dir_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            smooth_l1_beta: 1.0 / 9.0,
            loc_weight: 2.0,
            dir_weight: 0.2,
        }
    }
}

/// `ln σ(x)`, stable for large |x|.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid focal loss of one logit and its derivative.
pub fn focal_loss(x: f64, target: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let s = if target { 1.0 } else { -1.0 };
    let alpha_t = if target { alpha } else { 1.0 - alpha };
    let log_pt = log_sigmoid(s * x);
    let pt = log_pt.exp();
    let q = 1.0 - pt;
    let loss = -alpha_t * q.powf(gamma) * log_pt;
    let grad = -alpha_t * s * (q.powf(gamma + 1.0) - gamma * q.powf(gamma) * pt * log_pt);
    (loss, grad)
}

/// Smooth-L1 and its derivative.
pub fn smooth_l1(d: f64, beta: f64) -> (f64, f64) {
    if d.abs() < beta {
        (0.5 * d * d / beta, d / beta)
    } else {
        (d.abs() - 0.5 * beta, d.signum())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossOutput {
    pub total: Var,
    /// Weighted terms; `cls + loc + dir` equals the total.
    pub cls: f64,
    pub loc: f64,
    pub dir: f64,
    pub num_pos: usize,
}

/// Focal classification + sine-trick smooth-L1 regression + direction
/// cross-entropy, all normalized by the positive count (at least 1).
pub fn detection_loss<T: Scalar>(
    graph: &mut Graph<T>,
    out: &HeadOutputs,
    targets: &[Targets],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let shape = graph.shape(out.cls).to_vec();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    if targets.len() != n {
        return Err(Error::config(format!("{} target sets for a batch of {n}", targets.len())));
    }
    let hw = h * w;
    let n_anchor = hw * ANCHORS_PER_CELL;
    for t in targets {
        if t.labels.len() != n_anchor {
            return Err(Error::config(format!(
                "targets cover {} anchors, head predicts {n_anchor}",
                t.labels.len()
            )));
        }
    }
    let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
    let cls_v = graph.value(out.cls).data();
    let box_v = graph.value(out.boxes).data();
    let dir_v = graph.value(out.dir).data();
    let mut g_cls = vec![0.0f64; cls_v.len()];
    let mut g_box = vec![0.0f64; box_v.len()];
    let mut g_dir = vec![0.0f64; dir_v.len()];
    let num_pos: usize = targets.iter().map(Targets::num_positive).sum();
    let norm = num_pos.max(1) as f64;
    let (mut cls_sum, mut loc_sum, mut dir_sum) = (0.0, 0.0, 0.0);

    for (b, t) in targets.iter().enumerate() {
        for (a, label) in t.labels.iter().enumerate() {
            let (cell, local) = (a / ANCHORS_PER_CELL, a % ANCHORS_PER_CELL);
            let at = |ch: usize, channels: usize| (b * channels + ch) * hw + cell;
            let anchor_class = local / ROTATIONS.len();
            let positive = match label {
                AnchorLabel::Ignore => continue,
                AnchorLabel::Positive(_) => true,
                AnchorLabel::Negative => false,
            };
            for k in 0..NUM_CLASSES {
                let i = at(local * NUM_CLASSES + k, ANCHORS_PER_CELL * NUM_CLASSES);
                let (l, g) = focal_loss(f(cls_v[i]), positive && k == anchor_class, cfg.focal_alpha, cfg.focal_gamma);
                cls_sum += l;
                g_cls[i] = g / norm;
            }
            if !positive {
                continue;
            }
            for j in 0..BOX_DIM {
                let i = at(local * BOX_DIM + j, ANCHORS_PER_CELL * BOX_DIM);
                let diff = f(box_v[i]) - t.boxes[a][j];
                let (d, dd) = if j == BOX_DIM - 1 { (diff.sin(), diff.cos()) } else { (diff, 1.0) };
                let (l, g) = smooth_l1(d, cfg.smooth_l1_beta);
                loc_sum += l;
                g_box[i] = cfg.loc_weight * g * dd / norm;
            }
            let i0 = at(local * DIR_BINS, ANCHORS_PER_CELL * DIR_BINS);
            let i1 = at(local * DIR_BINS + 1, ANCHORS_PER_CELL * DIR_BINS);
            let (z0, z1) = (f(dir_v[i0]), f(dir_v[i1]));
            let m = z0.max(z1);
            let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
            let target = t.dirs[a] as usize;
            dir_sum += lse - if target == 1 { z1 } else { z0 };
            let p1 = (z1 - lse).exp();
            let p0 = (z0 - lse).exp();
            g_dir[i0] = cfg.dir_weight * (p0 - (target == 0) as u8 as f64) / norm;
            g_dir[i1] = cfg.dir_weight * (p1 - (target == 1) as u8 as f64) / norm;
        }
    }
    let cls = cls_sum / norm;
    let loc = cfg.loc_weight * loc_sum / norm;
    let dir = cfg.dir_weight * dir_sum / norm;
    let conv = |v: Vec<f64>| v.into_iter().map(T::from_f64_lossy).collect::<Vec<T>>();
    let total = graph.custom_scalar(
        &[out.cls, out.boxes, out.dir],
        T::from_f64_lossy(cls + loc + dir),
        vec![conv(g_cls), conv(g_box), conv(g_dir)],
    )?;
    Ok(LossOutput {
        total,
        cls,
        loc,
        dir,
        num_pos,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Highest-scoring candidates per class entering suppression.
    pub pre_nms_top_k: usize,
    pub max_detections: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.1,
            nms_iou: 0.01,
            pre_nms_top_k: 1000,
            max_detections: 100,
        }
    }
}

/// Maps a decoded yaw into `[0, π)` and back into the half-turn selected by
/// the direction classifier (bin 1 for non-negative yaw).
pub fn correct_direction(yaw: f64, dir_bin: usize) -> f64 {
    let pi = std::f64::consts::PI;
    let r = yaw - (yaw / pi).floor() * pi;
    let r = if r >= pi { r - pi } else { r };
    wrap_angle(if dir_bin == 0 { r - pi } else { r })
}

/// Detections for sample `b` of a batch of head outputs.
pub fn postprocess<T: Scalar>(
    cls: &Tensor<T>,
    boxes: &Tensor<T>,
    dir: &Tensor<T>,
    b: usize,
    anchors: &AnchorSet,
    cfg: &PostprocessConfig,
) -> Result<Vec<Detection>> {
    let s = cls.shape();
    let hw = s[2] * s[3];
    if hw * ANCHORS_PER_CELL != anchors.len() || b >= s[0] {
        return Err(Error::config("head outputs do not match the anchor grid"));
    }
    let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
    let (cv, bv, dv) = (cls.data(), boxes.data(), dir.data());
    let mut per_class: Vec<Vec<(f64, usize)>> = vec![Vec::new(); NUM_CLASSES];
    for a in 0..anchors.len() {
        let (cell, local) = (a / ANCHORS_PER_CELL, a % ANCHORS_PER_CELL);
        let mut best = (f64::NEG_INFINITY, 0);
        for k in 0..NUM_CLASSES {
            let x = f(cv[(b * ANCHORS_PER_CELL * NUM_CLASSES + local * NUM_CLASSES + k) * hw + cell]);
            if x > best.0 {
                best = (x, k);
            }
        }
        let score = sigmoid(best.0);
        if score >= cfg.score_threshold {
            per_class[best.1].push((score, a));
        }
    }
    let mut out = Vec::new();
    for (k, mut cands) in per_class.into_iter().enumerate() {
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        cands.truncate(cfg.pre_nms_top_k);
        let dets: Vec<Detection> = cands
            .into_iter()
            .map(|(score, a)| {
                let (cell, local) = (a / ANCHORS_PER_CELL, a % ANCHORS_PER_CELL);
                let mut delta = [0.0; BOX_DIM];
                for (j, d) in delta.iter_mut().enumerate() {
                    *d = f(bv[(b * ANCHORS_PER_CELL * BOX_DIM + local * BOX_DIM + j) * hw + cell]);
                }
                let mut bbox = decode_box(&delta, &anchors.boxes[a]);
                let d0 = f(dv[(b * ANCHORS_PER_CELL * DIR_BINS + local * DIR_BINS) * hw + cell]);
                let d1 = f(dv[(b * ANCHORS_PER_CELL * DIR_BINS + local * DIR_BINS + 1) * hw + cell]);
                bbox.yaw = correct_direction(bbox.yaw, (d1 > d0) as usize);
                Detection {
                    class: ObjectClass::ALL[k],
                    bbox,
                    score,
                }
            })
            .collect();
        out.extend(nms_bev(&dets, cfg.nms_iou));
    }
    out.sort_by(|x, y| y.score.total_cmp(&x.score));
    out.truncate(cfg.max_detections);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::Object;
    use crate::tensor::BnMode;
    use std::f64::consts::PI;

    #[test]
    fn anchor_grid_at_full_range() {
        let set = generate_anchors(&GridSpec::default(), &AnchorConfig::default()).unwrap();
        assert_eq!(set.len(), 321_408);
        assert_eq!((set.height, set.width), (248, 216));
        let a = set.boxes[0];
        assert!((a.cx - 0.16).abs() < 1e-12 && (a.cy + 39.52).abs() < 1e-12);
        assert_eq!(set.boxes[0].yaw, 0.0);
        assert_eq!(set.boxes[1].yaw, FRAC_PI_2);
        assert_eq!(set.class_of(2), ObjectClass::Pedestrian);
        assert_eq!(set.boxes[6].cx, set.boxes[0].cx + 0.32);
    }

    #[test]
    fn coder_hand_case_and_inverse() {
        let anchor = Box3D::new(0.0, 0.0, -1.0, 1.6, 3.9, 1.56, 0.0);
        assert_eq!(encode_box(&anchor, &anchor), [0.0; 7]);
        let gt = Box3D { cx: 1.0, ..anchor };
        let d = encode_box(&gt, &anchor);
        assert!((d[0] - 0.23722).abs() < 1e-5);
        let g2 = Box3D::new(2.0, -1.0, -0.7, 1.8, 4.2, 1.5, -2.5);
        let back = decode_box(&encode_box(&g2, &anchor), &anchor);
        for (x, y) in [(back.cx, g2.cx), (back.cy, g2.cy), (back.cz, g2.cz), (back.w, g2.w), (back.l, g2.l), (back.h, g2.h), (back.yaw, g2.yaw)] {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn focal_closed_form() {
        let (l, _) = focal_loss(0.0, true, 0.25, 2.0);
        assert!((l - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((l - 0.04332).abs() < 1e-5);
        for &(x, t) in &[(1.3, true), (-0.4, false), (2.0, false), (-30.0, true)] {
            let h = 1e-6;
            let num = (focal_loss(x + h, t, 0.25, 2.0).0 - focal_loss(x - h, t, 0.25, 2.0).0) / (2.0 * h);
            let ana = focal_loss(x, t, 0.25, 2.0).1;
            assert!((num - ana).abs() < 1e-6 * ana.abs().max(1.0), "{x} {t}: {num} vs {ana}");
        }
        assert!(focal_loss(-800.0, true, 0.25, 2.0).0.is_finite());
    }

    #[test]
    fn direction_correction() {
        assert!((correct_direction(0.5, 1) - 0.5).abs() < 1e-12);
        assert!((correct_direction(0.5, 0) - (0.5 - PI)).abs() < 1e-12);
        assert!((correct_direction(0.5 - PI, 1) - 0.5).abs() < 1e-12);
        assert!((correct_direction(-2.0 + 4.0 * PI, 0) + 2.0).abs() < 1e-9);
    }

    fn small_grid() -> GridSpec {
        GridSpec {
            x_range: (0.0, 5.12),
            y_range: (0.0, 5.12),
            ..Default::default()
        }
    }

    #[test]
    fn assignment_basics() {
        let cfg = AnchorConfig::default();
        let anchors = generate_anchors(&small_grid(), &cfg).unwrap();
        let empty = assign_targets(&anchors, &[], &cfg);
        assert!(empty.labels.iter().all(|l| *l == AnchorLabel::Negative));
        let a = anchors.boxes[40 * 6 + 1];
        let t = assign_targets(&anchors, &[Object { class: ObjectClass::Car, bbox: a }], &cfg);
        assert_eq!(t.labels[40 * 6 + 1], AnchorLabel::Positive(0));
        assert_eq!(t.boxes[40 * 6 + 1], [0.0; 7]);
        assert_eq!(t.dirs[40 * 6 + 1], 1);
        assert!(t.labels.iter().enumerate().all(|(i, l)| match l {
            AnchorLabel::Positive(_) => anchors.class_of(i) == ObjectClass::Car,
            _ => true,
        }));
    }

    fn head_store(h: usize, w: usize) -> (ParamStore<f64>, Tensor<f64>) {
        let mut store = ParamStore::new();
        let spec = HeadSpec { in_channels: 4, ..Default::default() };
        spec.init(&mut store, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
        (store, Tensor::from_fn(vec![1, 4, h, w], |i| ((i * 37) % 11) as f64 * 0.1 - 0.5))
    }

    #[test]
    fn head_counts_and_shapes() {
        let mut store = ParamStore::<f32>::new();
        HeadSpec::default().init(&mut store, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
        assert_eq!(store.num_trainable("head."), 27_720);
        let b = store.get("head.cls.bias").unwrap().data()[0] as f64;
        assert!((b + 4.595).abs() < 1e-3);
        let (mut store, x) = head_store(3, 5);
        let mut g = Graph::new();
        let mut fwd = Forward { graph: &mut g, store: &mut store, mode: BnMode::Eval };
        let xv = fwd.graph.input(x);
        let out = head_forward(&mut fwd, xv).unwrap();
        assert_eq!(g.shape(out.cls), &[1, 18, 3, 5]);
        assert_eq!(g.shape(out.boxes), &[1, 42, 3, 5]);
        assert_eq!(g.shape(out.dir), &[1, 12, 3, 5]);
    }

    #[test]
    fn exact_regression_has_zero_loc_loss() {
        let grid = GridSpec {
            x_range: (0.0, 1.28),
            y_range: (0.0, 0.96),
            ..Default::default()
        };
        let cfg = AnchorConfig::default();
        let anchors = generate_anchors(&grid, &cfg).unwrap();
        let obj = Object {
            class: ObjectClass::Car,
            bbox: Box3D::new(0.5, 0.4, -1.0, 1.6, 3.9, 1.56, 0.1),
        };
        let t = assign_targets(&anchors, &[obj], &cfg);
        assert!(t.num_positive() > 0);
        let (h, w) = (anchors.height, anchors.width);
        let mut boxes = Tensor::<f64>::zeros(vec![1, 42, h, w]);
        for (a, l) in t.labels.iter().enumerate() {
            if let AnchorLabel::Positive(_) = l {
                let (cell, local) = (a / 6, a % 6);
                for j in 0..7 {
                    boxes.data_mut()[(local * 7 + j) * h * w + cell] = t.boxes[a][j] + if j == 6 { PI } else { 0.0 };
                }
            }
        }
        let mut g = Graph::new();
        let out = HeadOutputs {
            cls: g.input(Tensor::zeros(vec![1, 18, h, w])),
            boxes: g.input(boxes),
            dir: g.input(Tensor::zeros(vec![1, 12, h, w])),
        };
        let loss = detection_loss(&mut g, &out, &[t], &LossConfig::default()).unwrap();
        assert!(loss.loc.abs() < 1e-20, "{}", loss.loc);
        assert!(loss.cls > 0.0 && loss.dir > 0.0);
    }

    #[test]
    fn empty_logits_give_no_detections() {
        let grid = GridSpec {
            x_range: (0.0, 1.28),
            y_range: (0.0, 0.96),
            ..Default::default()
        };
        let anchors = generate_anchors(&grid, &AnchorConfig::default()).unwrap();
        let (h, w) = (anchors.height, anchors.width);
        let mut cls = Tensor::<f32>::full(vec![1, 18, h, w], -50.0);
        let boxes = Tensor::<f32>::zeros(vec![1, 42, h, w]);
        let dir = Tensor::<f32>::zeros(vec![1, 12, h, w]);
        let cfg = PostprocessConfig::default();
        assert!(postprocess(&cls, &boxes, &dir, 0, &anchors, &cfg).unwrap().is_empty());
        cls.data_mut()[(2 * 3 + 1) * h * w + 3] = 4.0;
        let dets = postprocess(&cls, &boxes, &dir, 0, &anchors, &cfg).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class, ObjectClass::Pedestrian);
        let a = anchors.boxes[3 * 6 + 2];
        assert_eq!((dets[0].bbox.cx, dets[0].bbox.cy), (a.cx, a.cy));
    }
}
