//! Point cloud and label I/O, plus the synthetic scene generator used for
//! desk-scale training.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::boxes::{wrap_angle, Box3D, Detection, Object, ObjectClass};
use crate::error::{Error, Result};

/// One lidar return.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    /// Reflectance in `[0, 1]`.
    pub r: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, r: f32) -> Self {
        Self { x, y, z, r }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.r.is_finite()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A point cloud with its ground-truth objects.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledScene {
    pub cloud: PointCloud,
    pub objects: Vec<Object>,
}

/// Decodes little-endian `f32` quadruples `(x, y, z, r)` with no header.
pub fn decode_kitti_bin(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    if bytes.len() % 16 != 0 {
        return Err(Error::format(
            path,
            None,
            format!("length {} is not a multiple of 16 bytes", bytes.len()),
        ));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for chunk in bytes.chunks_exact(16) {
        let f = |i: usize| f32::from_le_bytes(chunk[4 * i..4 * i + 4].try_into().unwrap());
        let p = Point::new(f(0), f(1), f(2), f(3));
        if !p.is_finite() {
            return Err(Error::format(path, None, format!("non-finite point {p:?}")));
        }
        points.push(p);
    }
    Ok(PointCloud { points })
}

pub fn read_kitti_bin(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_kitti_bin(&bytes, path)
}

pub fn encode_kitti_bin(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.r] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_kitti_bin(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_kitti_bin(cloud)).map_err(|e| Error::io(path, e))
}

pub const LABEL_HEADER: &str = "class,cx,cy,cz,w,l,h,yaw";
pub const PREDICTION_HEADER: &str = "class,cx,cy,cz,w,l,h,yaw,score";

fn box_fields(b: &Box3D) -> String {
    format!("{},{},{},{},{},{},{}", b.cx, b.cy, b.cz, b.w, b.l, b.h, b.yaw)
}

pub fn format_labels(objects: &[Object]) -> String {
    let mut s = String::from(LABEL_HEADER);
    s.push('\n');
    for o in objects {
        let _ = writeln!(s, "{},{}", o.class, box_fields(&o.bbox));
    }
    s
}

pub fn format_predictions(dets: &[Detection]) -> String {
    let mut s = String::from(PREDICTION_HEADER);
    s.push('\n');
    for d in dets {
        let _ = writeln!(s, "{},{},{}", d.class, box_fields(&d.bbox), d.score);
    }
    s
}

/// Parses `class,cx,cy,cz,w,l,h,yaw[,score]` rows. Yaw is wrapped to `(−π, π]`.
fn parse_rows(text: &str, path: &Path, with_score: bool) -> Result<Vec<(ObjectClass, Box3D, f64)>> {
    let header = if with_score { PREDICTION_HEADER } else { LABEL_HEADER };
    let fields = if with_score { 9 } else { 8 };
    let mut rows = Vec::new();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        None => return Ok(rows),
        Some((_, h)) if h.trim() == header => {}
        Some((_, h)) => {
            return Err(Error::format(path, Some(1), format!("expected header `{header}`, found `{h}`")));
        }
    }
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != fields {
            return Err(Error::format(
                path,
                Some(lineno),
                format!("expected {fields} fields, found {}", parts.len()),
            ));
        }
        let class: ObjectClass = parts[0].parse().map_err(|e| Error::format(path, Some(lineno), e))?;
        let mut nums = [0.0f64; 8];
        for (slot, raw) in nums.iter_mut().zip(&parts[1..]) {
            *slot = raw
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::format(path, Some(lineno), format!("bad number `{raw}`")))?;
        }
        let [cx, cy, cz, w, l, h, yaw, score] = nums;
        if w <= 0.0 || l <= 0.0 || h <= 0.0 {
            return Err(Error::format(path, Some(lineno), "box sizes must be positive"));
        }
        rows.push((class, Box3D::new(cx, cy, cz, w, l, h, wrap_angle(yaw)), score));
    }
    Ok(rows)
}

pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<Object>> {
    Ok(parse_rows(text, path, false)?
        .into_iter()
        .map(|(class, bbox, _)| Object { class, bbox })
        .collect())
}

pub fn parse_predictions(text: &str, path: &Path) -> Result<Vec<Detection>> {
    Ok(parse_rows(text, path, true)?
        .into_iter()
        .map(|(class, bbox, score)| Detection { class, bbox, score })
        .collect())
}

pub fn write_labels(path: impl AsRef<Path>, objects: &[Object]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_labels(objects)).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<Object>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, path)
}

pub fn write_predictions(path: impl AsRef<Path>, dets: &[Detection]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_predictions(dets)).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(&text, path)
}

/// Parameters of the synthetic scene generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_boxes: usize,
    /// Relative frequency of Car, Pedestrian, Cyclist.
    pub class_mix: [f64; 3],
    /// Standard deviation of the point jitter in meters (truncated at 2σ).
    pub noise: f64,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub ground_z: f64,
    pub ground_points: usize,
    pub clutter_points: usize,
    /// Surface points per box are drawn uniformly from this range (lower bound ≥ 30).
    pub points_per_box: (usize, usize),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_boxes: 6,
            class_mix: [1.0, 1.0, 1.0],
            noise: 0.02,
            x_range: (0.0, 69.12),
            y_range: (-39.68, 39.68),
            ground_z: -1.73,
            ground_points: 4000,
            clutter_points: 300,
            points_per_box: (60, 160),
        }
    }
}

/// Where a synthetic point came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointSource {
    Ground,
    Clutter,
    /// Surface of the object with this index.
    Object(usize),
}

/// A synthetic scene plus the origin of every point.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub scene: LabeledScene,
    pub sources: Vec<PointSource>,
}

const PLACEMENT_GAP: f64 = 0.5;
const MAX_PLACEMENT_TRIES: usize = 2000;

/// Samples a labeled scene: boxes with class-typical sizes resting on a
/// ground plane, points on their side and top faces, the ground itself, and
/// uniform clutter outside every box. Deterministic in `seed`.
///
/// If the range is too crowded to place `n_boxes` separated boxes, fewer are returned.
pub fn synth_scene(seed: u64, cfg: &SynthConfig) -> SynthScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total_mix: f64 = cfg.class_mix.iter().sum();
    let mut objects: Vec<Object> = Vec::with_capacity(cfg.n_boxes);
    let mut tries = 0;
    while objects.len() < cfg.n_boxes && tries < MAX_PLACEMENT_TRIES {
        tries += 1;
        let mut pick = rng.random::<f64>() * total_mix;
        let mut class = ObjectClass::Cyclist;
        for (c, &w) in ObjectClass::ALL.iter().zip(&cfg.class_mix) {
            if pick < w {
                class = *c;
                break;
            }
            pick -= w;
        }
        let (w0, l0, h0) = class.typical_size();
        let jitter = |rng: &mut ChaCha8Rng, v: f64| v * rng.random_range(0.95..1.05);
        let (w, l, h) = (jitter(&mut rng, w0), jitter(&mut rng, l0), jitter(&mut rng, h0));
        let yaw = wrap_angle(rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
        let candidate = Box3D::new(
            rng.random_range(cfg.x_range.0..cfg.x_range.1),
            rng.random_range(cfg.y_range.0..cfg.y_range.1),
            cfg.ground_z + h / 2.0,
            w,
            l,
            h,
            yaw,
        );
        let margin = 2.0 * cfg.noise + 0.05;
        let inside = candidate.bev_corners().iter().all(|[x, y]| {
            *x >= cfg.x_range.0 + margin
                && *x <= cfg.x_range.1 - margin
                && *y >= cfg.y_range.0 + margin
                && *y <= cfg.y_range.1 - margin
        });
        let separated = objects.iter().all(|o| {
            let d = (o.bbox.cx - candidate.cx).hypot(o.bbox.cy - candidate.cy);
            d > o.bbox.bev_radius() + candidate.bev_radius() + PLACEMENT_GAP
        });
        if inside && separated {
            objects.push(Object { class, bbox: candidate });
        }
    }

    let noise = Normal::new(0.0, cfg.noise.max(0.0)).unwrap();
    let jit = |rng: &mut ChaCha8Rng| -> f64 {
        let v: f64 = noise.sample(rng);
        v.clamp(-2.0 * cfg.noise, 2.0 * cfg.noise)
    };
    let mut points = Vec::new();
    let mut sources = Vec::new();

    let (lo, hi) = cfg.points_per_box;
    let lo = lo.max(30);
    for (idx, obj) in objects.iter().enumerate() {
        let b = &obj.bbox;
        let count = rng.random_range(lo..=hi.max(lo));
        let reflect = match obj.class {
            ObjectClass::Car => 0.6,
            ObjectClass::Pedestrian => 0.3,
            ObjectClass::Cyclist => 0.45,
        };
        // side faces (two of length l, two of width w) and the top face, area-weighted
        let areas = [b.l * b.h, b.l * b.h, b.w * b.h, b.w * b.h, b.l * b.w];
        let total: f64 = areas.iter().sum();
        for _ in 0..count {
            let mut pick = rng.random::<f64>() * total;
            let mut face = 4;
            for (f, a) in areas.iter().enumerate() {
                if pick < *a {
                    face = f;
                    break;
                }
                pick -= a;
            }
            let u: f64 = rng.random_range(-0.5..0.5);
            let v: f64 = rng.random_range(-0.5..0.5);
            let (lx, ly, lz) = match face {
                0 => (u * b.l, b.w / 2.0, v * b.h),
                1 => (u * b.l, -b.w / 2.0, v * b.h),
                2 => (b.l / 2.0, u * b.w, v * b.h),
                3 => (-b.l / 2.0, u * b.w, v * b.h),
                _ => (u * b.l, v * b.w, b.h / 2.0),
            };
            let [x, y, z] = b.from_local(lx + jit(&mut rng), ly + jit(&mut rng), lz + jit(&mut rng));
            let r = (reflect + rng.random_range(-0.1..0.1f64)).clamp(0.0, 1.0);
            points.push(Point::new(x as f32, y as f32, z as f32, r as f32));
            sources.push(PointSource::Object(idx));
        }
    }

    for _ in 0..cfg.ground_points {
        let x = rng.random_range(cfg.x_range.0..cfg.x_range.1);
        let y = rng.random_range(cfg.y_range.0..cfg.y_range.1);
        let z = cfg.ground_z + jit(&mut rng);
        let r = rng.random_range(0.0..0.2f64);
        points.push(Point::new(x as f32, y as f32, z as f32, r as f32));
        sources.push(PointSource::Ground);
    }

    let mut placed = 0;
    let mut attempts = 0;
    while placed < cfg.clutter_points && attempts < cfg.clutter_points * 20 {
        attempts += 1;
        let x = rng.random_range(cfg.x_range.0..cfg.x_range.1);
        let y = rng.random_range(cfg.y_range.0..cfg.y_range.1);
        let z = cfg.ground_z + rng.random_range(0.1..2.5);
        if objects.iter().any(|o| o.bbox.contains(x, y, z, 0.3)) {
            continue;
        }
        let r = rng.random_range(0.0..1.0f64);
        points.push(Point::new(x as f32, y as f32, z as f32, r as f32));
        sources.push(PointSource::Clutter);
        placed += 1;
    }

    SynthScene {
        scene: LabeledScene {
            cloud: PointCloud { points },
            objects,
        },
        sources,
    }
}
