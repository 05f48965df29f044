//! Finite-difference checks of every differentiable operation and of the
//! composed detection loss, at several random points each.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::{Box3D, Object, ObjectClass};
use crate::detector::{assign_targets, detection_loss, generate_anchors, AnchorConfig, HeadOutputs, LossConfig, ANCHORS_PER_CELL, BOX_DIM, DIR_BINS, NUM_CLASSES};
use crate::error::Result;
use crate::pillar::GridSpec;
use crate::tensor::{grad_check, BnMode, BnStats, Graph, Tensor, Var};

pub const OP_TOLERANCE: f64 = 1e-5;
pub const COMPOSED_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;
const COORDS: usize = 24;

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: &'static str,
    /// Worst relative error over all points.
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub points: usize,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).with_grad()
}

/// Values bounded away from zero, for kinked activations.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
    .with_grad()
}

/// A fixed random projection turns any output into a scalar with a
/// non-degenerate gradient.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let n = g.value(y).numel();
    let w = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    g.dot(y, w)
}

type Case = fn(&mut ChaCha8Rng, u64) -> Result<f64>;

fn conv2d(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let stride = 1 + (seed as usize % 2);
    let inputs = [
        rand_tensor(rng, vec![1, 2, 5, 5]),
        rand_tensor(rng, vec![3, 2, 3, 3]),
        rand_tensor(rng, vec![3]),
    ];
    let r = grad_check(&inputs, STEP, COORDS, |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), stride, 1)?;
        project(g, y, seed)
    })?;
    Ok(r.max_rel_error)
}

fn conv_transpose2d(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let s = [1, 2, 4][seed as usize % 3];
    let inputs = [rand_tensor(rng, vec![1, 3, 3, 2]), rand_tensor(rng, vec![3, 2, s, s])];
    let r = grad_check(&inputs, STEP, COORDS, |g, v| {
        let y = g.conv_transpose2d(v[0], v[1], s)?;
        project(g, y, seed)
    })?;
    Ok(r.max_rel_error)
}

fn batch_norm(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let inputs = [
        rand_tensor(rng, vec![2, 3, 2, 3]),
        rand_tensor(rng, vec![3]),
        rand_tensor(rng, vec![3]),
    ];
    let r = grad_check(&inputs, STEP, COORDS, |g, v| {
        let mut stats = BnStats::new(3, 1e-3, 0.01);
        let y = g.batch_norm(v[0], v[1], v[2], &mut stats, BnMode::Train)?;
        project(g, y, seed)
    })?;
    Ok(r.max_rel_error)
}

fn relu(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let inputs = [rand_away_from_zero(rng, vec![2, 3, 4])];
    let r = grad_check(&inputs, STEP, COORDS, |g, v| {
        let y = g.relu(v[0])?;
        project(g, y, seed)
    })?;
    Ok(r.max_rel_error)
}

fn avg_pool(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let inputs = [rand_tensor(rng, vec![1, 2, 4, 6])];
    let r = grad_check(&inputs, STEP, COORDS, |g, v| {
        let y = g.avg_pool2x2(v[0])?;
        project(g, y, seed)
    })?;
    Ok(r.max_rel_error)
}

fn channel_concat(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let inputs = [rand_tensor(rng, vec![2, 1, 3, 2]), rand_tensor(rng, vec![2, 3, 3, 2])];
    let r = grad_check(&inputs, STEP, COORDS, |g, v| {
        let y = g.channel_concat(&[v[0], v[1], v[0]])?;
        project(g, y, seed)
    })?;
    Ok(r.max_rel_error)
}

fn linear(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let inputs = [
        rand_tensor(rng, vec![5, 4]),
        rand_tensor(rng, vec![4, 3]),
        rand_tensor(rng, vec![3]),
    ];
    let r = grad_check(&inputs, STEP, COORDS, |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]))?;
        project(g, y, seed)
    })?;
    Ok(r.max_rel_error)
}

fn max_over_axis(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let inputs = [rand_tensor(rng, vec![4, 5, 3])];
    let mask: Vec<bool> = (0..20).map(|i| i % 5 < 1 + i / 5).collect();
    let r = grad_check(&inputs, STEP, COORDS, |g, v| {
        let y = g.max_over_axis(v[0], 1, Some(&mask))?;
        project(g, y, seed)
    })?;
    Ok(r.max_rel_error)
}

fn scatter(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let inputs = [rand_tensor(rng, vec![3, 4])];
    let coords = [[0, 0, 1], [0, 2, 3], [1, 1, 0]];
    let r = grad_check(&inputs, STEP, COORDS, |g, v| {
        let y = g.scatter_to_grid(v[0], &coords, 2, 3, 4)?;
        project(g, y, seed)
    })?;
    Ok(r.max_rel_error)
}

fn conv_bn_relu(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let inputs = [
        rand_tensor(rng, vec![1, 2, 4, 4]),
        rand_tensor(rng, vec![3, 2, 3, 3]),
        rand_tensor(rng, vec![3]),
        rand_tensor(rng, vec![3]),
    ];
    let r = grad_check(&inputs, STEP, COORDS, |g, v| {
        let y = g.conv2d(v[0], v[1], None, 1, 1)?;
        let mut stats = BnStats::new(3, 1e-3, 0.01);
        let y = g.batch_norm(y, v[2], v[3], &mut stats, BnMode::Train)?;
        let y = g.relu(y)?;
        project(g, y, seed)
    })?;
    Ok(r.max_rel_error)
}

/// Shared features through the three 1×1 head convs into the full loss.
fn detection_loss_case(rng: &mut ChaCha8Rng, _seed: u64) -> Result<f64> {
    let grid = GridSpec {
        x_range: (0.0, 1.28),
        y_range: (0.0, 1.28),
        ..Default::default()
    };
    let cfg = AnchorConfig::default();
    let anchors = generate_anchors(&grid, &cfg)?;
    let objects: Vec<Object> = ObjectClass::ALL
        .iter()
        .map(|&class| {
            let (w, l, h) = class.typical_size();
            Object {
                class,
                bbox: Box3D::new(
                    rng.random_range(0.2..1.1),
                    rng.random_range(0.2..1.1),
                    rng.random_range(-1.2..-0.4),
                    w * rng.random_range(0.9..1.1),
                    l * rng.random_range(0.9..1.1),
                    h,
                    rng.random_range(-3.0..3.0),
                ),
            }
        })
        .collect();
    let targets = assign_targets(&anchors, &objects, &cfg);
    let (h, w) = (anchors.height, anchors.width);
    let c = 4;
    let scaled = |rng: &mut ChaCha8Rng, shape: Vec<usize>, s: f64| {
        let t = rand_tensor(rng, shape);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * s).collect()).unwrap().with_grad()
    };
    let inputs = [
        rand_tensor(rng, vec![1, c, h, w]),
        scaled(rng, vec![ANCHORS_PER_CELL * NUM_CLASSES, c, 1, 1], 1.0),
        scaled(rng, vec![ANCHORS_PER_CELL * NUM_CLASSES], 1.0),
        scaled(rng, vec![ANCHORS_PER_CELL * BOX_DIM, c, 1, 1], 0.3),
        scaled(rng, vec![ANCHORS_PER_CELL * BOX_DIM], 0.3),
        scaled(rng, vec![ANCHORS_PER_CELL * DIR_BINS, c, 1, 1], 1.0),
        scaled(rng, vec![ANCHORS_PER_CELL * DIR_BINS], 1.0),
    ];
    let loss_cfg = LossConfig::default();
    let r = grad_check(&inputs, STEP, COORDS, |g, v| {
        let out = HeadOutputs {
            cls: g.conv2d(v[0], v[1], Some(v[2]), 1, 0)?,
            boxes: g.conv2d(v[0], v[3], Some(v[4]), 1, 0)?,
            dir: g.conv2d(v[0], v[5], Some(v[6]), 1, 0)?,
        };
        Ok(detection_loss(g, &out, std::slice::from_ref(&targets), &loss_cfg)?.total)
    })?;
    Ok(r.max_rel_error)
}

pub const CASES: &[(&str, Case, f64)] = &[
    ("conv2d", conv2d, OP_TOLERANCE),
    ("conv_transpose2d", conv_transpose2d, OP_TOLERANCE),
    ("batch_norm", batch_norm, OP_TOLERANCE),
    ("relu", relu, OP_TOLERANCE),
    ("avg_pool2x2", avg_pool, OP_TOLERANCE),
    ("channel_concat", channel_concat, OP_TOLERANCE),
    ("linear_map", linear, OP_TOLERANCE),
    ("max_over_axis", max_over_axis, OP_TOLERANCE),
    ("scatter_to_grid", scatter, OP_TOLERANCE),
    ("conv_bn_relu", conv_bn_relu, COMPOSED_TOLERANCE),
    ("detection_loss", detection_loss_case, COMPOSED_TOLERANCE),
];

/// Runs every case at `points` random points drawn from `seed`.
pub fn run_suite(seed: u64, points: usize) -> Result<Vec<GradCase>> {
    CASES
        .iter()
        .enumerate()
        .map(|(i, &(name, case, tolerance))| {
            let mut worst = 0.0f64;
            for p in 0..points {
                let point_seed = seed.wrapping_mul(31).wrapping_add((i * 1000 + p) as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(point_seed);
                worst = worst.max(case(&mut rng, point_seed)?);
            }
            Ok(GradCase {
                name,
                max_rel_error: worst,
                tolerance,
                points,
            })
        })
        .collect()
}

/// Fixed-width pass/fail table.
pub fn render(cases: &[GradCase]) -> String {
    let mut s = format!("{:<20} {:>12} {:>10} {:>7}  result\n", "op", "max rel err", "tolerance", "points");
    for c in cases {
        s.push_str(&format!(
            "{:<20} {:>12.3e} {:>10.0e} {:>7}  {}\n",
            c.name,
            c.max_rel_error,
            c.tolerance,
            c.points,
            if c.passed() { "pass" } else { "FAIL" }
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_point_per_case_passes() {
        for c in run_suite(1, 1).unwrap() {
            assert!(c.passed(), "{} {:e}", c.name, c.max_rel_error);
        }
    }
}
