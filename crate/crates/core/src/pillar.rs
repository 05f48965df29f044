//! Pillar encoder: grid assignment, point decoration, the per-point MLP with
//! max pooling, and scattering into the BEV pseudo-image.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Forward, ParamStore};
use crate::pointcloud::{Point, PointCloud};
use crate::tensor::{Scalar, Tensor, Var};

/// Raw point channels `(x, y, z, r)`.
pub const RAW_FEATURES: usize = 4;
/// Decorated channels: raw, offsets from the pillar mean, offsets from the cell center.
pub const DECORATED_FEATURES: usize = 9;

/// Discretization of the detection range into vertical columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub pillar_size: (f64, f64),
    pub max_points_per_pillar: usize,
    pub max_pillars: usize,
    pub feature_channels: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            x_range: (0.0, 69.12),
            y_range: (-39.68, 39.68),
            z_range: (-3.0, 1.0),
            pillar_size: (0.16, 0.16),
            max_points_per_pillar: 32,
            max_pillars: 12000,
            feature_channels: 64,
        }
    }
}

fn cells(range: (f64, f64), size: f64, axis: &str) -> Result<usize> {
    let extent = range.1 - range.0;
    if !(size > 0.0) || !(extent > 0.0) {
        return Err(Error::config(format!("grid {axis} range {range:?} / size {size} must be positive")));
    }
    let n = (extent / size).round();
    if (n * size - extent).abs() > 1e-6 * extent.max(1.0) {
        return Err(Error::config(format!(
            "grid {axis} extent {extent} is not a multiple of the pillar size {size}"
        )));
    }
    Ok(n as usize)
}

impl GridSpec {
    /// `(columns along x, rows along y)`.
    pub fn dims(&self) -> Result<(usize, usize)> {
        if self.z_range.1 <= self.z_range.0 {
            return Err(Error::config(format!("grid z range {:?} is empty", self.z_range)));
        }
        if self.max_points_per_pillar == 0 || self.max_pillars == 0 || self.feature_channels == 0 {
            return Err(Error::config("grid limits and feature channels must be positive"));
        }
        Ok((
            cells(self.x_range, self.pillar_size.0, "x")?,
            cells(self.y_range, self.pillar_size.1, "y")?,
        ))
    }

    /// Cell `(row, col)` of a point, or `None` outside the half-open ranges.
    pub fn cell_of(&self, p: &Point) -> Option<(usize, usize)> {
        let (nx, ny) = self.dims().ok()?;
        let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
        let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo && v < hi;
        if !(inside(x, self.x_range) && inside(y, self.y_range) && inside(z, self.z_range)) {
            return None;
        }
        let col = (((x - self.x_range.0) / self.pillar_size.0).floor() as usize).min(nx - 1);
        let row = (((y - self.y_range.0) / self.pillar_size.1).floor() as usize).min(ny - 1);
        Some((row, col))
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_range.0 + (col as f64 + 0.5) * self.pillar_size.0,
            self.y_range.0 + (row as f64 + 0.5) * self.pillar_size.1,
        )
    }
}

/// Whether the random pillar cap applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PillarMode {
    /// Keep at most `max_pillars` non-empty pillars.
    Train,
    /// Keep every non-empty pillar.
    Inference,
}

/// Points grouped by cell before decoration.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPillars {
    /// `[P, max_points, 4]` row-major; unused slots are zero.
    pub points: Vec<[f32; RAW_FEATURES]>,
    /// `(row, col)` per pillar, strictly increasing in `row·W + col`.
    pub coords: Vec<(usize, usize)>,
    pub counts: Vec<usize>,
    pub max_points: usize,
}

impl RawPillars {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

fn point_order(a: &Point, b: &Point) -> std::cmp::Ordering {
    a.x.total_cmp(&b.x)
        .then(a.y.total_cmp(&b.y))
        .then(a.z.total_cmp(&b.z))
        .then(a.r.total_cmp(&b.r))
}

/// Assigns points to pillars.
///
/// Pillars are ordered by cell index and points inside a pillar by value, so
/// the result depends on the point set but not on its order. Pillars holding
/// more than `max_points_per_pillar` points keep a seeded uniform subset, as
/// does the pillar set itself when it exceeds `max_pillars` in training mode.
pub fn pillarize(cloud: &PointCloud, grid: &GridSpec, seed: u64, mode: PillarMode) -> Result<RawPillars> {
    let (nx, _) = grid.dims()?;
    let mut keyed: Vec<(usize, Point)> = cloud
        .points
        .iter()
        .filter_map(|p| grid.cell_of(p).map(|(r, c)| (r * nx + c, *p)))
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| point_order(&a.1, &b.1)));

    let mut groups: Vec<(usize, &[(usize, Point)])> = Vec::new();
    let mut start = 0;
    while start < keyed.len() {
        let cell = keyed[start].0;
        let end = start + keyed[start..].iter().take_while(|(c, _)| *c == cell).count();
        groups.push((cell, &keyed[start..end]));
        start = end;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if mode == PillarMode::Train && groups.len() > grid.max_pillars {
        let mut keep = sample(&mut rng, groups.len(), grid.max_pillars).into_vec();
        keep.sort_unstable();
        groups = keep.into_iter().map(|i| groups[i]).collect();
    }

    let cap = grid.max_points_per_pillar;
    let mut out = RawPillars {
        points: vec![[0.0; RAW_FEATURES]; groups.len() * cap],
        coords: Vec::with_capacity(groups.len()),
        counts: Vec::with_capacity(groups.len()),
        max_points: cap,
    };
    for (p, (cell, members)) in groups.iter().enumerate() {
        let chosen: Vec<usize> = if members.len() > cap {
            let mut idx = sample(&mut rng, members.len(), cap).into_vec();
            idx.sort_unstable();
            idx
        } else {
            (0..members.len()).collect()
        };
        for (slot, &i) in chosen.iter().enumerate() {
            let pt = members[i].1;
            out.points[p * cap + slot] = [pt.x, pt.y, pt.z, pt.r];
        }
        out.coords.push((cell / nx, cell % nx));
        out.counts.push(chosen.len());
    }
    Ok(out)
}

/// Location of a pillar in a (possibly batched) pseudo-image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PillarCoord {
    pub sample: usize,
    pub row: usize,
    pub col: usize,
}

/// Decorated pillars ready for the encoder network.
#[derive(Clone, Debug, PartialEq)]
pub struct PillarBatch {
    /// `[P, max_points, 9]`.
    pub features: Tensor<f32>,
    pub coords: Vec<PillarCoord>,
    pub counts: Vec<usize>,
    pub samples: usize,
}

impl PillarBatch {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn max_points(&self) -> usize {
        self.features.shape()[1]
    }

    /// Slot validity mask `[P, max_points]`.
    pub fn mask(&self) -> Vec<bool> {
        let m = self.max_points();
        self.counts
            .iter()
            .flat_map(|&c| (0..m).map(move |s| s < c))
            .collect()
    }

    /// Concatenates single-scene batches, renumbering samples in order.
    pub fn stack(batches: &[PillarBatch]) -> Result<PillarBatch> {
        let first = batches.first().ok_or_else(|| Error::config("cannot stack zero pillar batches"))?;
        let (m, f) = (first.features.shape()[1], first.features.shape()[2]);
        let mut data = Vec::new();
        let mut coords = Vec::new();
        let mut counts = Vec::new();
        let mut offset = 0;
        for b in batches {
            if b.features.shape()[1..] != [m, f] {
                return Err(Error::config("pillar batches disagree on feature layout"));
            }
            data.extend_from_slice(b.features.data());
            coords.extend(b.coords.iter().map(|c| PillarCoord {
                sample: c.sample + offset,
                ..*c
            }));
            counts.extend_from_slice(&b.counts);
            offset += b.samples;
        }
        let p = counts.len();
        Ok(PillarBatch {
            features: features_tensor(p, m, f, data)?,
            coords,
            counts,
            samples: offset,
        })
    }
}

/// A `[P, m, f]` tensor; zero pillars are represented by a `[0, m, f]`-sized empty buffer.
fn features_tensor(p: usize, m: usize, f: usize, data: Vec<f32>) -> Result<Tensor<f32>> {
    if p == 0 {
        // Tensor forbids zero dims; keep one all-zero pillar-shaped row out of band.
        return Ok(Tensor::zeros(vec![1, m, f]).reshape(vec![1, m, f])?);
    }
    Tensor::new(vec![p, m, f], data)
}

/// Expands raw `(x, y, z, r)` slots into the 9 decorated channels
/// `(x, y, z, r, x−x̄, y−ȳ, z−z̄, x−x_c, y−y_c)`; padded slots stay zero.
pub fn decorate(raw: &RawPillars, grid: &GridSpec) -> Result<PillarBatch> {
    let m = raw.max_points;
    let mut data = vec![0.0f32; raw.len() * m * DECORATED_FEATURES];
    for (p, (&(row, col), &count)) in raw.coords.iter().zip(&raw.counts).enumerate() {
        if count == 0 || count > m {
            return Err(Error::Invariant(format!("pillar {p} holds {count} points")));
        }
        let slots = &raw.points[p * m..p * m + count];
        let mut mean = [0.0f64; 3];
        for s in slots {
            for a in 0..3 {
                mean[a] += s[a] as f64;
            }
        }
        mean.iter_mut().for_each(|v| *v /= count as f64);
        let (xc, yc) = grid.cell_center(row, col);
        for (i, s) in slots.iter().enumerate() {
            let d = &mut data[(p * m + i) * DECORATED_FEATURES..(p * m + i + 1) * DECORATED_FEATURES];
            d[..4].copy_from_slice(s);
            for a in 0..3 {
                d[4 + a] = (s[a] as f64 - mean[a]) as f32;
            }
            d[7] = (s[0] as f64 - xc) as f32;
            d[8] = (s[1] as f64 - yc) as f32;
        }
    }
    Ok(PillarBatch {
        features: features_tensor(raw.len(), m, DECORATED_FEATURES, data)?,
        coords: raw
            .coords
            .iter()
            .map(|&(row, col)| PillarCoord { sample: 0, row, col })
            .collect(),
        counts: raw.counts.clone(),
        samples: 1,
    })
}

/// Parameters of the pillar feature network.
pub fn init_encoder<T: Scalar>(store: &mut ParamStore<T>, channels: usize, rng: &mut impl rand::Rng) {
    let std = (2.0 / channels as f64).sqrt();
    let dist = rand_distr::Normal::new(0.0, std).unwrap();
    store.insert(
        "encoder.pfn.linear.weight",
        Tensor::from_fn(vec![DECORATED_FEATURES, channels], |_| {
            T::from_f64_lossy(rand_distr::Distribution::sample(&dist, rng))
        }),
    );
    store.insert("encoder.pfn.linear.bias", Tensor::zeros(vec![channels]));
    store.insert_bn("encoder.pfn.bn", channels);
}

/// `linear(9→C) → batch norm → relu` per point, then a masked max over the
/// point slots. Returns `[P, C]`.
pub fn pfn_forward<T: Scalar>(fwd: &mut Forward<'_, T>, batch: &PillarBatch) -> Result<Var> {
    let shape = batch.features.shape().to_vec();
    let (p, m, f) = (shape[0], shape[1], shape[2]);
    if f != DECORATED_FEATURES {
        return Err(Error::config(format!("encoder expects {DECORATED_FEATURES} features, got {f}")));
    }
    let x = fwd.graph.input(batch.features.cast::<T>().reshape(vec![p * m, f])?);
    let w = fwd.param("encoder.pfn.linear.weight")?;
    let b = fwd.param("encoder.pfn.linear.bias")?;
    let y = fwd.graph.linear(x, w, Some(b))?;
    let y = fwd.batch_norm("encoder.pfn.bn", y)?;
    let y = fwd.graph.relu(y)?;
    let c = fwd.graph.shape(y)[1];
    let y = fwd.graph.reshape(y, &[p, m, c])?;
    let mut mask = batch.mask();
    if batch.is_empty() {
        // placeholder row of an empty batch contributes nothing
        mask = vec![false; m];
    }
    fwd.graph.max_over_axis(y, 1, Some(&mask))
}

/// Scatters `[P, C]` pillar features into a zero `[N, C, H, W]` pseudo-image.
pub fn scatter_to_pseudo_image<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    features: Var,
    batch: &PillarBatch,
    grid: &GridSpec,
) -> Result<Var> {
    let (nx, ny) = grid.dims()?;
    let coords: Vec<[usize; 3]> = batch.coords.iter().map(|c| [c.sample, c.row, c.col]).collect();
    if batch.is_empty() {
        let c = fwd.graph.shape(features)[1];
        let empty = fwd.graph.input(Tensor::zeros(vec![batch.samples.max(1), c, ny, nx]));
        return Ok(empty);
    }
    fwd.graph.scatter_to_grid(features, &coords, batch.samples, ny, nx)
}

/// Reads pillar feature vectors back out of a pseudo-image.
pub fn gather_from_pseudo_image<T: Scalar>(image: &Tensor<T>, coords: &[PillarCoord]) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 4 || coords.is_empty() {
        return Err(Error::config("gather needs a [N, C, H, W] image and at least one coordinate"));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(coords.len() * c);
    for pc in coords {
        for ch in 0..c {
            out.push(image.data()[((pc.sample * c + ch) * h + pc.row) * w + pc.col]);
        }
    }
    Tensor::new(vec![coords.len(), c], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{BnMode, Graph};
    use rand::seq::SliceRandom;
    use rand::Rng;
    use std::collections::BTreeSet;

    fn cloud(points: &[(f32, f32, f32, f32)]) -> PointCloud {
        PointCloud {
            points: points.iter().map(|&(x, y, z, r)| Point::new(x, y, z, r)).collect(),
        }
    }

    #[test]
    fn default_grid_dims() {
        assert_eq!(GridSpec::default().dims().unwrap(), (432, 496));
        let bad = GridSpec {
            x_range: (0.0, 69.0),
            ..Default::default()
        };
        assert!(bad.dims().is_err());
    }

    #[test]
    fn corner_point_and_upper_bound() {
        let g = GridSpec::default();
        let raw = pillarize(&cloud(&[(0.08, -39.60, 0.0, 0.5)]), &g, 0, PillarMode::Inference).unwrap();
        assert_eq!(raw.coords, vec![(0, 0)]);
        assert_eq!(raw.counts, vec![1]);
        let raw = pillarize(&cloud(&[(69.12, 0.0, 0.0, 0.5)]), &g, 0, PillarMode::Inference).unwrap();
        assert!(raw.is_empty());
    }

    #[test]
    fn occupancy_matches_brute_force() {
        let g = GridSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<(f32, f32, f32, f32)> = (0..5000)
            .map(|_| {
                (
                    rng.random_range(-5.0..75.0),
                    rng.random_range(-45.0..45.0),
                    rng.random_range(-4.0..2.0),
                    rng.random(),
                )
            })
            .collect();
        let raw = pillarize(&cloud(&pts), &g, 0, PillarMode::Inference).unwrap();
        let mut expected = BTreeSet::new();
        for &(x, y, z, _) in &pts {
            let (x, y, z) = (x as f64, y as f64, z as f64);
            if (0.0..69.12).contains(&x) && (-39.68..39.68).contains(&y) && (-3.0..1.0).contains(&z) {
                expected.insert((((y + 39.68) / 0.16).floor() as usize, (x / 0.16).floor() as usize));
            }
        }
        let got: BTreeSet<_> = raw.coords.iter().copied().collect();
        assert_eq!(got, expected);
        assert_eq!(got.len(), raw.coords.len());
    }

    #[test]
    fn caps_are_enforced() {
        let g = GridSpec {
            max_pillars: 10,
            ..Default::default()
        };
        let mut pts: Vec<(f32, f32, f32, f32)> = (0..50).map(|i| (0.05 + i as f32 * 0.001, 0.05, 0.0, 0.0)).collect();
        pts.extend((0..40).map(|i| (1.0 + i as f32 * 0.2, 3.0, 0.0, 0.0)));
        let c = cloud(&pts);
        let raw = pillarize(&c, &g, 5, PillarMode::Train).unwrap();
        assert_eq!(raw.len(), 10);
        assert!(raw.counts.iter().all(|&n| (1..=32).contains(&n)));
        let all = pillarize(&c, &g, 5, PillarMode::Inference).unwrap();
        assert_eq!(all.len(), 41);
        assert_eq!(all.counts[0], 32);
        assert_eq!(pillarize(&c, &g, 5, PillarMode::Train).unwrap(), raw);
    }

    #[test]
    fn input_order_does_not_matter() {
        let g = GridSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut pts: Vec<(f32, f32, f32, f32)> = (0..3000)
            .map(|_| (rng.random_range(10.0..12.0), rng.random_range(0.0..2.0), rng.random_range(-2.0..0.0), rng.random()))
            .collect();
        let a = pillarize(&cloud(&pts), &g, 9, PillarMode::Inference).unwrap();
        pts.shuffle(&mut rng);
        let b = pillarize(&cloud(&pts), &g, 9, PillarMode::Inference).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn decoration_channels() {
        let g = GridSpec::default();
        let (xc, yc) = g.cell_center(10, 20);
        let single = pillarize(&cloud(&[(xc as f32, yc as f32, -1.0, 0.3)]), &g, 0, PillarMode::Inference).unwrap();
        let d = decorate(&single, &g).unwrap();
        let f = &d.features.data()[..9];
        assert_eq!(&f[4..7], &[0.0, 0.0, 0.0]);
        assert!(f[7].abs() < 1e-5 && f[8].abs() < 1e-5);
        assert!(d.features.data()[9..].iter().all(|&v| v == 0.0));

        let pair = pillarize(
            &cloud(&[(xc as f32 - 0.05, yc as f32 + 0.02, -1.0, 0.3), (xc as f32 + 0.05, yc as f32 - 0.02, -0.5, 0.3)]),
            &g,
            0,
            PillarMode::Inference,
        )
        .unwrap();
        let d = decorate(&pair, &g).unwrap();
        let f = d.features.data();
        for a in 4..7 {
            assert!((f[a] + f[9 + a]).abs() < 1e-6, "channel {a}");
        }
    }

    fn encoder_store(seed: u64) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        init_encoder(&mut store, 64, &mut ChaCha8Rng::seed_from_u64(seed));
        store
    }

    #[test]
    fn pfn_zero_features_give_zero() {
        let mut store = encoder_store(0);
        let batch = PillarBatch {
            features: Tensor::zeros(vec![3, 32, 9]),
            coords: (0..3).map(|i| PillarCoord { sample: 0, row: i, col: 0 }).collect(),
            counts: vec![1, 2, 3],
            samples: 1,
        };
        for mode in [BnMode::Train, BnMode::Eval] {
            let mut g = Graph::new();
            let mut fwd = Forward { graph: &mut g, store: &mut store, mode };
            let y = pfn_forward(&mut fwd, &batch).unwrap();
            assert_eq!(g.shape(y), &[3, 64]);
            assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn pfn_is_invariant_to_point_order_within_pillars() {
        let g = GridSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<(f32, f32, f32, f32)> = (0..400)
            .map(|_| (rng.random_range(5.0..6.0), rng.random_range(0.0..1.0), rng.random_range(-2.0..0.0), rng.random()))
            .collect();
        let batch = decorate(&pillarize(&cloud(&pts), &g, 0, PillarMode::Inference).unwrap(), &g).unwrap();
        let mut permuted = batch.clone();
        let m = batch.max_points();
        for (p, &count) in batch.counts.iter().enumerate() {
            let mut order: Vec<usize> = (0..count).collect();
            order.shuffle(&mut rng);
            for (dst, &src) in order.iter().enumerate() {
                let s = &batch.features.data()[(p * m + src) * 9..(p * m + src + 1) * 9];
                permuted.features.data_mut()[(p * m + dst) * 9..(p * m + dst + 1) * 9].copy_from_slice(s);
            }
        }
        let mut store = encoder_store(4);
        let run = |store: &mut ParamStore<f32>, b: &PillarBatch| {
            let mut g = Graph::new();
            let mut fwd = Forward { graph: &mut g, store, mode: BnMode::Eval };
            let y = pfn_forward(&mut fwd, b).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(&mut store, &batch), run(&mut store, &permuted));
    }

    #[test]
    fn scatter_conserves_and_gathers_back() {
        let grid = GridSpec {
            x_range: (0.0, 1.6),
            y_range: (0.0, 0.96),
            ..Default::default()
        };
        let mut store = ParamStore::<f32>::new();
        let coords = vec![
            PillarCoord { sample: 0, row: 0, col: 3 },
            PillarCoord { sample: 0, row: 5, col: 9 },
            PillarCoord { sample: 1, row: 2, col: 2 },
        ];
        let batch = PillarBatch {
            features: Tensor::zeros(vec![3, 32, 9]),
            coords: coords.clone(),
            counts: vec![1; 3],
            samples: 2,
        };
        let feats = Tensor::from_fn(vec![3, 4], |i| (i as f32 * 0.37).sin());
        let mut g = Graph::new();
        let mut fwd = Forward { graph: &mut g, store: &mut store, mode: BnMode::Eval };
        let f = fwd.graph.input(feats.clone());
        let img = scatter_to_pseudo_image(&mut fwd, f, &batch, &grid).unwrap();
        assert_eq!(g.shape(img), &[2, 4, 6, 10]);
        let total: f64 = g.value(img).data().iter().map(|&v| v as f64).sum();
        let expect: f64 = feats.data().iter().map(|&v| v as f64).sum();
        assert_eq!(total, expect);
        assert_eq!(gather_from_pseudo_image(g.value(img), &coords).unwrap(), feats);

        let empty = PillarBatch {
            features: Tensor::zeros(vec![1, 32, 9]),
            coords: vec![],
            counts: vec![],
            samples: 1,
        };
        let mut fwd = Forward { graph: &mut g, store: &mut store, mode: BnMode::Eval };
        let img = scatter_to_pseudo_image(&mut fwd, f, &empty, &grid).unwrap();
        assert!(g.value(img).data().iter().all(|&v| v == 0.0));
    }
}
