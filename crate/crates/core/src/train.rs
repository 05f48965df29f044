//! Training loop over in-memory scenes: pillarize, forward, loss, backward,
//! clip, AdamW with cosine annealing.

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::Object;
use crate::detector::{assign_targets, detection_loss, generate_anchors, AnchorSet, LossConfig, Targets};
use crate::error::{Error, Result};
use crate::model::{forward, ArchSpec};
use crate::params::{Forward, ParamStore};
use crate::pillar::{decorate, pillarize, PillarBatch, PillarMode};
use crate::pointcloud::{LabeledScene, PointCloud};
use crate::tensor::{cosine_lr, AdamW, AdamWConfig, BnMode, Graph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub eta_min: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub scenes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 1e-3,
            eta_min: 1e-5,
            weight_decay: 0.01,
            batch_size: 1,
            grad_clip: 35.0,
            seed: 0,
            scenes: 8,
        }
    }
}

pub const LOSS_HEADER: &str = "step,lr,cls,loc,dir,total";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub cls: f64,
    pub loc: f64,
    pub dir: f64,
    pub total: f64,
    pub num_pos: usize,
    pub grad_norm: f64,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.step, self.lr, self.cls, self.loc, self.dir, self.total)
    }
}

/// Pillarizes and decorates a set of clouds into one batch.
pub fn make_batch(arch: &ArchSpec, clouds: &[&PointCloud], seed: u64, mode: PillarMode) -> Result<PillarBatch> {
    let parts = clouds
        .iter()
        .enumerate()
        .map(|(i, c)| decorate(&pillarize(c, &arch.grid, seed.wrapping_add(i as u64), mode)?, &arch.grid))
        .collect::<Result<Vec<_>>>()?;
    PillarBatch::stack(&parts)
}

pub struct Trainer {
    pub arch: ArchSpec,
    pub store: ParamStore<f32>,
    pub optimizer: AdamW<f32>,
    pub cfg: TrainConfig,
    pub loss: LossConfig,
    pub anchors: AnchorSet,
    scenes: Vec<LabeledScene>,
    targets: Vec<Targets>,
    order: Vec<usize>,
    /// Completed optimizer steps.
    pub step: usize,
}

impl Trainer {
    pub fn new(arch: ArchSpec, store: ParamStore<f32>, cfg: TrainConfig, scenes: Vec<LabeledScene>) -> Result<Self> {
        arch.validate()?;
        if scenes.is_empty() {
            return Err(Error::config("training needs at least one scene"));
        }
        let anchors = generate_anchors(&arch.grid, &arch.anchors)?;
        let targets = scenes
            .iter()
            .map(|s| assign_targets(&anchors, &s.objects, &arch.anchors))
            .collect();
        let optimizer = AdamW::new(AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        });
        Ok(Self {
            arch,
            store,
            optimizer,
            cfg,
            loss: LossConfig::default(),
            anchors,
            scenes,
            targets,
            order: Vec::new(),
            step: 0,
        })
    }

    pub fn scenes(&self) -> &[LabeledScene] {
        &self.scenes
    }

    pub fn targets(&self) -> &[Targets] {
        &self.targets
    }

    /// Scene indices of step `step`: consecutive slices of a seeded
    /// per-epoch permutation.
    fn batch_indices(&mut self, step: usize) -> Vec<usize> {
        let n = self.scenes.len();
        (0..self.cfg.batch_size)
            .map(|j| {
                let pos = step * self.cfg.batch_size + j;
                let epoch = pos / n;
                if self.order.len() < (epoch + 1) * n {
                    let mut perm: Vec<usize> = (0..n).collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x5eed_0000_0000);
                    rng.set_stream(epoch as u64);
                    perm.shuffle(&mut rng);
                    self.order.truncate(epoch * n);
                    self.order.extend(perm);
                }
                self.order[pos]
            })
            .collect()
    }

    /// Loss of the current weights on `indices` without updating anything.
    pub fn evaluate_loss(&mut self, indices: &[usize], mode: BnMode) -> Result<StepLog> {
        let clouds: Vec<&PointCloud> = indices.iter().map(|&i| &self.scenes[i].cloud).collect();
        let batch = make_batch(&self.arch, &clouds, self.cfg.seed, PillarMode::Inference)?;
        let targets: Vec<Targets> = indices.iter().map(|&i| self.targets[i].clone()).collect();
        let mut store = self.store.clone();
        let mut graph = Graph::new();
        let mut fwd = Forward {
            graph: &mut graph,
            store: &mut store,
            mode,
        };
        let st = forward(&self.arch, &mut fwd, &batch)?;
        let loss = detection_loss(&mut graph, &st.head, &targets, &self.loss)?;
        Ok(StepLog {
            step: self.step,
            lr: self.optimizer.config.lr,
            cls: loss.cls,
            loc: loss.loc,
            dir: loss.dir,
            total: loss.cls + loss.loc + loss.dir,
            num_pos: loss.num_pos,
            grad_norm: 0.0,
        })
    }

    pub fn train_step(&mut self) -> Result<StepLog> {
        let step = self.step;
        let indices = self.batch_indices(step);
        let clouds: Vec<&PointCloud> = indices.iter().map(|&i| &self.scenes[i].cloud).collect();
        let seed = self.cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(step as u64 * 1_000_003);
        let batch = make_batch(&self.arch, &clouds, seed, PillarMode::Train)?;
        let targets: Vec<Targets> = indices.iter().map(|&i| self.targets[i].clone()).collect();

        let mut graph = Graph::new();
        let mut fwd = Forward {
            graph: &mut graph,
            store: &mut self.store,
            mode: BnMode::Train,
        };
        let st = forward(&self.arch, &mut fwd, &batch)?;
        let loss = detection_loss(&mut graph, &st.head, &targets, &self.loss)?;
        let total = loss.cls + loss.loc + loss.dir;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at step {step} is {total} (cls {}, loc {}, dir {})",
                loss.cls, loss.loc, loss.dir
            )));
        }
        let grads = graph.backward(loss.total)?;
        self.store.zero_grads();
        self.store.accumulate_grads(&graph, &grads)?;
        drop(grads);
        drop(graph);
        let grad_norm = self.store.grad_norm();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm at step {step} is {grad_norm}")));
        }
        if self.cfg.grad_clip > 0.0 && grad_norm > self.cfg.grad_clip {
            self.store.scale_grads(self.cfg.grad_clip / grad_norm);
        }
        let lr = cosine_lr(step as u64, self.cfg.steps as u64, self.cfg.lr, self.cfg.eta_min);
        self.optimizer.set_lr(lr);
        self.optimizer.step(self.store.params_mut());
        self.store.zero_grads();
        self.step += 1;
        let log = StepLog {
            step,
            lr,
            cls: loss.cls,
            loc: loss.loc,
            dir: loss.dir,
            total,
            num_pos: loss.num_pos,
            grad_norm,
        };
        debug!("step {step}: total {total:.4} (cls {:.4} loc {:.4} dir {:.4}) |g| {grad_norm:.3}", loss.cls, loss.loc, loss.dir);
        Ok(log)
    }

    /// Runs the remaining steps, calling `on_step` after each.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        while self.step < self.cfg.steps {
            let log = self.train_step()?;
            on_step(&log);
            logs.push(log);
        }
        Ok(logs)
    }
}

/// Seeded synthetic training set.
pub fn synth_dataset(n: usize, seed: u64, cfg: &crate::pointcloud::SynthConfig) -> Vec<LabeledScene> {
    (0..n)
        .map(|i| crate::pointcloud::synth_scene(seed.wrapping_mul(1_000).wrapping_add(i as u64), cfg).scene)
        .collect()
}

/// Ground-truth objects of a set of scenes.
pub fn scene_objects(scenes: &[LabeledScene]) -> Vec<Vec<Object>> {
    scenes.iter().map(|s| s.objects.clone()).collect()
}
