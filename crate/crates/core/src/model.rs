//! The assembled detector: encoder, backbone, neck and head over one
//! parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneSpec, DenseBackboneSpec};
use crate::boxes::Detection;
use crate::detector::{fpn_forward, head_forward, postprocess, AnchorConfig, AnchorSet, HeadOutputs, HeadSpec, NeckSpec, PostprocessConfig};
use crate::error::{Error, Result};
use crate::params::{Forward, ParamStore};
use crate::pillar::{self, GridSpec, PillarBatch};
use crate::tensor::{BnMode, Graph, Scalar, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub grid: GridSpec,
    pub backbone: BackboneSpec,
    pub neck: NeckSpec,
    pub head: HeadSpec,
    pub anchors: AnchorConfig,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            backbone: BackboneSpec::Dense(DenseBackboneSpec::default()),
            neck: NeckSpec::default(),
            head: HeadSpec::default(),
            anchors: AnchorConfig::default(),
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let (nx, ny) = self.grid.dims()?;
        self.backbone.validate()?;
        if nx % 8 != 0 || ny % 8 != 0 {
            return Err(Error::config(format!("grid {ny}×{nx} must be divisible by 8")));
        }
        if self.backbone.input_channels() != self.grid.feature_channels {
            return Err(Error::config(format!(
                "backbone expects {} input channels, encoder produces {}",
                self.backbone.input_channels(),
                self.grid.feature_channels
            )));
        }
        if self.backbone.out_channels() != self.neck.in_channels {
            return Err(Error::config("neck input channels do not match the backbone outputs"));
        }
        if self.neck.upsample_strides != [1, 2, 4] {
            return Err(Error::config("neck upsample strides must be (1, 2, 4)"));
        }
        if self.neck.out_channels.iter().any(|&c| c == 0) {
            return Err(Error::config("neck output channels must be positive"));
        }
        if self.head.in_channels != self.neck.fused_channels() {
            return Err(Error::config(format!(
                "head expects {} channels, neck fuses {}",
                self.head.in_channels,
                self.neck.fused_channels()
            )));
        }
        if self.anchors.feature_stride != 2 {
            return Err(Error::config("anchor feature stride must be 2"));
        }
        Ok(())
    }

    /// Pseudo-image `(H, W)`.
    pub fn pseudo_image_hw(&self) -> Result<(usize, usize)> {
        let (nx, ny) = self.grid.dims()?;
        Ok((ny, nx))
    }
}

/// Initializes every component from its own random stream, so changing the
/// backbone leaves encoder, neck and head weights untouched.
pub fn init_params<T: Scalar>(arch: &ArchSpec, seed: u64) -> Result<ParamStore<T>> {
    arch.validate()?;
    let stream = |i: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i);
        rng
    };
    let mut store = ParamStore::new();
    pillar::init_encoder(&mut store, arch.grid.feature_channels, &mut stream(1));
    arch.backbone.init(&mut store, &mut stream(2))?;
    arch.neck.init(&mut store, &mut stream(3));
    arch.head.init(&mut store, &mut stream(4));
    Ok(store)
}

/// Every intermediate stage of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Stages {
    pub pillars: Var,
    pub pseudo_image: Var,
    pub taps: [Var; 3],
    pub fused: Var,
    pub head: HeadOutputs,
}

pub fn forward<T: Scalar>(arch: &ArchSpec, fwd: &mut Forward<'_, T>, batch: &PillarBatch) -> Result<Stages> {
    let pillars = pillar::pfn_forward(fwd, batch)?;
    let pseudo_image = pillar::scatter_to_pseudo_image(fwd, pillars, batch, &arch.grid)?;
    let taps = arch.backbone.forward(fwd, pseudo_image)?;
    let fused = fpn_forward(fwd, &taps, &arch.neck)?;
    let head = head_forward(fwd, fused)?;
    Ok(Stages {
        pillars,
        pseudo_image,
        taps,
        fused,
        head,
    })
}

/// Runs inference (batch-norm in eval mode) and returns per-sample detections.
pub fn detect(
    arch: &ArchSpec,
    store: &mut ParamStore<f32>,
    batch: &PillarBatch,
    anchors: &AnchorSet,
    cfg: &PostprocessConfig,
) -> Result<Vec<Vec<Detection>>> {
    let mut graph = Graph::new();
    let mut fwd = Forward {
        graph: &mut graph,
        store,
        mode: BnMode::Eval,
    };
    let st = forward(arch, &mut fwd, batch)?;
    let (cls, boxes, dir) = (graph.value(st.head.cls), graph.value(st.head.boxes), graph.value(st.head.dir));
    (0..batch.samples)
        .map(|b| postprocess(cls, boxes, dir, b, anchors, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BaselineBackboneSpec;

    #[test]
    fn default_spec_is_valid() {
        ArchSpec::default().validate().unwrap();
        let bad = ArchSpec {
            head: HeadSpec {
                in_channels: 256,
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn shared_components_ignore_backbone_choice() {
        let dense = init_params::<f32>(&ArchSpec::default(), 7).unwrap();
        let base = init_params::<f32>(
            &ArchSpec {
                backbone: BackboneSpec::Baseline(BaselineBackboneSpec::default()),
                ..Default::default()
            },
            7,
        )
        .unwrap();
        for (name, t) in dense.params().filter(|(n, _)| !n.starts_with("backbone")) {
            assert_eq!(base.get(name).unwrap(), t, "{name}");
        }
    }
}
