//! Analytic parameter and multiply-accumulate counts.
//!
//! Walks the architecture description layer by layer without building any
//! tensors. One MAC counts as one FLOP and only convolutions, transposed
//! convolutions and linear maps enter the headline number; batch-norm,
//! activation and pooling work is tallied separately as element operations.

use std::fmt::Write as _;

use serde::Serialize;

use crate::backbone::{BackboneSpec, BaselineBackboneSpec, DenseBackboneSpec, Downsample};
use crate::detector::HeadSpec;
use crate::error::{Error, Result};
use crate::model::ArchSpec;
use crate::pillar::DECORATED_FEATURES;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv { c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, bias: bool },
    Deconv { c_in: usize, c_out: usize, k: usize },
    Linear { d_in: usize, d_out: usize },
    BatchNorm { c: usize },
    Relu,
    AvgPool,
}

/// One layer with its output shape `(C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub input: (usize, usize, usize),
    pub output: (usize, usize, usize),
    /// Independent rows processed (pillar points for the encoder, else 1).
    pub rows: usize,
}

impl Layer {
    pub fn params(&self) -> u64 {
        match self.kind {
            LayerKind::Conv { c_in, c_out, k, bias, .. } => (c_out * c_in * k * k + if bias { c_out } else { 0 }) as u64,
            LayerKind::Deconv { c_in, c_out, k } => (c_in * c_out * k * k) as u64,
            LayerKind::Linear { d_in, d_out } => (d_in * d_out + d_out) as u64,
            LayerKind::BatchNorm { c } => 2 * c as u64,
            LayerKind::Relu | LayerKind::AvgPool => 0,
        }
    }

    pub fn macs(&self) -> u64 {
        let (_, ho, wo) = self.output;
        let (_, hi, wi) = self.input;
        match self.kind {
            LayerKind::Conv { c_in, c_out, k, .. } => (c_out * c_in * k * k) as u64 * (ho * wo) as u64,
            LayerKind::Deconv { c_in, c_out, k } => (c_in * c_out * k * k) as u64 * (hi * wi) as u64,
            LayerKind::Linear { d_in, d_out } => (d_in * d_out) as u64 * self.rows as u64,
            _ => 0,
        }
    }

    pub fn element_ops(&self) -> u64 {
        let (c, h, w) = self.output;
        let out = (c * h * w * self.rows) as u64;
        match self.kind {
            LayerKind::BatchNorm { .. } | LayerKind::Relu => out,
            LayerKind::AvgPool => {
                let (ci, hi, wi) = self.input;
                (ci * hi * wi) as u64
            }
            _ => 0,
        }
    }
}

struct Walker {
    layers: Vec<Layer>,
    shape: (usize, usize, usize),
}

impl Walker {
    fn new(shape: (usize, usize, usize)) -> Self {
        Self { layers: Vec::new(), shape }
    }

    fn push(&mut self, name: String, kind: LayerKind, output: (usize, usize, usize)) -> Result<()> {
        if output.1 == 0 || output.2 == 0 {
            return Err(Error::config(format!("layer {name} has an empty output")));
        }
        self.layers.push(Layer {
            name,
            kind,
            input: self.shape,
            output,
            rows: 1,
        });
        self.shape = output;
        Ok(())
    }

    fn conv(&mut self, name: &str, c_out: usize, k: usize, stride: usize, pad: usize, bias: bool) -> Result<()> {
        let (c_in, h, w) = self.shape;
        let out = |n: usize| (n + 2 * pad).checked_sub(k).map(|v| v / stride + 1).unwrap_or(0);
        self.push(
            format!("{name}.conv"),
            LayerKind::Conv { c_in, c_out, k, stride, pad, bias },
            (c_out, out(h), out(w)),
        )
    }

    fn bn_relu(&mut self, name: &str) -> Result<()> {
        let s = self.shape;
        self.push(format!("{name}.bn"), LayerKind::BatchNorm { c: s.0 }, s)?;
        self.push(format!("{name}.relu"), LayerKind::Relu, s)
    }

    fn cbr(&mut self, name: &str, c_out: usize, k: usize, stride: usize) -> Result<()> {
        self.conv(name, c_out, k, stride, k / 2, false)?;
        self.bn_relu(name)
    }

    fn pool(&mut self, name: &str) -> Result<()> {
        let (c, h, w) = self.shape;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::config(format!("{name}: cannot pool odd size {h}×{w}")));
        }
        self.push(format!("{name}.pool"), LayerKind::AvgPool, (c, h / 2, w / 2))
    }
}

fn dense_layers(spec: &DenseBackboneSpec, input: (usize, usize, usize)) -> Result<(Vec<Layer>, [(usize, usize, usize); 3])> {
    let mut wk = Walker::new(input);
    let mut taps = [(0, 0, 0); 3];
    for b in 0..3 {
        let k = spec.growth.rate(b + 1)?;
        let block_in = wk.shape;
        for i in 0..spec.layers_per_block[b] {
            wk.cbr(&format!("backbone.block{}.layer{i}", b + 1), k, 3, 1)?;
        }
        // concatenation restores the block input alongside every layer output
        wk.shape = (block_in.0 + spec.layers_per_block[b] * k, block_in.1, block_in.2);
        let name = format!("backbone.block{}.transition", b + 1);
        wk.cbr(&name, spec.transition_out_channels[b], 1, 1)?;
        match spec.downsample {
            Downsample::AvgPool => wk.pool(&name)?,
            Downsample::StridedConv => wk.cbr(&format!("backbone.block{}.down", b + 1), spec.transition_out_channels[b], 3, 2)?,
        }
        taps[b] = wk.shape;
    }
    Ok((wk.layers, taps))
}

fn baseline_layers(spec: &BaselineBackboneSpec, input: (usize, usize, usize)) -> Result<(Vec<Layer>, [(usize, usize, usize); 3])> {
    let mut wk = Walker::new(input);
    let mut taps = [(0, 0, 0); 3];
    for b in 0..3 {
        for i in 0..=spec.layers_per_block[b] {
            wk.cbr(&format!("backbone.block{}.layer{i}", b + 1), spec.channels[b], 3, if i == 0 { 2 } else { 1 })?;
        }
        taps[b] = wk.shape;
    }
    Ok((wk.layers, taps))
}

/// Backbone layers and the shapes of its three taps.
pub fn backbone_layers(spec: &BackboneSpec, input: (usize, usize, usize)) -> Result<(Vec<Layer>, [(usize, usize, usize); 3])> {
    spec.validate()?;
    match spec {
        BackboneSpec::Dense(s) => dense_layers(s, input),
        BackboneSpec::Baseline(s) => baseline_layers(s, input),
    }
}

/// Per-component layer lists of a full pipeline.
pub struct PipelineLayers {
    pub encoder: Vec<Layer>,
    pub backbone: Vec<Layer>,
    pub neck: Vec<Layer>,
    pub head: Vec<Layer>,
}

pub fn pipeline_layers(arch: &ArchSpec) -> Result<PipelineLayers> {
    let (nx, ny) = arch.grid.dims()?;
    let c = arch.grid.feature_channels;
    let rows = arch.grid.max_pillars * arch.grid.max_points_per_pillar;
    let enc_shape = (c, 1, 1);
    let encoder = vec![
        Layer {
            name: "encoder.pfn.linear".into(),
            kind: LayerKind::Linear { d_in: DECORATED_FEATURES, d_out: c },
            input: (DECORATED_FEATURES, 1, 1),
            output: enc_shape,
            rows,
        },
        Layer {
            name: "encoder.pfn.bn".into(),
            kind: LayerKind::BatchNorm { c },
            input: enc_shape,
            output: enc_shape,
            rows,
        },
        Layer {
            name: "encoder.pfn.relu".into(),
            kind: LayerKind::Relu,
            input: enc_shape,
            output: enc_shape,
            rows,
        },
    ];
    let (backbone, taps) = backbone_layers(&arch.backbone, (c, ny, nx))?;

    let mut neck = Vec::new();
    let mut fused = 0;
    let mut fused_hw = None;
    for (i, &tap) in taps.iter().enumerate() {
        if tap.0 != arch.neck.in_channels[i] {
            return Err(Error::config(format!("neck input {} expects {} channels, tap has {}", i + 1, arch.neck.in_channels[i], tap.0)));
        }
        let s = arch.neck.upsample_strides[i];
        let c_out = arch.neck.out_channels[i];
        let mut wk = Walker::new(tap);
        let name = format!("neck.deblock{}", i + 1);
        wk.push(format!("{name}.deconv"), LayerKind::Deconv { c_in: tap.0, c_out, k: s }, (c_out, tap.1 * s, tap.2 * s))?;
        wk.bn_relu(&name)?;
        let hw = (wk.shape.1, wk.shape.2);
        if *fused_hw.get_or_insert(hw) != hw {
            return Err(Error::config("neck branches disagree on spatial size"));
        }
        fused += c_out;
        neck.extend(wk.layers);
    }
    let (fh, fw) = fused_hw.unwrap_or((0, 0));

    let mut head = Vec::new();
    for (name, c_out) in HeadSpec::outputs() {
        let mut wk = Walker::new((fused, fh, fw));
        wk.conv(&format!("head.{name}"), c_out, 1, 1, 0, true)?;
        head.extend(wk.layers);
    }
    Ok(PipelineLayers {
        encoder,
        backbone,
        neck,
        head,
    })
}

/// Parameter, MAC and element-op totals of one component.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ComponentCost {
    pub component: String,
    pub params: u64,
    pub macs: u64,
    pub element_ops: u64,
}

impl ComponentCost {
    pub fn from_layers(component: impl Into<String>, layers: &[Layer]) -> Self {
        Self {
            component: component.into(),
            params: layers.iter().map(Layer::params).sum(),
            macs: layers.iter().map(Layer::macs).sum(),
            element_ops: layers.iter().map(Layer::element_ops).sum(),
        }
    }
}

pub fn count_params(layers: &[Layer]) -> u64 {
    layers.iter().map(Layer::params).sum()
}

pub fn count_macs(layers: &[Layer]) -> u64 {
    layers.iter().map(Layer::macs).sum()
}

/// Component rows for both backbones sharing one encoder, neck and head.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    /// Pseudo-image `(C, H, W)`.
    pub input: (usize, usize, usize),
    pub rows: Vec<ComponentCost>,
}

impl CostReport {
    pub fn row(&self, component: &str) -> Option<&ComponentCost> {
        self.rows.iter().find(|r| r.component == component)
    }

    /// `baseline / dense` backbone ratios `(params, macs)`.
    pub fn backbone_ratios(&self) -> Option<(f64, f64)> {
        let (b, d) = (self.row("baseline.backbone")?, self.row("dense.backbone")?);
        Some((b.params as f64 / d.params as f64, b.macs as f64 / d.macs as f64))
    }

    /// Pipeline total for one backbone kind (`"dense"` or `"baseline"`).
    pub fn total(&self, kind: &str) -> ComponentCost {
        let backbone = format!("{kind}.backbone");
        let mut t = ComponentCost {
            component: format!("{kind}.total"),
            params: 0,
            macs: 0,
            element_ops: 0,
        };
        for r in self.rows.iter().filter(|r| r.component == backbone || !r.component.contains('.')) {
            t.params += r.params;
            t.macs += r.macs;
            t.element_ops += r.element_ops;
        }
        t
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("component,params,macs\n");
        for r in self.rows.iter().chain([self.total("baseline"), self.total("dense")].iter()) {
            let _ = writeln!(s, "{},{},{}", r.component, r.params, r.macs);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let (c, h, w) = self.input;
        let mut s = format!("input {c}x{h}x{w}\n");
        let _ = writeln!(s, "{:<20} {:>12} {:>10} {:>10} {:>14}", "component", "params", "params(M)", "MACs(G)", "elem ops(G)");
        for r in self.rows.iter().chain([self.total("baseline"), self.total("dense")].iter()) {
            let _ = writeln!(
                s,
                "{:<20} {:>12} {:>10.2} {:>10.2} {:>14.3}",
                r.component,
                r.params,
                r.params as f64 / 1e6,
                r.macs as f64 / 1e9,
                r.element_ops as f64 / 1e9
            );
        }
        if let Some((p, m)) = self.backbone_ratios() {
            let _ = writeln!(s, "baseline/dense backbone: params {p:.2}x, MACs {m:.2}x");
        }
        s
    }
}

/// Rows `encoder`, `baseline.backbone`, `dense.backbone`, `neck`, `head`.
/// The backbone in `arch` supplies the dense configuration when it is dense;
/// otherwise the default dense backbone is used, and vice versa.
pub fn component_report(arch: &ArchSpec) -> Result<CostReport> {
    let (dense, baseline) = match &arch.backbone {
        BackboneSpec::Dense(d) => (d.clone(), BaselineBackboneSpec {
            input_channels: d.input_channels,
            ..Default::default()
        }),
        BackboneSpec::Baseline(b) => (
            DenseBackboneSpec {
                input_channels: b.input_channels,
                ..Default::default()
            },
            b.clone(),
        ),
    };
    let with = |bb: BackboneSpec| ArchSpec {
        backbone: bb,
        ..arch.clone()
    };
    let d = pipeline_layers(&with(BackboneSpec::Dense(dense)))?;
    let b = pipeline_layers(&with(BackboneSpec::Baseline(baseline)))?;
    let (nx, ny) = arch.grid.dims()?;
    Ok(CostReport {
        input: (arch.grid.feature_channels, ny, nx),
        rows: vec![
            ComponentCost::from_layers("encoder", &d.encoder),
            ComponentCost::from_layers("baseline.backbone", &b.backbone),
            ComponentCost::from_layers("dense.backbone", &d.backbone),
            ComponentCost::from_layers("neck", &d.neck),
            ComponentCost::from_layers("head", &d.head),
        ],
    })
}
