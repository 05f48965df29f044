//! 2D backbones over the pseudo-image: the lightweight dense backbone and the
//! plain strided-conv baseline. Both emit three taps at strides 2, 4 and 8.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Forward, ParamStore};
use crate::tensor::{Scalar, Var};

/// Per-block growth rate `k_b` of the dense backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GrowthSchedule {
    Fixed(usize),
    /// `k0`, `2·k0`, `4·k0`.
    Doubling(usize),
    /// `(32, 32, 64)`.
    TableMatched,
}

impl Default for GrowthSchedule {
    fn default() -> Self {
        GrowthSchedule::TableMatched
    }
}

impl GrowthSchedule {
    /// Growth rate of block `b`, counted from 1.
    pub fn rate(&self, b: usize) -> Result<usize> {
        if !(1..=3).contains(&b) {
            return Err(Error::config(format!("block index {b} outside 1..=3")));
        }
        let k = match *self {
            GrowthSchedule::Fixed(k) => k,
            GrowthSchedule::Doubling(k0) => k0 << (b - 1),
            GrowthSchedule::TableMatched => [32, 32, 64][b - 1],
        };
        if k == 0 {
            return Err(Error::config("growth rate must be positive"));
        }
        Ok(k)
    }

    pub fn rates(&self) -> Result<[usize; 3]> {
        Ok([self.rate(1)?, self.rate(2)?, self.rate(3)?])
    }
}

impl fmt::Display for GrowthSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GrowthSchedule::Fixed(k) => write!(f, "fixed:{k}"),
            GrowthSchedule::Doubling(k) => write!(f, "doubling:{k}"),
            GrowthSchedule::TableMatched => f.write_str("table"),
        }
    }
}

impl FromStr for GrowthSchedule {
    type Err = Error;

    /// `fixed:<k>`, `doubling:<k0>` or `table`.
    fn from_str(s: &str) -> Result<Self> {
        let parse_k = |v: &str| -> Result<usize> {
            match v.trim().parse::<usize>() {
                Ok(k) if k > 0 => Ok(k),
                _ => Err(Error::config(format!("growth rate `{v}` must be a positive integer"))),
            }
        };
        match s.trim().split_once(':') {
            None if s.trim() == "table" || s.trim() == "table_matched" => Ok(GrowthSchedule::TableMatched),
            Some(("fixed", k)) => Ok(GrowthSchedule::Fixed(parse_k(k)?)),
            Some(("doubling", k)) => Ok(GrowthSchedule::Doubling(parse_k(k)?)),
            _ => Err(Error::config(format!(
                "growth `{s}` must be fixed:<k>, doubling:<k0> or table"
            ))),
        }
    }
}

/// How a transition layer halves the resolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Downsample {
    #[default]
    AvgPool,
    /// 3×3 stride-2 conv + BN + ReLU at the transition width.
    StridedConv,
}

impl FromStr for Downsample {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "avg_pool" => Ok(Downsample::AvgPool),
            "strided_conv" => Ok(Downsample::StridedConv),
            other => Err(Error::config(format!("downsample `{other}` must be avg_pool or strided_conv"))),
        }
    }
}

impl fmt::Display for Downsample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Downsample::AvgPool => "avg_pool",
            Downsample::StridedConv => "strided_conv",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseBackboneSpec {
    pub layers_per_block: [usize; 3],
    pub growth: GrowthSchedule,
    pub transition_out_channels: [usize; 3],
    pub input_channels: usize,
    pub downsample: Downsample,
}

impl Default for DenseBackboneSpec {
    fn default() -> Self {
        Self {
            layers_per_block: [3, 5, 5],
            growth: GrowthSchedule::TableMatched,
            transition_out_channels: [64, 128, 256],
            input_channels: 64,
            downsample: Downsample::AvgPool,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineBackboneSpec {
    /// Same-resolution convs following each block's stride-2 entry conv.
    pub layers_per_block: [usize; 3],
    pub channels: [usize; 3],
    pub input_channels: usize,
}

impl Default for BaselineBackboneSpec {
    fn default() -> Self {
        Self {
            layers_per_block: [3, 5, 5],
            channels: [64, 128, 256],
            input_channels: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneSpec {
    Dense(DenseBackboneSpec),
    Baseline(BaselineBackboneSpec),
}

impl BackboneSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            BackboneSpec::Dense(_) => "dense",
            BackboneSpec::Baseline(_) => "baseline",
        }
    }

    pub fn input_channels(&self) -> usize {
        match self {
            BackboneSpec::Dense(s) => s.input_channels,
            BackboneSpec::Baseline(s) => s.input_channels,
        }
    }

    pub fn out_channels(&self) -> [usize; 3] {
        match self {
            BackboneSpec::Dense(s) => s.transition_out_channels,
            BackboneSpec::Baseline(s) => s.channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |xs: &[usize], what: &str| {
            if xs.iter().all(|&v| v > 0) {
                Ok(())
            } else {
                Err(Error::config(format!("backbone {what} must be positive")))
            }
        };
        match self {
            BackboneSpec::Dense(s) => {
                s.growth.rates()?;
                positive(&s.layers_per_block, "layer counts")?;
                positive(&s.transition_out_channels, "transition channels")?;
                positive(&[s.input_channels], "input channels")
            }
            BackboneSpec::Baseline(s) => {
                positive(&s.channels, "channels")?;
                positive(&[s.input_channels], "input channels")
            }
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl rand::Rng) -> Result<()> {
        self.validate()?;
        match self {
            BackboneSpec::Dense(s) => init_dense(store, s, rng),
            BackboneSpec::Baseline(s) => {
                init_baseline(store, s, rng);
                Ok(())
            }
        }
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<'_, T>, x: Var) -> Result<[Var; 3]> {
        match self {
            BackboneSpec::Dense(s) => dense_backbone_forward(fwd, x, s),
            BackboneSpec::Baseline(s) => baseline_backbone_forward(fwd, x, s),
        }
    }
}

fn insert_cbr<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c_in: usize, c_out: usize, k: usize, rng: &mut impl rand::Rng) {
    store.insert_conv(format!("{prefix}.conv.weight"), c_out, c_in, k, rng);
    store.insert_bn(&format!("{prefix}.bn"), c_out);
}

pub fn init_dense<T: Scalar>(store: &mut ParamStore<T>, spec: &DenseBackboneSpec, rng: &mut impl rand::Rng) -> Result<()> {
    let rates = spec.growth.rates()?;
    let mut c_in = spec.input_channels;
    for b in 0..3 {
        let (k, n, c_out) = (rates[b], spec.layers_per_block[b], spec.transition_out_channels[b]);
        let prefix = format!("backbone.block{}", b + 1);
        for i in 0..n {
            insert_cbr(store, &format!("{prefix}.layer{i}"), if i == 0 { c_in } else { k }, k, 3, rng);
        }
        insert_cbr(store, &format!("{prefix}.transition"), c_in + n * k, c_out, 1, rng);
        if spec.downsample == Downsample::StridedConv {
            insert_cbr(store, &format!("{prefix}.down"), c_out, c_out, 3, rng);
        }
        c_in = c_out;
    }
    Ok(())
}

/// Chain of `n_layers` 3×3 conv stages, each consuming only its predecessor,
/// concatenated once with the block input: `C_in + n·k` channels out.
pub fn dense_block_forward<T: Scalar>(fwd: &mut Forward<'_, T>, prefix: &str, x: Var, n_layers: usize) -> Result<Var> {
    let mut parts = vec![x];
    let mut h = x;
    for i in 0..n_layers {
        h = fwd.conv_bn_relu(&format!("{prefix}.layer{i}"), h, 1, 1)?;
        parts.push(h);
    }
    fwd.graph.channel_concat(&parts)
}

/// Pointwise compression followed by the 2× downsample.
pub fn transition_forward<T: Scalar>(fwd: &mut Forward<'_, T>, prefix: &str, x: Var, downsample: Downsample) -> Result<Var> {
    let y = fwd.conv_bn_relu(&format!("{prefix}.transition"), x, 1, 0)?;
    match downsample {
        Downsample::AvgPool => fwd.graph.avg_pool2x2(y),
        Downsample::StridedConv => fwd.conv_bn_relu(&format!("{prefix}.down"), y, 2, 1),
    }
}

pub fn dense_backbone_forward<T: Scalar>(fwd: &mut Forward<'_, T>, x: Var, spec: &DenseBackboneSpec) -> Result<[Var; 3]> {
    let mut taps = [x; 3];
    let mut h = x;
    for b in 0..3 {
        let prefix = format!("backbone.block{}", b + 1);
        h = dense_block_forward(fwd, &prefix, h, spec.layers_per_block[b])?;
        h = transition_forward(fwd, &prefix, h, spec.downsample)?;
        taps[b] = h;
    }
    Ok(taps)
}

pub fn init_baseline<T: Scalar>(store: &mut ParamStore<T>, spec: &BaselineBackboneSpec, rng: &mut impl rand::Rng) {
    let mut c_in = spec.input_channels;
    for b in 0..3 {
        let c = spec.channels[b];
        let prefix = format!("backbone.block{}", b + 1);
        for i in 0..=spec.layers_per_block[b] {
            insert_cbr(store, &format!("{prefix}.layer{i}"), if i == 0 { c_in } else { c }, c, 3, rng);
        }
        c_in = c;
    }
}

pub fn baseline_backbone_forward<T: Scalar>(fwd: &mut Forward<'_, T>, x: Var, spec: &BaselineBackboneSpec) -> Result<[Var; 3]> {
    let mut taps = [x; 3];
    let mut h = x;
    for b in 0..3 {
        let prefix = format!("backbone.block{}", b + 1);
        for i in 0..=spec.layers_per_block[b] {
            h = fwd.conv_bn_relu(&format!("{prefix}.layer{i}"), h, if i == 0 { 2 } else { 1 }, 1)?;
        }
        taps[b] = h;
    }
    Ok(taps)
}
