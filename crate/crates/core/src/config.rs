//! Run configuration: a line-oriented `key = value` file with `[section]`
//! headers, overridable from the command line, with per-key provenance.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::{BackboneSpec, BaselineBackboneSpec, DenseBackboneSpec, Downsample, GrowthSchedule};
use crate::detector::{NeckSpec, PostprocessConfig};
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, IouMode};
use crate::model::ArchSpec;
use crate::pillar::GridSpec;
use crate::pointcloud::SynthConfig;
use crate::train::TrainConfig;

/// Every accepted key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("model.backbone", "dense", "dense | baseline"),
    ("backbone.growth.mode", "table", "fixed | doubling | table"),
    ("backbone.growth.k", "32", "growth rate for fixed mode"),
    ("backbone.growth.k0", "32", "first-block growth rate for doubling mode"),
    ("backbone.layers", "3,5,5", "conv layers per block"),
    ("backbone.channels", "64,128,256", "output channels of the three blocks"),
    ("backbone.downsample", "avg_pool", "avg_pool | strided_conv (dense only)"),
    ("grid.x_range", "0,69.12", "meters, half-open"),
    ("grid.y_range", "-39.68,39.68", "meters, half-open"),
    ("grid.z_range", "-3,1", "meters, half-open"),
    ("grid.pillar_size", "0.16,0.16", "meters"),
    ("grid.max_points", "32", "points kept per pillar"),
    ("grid.max_pillars", "12000", "pillars kept per scene in training"),
    ("grid.channels", "64", "pillar feature channels"),
    ("train.steps", "500", "optimizer steps"),
    ("train.lr", "0.001", "initial learning rate"),
    ("train.eta_min", "0.00001", "final learning rate of the cosine schedule"),
    ("train.weight_decay", "0.01", "decoupled weight decay"),
    ("train.batch_size", "1", "scenes per step"),
    ("train.grad_clip", "35", "global gradient-norm limit, 0 disables"),
    ("train.seed", "0", "seed for weights, scenes and sampling"),
    ("train.scenes", "8", "synthetic training scenes"),
    ("synth.boxes", "6", "objects per synthetic scene"),
    ("synth.noise", "0.02", "point jitter standard deviation in meters"),
    ("synth.class_mix", "1,1,1", "relative Car, Pedestrian, Cyclist frequency"),
    ("eval.iou_car", "0.7", "match threshold for Car"),
    ("eval.iou_pedestrian", "0.5", "match threshold for Pedestrian"),
    ("eval.iou_cyclist", "0.5", "match threshold for Cyclist"),
    ("eval.mode", "3d", "3d | bev"),
    ("eval.score_threshold", "0.1", "minimum score before suppression"),
    ("eval.nms_iou", "0.01", "BEV IoU above which lower-scored boxes are suppressed"),
    ("paths.output", "out", "directory for generated artifacts"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Flag => "flag",
        })
    }
}

/// Unresolved `key → (value, source)` table.
#[derive(Clone, Debug, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, (String, Source)>,
}

impl Default for RawConfig {
    fn default() -> Self {
        Self {
            values: KEYS
                .iter()
                .map(|(k, v, _)| (k.to_string(), (v.to_string(), Source::Default)))
                .collect(),
        }
    }
}

impl RawConfig {
    pub fn set(&mut self, key: &str, value: &str, source: Source) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = (value.trim().to_string(), source);
                Ok(())
            }
            None => Err(Error::config(format!("unknown key `{key}`"))),
        }
    }

    /// Applies a `fixed:<k>`, `doubling:<k0>` or `table` shorthand.
    pub fn set_growth(&mut self, spec: &str, source: Source) -> Result<()> {
        match spec.parse::<GrowthSchedule>()? {
            GrowthSchedule::Fixed(k) => {
                self.set("backbone.growth.mode", "fixed", source)?;
                self.set("backbone.growth.k", &k.to_string(), source)
            }
            GrowthSchedule::Doubling(k) => {
                self.set("backbone.growth.mode", "doubling", source)?;
                self.set("backbone.growth.k0", &k.to_string(), source)
            }
            GrowthSchedule::TableMatched => self.set("backbone.growth.mode", "table", source),
        }
    }

    pub fn parse_str(&mut self, text: &str, origin: &Path) -> Result<()> {
        let mut section = String::new();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .map(str::trim)
                    .filter(|n| !n.is_empty() && !n.contains(char::is_whitespace))
                    .ok_or_else(|| Error::config(format!("{}:{line_no}: malformed section header `{line}`", origin.display())))?;
                section = name.to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("{}:{line_no}: expected `key = value`, got `{line}`", origin.display())))?;
            let k = k.trim();
            let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
            if let Some(prev) = seen.insert(key.clone(), line_no) {
                return Err(Error::config(format!(
                    "{}:{line_no}: key `{key}` already set on line {prev}",
                    origin.display()
                )));
            }
            self.set(&key, v, Source::File)
                .map_err(|e| Error::config(format!("{}:{line_no}: {e}", origin.display())))?;
        }
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.parse_str(&text, path)
    }

    pub fn get(&self, key: &str) -> &str {
        &self.values[key].0
    }

    pub fn source(&self, key: &str) -> Option<Source> {
        self.values.get(key).map(|v| v.1)
    }

    fn parsed<V: FromStr>(&self, key: &str) -> Result<V> {
        self.get(key)
            .parse()
            .map_err(|_| Error::config(format!("`{key}`: cannot parse `{}`", self.get(key))))
    }

    fn list<V: FromStr, const N: usize>(&self, key: &str) -> Result<[V; N]> {
        let items: Vec<V> = self
            .get(key)
            .split(',')
            .map(|s| s.trim().parse::<V>())
            .collect::<Result<_, _>>()
            .map_err(|_| Error::config(format!("`{key}`: cannot parse `{}`", self.get(key))))?;
        items
            .try_into()
            .map_err(|_| Error::config(format!("`{key}` needs exactly {N} comma-separated values")))
    }

    fn positive<V: PartialOrd + Default + FromStr>(&self, key: &str) -> Result<V> {
        let v: V = self.parsed(key)?;
        if v > V::default() {
            Ok(v)
        } else {
            Err(Error::config(format!("`{key}` must be positive, got `{}`", self.get(key))))
        }
    }

    fn unit_interval(&self, key: &str) -> Result<f64> {
        let v: f64 = self.parsed(key)?;
        if v > 0.0 && v <= 1.0 {
            Ok(v)
        } else {
            Err(Error::config(format!("`{key}` must lie in (0, 1], got {v}")))
        }
    }

    fn wrap<V>(key: &str, r: Result<V>) -> Result<V> {
        r.map_err(|e| match e {
            Error::Config(m) if m.contains(&format!("`{key}`")) => Error::Config(m),
            Error::Config(m) => Error::config(format!("`{key}`: {m}")),
            other => other,
        })
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let growth = match self.get("backbone.growth.mode") {
            "fixed" => GrowthSchedule::Fixed(self.positive("backbone.growth.k")?),
            "doubling" => GrowthSchedule::Doubling(self.positive("backbone.growth.k0")?),
            "table" | "table_matched" => GrowthSchedule::TableMatched,
            other => {
                return Err(Error::config(format!(
                    "`backbone.growth.mode`: `{other}` must be fixed, doubling or table"
                )))
            }
        };
        let layers: [usize; 3] = self.list("backbone.layers")?;
        let channels: [usize; 3] = self.list("backbone.channels")?;
        if layers.contains(&0) || channels.contains(&0) {
            return Err(Error::config("`backbone.layers` and `backbone.channels` must be positive"));
        }
        let downsample = Self::wrap("backbone.downsample", self.get("backbone.downsample").parse::<Downsample>())?;
        let feature_channels: usize = self.positive("grid.channels")?;
        let backbone = match self.get("model.backbone") {
            "dense" => BackboneSpec::Dense(DenseBackboneSpec {
                layers_per_block: layers,
                growth,
                transition_out_channels: channels,
                input_channels: feature_channels,
                downsample,
            }),
            "baseline" => BackboneSpec::Baseline(BaselineBackboneSpec {
                layers_per_block: layers,
                channels,
                input_channels: feature_channels,
            }),
            other => return Err(Error::config(format!("`model.backbone`: `{other}` must be dense or baseline"))),
        };
        let pair = |key: &str| -> Result<(f64, f64)> {
            let [a, b]: [f64; 2] = self.list(key)?;
            if a.is_finite() && b.is_finite() && a < b {
                Ok((a, b))
            } else {
                Err(Error::config(format!("`{key}` must be an increasing finite pair")))
            }
        };
        let [px, py]: [f64; 2] = self.list("grid.pillar_size")?;
        let grid = GridSpec {
            x_range: pair("grid.x_range")?,
            y_range: pair("grid.y_range")?,
            z_range: pair("grid.z_range")?,
            pillar_size: (px, py),
            max_points_per_pillar: self.positive("grid.max_points")?,
            max_pillars: self.positive("grid.max_pillars")?,
            feature_channels,
        };
        Self::wrap("grid", grid.dims())?;
        let neck = NeckSpec {
            in_channels: channels,
            ..NeckSpec::default()
        };
        let arch = ArchSpec {
            grid,
            backbone,
            neck,
            ..ArchSpec::default()
        };
        arch.validate()?;

        let lr: f64 = self.positive("train.lr")?;
        let eta_min: f64 = self.parsed("train.eta_min")?;
        if !(0.0..=lr).contains(&eta_min) {
            return Err(Error::config("`train.eta_min` must lie in [0, train.lr]"));
        }
        let weight_decay: f64 = self.parsed("train.weight_decay")?;
        let grad_clip: f64 = self.parsed("train.grad_clip")?;
        if !(weight_decay >= 0.0) || !(grad_clip >= 0.0) {
            return Err(Error::config("`train.weight_decay` and `train.grad_clip` must be non-negative"));
        }
        let train = TrainConfig {
            steps: self.positive("train.steps")?,
            lr,
            eta_min,
            weight_decay,
            batch_size: self.positive("train.batch_size")?,
            grad_clip,
            seed: self.parsed("train.seed")?,
            scenes: self.positive("train.scenes")?,
        };

        let class_mix: [f64; 3] = self.list("synth.class_mix")?;
        if class_mix.iter().any(|&w| !(w >= 0.0)) || class_mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config("`synth.class_mix` needs non-negative weights with a positive sum"));
        }
        let noise: f64 = self.parsed("synth.noise")?;
        if !(noise >= 0.0) {
            return Err(Error::config("`synth.noise` must be non-negative"));
        }
        let synth = SynthConfig {
            n_boxes: self.parsed("synth.boxes")?,
            class_mix,
            noise,
            x_range: arch.grid.x_range,
            y_range: arch.grid.y_range,
            ..SynthConfig::default()
        };

        let mode = match self.get("eval.mode") {
            "3d" => IouMode::ThreeD,
            "bev" => IouMode::Bev,
            other => return Err(Error::config(format!("`eval.mode`: `{other}` must be 3d or bev"))),
        };
        let nms_iou: f64 = self.parsed("eval.nms_iou")?;
        if !(0.0..=1.0).contains(&nms_iou) {
            return Err(Error::config("`eval.nms_iou` must lie in [0, 1]"));
        }
        let score_threshold: f64 = self.parsed("eval.score_threshold")?;
        if !(0.0..1.0).contains(&score_threshold) {
            return Err(Error::config("`eval.score_threshold` must lie in [0, 1)"));
        }
        let eval = EvalConfig {
            iou_thresholds: [
                self.unit_interval("eval.iou_car")?,
                self.unit_interval("eval.iou_pedestrian")?,
                self.unit_interval("eval.iou_cyclist")?,
            ],
            nms_iou,
            mode,
        };
        let postprocess = PostprocessConfig {
            score_threshold,
            nms_iou,
            ..PostprocessConfig::default()
        };
        Ok(RunConfig {
            arch,
            train,
            synth,
            eval,
            postprocess,
            output: PathBuf::from(self.get("paths.output")),
            raw: self.clone(),
        })
    }

    /// Renders every key grouped by section; parses back to the same values.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, _, doc) in KEYS {
            let (sec, rest) = key.split_once('.').unwrap_or(("", key));
            if sec != section {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{sec}]\n"));
                section = sec;
            }
            out.push_str(&format!("{rest} = {}  # {doc}\n", self.get(key)));
        }
        out
    }

    /// `key = value (source)` per line.
    pub fn provenance_report(&self) -> String {
        KEYS.iter()
            .map(|(k, _, _)| format!("{k} = {} ({})\n", self.get(k), self.values[*k].1))
            .collect()
    }
}

/// Fully resolved settings for one invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub arch: ArchSpec,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
    pub postprocess: PostprocessConfig,
    pub output: PathBuf,
    pub raw: RawConfig,
}

impl RunConfig {
    pub fn source(&self, key: &str) -> Option<Source> {
        self.raw.source(key)
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RawConfig::default().resolve().expect("defaults resolve")
    }
}
