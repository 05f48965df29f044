use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;

use densepillars::boxes::{Detection, ObjectClass};
use densepillars::checkpoint::Checkpoint;
use densepillars::config::{RawConfig, RunConfig, Source};
use densepillars::cost::component_report;
use densepillars::detector::generate_anchors;
use densepillars::eval::{evaluate_set, Frame};
use densepillars::gradsuite;
use densepillars::model::{detect, init_params};
use densepillars::pillar::PillarMode;
use densepillars::pointcloud::{self, LabeledScene};
use densepillars::train::{make_batch, synth_dataset, Trainer, LOSS_HEADER};
use densepillars::{Error, Result};

const THREADS_ENV: &str = "DENSEPILLARS_THREADS";

#[derive(Parser, Debug)]
#[command(name = "densepillars", version, about = "Pillar-based LiDAR detection with a dense backbone")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Configuration file (`key = value` lines with `[section]` headers).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// dense | baseline
    #[arg(long, global = true)]
    backbone: Option<String>,
    /// fixed:<k> | doubling:<k0> | table
    #[arg(long, global = true)]
    growth: Option<String>,
    /// Any configuration key, e.g. `--set train.steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Print every resolved key with its origin.
    #[arg(long, global = true)]
    show_config: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parameter and MAC report for both backbones.
    Analyze {
        /// CSV destination; defaults to `<paths.output>/cost.csv`.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        points: usize,
    },
    /// Write synthetic scenes as KITTI bins plus label CSVs.
    Synth {
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on a scene directory or on seeded synthetic scenes.
    Train {
        /// Directory of `<name>.bin` + `<name>.csv` pairs.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict boxes for every `.bin` in a directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// AP over prediction and label CSVs paired by file name.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
}

fn resolve_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut raw = RawConfig::default();
    if let Some(path) = &g.config {
        raw.load(path)?;
    }
    apply_flags(&mut raw, g)?;
    let cfg = raw.resolve()?;
    if g.show_config {
        eprint!("{}", cfg.raw.provenance_report());
    }
    Ok(cfg)
}

fn apply_flags(raw: &mut RawConfig, g: &GlobalArgs) -> Result<()> {
    if let Some(seed) = g.seed {
        raw.set("train.seed", &seed.to_string(), Source::Flag)?;
    }
    if let Some(b) = &g.backbone {
        raw.set("model.backbone", b, Source::Flag)?;
    }
    if let Some(growth) = &g.growth {
        raw.set_growth(growth, Source::Flag)?;
    }
    for s in &g.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        raw.set(k.trim(), v, Source::Flag)?;
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Sorted file stems with extension `ext` in `dir`.
fn stems(dir: &Path, ext: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == ext) {
            if let Some(s) = path.file_stem().and_then(|s| s.to_str()) {
                out.push(s.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn analyze(cfg: &RunConfig, csv: Option<PathBuf>) -> Result<()> {
    let report = component_report(&cfg.arch)?;
    print!("{}", report.to_table());
    let path = csv.unwrap_or_else(|| cfg.output.join("cost.csv"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(&path, &report.to_csv())?;
    info!("wrote {}", path.display());
    Ok(())
}

fn gradcheck(cfg: &RunConfig, points: usize) -> Result<()> {
    let cases = gradsuite::run_suite(cfg.train.seed, points)?;
    print!("{}", gradsuite::render(&cases));
    let failed: Vec<&str> = cases.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Invariant(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn synth(cfg: &RunConfig, count: usize, out: Option<PathBuf>) -> Result<()> {
    let dir = out.unwrap_or_else(|| cfg.output.join("scenes"));
    create_dir(&dir)?;
    for (i, scene) in synth_dataset(count, cfg.train.seed, &cfg.synth).iter().enumerate() {
        let stem = format!("{i:06}");
        pointcloud::write_kitti_bin(dir.join(format!("{stem}.bin")), &scene.cloud)?;
        pointcloud::write_labels(dir.join(format!("{stem}.csv")), &scene.objects)?;
    }
    println!("wrote {count} scenes to {}", dir.display());
    Ok(())
}

fn load_scenes(dir: &Path) -> Result<Vec<LabeledScene>> {
    let names = stems(dir, "bin")?;
    if names.is_empty() {
        return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "no .bin files")));
    }
    names
        .iter()
        .map(|s| {
            Ok(LabeledScene {
                cloud: pointcloud::read_kitti_bin(dir.join(format!("{s}.bin")))?,
                objects: pointcloud::read_labels(dir.join(format!("{s}.csv")))?,
            })
        })
        .collect()
}

fn train(cfg: &RunConfig, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let scenes = match &data {
        Some(dir) => load_scenes(dir)?,
        None => synth_dataset(cfg.train.scenes, cfg.train.seed, &cfg.synth),
    };
    let dir = out.unwrap_or_else(|| cfg.output.join("train"));
    create_dir(&dir)?;
    let store = init_params(&cfg.arch, cfg.train.seed)?;
    let mut trainer = Trainer::new(cfg.arch.clone(), store, cfg.train.clone(), scenes)?;
    info!(
        "training {} backbone on {} scenes for {} steps",
        cfg.arch.backbone.kind(),
        trainer.scenes().len(),
        cfg.train.steps
    );
    let started = Instant::now();
    let mut csv = format!("{LOSS_HEADER}\n");
    let every = (cfg.train.steps / 20).max(1);
    let result = trainer.run(|log| {
        csv.push_str(&log.csv_row());
        csv.push('\n');
        if log.step % every == 0 || log.step + 1 == cfg.train.steps {
            info!(
                "step {:>5}  lr {:.2e}  total {:.4}  cls {:.4}  loc {:.4}  dir {:.4}  ({:.0}s)",
                log.step,
                log.lr,
                log.total,
                log.cls,
                log.loc,
                log.dir,
                started.elapsed().as_secs_f64()
            );
        }
    });
    write_file(&dir.join("loss.csv"), &csv)?;
    result?;
    let ck = Checkpoint {
        config: cfg.raw.to_text(),
        params: trainer.store.clone(),
        optimizer: Some((trainer.optimizer.config, trainer.optimizer.state.clone())),
        step: trainer.step,
    };
    ck.save(dir.join("model.dpck"))?;
    println!("wrote {} and {}", dir.join("loss.csv").display(), dir.join("model.dpck").display());
    Ok(())
}

fn infer(checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut raw = RawConfig::default();
    raw.parse_str(&ck.config, checkpoint)?;
    let cfg = raw.resolve()?;
    let anchors = generate_anchors(&cfg.arch.grid, &cfg.arch.anchors)?;
    let names = stems(input, "bin")?;
    create_dir(out)?;
    names.par_iter().try_for_each(|stem| -> Result<()> {
        let cloud = pointcloud::read_kitti_bin(input.join(format!("{stem}.bin")))?;
        let batch = make_batch(&cfg.arch, &[&cloud], cfg.train.seed, PillarMode::Inference)?;
        let mut store = ck.params.clone();
        let dets = detect(&cfg.arch, &mut store, &batch, &anchors, &cfg.postprocess)?.remove(0);
        pointcloud::write_predictions(out.join(format!("{stem}.csv")), &dets)
    })?;
    println!("wrote {} prediction files to {}", names.len(), out.display());
    Ok(())
}

fn eval(cfg: &RunConfig, pred: &Path, labels: &Path) -> Result<()> {
    let names = stems(labels, "csv")?;
    let frames = names
        .par_iter()
        .map(|stem| {
            let objects = pointcloud::read_labels(labels.join(format!("{stem}.csv")))?;
            let path = pred.join(format!("{stem}.csv"));
            let detections: Vec<Detection> = if path.exists() {
                pointcloud::read_predictions(&path)?
            } else {
                warn!("no predictions for {stem}; treating as empty");
                Vec::new()
            };
            Ok(Frame { detections, objects })
        })
        .collect::<Result<Vec<_>>>()?;
    let result = evaluate_set(&frames, &cfg.eval);
    println!("{:<12} {:>6} {:>8}", "class", "IoU", "AP_R40");
    for class in ObjectClass::ALL {
        let thr = cfg.eval.iou_thresholds[class.index()];
        match result.per_class.get(&class) {
            Some(ap) => println!("{:<12} {:>6.2} {:>8.4}", class.name(), thr, ap),
            None => println!("{:<12} {:>6.2} {:>8}", class.name(), thr, "n/a"),
        }
    }
    println!("{:<12} {:>6} {:>8.4}", "mAP", "", result.map);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.global)?;
    match cli.command {
        Command::Analyze { csv } => analyze(&cfg, csv),
        Command::Gradcheck { points } => gradcheck(&cfg, points),
        Command::Synth { count, out } => synth(&cfg, count, out),
        Command::Train { data, out } => train(&cfg, data, out),
        Command::Infer { checkpoint, input, out } => {
            let out = out.unwrap_or_else(|| cfg.output.join("predictions"));
            infer(&checkpoint, &input, &out)
        }
        Command::Eval { pred, labels } => eval(&cfg, &pred, &labels),
    }
}

fn init_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("{THREADS_ENV} must be a non-negative integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config(format!("{THREADS_ENV}: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
