use std::sync::Mutex;

use densepillars::backbone::{BackboneSpec, BaselineBackboneSpec, DenseBackboneSpec};
use densepillars::checkpoint::Checkpoint;
use densepillars::cost::pipeline_layers;
use densepillars::detector::{generate_anchors, PostprocessConfig};
use densepillars::model::{detect, forward, init_params, ArchSpec};
use densepillars::params::{Forward, ParamStore};
use densepillars::pillar::{GridSpec, PillarMode};
use densepillars::pointcloud::{synth_scene, SynthConfig};
use densepillars::tensor::{BnMode, Graph};
use densepillars::train::{make_batch, synth_dataset, TrainConfig, Trainer};

// full-resolution passes need a few hundred MB each; run them one at a time
static HEAVY: Mutex<()> = Mutex::new(());

fn small_arch(backbone: BackboneSpec) -> ArchSpec {
    ArchSpec {
        grid: GridSpec {
            x_range: (0.0, 10.24),
            y_range: (-5.12, 5.12),
            max_pillars: 4000,
            ..GridSpec::default()
        },
        backbone,
        ..ArchSpec::default()
    }
}

fn synth_for(grid: &GridSpec) -> SynthConfig {
    SynthConfig {
        x_range: grid.x_range,
        y_range: grid.y_range,
        n_boxes: 3,
        ground_points: 1500,
        ..SynthConfig::default()
    }
}

fn stage_shapes(arch: &ArchSpec, seed: u64) -> Vec<Vec<usize>> {
    let mut store = init_params::<f32>(arch, 5).unwrap();
    let cloud = synth_scene(seed, &synth_for(&arch.grid)).scene.cloud;
    let batch = make_batch(arch, &[&cloud], 0, PillarMode::Inference).unwrap();
    let mut g = Graph::new();
    let mut fwd = Forward { graph: &mut g, store: &mut store, mode: BnMode::Eval };
    let st = forward(arch, &mut fwd, &batch).unwrap();
    let mut vars = vec![st.pseudo_image];
    vars.extend(st.taps);
    vars.extend([st.fused, st.head.cls, st.head.boxes, st.head.dir]);
    vars.into_iter().map(|v| g.shape(v).to_vec()).collect()
}

#[test]
fn full_resolution_shapes() {
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    for backbone in [BackboneSpec::Dense(DenseBackboneSpec::default()), BackboneSpec::Baseline(BaselineBackboneSpec::default())] {
        let arch = ArchSpec { backbone, ..ArchSpec::default() };
        let shapes = stage_shapes(&arch, 1);
        assert_eq!(
            shapes,
            vec![
                vec![1, 64, 496, 432],
                vec![1, 64, 248, 216],
                vec![1, 128, 124, 108],
                vec![1, 256, 62, 54],
                vec![1, 384, 248, 216],
                vec![1, 18, 248, 216],
                vec![1, 42, 248, 216],
                vec![1, 12, 248, 216],
            ],
            "{}",
            arch.backbone.kind()
        );
    }
}

#[test]
fn analyzer_shapes_follow_runtime() {
    let arch = small_arch(BackboneSpec::Dense(DenseBackboneSpec::default()));
    let shapes = stage_shapes(&arch, 2);
    let layers = pipeline_layers(&arch).unwrap();
    let last = |name: &str| {
        let l = layers.backbone.iter().chain(&layers.neck).chain(&layers.head).filter(|l| l.name.starts_with(name)).last().unwrap();
        vec![1, l.output.0, l.output.1, l.output.2]
    };
    assert_eq!(last("backbone.block1"), shapes[1]);
    assert_eq!(last("backbone.block2"), shapes[2]);
    assert_eq!(last("backbone.block3"), shapes[3]);
    assert_eq!(last("head.cls"), shapes[5]);
    assert_eq!(last("head.box"), shapes[6]);
    assert_eq!(last("head.dir"), shapes[7]);
    let store = init_params::<f32>(&arch, 0).unwrap();
    let counted: u64 = [&layers.encoder, &layers.backbone, &layers.neck, &layers.head]
        .iter()
        .map(|ls| densepillars::cost::count_params(ls))
        .sum();
    assert_eq!(counted as usize, store.num_trainable(""));
}

#[test]
fn checkpoint_roundtrip_reproduces_detections() {
    let arch = small_arch(BackboneSpec::Dense(DenseBackboneSpec::default()));
    let mut store = init_params::<f32>(&arch, 9).unwrap();
    // shift the running statistics away from their initial values
    let cloud = synth_scene(4, &synth_for(&arch.grid)).scene.cloud;
    let batch = make_batch(&arch, &[&cloud], 0, PillarMode::Inference).unwrap();
    {
        let mut g = Graph::new();
        let mut fwd = Forward { graph: &mut g, store: &mut store, mode: BnMode::Train };
        forward(&arch, &mut fwd, &batch).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dpck");
    Checkpoint { config: String::new(), params: store.clone(), optimizer: None, step: 0 }.save(&path).unwrap();
    let mut loaded: ParamStore<f32> = Checkpoint::load(&path).unwrap().params;
    assert_eq!(loaded, store);

    let anchors = generate_anchors(&arch.grid, &arch.anchors).unwrap();
    let cfg = PostprocessConfig { score_threshold: 0.0, ..PostprocessConfig::default() };
    let a = detect(&arch, &mut store, &batch, &anchors, &cfg).unwrap();
    let b = detect(&arch, &mut loaded, &batch, &anchors, &cfg).unwrap();
    assert!(!a[0].is_empty());
    assert_eq!(a, b);
}

#[test]
fn training_is_deterministic() {
    let arch = small_arch(BackboneSpec::Dense(DenseBackboneSpec::default()));
    let run = || {
        let scenes = synth_dataset(2, 3, &synth_for(&arch.grid));
        let cfg = TrainConfig { steps: 3, scenes: 2, ..TrainConfig::default() };
        let mut t = Trainer::new(arch.clone(), init_params(&arch, 3).unwrap(), cfg, scenes).unwrap();
        let logs = t.run(|_| {}).unwrap();
        (logs, t.store)
    };
    let (la, sa) = run();
    let (lb, sb) = run();
    assert_eq!(la, lb);
    assert_eq!(sa, sb);
    assert!(la.iter().all(|l| l.total.is_finite() && l.num_pos > 0));
}

#[test]
fn backbone_swap_keeps_other_weights() {
    let dense = small_arch(BackboneSpec::Dense(DenseBackboneSpec::default()));
    let base = small_arch(BackboneSpec::Baseline(BaselineBackboneSpec::default()));
    let (a, b) = (init_params::<f32>(&dense, 7).unwrap(), init_params::<f32>(&base, 7).unwrap());
    let outside = |s: &ParamStore<f32>| {
        s.params()
            .filter(|(n, _)| !n.starts_with("backbone."))
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect::<Vec<_>>()
    };
    assert_eq!(outside(&a), outside(&b));
    assert_eq!(stage_shapes(&dense, 3)[1..], stage_shapes(&base, 3)[1..]);
}
