mod common;

use std::f64::consts::{FRAC_PI_4, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use densepillars::boxes::{Box3D, Detection, Object, ObjectClass};
use densepillars::detector::{assign_targets, generate_anchors};
use densepillars::eval::{ap_r40, iou_3d, nms_bev_indices, rotated_iou_bev, Frame, IouMode};

#[test]
fn bev_iou_matches_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..25 {
        let (a, b) = random_pair(&mut rng);
        let exact = rotated_iou_bev(&a, &b);
        let mc = mc_iou_bev(&a, &b, 1000, &mut rng);
        assert!((exact - mc).abs() < 2e-3, "{a:?} {b:?}: {exact} vs {mc}");
    }
}

#[test]
fn iou_3d_matches_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10 {
        let (a, b) = random_pair(&mut rng);
        let exact = iou_3d(&a, &b);
        let mc = mc_iou_3d(&a, &b, 160, &mut rng);
        assert!((exact - mc).abs() < 5e-3, "{a:?} {b:?}: {exact} vs {mc}");
    }
}

#[test]
fn rotated_unit_squares() {
    let a = Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
    let b = Box3D { yaw: FRAC_PI_4, ..a };
    // overlap is a regular octagon of area 2(√2 − 1)
    let inter = 2.0 * (2f64.sqrt() - 1.0);
    let expect = inter / (2.0 - inter);
    assert!((rotated_iou_bev(&a, &b) - expect).abs() < 1e-12);
    let a = Box3D::new(0.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0);
    let c = Box3D::new(1.0, 1.0, 0.0, 2.0f64.sqrt(), 2.0f64.sqrt(), 1.0, FRAC_PI_4);
    // the diamond's vertices touch the square's centre lines; a quarter of it overlaps
    assert!((rotated_iou_bev(&a, &c) - 0.5 / 5.5).abs() < 1e-12);
    assert!((expect - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    assert_eq!(rotated_iou_bev(&a, &Box3D { yaw: PI, ..a }), 1.0);
}

#[test]
fn nms_matches_pick_max() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..200 {
        let dets = random_detections(&mut rng, 25);
        let thr = [0.0, 0.01, 0.1, 0.3, 0.5][rng.random_range(0..5)];
        assert_eq!(nms_bev_indices(&dets, thr), brute_nms(&dets, thr));
    }
}

#[test]
fn assignment_matches_full_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let grid = small_grid();
    let mut positives = 0;
    let mut ignores = 0;
    for _ in 0..200 {
        let cfg = random_anchor_config(&mut rng);
        let anchors = generate_anchors(&grid, &cfg).unwrap();
        assert_eq!(anchors.len(), 96);
        let objects = random_objects(&mut rng, 10);
        let got = assign_targets(&anchors, &objects, &cfg);
        assert_eq!(got, brute_assign(&anchors, &objects, &cfg));
        positives += got.num_positive();
        ignores += got.labels.iter().filter(|l| **l == densepillars::detector::AnchorLabel::Ignore).count();
    }
    // the instances exercise every label
    assert!(positives > 200 && ignores > 50, "{positives} {ignores}");
}

#[test]
fn canonical_ap_cases() {
    let car = |x: f64| Box3D::new(x, 0.0, -1.0, 1.6, 3.9, 1.5, 0.0);
    let objects: Vec<Object> = (0..2).map(|i| Object { class: ObjectClass::Car, bbox: car(10.0 * i as f64) }).collect();
    let det = |bbox, score| Detection { class: ObjectClass::Car, bbox, score };
    let ap = |detections: Vec<Detection>| {
        ap_r40(&[Frame { detections, objects: objects.clone() }], ObjectClass::Car, 0.7, IouMode::ThreeD).unwrap()
    };
    assert_eq!(ap(vec![det(car(0.0), 0.9), det(car(10.0), 0.8)]), 1.0);
    assert_eq!(ap(vec![det(car(50.0), 0.9)]), 0.0);
    assert_eq!(ap(vec![]), 0.0);
    // half the objects found, no false positives
    assert!((ap(vec![det(car(0.0), 0.9)]) - 0.5).abs() < 1e-12);
}
