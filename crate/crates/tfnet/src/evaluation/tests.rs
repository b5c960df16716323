use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::ObjectClass;
use crate::geometry::{Box2D, Box3D};

use super::*;

fn cube_at(cx: f64, frame_theta: f64) -> Box3D {
    Box3D {
        h: 2.0,
        w: 2.0,
        l: 2.0,
        cx,
        cy: 1.0,
        cz: 10.0,
        theta: frame_theta,
    }
}

fn det(frame: usize, class: ObjectClass, b: Box3D, score: f64) -> Detection {
    Detection {
        frame,
        class,
        box3d: b,
        box2d: None,
        score,
    }
}

fn gt(frame: usize, class: ObjectClass, b: Box3D, d: Option<Difficulty>) -> GroundTruth {
    GroundTruth {
        frame,
        class,
        box3d: b,
        box2d: None,
        difficulty: d,
    }
}

#[test]
fn difficulty_thresholds() {
    assert_eq!(assign_difficulty(45.0, 0, 0.10), Some(Difficulty::Easy));
    assert_eq!(assign_difficulty(39.9, 0, 0.10), Some(Difficulty::Moderate));
    assert_eq!(assign_difficulty(45.0, 1, 0.10), Some(Difficulty::Moderate));
    assert_eq!(assign_difficulty(45.0, 0, 0.20), Some(Difficulty::Moderate));
    assert_eq!(assign_difficulty(30.0, 2, 0.40), Some(Difficulty::Hard));
    assert_eq!(assign_difficulty(30.0, 1, 0.45), Some(Difficulty::Hard));
    assert_eq!(assign_difficulty(24.0, 0, 0.0), None);
    assert_eq!(assign_difficulty(45.0, 3, 0.0), None);
    assert_eq!(assign_difficulty(45.0, 0, 0.60), None);
}

#[test]
fn cumulative_sets() {
    let g = gt(0, ObjectClass::Car, cube_at(0.0, 0.0), Some(Difficulty::Easy));
    assert!(g.counts_for(Difficulty::Easy));
    assert!(g.counts_for(Difficulty::Moderate));
    assert!(g.counts_for(Difficulty::Hard));
    let g = gt(0, ObjectClass::Car, cube_at(0.0, 0.0), Some(Difficulty::Hard));
    assert!(!g.counts_for(Difficulty::Easy));
    assert!(g.counts_for(Difficulty::Hard));
}

#[test]
fn greedy_matching_prefers_higher_scores() {
    let gts = vec![gt(0, ObjectClass::Car, cube_at(0.0, 0.0), Some(Difficulty::Easy))];
    let dets = vec![
        det(0, ObjectClass::Car, cube_at(0.05, 0.0), 0.4),
        det(0, ObjectClass::Car, cube_at(0.02, 0.0), 0.9),
    ];
    let m = match_detections(&dets, &gts, ObjectClass::Car, Difficulty::Easy, 0.7);
    assert_eq!(m.num_gt, 1);
    // higher score claims the box; the other becomes a false positive
    assert_eq!(m.scored, vec![(0.9, true), (0.4, false)]);
}

#[test]
fn cross_frame_and_cross_class_never_match() {
    let gts = vec![gt(1, ObjectClass::Car, cube_at(0.0, 0.0), Some(Difficulty::Easy))];
    let dets = vec![
        det(0, ObjectClass::Car, cube_at(0.0, 0.0), 0.9),
        det(1, ObjectClass::Pedestrian, cube_at(0.0, 0.0), 0.9),
    ];
    let m = match_detections(&dets, &gts, ObjectClass::Car, Difficulty::Easy, 0.7);
    assert_eq!(m.scored, vec![(0.9, false)]);
}

#[test]
fn ignored_ground_truth_is_neither_tp_nor_fp() {
    // a Hard-only box evaluated at Easy: matching it must not count
    // either way, and it must not inflate num_gt
    let gts = vec![gt(0, ObjectClass::Car, cube_at(0.0, 0.0), Some(Difficulty::Hard))];
    let dets = vec![det(0, ObjectClass::Car, cube_at(0.0, 0.0), 0.9)];
    let m = match_detections(&dets, &gts, ObjectClass::Car, Difficulty::Easy, 0.7);
    assert_eq!(m.num_gt, 0);
    assert!(m.scored.is_empty());
}

#[test]
fn dontcare_region_suppresses_false_positive() {
    let region = Box2D::new(100.0, 100.0, 200.0, 200.0);
    let mut dc = gt(0, ObjectClass::DontCare, cube_at(50.0, 0.0), None);
    dc.box2d = Some(region);
    let gts = vec![dc];
    let mut d1 = det(0, ObjectClass::Car, cube_at(50.0, 0.0), 0.9);
    d1.box2d = Some(Box2D::new(105.0, 105.0, 195.0, 195.0));
    let mut d2 = det(0, ObjectClass::Car, cube_at(70.0, 0.0), 0.8);
    d2.box2d = Some(Box2D::new(300.0, 100.0, 400.0, 200.0));
    let m = match_detections(&[d1, d2], &gts, ObjectClass::Car, Difficulty::Easy, 0.7);
    // the in-region detection is ignored, the other is a plain FP
    assert_eq!(m.scored, vec![(0.8, false)]);
}

#[test]
fn eleven_point_ap_fixture_28_over_33() {
    // 2 targets; outcomes TP, FP, TP by descending score:
    // recall 0.5 at precision 1, recall 1.0 at precision 2/3.
    // AP_11 = (6 * 1 + 5 * 2/3) / 11 = 28/33.
    let m = MatchResult {
        scored: vec![(3.0, true), (2.0, false), (1.0, true)],
        num_gt: 2,
    };
    let ap = average_precision(&m, ApMode::ElevenPoint);
    assert!((ap - 28.0 / 33.0).abs() < 1e-12, "ap = {ap}");
}

#[test]
fn perfect_and_empty_detectors() {
    let m = MatchResult {
        scored: vec![(2.0, true), (1.0, true)],
        num_gt: 2,
    };
    assert_eq!(average_precision(&m, ApMode::ElevenPoint), 1.0);
    assert_eq!(average_precision(&m, ApMode::R40), 1.0);
    let empty = MatchResult {
        scored: vec![],
        num_gt: 2,
    };
    assert_eq!(average_precision(&empty, ApMode::ElevenPoint), 0.0);
    let no_gt = MatchResult {
        scored: vec![(1.0, false)],
        num_gt: 0,
    };
    assert_eq!(average_precision(&no_gt, ApMode::ElevenPoint), 0.0);
}

/// Direct re-derivation of interpolated AP from first principles: for
/// each recall threshold scan every operating point.
fn ap_brute_force(outcomes: &[bool], num_gt: usize, points: &[f64]) -> f64 {
    let mut best = vec![0.0f64; points.len()];
    let mut tp = 0.0;
    let mut n = 0.0;
    for &o in outcomes {
        n += 1.0;
        if o {
            tp += 1.0;
        }
        let recall = tp / num_gt as f64;
        let precision = tp / n;
        for (k, &r) in points.iter().enumerate() {
            if recall >= r - 1e-12 && precision > best[k] {
                best[k] = precision;
            }
        }
    }
    best.iter().sum::<f64>() / points.len() as f64
}

#[test]
fn ap_matches_brute_force_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let eleven: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let forty: Vec<f64> = (1..=40).map(|i| i as f64 / 40.0).collect();
    for _ in 0..100 {
        let n = rng.gen_range(1..30);
        let num_gt = rng.gen_range(1..20);
        let outcomes: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let scored: Vec<(f64, bool)> = outcomes
            .iter()
            .enumerate()
            .map(|(i, &o)| (1000.0 - i as f64, o))
            .collect();
        let m = MatchResult { scored, num_gt };
        let a = average_precision(&m, ApMode::ElevenPoint);
        let b = ap_brute_force(&outcomes, num_gt, &eleven);
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        let a = average_precision(&m, ApMode::R40);
        let b = ap_brute_force(&outcomes, num_gt, &forty);
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn ap_is_invariant_to_monotone_score_transforms() {
    let gts = vec![
        gt(0, ObjectClass::Car, cube_at(0.0, 0.0), Some(Difficulty::Easy)),
        gt(0, ObjectClass::Car, cube_at(10.0, 0.0), Some(Difficulty::Easy)),
        gt(1, ObjectClass::Car, cube_at(0.0, 0.0), Some(Difficulty::Easy)),
    ];
    let dets = vec![
        det(0, ObjectClass::Car, cube_at(0.01, 0.0), 0.9),
        det(0, ObjectClass::Car, cube_at(5.0, 0.0), 0.6),
        det(1, ObjectClass::Car, cube_at(0.02, 0.0), 0.4),
    ];
    let ap1 = {
        let m = match_detections(&dets, &gts, ObjectClass::Car, Difficulty::Easy, 0.7);
        average_precision(&m, ApMode::ElevenPoint)
    };
    let squashed: Vec<Detection> = dets
        .iter()
        .map(|d| Detection {
            score: (5.0 * d.score).tanh(),
            ..d.clone()
        })
        .collect();
    let ap2 = {
        let m = match_detections(&squashed, &gts, ObjectClass::Car, Difficulty::Easy, 0.7);
        average_precision(&m, ApMode::ElevenPoint)
    };
    assert_eq!(ap1, ap2);
}

#[test]
fn report_table_golden_fixture() {
    let gts = vec![
        gt(0, ObjectClass::Car, cube_at(0.0, 0.0), Some(Difficulty::Easy)),
        gt(0, ObjectClass::Car, cube_at(10.0, 0.0), Some(Difficulty::Easy)),
        gt(0, ObjectClass::Pedestrian, cube_at(-10.0, 0.0), Some(Difficulty::Moderate)),
    ];
    let dets = vec![
        det(0, ObjectClass::Car, cube_at(0.0, 0.0), 0.9),
        det(0, ObjectClass::Car, cube_at(20.0, 0.0), 0.8),
        det(0, ObjectClass::Car, cube_at(10.0, 0.0), 0.7),
        det(0, ObjectClass::Pedestrian, cube_at(-10.0, 0.0), 0.9),
    ];
    let report = evaluate_detections(&dets, &gts, ApMode::ElevenPoint);
    let text = format_report(&report);
    let expected = "\
AP_11            Easy   Moderate       Hard
Car            0.8485     0.8485     0.8485
Pedestrian          -     1.0000     1.0000
Cyclist             -          -          -
";
    assert_eq!(text, expected);
    assert!((report.mean_moderate() - (28.0 / 33.0 + 1.0) / 2.0).abs() < 1e-4);
}

#[test]
fn per_class_iou_thresholds() {
    assert_eq!(iou_threshold_for(ObjectClass::Car), 0.7);
    assert_eq!(iou_threshold_for(ObjectClass::Pedestrian), 0.5);
    assert_eq!(iou_threshold_for(ObjectClass::Cyclist), 0.5);
}
