//! KITTI-style AP evaluation: difficulty assignment, greedy
//! score-ordered matching under a 3D IoU threshold, interpolated
//! average precision and the per-class report table.

use std::collections::HashMap;

use crate::data::ObjectClass;
use crate::geometry::{iou3d, Box2D, Box3D, IouMode};

#[cfg(test)]
mod tests;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

pub const DIFFICULTIES: [Difficulty; 3] =
    [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

impl Difficulty {
    pub fn name(&self) -> &'static str {
        match self {
            Difficulty::Easy => "Easy",
            Difficulty::Moderate => "Moderate",
            Difficulty::Hard => "Hard",
        }
    }
}

/// KITTI difficulty from 2D box height (px), occlusion flag and
/// truncation fraction. None means harder than Hard: the ground truth
/// is ignored entirely. Sets are cumulative: an Easy box also counts
/// for Moderate and Hard.
pub fn assign_difficulty(box_height: f64, occlusion: u8, truncation: f64) -> Option<Difficulty> {
    if box_height >= 40.0 && occlusion == 0 && truncation <= 0.15 {
        Some(Difficulty::Easy)
    } else if box_height >= 25.0 && occlusion <= 1 && truncation <= 0.30 {
        Some(Difficulty::Moderate)
    } else if box_height >= 25.0 && occlusion <= 2 && truncation <= 0.50 {
        Some(Difficulty::Hard)
    } else {
        None
    }
}

#[derive(Debug, Clone)]
pub struct Detection {
    pub frame: usize,
    pub class: ObjectClass,
    pub box3d: Box3D,
    /// Projected 2D box, used only against DontCare ignore regions.
    pub box2d: Option<Box2D>,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub frame: usize,
    pub class: ObjectClass,
    pub box3d: Box3D,
    /// 2D region for DontCare entries.
    pub box2d: Option<Box2D>,
    pub difficulty: Option<Difficulty>,
}

impl GroundTruth {
    /// Whether this box counts as a target at the given difficulty.
    pub fn counts_for(&self, d: Difficulty) -> bool {
        matches!(self.difficulty, Some(own) if own <= d)
    }
}

/// Detection outcomes ordered by descending score, plus the number of
/// counted ground-truth boxes.
#[derive(Debug, Clone)]
pub struct MatchResult {
    /// (score, is_true_positive); ignored detections are absent.
    pub scored: Vec<(f64, bool)>,
    pub num_gt: usize,
}

/// Greedy matching: detections in descending score order claim the
/// unmatched same-frame same-class ground truth of highest 3D IoU at or
/// above the threshold. A match to a box outside the difficulty set (or
/// a 2D overlap >= 0.5 with a DontCare region) makes the detection
/// ignored rather than a false positive.
pub fn match_detections(
    detections: &[Detection],
    ground_truth: &[GroundTruth],
    class: ObjectClass,
    difficulty: Difficulty,
    iou_threshold: f64,
) -> MatchResult {
    let mut gt_by_frame: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut dontcare_by_frame: HashMap<usize, Vec<&GroundTruth>> = HashMap::new();
    let mut num_gt = 0;
    for (i, g) in ground_truth.iter().enumerate() {
        if g.class == ObjectClass::DontCare {
            dontcare_by_frame.entry(g.frame).or_default().push(g);
            continue;
        }
        if g.class != class {
            continue;
        }
        gt_by_frame.entry(g.frame).or_default().push(i);
        if g.counts_for(difficulty) {
            num_gt += 1;
        }
    }

    let mut order: Vec<usize> = (0..detections.len())
        .filter(|&i| detections[i].class == class)
        .collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut matched = vec![false; ground_truth.len()];
    let mut scored = Vec::new();
    for &di in &order {
        let det = &detections[di];
        let mut best: Option<(usize, f64)> = None;
        if let Some(cands) = gt_by_frame.get(&det.frame) {
            for &gi in cands {
                if matched[gi] {
                    continue;
                }
                let iou = iou3d(&det.box3d, &ground_truth[gi].box3d, IouMode::Full3d);
                if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
        }
        match best {
            Some((gi, _)) => {
                matched[gi] = true;
                if ground_truth[gi].counts_for(difficulty) {
                    scored.push((det.score, true));
                }
                // matches to harder-than-requested boxes are ignored
            }
            None => {
                let in_dontcare = det.box2d.is_some_and(|db| {
                    dontcare_by_frame
                        .get(&det.frame)
                        .is_some_and(|regions| {
                            regions.iter().any(|g| {
                                g.box2d.is_some_and(|gb| db.iou(&gb) >= 0.5)
                            })
                        })
                });
                if !in_dontcare {
                    scored.push((det.score, false));
                }
            }
        }
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    MatchResult { scored, num_gt }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApMode {
    /// 11-point interpolation at recalls 0.0, 0.1, ..., 1.0.
    ElevenPoint,
    /// 40-point interpolation at recalls 1/40, ..., 40/40.
    R40,
}

/// Interpolated average precision from score-ordered outcomes.
pub fn average_precision(result: &MatchResult, mode: ApMode) -> f64 {
    if result.num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(result.scored.len());
    for &(_, is_tp) in &result.scored {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        let recall = tp as f64 / result.num_gt as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        curve.push((recall, precision));
    }
    let max_prec_at = |r: f64| -> f64 {
        curve
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max)
    };
    match mode {
        ApMode::ElevenPoint => {
            (0..=10).map(|i| max_prec_at(i as f64 / 10.0)).sum::<f64>() / 11.0
        }
        ApMode::R40 => (1..=40).map(|i| max_prec_at(i as f64 / 40.0)).sum::<f64>() / 40.0,
    }
}

pub const EVAL_CLASSES: [ObjectClass; 3] = [
    ObjectClass::Car,
    ObjectClass::Pedestrian,
    ObjectClass::Cyclist,
];

/// Per-class 3D IoU thresholds: Car 0.7, Pedestrian and Cyclist 0.5.
pub fn iou_threshold_for(class: ObjectClass) -> f64 {
    match class {
        ObjectClass::Car => 0.7,
        _ => 0.5,
    }
}

#[derive(Debug, Clone)]
pub struct ApReport {
    /// ap[class][difficulty]; None when the class has no counted ground
    /// truth at that difficulty.
    pub ap: [[Option<f64>; 3]; 3],
    pub mode: ApMode,
}

impl ApReport {
    /// Moderate-difficulty AP averaged over classes that have targets;
    /// the scalar used for checkpoint selection.
    pub fn mean_moderate(&self) -> f64 {
        let vals: Vec<f64> = (0..3).filter_map(|c| self.ap[c][1]).collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }
}

/// Evaluate detections against ground truth for every class and
/// difficulty.
pub fn evaluate_detections(
    detections: &[Detection],
    ground_truth: &[GroundTruth],
    mode: ApMode,
) -> ApReport {
    let mut ap = [[None; 3]; 3];
    for (ci, &class) in EVAL_CLASSES.iter().enumerate() {
        for (di, &diff) in DIFFICULTIES.iter().enumerate() {
            let m = match_detections(
                detections,
                ground_truth,
                class,
                diff,
                iou_threshold_for(class),
            );
            if m.num_gt > 0 {
                ap[ci][di] = Some(average_precision(&m, mode));
            }
        }
    }
    ApReport { ap, mode }
}

/// Fixed-width table; classes without targets print dashes.
pub fn format_report(report: &ApReport) -> String {
    let mode = match report.mode {
        ApMode::ElevenPoint => "AP_11",
        ApMode::R40 => "AP_40",
    };
    let mut out = String::new();
    out.push_str(&format!(
        "{mode:<10} {:>10} {:>10} {:>10}\n",
        "Easy", "Moderate", "Hard"
    ));
    for (ci, class) in EVAL_CLASSES.iter().enumerate() {
        out.push_str(&format!("{:<10}", class.name()));
        for di in 0..3 {
            match report.ap[ci][di] {
                Some(v) => out.push_str(&format!(" {:>10.4}", v)),
                None => out.push_str(&format!(" {:>10}", "-")),
            }
        }
        out.push('\n');
    }
    out
}
