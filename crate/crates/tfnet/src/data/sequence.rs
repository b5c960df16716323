//! Temporal sequence assembly: for each (frame, object) pair, gather
//! the object's frustum clouds over the previous tau frames by track
//! id, stopping at the first gap or empty frustum.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::geometry::{
    encode_box_targets, extract_frustum, point_in_box3d, resample_points, rotate_box_y,
    rotate_to_frustum_axis, velo_to_rect, Box3D, BoxTargets, Frame, PointCloud, SizeAnchors,
};

use super::{DataError, DriveRecord, ObjectClass, TrackedObjectRecord};

/// One time-step of a sequence sample: the resampled frustum cloud in
/// the frustum-rotated frame plus per-point segmentation labels.
#[derive(Debug, Clone)]
pub struct FrameFrustum {
    pub frame: usize,
    /// Exactly n points, frustum-rotated frame.
    pub points: PointCloud,
    pub frustum_angle: f64,
    /// 1.0 for points inside the ground-truth box, else 0.0.
    pub seg_labels: Vec<f64>,
}

/// A training/eval sample: tau_eff consecutive frustum observations of
/// one track, oldest first, ending at the anchor frame.
#[derive(Debug, Clone)]
pub struct SequenceSample {
    pub drive_id: String,
    pub track_id: i64,
    pub class: ObjectClass,
    pub class_index: usize,
    /// Oldest first; the last entry is the anchor (newest) frame.
    pub frames: Vec<FrameFrustum>,
    /// Ground truth at the anchor frame, rectified camera frame.
    pub gt_box_rect: Box3D,
    /// Same box in the anchor frame's frustum-rotated frame.
    pub gt_box_frustum: Box3D,
    /// Static targets encoded against the label-box centroid with a
    /// zero T-Net shift; training re-encodes centers at runtime.
    pub targets: BoxTargets,
    /// KITTI occlusion flag of the anchor-frame label.
    pub newest_occlusion: u8,
    pub newest_truncation: f64,
    pub newest_box2d_height: f64,
}

impl SequenceSample {
    pub fn tau_eff(&self) -> usize {
        self.frames.len()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SequenceStats {
    /// Anchor-frame candidates dropped for an empty frustum.
    pub skipped_empty: usize,
    pub samples: usize,
}

fn frustum_seed(drive_id: &str, frame: usize, track_id: i64) -> u64 {
    let mut h = DefaultHasher::new();
    drive_id.hash(&mut h);
    frame.hash(&mut h);
    track_id.hash(&mut h);
    h.finish()
}

/// Build the frustum observation of one labeled object, or None when no
/// points fall in its frustum.
fn frame_frustum(
    drive: &DriveRecord,
    r: &TrackedObjectRecord,
    n: usize,
) -> Result<Option<FrameFrustum>, DataError> {
    let cloud_velo = drive.cloud(r.frame)?;
    let idx = extract_frustum(&cloud_velo, &r.box2d, &drive.calib).expect("velodyne frame");
    if idx.is_empty() {
        return Ok(None);
    }
    let rect = velo_to_rect(&cloud_velo, &drive.calib).expect("velodyne frame");
    let selected = PointCloud::new(
        idx.iter().map(|&i| rect.points[i]).collect(),
        Frame::CameraRect,
    );
    let (rotated, angle) =
        rotate_to_frustum_axis(&selected, &r.box2d, &drive.calib).expect("rect frame");
    let seed = frustum_seed(&drive.drive_id, r.frame, r.track_id);
    let (points, _) = resample_points(&rotated, n, seed).expect("non-empty");
    let gt_frustum = rotate_box_y(&r.box3d, angle);
    let seg_labels = points
        .points
        .iter()
        .map(|p| if point_in_box3d(p, &gt_frustum) { 1.0 } else { 0.0 })
        .collect();
    Ok(Some(FrameFrustum {
        frame: r.frame,
        points,
        frustum_angle: angle,
        seg_labels,
    }))
}

fn find_track(drive: &DriveRecord, frame: usize, track_id: i64) -> Option<&TrackedObjectRecord> {
    drive.frames.get(frame)?.iter().find(|r| r.track_id == track_id)
}

/// Enumerate sequence samples of a drive. Every foreground-labeled
/// object with a non-empty anchor frustum yields one sample; history is
/// extended backwards up to tau frames and stops early at a track gap
/// or an empty past frustum.
pub fn build_sequence_samples(
    drive: &DriveRecord,
    tau: usize,
    n: usize,
    anchors: &SizeAnchors,
) -> Result<(Vec<SequenceSample>, SequenceStats), DataError> {
    assert!(tau >= 1, "tau must be at least 1");
    let mut samples = Vec::new();
    let mut stats = SequenceStats::default();
    for frame in 0..drive.num_frames() {
        for r in &drive.frames[frame] {
            let class_index = match r.class.index() {
                Some(i) => i,
                None => continue,
            };
            let newest = match frame_frustum(drive, r, n)? {
                Some(f) => f,
                None => {
                    stats.skipped_empty += 1;
                    continue;
                }
            };
            let mut history = vec![newest];
            for k in 1..tau {
                if frame < k {
                    break;
                }
                let past = match find_track(drive, frame - k, r.track_id) {
                    Some(p) => p,
                    None => break,
                };
                match frame_frustum(drive, past, n)? {
                    Some(f) => history.push(f),
                    None => break,
                }
            }
            history.reverse();

            let anchor_frame = history.last().expect("non-empty history");
            let gt_frustum = rotate_box_y(&r.box3d, anchor_frame.frustum_angle);
            let centroid = label_centroid(anchor_frame, &gt_frustum);
            let targets = encode_box_targets(
                &r.box3d,
                anchor_frame.frustum_angle,
                centroid,
                [0.0; 3],
                class_index,
                anchors,
            );
            samples.push(SequenceSample {
                drive_id: drive.drive_id.clone(),
                track_id: r.track_id,
                class: r.class,
                class_index,
                frames: history,
                gt_box_rect: r.box3d,
                gt_box_frustum: gt_frustum,
                targets,
                newest_occlusion: r.occlusion,
                newest_truncation: r.truncation,
                newest_box2d_height: r.box2d.height(),
            });
        }
    }
    stats.samples = samples.len();
    Ok((samples, stats))
}

/// Centroid of the points labeled inside the ground-truth box, or of
/// all points when none are.
pub fn label_centroid(f: &FrameFrustum, _gt_frustum: &Box3D) -> [f64; 3] {
    centroid_of(&f.points.points, &f.seg_labels)
}

/// Centroid of the points with positive mask weight; all points when
/// the mask is empty.
pub fn centroid_of(points: &[[f64; 3]], mask: &[f64]) -> [f64; 3] {
    let mut sum = [0.0; 3];
    let mut count = 0usize;
    for (p, &m) in points.iter().zip(mask) {
        if m > 0.5 {
            for i in 0..3 {
                sum[i] += p[i];
            }
            count += 1;
        }
    }
    if count == 0 {
        for p in points {
            for i in 0..3 {
                sum[i] += p[i];
            }
        }
        count = points.len();
    }
    if count == 0 {
        return [0.0; 3];
    }
    [
        sum[0] / count as f64,
        sum[1] / count as f64,
        sum[2] / count as f64,
    ]
}
