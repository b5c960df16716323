//! KITTI tracking-format ingestion, train/val split, temporal sequence
//! assembly by track id, and the synthetic occlusion-sequence
//! generator.

mod kitti;
mod sequence;
mod synth;

pub use kitti::{
    load_drive, load_point_cloud, parse_calibration, parse_tracking_labels, write_drive_to_disk,
};
pub use sequence::{
    build_sequence_samples, centroid_of, label_centroid, FrameFrustum, SequenceSample,
    SequenceStats,
};
pub use synth::{synth_generate, AutoOcclusion, OcclusionWindow, SynthConfig};

use std::path::PathBuf;

use thiserror::Error;

use crate::geometry::{Box2D, Box3D, Calibration, Frame, PointCloud, SizeAnchors};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("missing calibration key {0}")]
    MissingCalibKey(String),
    #[error("truncated point cloud stream at byte {0}")]
    TruncatedCloud(usize),
    #[error("unknown drive id {0} in split override")]
    UnknownDrive(u32),
    #[error("no point cloud for frame {0}")]
    MissingCloud(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjectClass {
    Car,
    Pedestrian,
    Cyclist,
    DontCare,
    Other,
}

impl ObjectClass {
    pub fn parse(s: &str) -> Self {
        match s {
            "Car" => ObjectClass::Car,
            "Pedestrian" => ObjectClass::Pedestrian,
            "Cyclist" => ObjectClass::Cyclist,
            "DontCare" => ObjectClass::DontCare,
            _ => ObjectClass::Other,
        }
    }

    /// Index into the detector's class one-hot / size anchors, for the
    /// three foreground classes only.
    pub fn index(&self) -> Option<usize> {
        match self {
            ObjectClass::Car => Some(0),
            ObjectClass::Pedestrian => Some(1),
            ObjectClass::Cyclist => Some(2),
            _ => None,
        }
    }

    pub fn from_index(i: usize) -> Self {
        match i {
            0 => ObjectClass::Car,
            1 => ObjectClass::Pedestrian,
            _ => ObjectClass::Cyclist,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ObjectClass::Car => "Car",
            ObjectClass::Pedestrian => "Pedestrian",
            ObjectClass::Cyclist => "Cyclist",
            ObjectClass::DontCare => "DontCare",
            ObjectClass::Other => "Other",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrackedObjectRecord {
    pub frame: usize,
    pub track_id: i64,
    pub class: ObjectClass,
    pub truncation: f64,
    pub occlusion: u8,
    pub alpha: f64,
    pub box2d: Box2D,
    pub box3d: Box3D,
}

#[derive(Debug, Clone)]
pub enum CloudSource {
    Paths(Vec<PathBuf>),
    InMemory(Vec<Vec<[f64; 3]>>),
}

#[derive(Debug, Clone)]
pub struct DriveRecord {
    pub drive_id: String,
    pub calib: Calibration,
    /// Per-frame object lists, indexed by frame.
    pub frames: Vec<Vec<TrackedObjectRecord>>,
    pub clouds: CloudSource,
    /// (width, height) in pixels.
    pub image_size: (usize, usize),
}

impl DriveRecord {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn cloud(&self, frame: usize) -> Result<PointCloud, DataError> {
        match &self.clouds {
            CloudSource::InMemory(clouds) => clouds
                .get(frame)
                .map(|pts| PointCloud::new(pts.clone(), Frame::Velodyne))
                .ok_or(DataError::MissingCloud(frame)),
            CloudSource::Paths(paths) => {
                let path = paths.get(frame).ok_or(DataError::MissingCloud(frame))?;
                let bytes = std::fs::read(path).map_err(|e| DataError::Io {
                    path: path.display().to_string(),
                    source: e,
                })?;
                load_point_cloud(&bytes)
            }
        }
    }
}

/// Default validation drives of the 21 KITTI tracking training drives.
pub const DEFAULT_VAL_DRIVES: [u32; 4] = [11, 15, 16, 18];

/// Split drive ids into (train, val). With no override the validation
/// set is drives 11, 15, 16, 18 and the rest train.
pub fn split_train_val(
    drive_ids: &[u32],
    override_val: Option<&[u32]>,
) -> Result<(Vec<u32>, Vec<u32>), DataError> {
    let val_set: Vec<u32> = match override_val {
        Some(v) => {
            for &d in v {
                if !drive_ids.contains(&d) {
                    return Err(DataError::UnknownDrive(d));
                }
            }
            v.to_vec()
        }
        None => DEFAULT_VAL_DRIVES
            .iter()
            .copied()
            .filter(|d| drive_ids.contains(d))
            .collect(),
    };
    let train = drive_ids
        .iter()
        .copied()
        .filter(|d| !val_set.contains(d))
        .collect();
    Ok((train, val_set))
}

/// Per-class mean (h, w, l) over the foreground objects of the given
/// drives; falls back to defaults for classes with no instances.
pub fn anchors_from_drives(drives: &[DriveRecord]) -> SizeAnchors {
    let mut anchors = SizeAnchors::default();
    let mut sums = [[0.0; 3]; 3];
    let mut counts = [0usize; 3];
    for d in drives {
        for frame in &d.frames {
            for r in frame {
                if let Some(i) = r.class.index() {
                    sums[i][0] += r.box3d.h;
                    sums[i][1] += r.box3d.w;
                    sums[i][2] += r.box3d.l;
                    counts[i] += 1;
                }
            }
        }
    }
    for i in 0..3 {
        if counts[i] > 0 {
            for j in 0..3 {
                anchors.dims[i][j] = sums[i][j] / counts[i] as f64;
            }
        }
    }
    anchors
}
