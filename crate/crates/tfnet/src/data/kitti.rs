//! KITTI tracking text/binary format parsers and the mirror-image
//! writer used to export synthetic drives.
//!
//! Layout: `<root>/label_02/<drive>.txt`, `<root>/calib/<drive>.txt`,
//! `<root>/velodyne/<drive>/<frame>.bin`.

use std::io::Write;
use std::path::Path;

use crate::geometry::{Box2D, Box3D, Calibration, Frame, PointCloud};

use super::{CloudSource, DataError, DriveRecord, ObjectClass, TrackedObjectRecord};

/// Parse a KITTI tracking label stream into per-frame record lists.
/// Line format: frame track_id type truncated occluded alpha
/// bbox(x1 y1 x2 y2) dimensions(h w l) location(x y z) rotation_y.
pub fn parse_tracking_labels(text: &str) -> Result<Vec<Vec<TrackedObjectRecord>>, DataError> {
    let mut frames: Vec<Vec<TrackedObjectRecord>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 17 {
            return Err(DataError::Parse {
                line: lineno + 1,
                message: format!("expected 17 fields, got {}", fields.len()),
            });
        }
        let parse_f = |idx: usize| -> Result<f64, DataError> {
            fields[idx].parse::<f64>().map_err(|e| DataError::Parse {
                line: lineno + 1,
                message: format!("field {}: {e}", idx + 1),
            })
        };
        let frame = parse_f(0)? as usize;
        let track_id = parse_f(1)? as i64;
        let class = ObjectClass::parse(fields[2]);
        let truncation = parse_f(3)?;
        let occlusion = parse_f(4)?.max(0.0) as u8;
        let alpha = parse_f(5)?;
        let (x1, y1, x2, y2) = (parse_f(6)?, parse_f(7)?, parse_f(8)?, parse_f(9)?);
        let (h, w, l) = (parse_f(10)?, parse_f(11)?, parse_f(12)?);
        let (cx, cy, cz) = (parse_f(13)?, parse_f(14)?, parse_f(15)?);
        let theta = parse_f(16)?;
        let record = TrackedObjectRecord {
            frame,
            track_id,
            class,
            truncation,
            occlusion,
            alpha,
            box2d: Box2D { x1, y1, x2, y2 },
            box3d: Box3D {
                h,
                w,
                l,
                cx,
                cy,
                cz,
                theta,
            },
        };
        if frames.len() <= frame {
            frames.resize_with(frame + 1, Vec::new);
        }
        frames[frame].push(record);
    }
    Ok(frames)
}

/// Parse a per-drive calibration file with keys P2, R_rect, Tr_velo_cam.
pub fn parse_calibration(text: &str) -> Result<Calibration, DataError> {
    let mut p2: Option<Vec<f64>> = None;
    let mut r_rect: Option<Vec<f64>> = None;
    let mut tr: Option<Vec<f64>> = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, rest) = match line.split_once(':') {
            Some((k, r)) => (k.trim(), r),
            None => match line.split_once(char::is_whitespace) {
                Some((k, r)) => (k.trim(), r),
                None => continue,
            },
        };
        let vals: Vec<f64> = rest
            .split_whitespace()
            .filter_map(|t| t.parse::<f64>().ok())
            .collect();
        match key {
            "P2" => p2 = Some(vals),
            "R_rect" => r_rect = Some(vals),
            "Tr_velo_cam" => tr = Some(vals),
            _ => {}
        }
    }
    let p2 = p2.ok_or_else(|| DataError::MissingCalibKey("P2".into()))?;
    let r = r_rect.ok_or_else(|| DataError::MissingCalibKey("R_rect".into()))?;
    let tr = tr.ok_or_else(|| DataError::MissingCalibKey("Tr_velo_cam".into()))?;

    let mut calib = Calibration::identity();
    if p2.len() < 12 || r.len() < 9 || tr.len() < 12 {
        return Err(DataError::Parse {
            line: 0,
            message: "calibration matrix has too few values".into(),
        });
    }
    for i in 0..3 {
        for j in 0..4 {
            calib.p[i][j] = p2[i * 4 + j];
            calib.t_velo_to_cam[i][j] = tr[i * 4 + j];
        }
        for j in 0..3 {
            calib.r_rect[i][j] = r[i * 3 + j];
        }
    }
    calib.t_velo_to_cam[3] = [0.0, 0.0, 0.0, 1.0];
    Ok(calib)
}

/// Decode a velodyne .bin: packed (x, y, z, reflectance) f32 LE
/// quadruples. Reflectance is dropped.
pub fn load_point_cloud(bytes: &[u8]) -> Result<PointCloud, DataError> {
    if bytes.len() % 16 != 0 {
        return Err(DataError::TruncatedCloud(bytes.len() - bytes.len() % 16));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for chunk in bytes.chunks_exact(16) {
        let f = |off: usize| f32::from_le_bytes(chunk[off..off + 4].try_into().unwrap()) as f64;
        points.push([f(0), f(4), f(8)]);
    }
    Ok(PointCloud::new(points, Frame::Velodyne))
}

/// Load a drive from the KITTI tracking layout.
pub fn load_drive(root: &Path, drive_id: u32) -> Result<DriveRecord, DataError> {
    let drive = format!("{drive_id:04}");
    let read = |p: std::path::PathBuf| -> Result<String, DataError> {
        std::fs::read_to_string(&p).map_err(|e| DataError::Io {
            path: p.display().to_string(),
            source: e,
        })
    };
    let labels = parse_tracking_labels(&read(root.join("label_02").join(format!("{drive}.txt")))?)?;
    let calib = parse_calibration(&read(root.join("calib").join(format!("{drive}.txt")))?)?;

    let velo_dir = root.join("velodyne").join(&drive);
    let mut paths = Vec::new();
    let mut frame = 0usize;
    loop {
        let p = velo_dir.join(format!("{frame:06}.bin"));
        if !p.exists() {
            break;
        }
        paths.push(p);
        frame += 1;
    }
    let num_frames = paths.len().max(labels.len());
    let mut frames = labels;
    frames.resize_with(num_frames, Vec::new);
    Ok(DriveRecord {
        drive_id: drive,
        calib,
        frames,
        clouds: CloudSource::Paths(paths),
        image_size: (1242, 375),
    })
}

/// Write a drive (typically synthetic) out in the KITTI tracking layout
/// so the file-based pipeline can round trip it.
pub fn write_drive_to_disk(drive: &DriveRecord, root: &Path) -> Result<(), DataError> {
    let io_err = |p: &Path, e: std::io::Error| DataError::Io {
        path: p.display().to_string(),
        source: e,
    };
    let label_dir = root.join("label_02");
    let calib_dir = root.join("calib");
    let velo_dir = root.join("velodyne").join(&drive.drive_id);
    for d in [&label_dir, &calib_dir, &velo_dir] {
        std::fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
    }

    let mut label_text = String::new();
    for frame in &drive.frames {
        for r in frame {
            let b = &r.box2d;
            let x = &r.box3d;
            label_text.push_str(&format!(
                "{} {} {} {:.2} {} {:.6} {:.2} {:.2} {:.2} {:.2} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
                r.frame, r.track_id, r.class.name(), r.truncation, r.occlusion, r.alpha,
                b.x1, b.y1, b.x2, b.y2, x.h, x.w, x.l, x.cx, x.cy, x.cz, x.theta,
            ));
        }
    }
    let label_path = label_dir.join(format!("{}.txt", drive.drive_id));
    std::fs::write(&label_path, label_text).map_err(|e| io_err(&label_path, e))?;

    let c = &drive.calib;
    let fmt_row = |row: &[f64]| {
        row.iter()
            .map(|v| format!("{v:.12e}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut calib_text = String::new();
    let p_flat: Vec<f64> = c.p.iter().flatten().copied().collect();
    calib_text.push_str(&format!("P2: {}\n", fmt_row(&p_flat)));
    let r_flat: Vec<f64> = (0..3)
        .flat_map(|i| (0..3).map(move |j| (i, j)))
        .map(|(i, j)| c.r_rect[i][j])
        .collect();
    calib_text.push_str(&format!("R_rect: {}\n", fmt_row(&r_flat)));
    let t_flat: Vec<f64> = (0..3).flat_map(|i| c.t_velo_to_cam[i].to_vec()).collect();
    calib_text.push_str(&format!("Tr_velo_cam: {}\n", fmt_row(&t_flat)));
    let calib_path = calib_dir.join(format!("{}.txt", drive.drive_id));
    std::fs::write(&calib_path, calib_text).map_err(|e| io_err(&calib_path, e))?;

    for frame in 0..drive.num_frames() {
        let cloud = drive.cloud(frame)?;
        let mut bytes = Vec::with_capacity(cloud.len() * 16);
        for p in &cloud.points {
            for v in [p[0], p[1], p[2], 0.0] {
                bytes.write_all(&(v as f32).to_le_bytes()).unwrap();
            }
        }
        let path = velo_dir.join(format!("{frame:06}.bin"));
        std::fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}
