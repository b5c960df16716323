//! Coordinate transforms, frustum extraction, box parametrization and
//! rotated-box IoU. Everything here is a pure function on immutable
//! inputs.
//!
//! Conventions: rectified camera frame has x right, y down, z forward;
//! Box3D centers sit on the bottom face; heading is a rotation about
//! the y axis with the box length axis at theta = 0 pointing along +x.

mod boxes;
mod iou;
mod targets;

pub use boxes::{box3d_corners, Box2D, Box3D};
pub use iou::{iou3d, polygon_area, sutherland_hodgman_clip, IouMode};
pub use targets::{
    bin_to_heading, decode_box, encode_box_targets, head_values_from_targets, heading_to_bin,
    BoxTargets, DecodeWarnings, HeadValues, SizeAnchors, NH, NS,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("expected point cloud in frame {expected:?}, got {actual:?}")]
    WrongFrame { expected: Frame, actual: Frame },
    #[error("empty frustum: cannot resample zero points")]
    EmptyFrustum,
}

/// Depth below which a point is considered behind / on the image plane.
pub const Z_MIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    Velodyne,
    CameraRect,
    FrustumRotated,
}

#[derive(Debug, Clone)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub frame: Frame,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>, frame: Frame) -> Self {
        Self { points, frame }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// KITTI tracking calibration: P (3x4 projection), R_rect (4x4 with the
/// rectifying rotation in the upper-left 3x3), T_velo_to_cam (4x4).
#[derive(Debug, Clone)]
pub struct Calibration {
    pub p: [[f64; 4]; 3],
    pub r_rect: [[f64; 4]; 4],
    pub t_velo_to_cam: [[f64; 4]; 4],
}

impl Calibration {
    pub fn identity() -> Self {
        let mut eye4 = [[0.0; 4]; 4];
        for (i, row) in eye4.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        let mut p = [[0.0; 4]; 3];
        for (i, row) in p.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self {
            p,
            r_rect: eye4,
            t_velo_to_cam: eye4,
        }
    }

    /// Pinhole projection with focal f and principal point (cu, cv),
    /// identity rectification and velo-to-cam.
    pub fn pinhole(f: f64, cu: f64, cv: f64) -> Self {
        let mut c = Self::identity();
        c.p = [
            [f, 0.0, cu, 0.0],
            [0.0, f, cv, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ];
        c
    }
}

pub fn mat4_mul(a: &[[f64; 4]; 4], b: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            for k in 0..4 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn apply_homogeneous(m: &[[f64; 4]; 4], p: &[f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        *o = m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3];
    }
    out
}

/// Velodyne -> rectified camera coordinates: R_rect * T_velo_to_cam.
pub fn velo_to_rect(pc: &PointCloud, calib: &Calibration) -> Result<PointCloud, GeometryError> {
    if pc.frame != Frame::Velodyne {
        return Err(GeometryError::WrongFrame {
            expected: Frame::Velodyne,
            actual: pc.frame,
        });
    }
    let m = mat4_mul(&calib.r_rect, &calib.t_velo_to_cam);
    let points = pc.points.iter().map(|p| apply_homogeneous(&m, p)).collect();
    Ok(PointCloud::new(points, Frame::CameraRect))
}

/// Perspective projection to pixels. The mask is false where z <= Z_MIN.
pub fn rect_to_image(
    pc: &PointCloud,
    calib: &Calibration,
) -> Result<(Vec<[f64; 2]>, Vec<bool>), GeometryError> {
    if pc.frame != Frame::CameraRect {
        return Err(GeometryError::WrongFrame {
            expected: Frame::CameraRect,
            actual: pc.frame,
        });
    }
    let mut uv = Vec::with_capacity(pc.len());
    let mut valid = Vec::with_capacity(pc.len());
    for p in &pc.points {
        let (u, v, z) = project_point(&calib.p, p);
        uv.push([u, v]);
        valid.push(z > Z_MIN);
    }
    Ok((uv, valid))
}

pub(crate) fn project_point(p_mat: &[[f64; 4]; 3], p: &[f64; 3]) -> (f64, f64, f64) {
    let hx = p_mat[0][0] * p[0] + p_mat[0][1] * p[1] + p_mat[0][2] * p[2] + p_mat[0][3];
    let hy = p_mat[1][0] * p[0] + p_mat[1][1] * p[1] + p_mat[1][2] * p[2] + p_mat[1][3];
    let hz = p_mat[2][0] * p[0] + p_mat[2][1] * p[1] + p_mat[2][2] * p[2] + p_mat[2][3];
    if hz.abs() < 1e-300 {
        (f64::INFINITY, f64::INFINITY, hz)
    } else {
        (hx / hz, hy / hz, hz)
    }
}

/// Indices of velodyne points whose projection falls inside `q` with
/// rectified depth above Z_MIN.
pub fn extract_frustum(
    pc: &PointCloud,
    q: &Box2D,
    calib: &Calibration,
) -> Result<Vec<usize>, GeometryError> {
    let rect = velo_to_rect(pc, calib)?;
    let (uv, valid) = rect_to_image(&rect, calib)?;
    let mut out = Vec::new();
    for i in 0..rect.len() {
        if valid[i] && q.contains(uv[i][0], uv[i][1]) {
            out.push(i);
        }
    }
    Ok(out)
}

/// Rotation about the y axis mapping a heading-theta direction onto +z:
/// p' = R_y(-angle) p with R_y as used by `box3d_corners`.
pub fn rotate_y(p: &[f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    [c * p[0] + s * p[2], p[1], -s * p[0] + c * p[2]]
}

/// Rotate a rectified-frame cloud so the ray through the 2D box center
/// maps onto +z. Returns the frustum angle that was removed; add it back
/// when decoding headings.
pub fn rotate_to_frustum_axis(
    pc: &PointCloud,
    q: &Box2D,
    calib: &Calibration,
) -> Result<(PointCloud, f64), GeometryError> {
    if pc.frame != Frame::CameraRect {
        return Err(GeometryError::WrongFrame {
            expected: Frame::CameraRect,
            actual: pc.frame,
        });
    }
    let angle = frustum_angle(q, calib);
    let points = pc.points.iter().map(|p| rotate_y(p, -angle)).collect();
    Ok((PointCloud::new(points, Frame::FrustumRotated), angle))
}

/// Angle between +z and the viewing ray through the center of `q`.
pub fn frustum_angle(q: &Box2D, calib: &Calibration) -> f64 {
    let (cu, _cv) = q.center();
    // Unproject the box center at a reference depth. With P = K [I | t]
    // the image row gives u = (fu x + cx z + tx) / z, so
    // x = ((u - cx) z - tx) / fu.
    let fu = calib.p[0][0];
    let cx = calib.p[0][2];
    let tx = calib.p[0][3];
    let z0 = 20.0;
    let x = ((cu - cx) * z0 - tx) / fu;
    x.atan2(z0)
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut t = theta % two_pi;
    if t <= -std::f64::consts::PI {
        t += two_pi;
    } else if t > std::f64::consts::PI {
        t -= two_pi;
    }
    t
}

/// Uniform resample to exactly n points: without replacement when the
/// cloud has at least n, with replacement otherwise. Deterministic
/// under the seed.
pub fn resample_points(
    pc: &PointCloud,
    n: usize,
    seed: u64,
) -> Result<(PointCloud, Vec<usize>), GeometryError> {
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    if pc.is_empty() {
        return Err(GeometryError::EmptyFrustum);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices: Vec<usize> = if pc.len() >= n {
        let mut idx: Vec<usize> = (0..pc.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(n);
        idx
    } else {
        (0..n).map(|_| rng.gen_range(0..pc.len())).collect()
    };
    let points = indices.iter().map(|&i| pc.points[i]).collect();
    Ok((PointCloud::new(points, pc.frame), indices))
}

/// Point-in-box test in the box's own frame.
pub fn point_in_box3d(p: &[f64; 3], b: &Box3D) -> bool {
    let dx = p[0] - b.cx;
    let dy = p[1] - b.cy;
    let dz = p[2] - b.cz;
    // undo heading: local = R_y(-theta) applied to the offset
    let local = rotate_y(&[dx, dy, dz], -b.theta);
    local[0].abs() <= b.l / 2.0 && local[2].abs() <= b.w / 2.0 && (-b.h..=0.0).contains(&dy)
}

/// Transform a box along with a cloud rotated by `rotate_y(p, -angle)`.
pub fn rotate_box_y(b: &Box3D, angle: f64) -> Box3D {
    let c = rotate_y(&[b.cx, b.cy, b.cz], -angle);
    Box3D {
        h: b.h,
        w: b.w,
        l: b.l,
        cx: c[0],
        cy: c[1],
        cz: c[2],
        theta: wrap_angle(b.theta - angle),
    }
}

#[cfg(test)]
mod tests;
