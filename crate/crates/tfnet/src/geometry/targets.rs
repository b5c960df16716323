//! Box-parameter encoding: residual center, heading bin + normalized
//! residual, size class + fractional residual relative to per-class
//! anchors.

use std::f64::consts::PI;

use super::{rotate_box_y, rotate_y, wrap_angle, Box3D};

/// Heading bins over [0, 2pi), bin i centered at i * (2pi / NH).
pub const NH: usize = 12;
/// Size anchors, one per class (Car, Pedestrian, Cyclist).
pub const NS: usize = 3;

/// Per-class mean (h, w, l) in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeAnchors {
    pub dims: [[f64; 3]; NS],
}

impl Default for SizeAnchors {
    fn default() -> Self {
        // KITTI-magnitude per-class means; replaced by split statistics
        // when real data is loaded.
        Self {
            dims: [
                [1.53, 1.63, 3.88],
                [1.76, 0.66, 0.84],
                [1.74, 0.60, 1.76],
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxTargets {
    pub center_residual: [f64; 3],
    pub heading_bin: usize,
    pub heading_residual: f64,
    pub size_class: usize,
    pub size_residual: [f64; 3],
}

/// Raw head outputs as plain values, for decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadValues {
    pub center_residual: [f64; 3],
    pub heading_scores: Vec<f64>,
    pub heading_residuals: Vec<f64>,
    pub size_scores: Vec<f64>,
    pub size_residuals: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DecodeWarnings {
    pub size_clamped: u32,
}

const BIN_WIDTH: f64 = 2.0 * PI / NH as f64;
const HALF_BIN: f64 = PI / NH as f64;

/// Split a heading (any range) into (bin, normalized residual) with
/// |residual| <= 1.
pub fn heading_to_bin(theta: f64) -> (usize, f64) {
    let two_pi = 2.0 * PI;
    let t = theta.rem_euclid(two_pi);
    let bin = ((t + HALF_BIN) / BIN_WIDTH).floor() as usize % NH;
    let center = bin as f64 * BIN_WIDTH;
    let mut res = t - center;
    if res > PI {
        res -= two_pi;
    } else if res < -PI {
        res += two_pi;
    }
    (bin, res / HALF_BIN)
}

pub fn bin_to_heading(bin: usize, normalized_residual: f64) -> f64 {
    bin as f64 * BIN_WIDTH + normalized_residual * HALF_BIN
}

/// Encode a ground-truth box (rectified camera frame) against the
/// frustum rotation and the segmentation/T-Net centers (frustum frame).
pub fn encode_box_targets(
    gt: &Box3D,
    frustum_angle: f64,
    mask_centroid: [f64; 3],
    tnet_center: [f64; 3],
    size_class: usize,
    anchors: &SizeAnchors,
) -> BoxTargets {
    let g = rotate_box_y(gt, frustum_angle);
    let (heading_bin, heading_residual) = heading_to_bin(g.theta);
    let anchor = anchors.dims[size_class];
    BoxTargets {
        center_residual: [
            g.cx - mask_centroid[0] - tnet_center[0],
            g.cy - mask_centroid[1] - tnet_center[1],
            g.cz - mask_centroid[2] - tnet_center[2],
        ],
        heading_bin,
        heading_residual,
        size_class,
        size_residual: [
            (g.h - anchor[0]) / anchor[0],
            (g.w - anchor[1]) / anchor[1],
            (g.l - anchor[2]) / anchor[2],
        ],
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Decode head outputs back to a rectified-camera-frame box. Sizes
/// decoding at or below zero are clamped to 0.01 m and counted.
pub fn decode_box(
    head: &HeadValues,
    mask_centroid: [f64; 3],
    tnet_center: [f64; 3],
    frustum_angle: f64,
    anchors: &SizeAnchors,
    warnings: &mut DecodeWarnings,
) -> Box3D {
    let bin = argmax(&head.heading_scores);
    let size_class = argmax(&head.size_scores);
    let theta_frustum = bin_to_heading(bin, head.heading_residuals[bin]);
    let anchor = anchors.dims[size_class];
    let res = head.size_residuals[size_class];
    let mut dims = [0.0; 3];
    for i in 0..3 {
        dims[i] = anchor[i] * (1.0 + res[i]);
        if dims[i] <= 0.0 {
            dims[i] = 0.01;
            warnings.size_clamped += 1;
        }
    }
    let c_frustum = [
        mask_centroid[0] + tnet_center[0] + head.center_residual[0],
        mask_centroid[1] + tnet_center[1] + head.center_residual[1],
        mask_centroid[2] + tnet_center[2] + head.center_residual[2],
    ];
    let c = rotate_y(&c_frustum, frustum_angle);
    Box3D {
        h: dims[0],
        w: dims[1],
        l: dims[2],
        cx: c[0],
        cy: c[1],
        cz: c[2],
        theta: wrap_angle(theta_frustum + frustum_angle),
    }
}

/// Idealized head outputs that decode exactly to the encoded targets;
/// used by round-trip oracles and the perfect-detector fixtures.
pub fn head_values_from_targets(t: &BoxTargets) -> HeadValues {
    let mut heading_scores = vec![0.0; NH];
    heading_scores[t.heading_bin] = 10.0;
    let mut heading_residuals = vec![0.0; NH];
    heading_residuals[t.heading_bin] = t.heading_residual;
    let mut size_scores = vec![0.0; NS];
    size_scores[t.size_class] = 10.0;
    let mut size_residuals = vec![[0.0; 3]; NS];
    size_residuals[t.size_class] = t.size_residual;
    HeadValues {
        center_residual: t.center_residual,
        heading_scores,
        heading_residuals,
        size_scores,
        size_residuals,
    }
}
