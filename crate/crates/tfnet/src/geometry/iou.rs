//! Rotated-box IoU via Sutherland-Hodgman polygon clipping in the
//! bird's-eye (x, z) plane.

use super::{box3d_corners, Box3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IouMode {
    Bev,
    Full3d,
}

/// Shoelace area, absolute value.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        acc += a[0] * b[1] - b[0] * a[1];
    }
    acc.abs() / 2.0
}

/// Clip `subject` against convex `clip` (both in arbitrary winding; the
/// clip polygon is normalized to counter-clockwise internally).
pub fn sutherland_hodgman_clip(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut clip: Vec<[f64; 2]> = clip.to_vec();
    if signed_area(&clip) < 0.0 {
        clip.reverse();
    }
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let next = input[(j + 1) % input.len()];
            let cur_in = side(a, b, cur) >= 0.0;
            let next_in = side(a, b, next) >= 0.0;
            if cur_in {
                output.push(cur);
                if !next_in {
                    output.push(intersect(a, b, cur, next));
                }
            } else if next_in {
                output.push(intersect(a, b, cur, next));
            }
        }
    }
    output
}

fn signed_area(poly: &[[f64; 2]]) -> f64 {
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        acc += a[0] * b[1] - b[0] * a[1];
    }
    acc / 2.0
}

fn side(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

fn intersect(a: [f64; 2], b: [f64; 2], p: [f64; 2], q: [f64; 2]) -> [f64; 2] {
    let a1 = b[1] - a[1];
    let b1 = a[0] - b[0];
    let c1 = a1 * a[0] + b1 * a[1];
    let a2 = q[1] - p[1];
    let b2 = p[0] - q[0];
    let c2 = a2 * p[0] + b2 * p[1];
    let det = a1 * b2 - a2 * b1;
    [(b2 * c1 - b1 * c2) / det, (a1 * c2 - a2 * c1) / det]
}

/// BEV footprint: the bottom-face corners in the (x, z) plane.
pub fn bev_footprint(b: &Box3D) -> [[f64; 2]; 4] {
    let c = box3d_corners(b);
    [
        [c[0][0], c[0][2]],
        [c[1][0], c[1][2]],
        [c[2][0], c[2][2]],
        [c[3][0], c[3][2]],
    ]
}

/// Rotated-box IoU. Intersection polygons with area below 1e-12 are
/// treated as empty.
pub fn iou3d(a: &Box3D, b: &Box3D, mode: IouMode) -> f64 {
    let fa = bev_footprint(a);
    let fb = bev_footprint(b);
    let inter_poly = sutherland_hodgman_clip(&fa, &fb);
    let mut inter_area = polygon_area(&inter_poly);
    if inter_area < 1e-12 {
        inter_area = 0.0;
    }
    match mode {
        IouMode::Bev => {
            let area_a = a.w * a.l;
            let area_b = b.w * b.l;
            let union = area_a + area_b - inter_area;
            if union <= 0.0 {
                0.0
            } else {
                (inter_area / union).clamp(0.0, 1.0)
            }
        }
        IouMode::Full3d => {
            // y down: a box spans [cy - h, cy]
            let y_overlap = (a.cy.min(b.cy) - (a.cy - a.h).max(b.cy - b.h)).max(0.0);
            let inter_vol = inter_area * y_overlap;
            let union = a.volume() + b.volume() - inter_vol;
            if union <= 0.0 {
                0.0
            } else {
                (inter_vol / union).clamp(0.0, 1.0)
            }
        }
    }
}
