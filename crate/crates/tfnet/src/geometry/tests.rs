use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    let points = (0..n)
        .map(|_| {
            [
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-20.0..20.0),
            ]
        })
        .collect();
    PointCloud::new(points, Frame::Velodyne)
}

fn random_box(rng: &mut ChaCha8Rng) -> Box3D {
    Box3D {
        h: rng.gen_range(0.5..3.0),
        w: rng.gen_range(0.5..3.0),
        l: rng.gen_range(0.5..5.0),
        cx: rng.gen_range(-5.0..5.0),
        cy: rng.gen_range(-2.0..2.0),
        cz: rng.gen_range(5.0..30.0),
        theta: rng.gen_range(-PI..PI),
    }
}

#[test]
fn velo_to_rect_identity_and_translation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pc = random_cloud(&mut rng, 10);
    let calib = Calibration::identity();
    let out = velo_to_rect(&pc, &calib).unwrap();
    assert_eq!(out.frame, Frame::CameraRect);
    assert_eq!(out.points, pc.points);

    let mut calib = Calibration::identity();
    calib.t_velo_to_cam[0][3] = 1.0;
    let out = velo_to_rect(&pc, &calib).unwrap();
    for (a, b) in out.points.iter().zip(&pc.points) {
        assert_eq!(a[0], b[0] + 1.0);
        assert_eq!(a[1], b[1]);
        assert_eq!(a[2], b[2]);
    }
}

#[test]
fn velo_to_rect_wrong_frame_errors() {
    let pc = PointCloud::new(vec![[0.0; 3]], Frame::CameraRect);
    assert!(matches!(
        velo_to_rect(&pc, &Calibration::identity()),
        Err(GeometryError::WrongFrame { .. })
    ));
}

#[test]
fn velo_to_rect_matches_matrix_chain_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut calib = Calibration::identity();
    for i in 0..3 {
        for j in 0..4 {
            calib.t_velo_to_cam[i][j] = rng.gen_range(-1.0..1.0);
            calib.r_rect[i][j.min(2)] = rng.gen_range(-1.0..1.0);
        }
    }
    let pc = random_cloud(&mut rng, 20);
    let out = velo_to_rect(&pc, &calib).unwrap();
    let chain = mat4_mul(&calib.r_rect, &calib.t_velo_to_cam);
    for (p, q) in pc.points.iter().zip(&out.points) {
        for i in 0..3 {
            let expect =
                chain[i][0] * p[0] + chain[i][1] * p[1] + chain[i][2] * p[2] + chain[i][3];
            assert!((q[i] - expect).abs() < 1e-9);
        }
    }
}

#[test]
fn rect_to_image_principal_point_and_degenerate_depth() {
    let calib = Calibration::pinhole(700.0, 600.0, 180.0);
    let pc = PointCloud::new(vec![[0.0, 0.0, 10.0], [1.0, 1.0, 0.0]], Frame::CameraRect);
    let (uv, valid) = rect_to_image(&pc, &calib).unwrap();
    assert!((uv[0][0] - 600.0).abs() < 1e-12);
    assert!((uv[0][1] - 180.0).abs() < 1e-12);
    assert!(valid[0]);
    assert!(!valid[1]);
}

#[test]
fn rect_to_image_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let calib = Calibration::pinhole(721.5, 621.0, 187.5);
    for _ in 0..20 {
        let p = [
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(1.0..50.0),
        ];
        let pc = PointCloud::new(vec![p], Frame::CameraRect);
        let (uv, _) = rect_to_image(&pc, &calib).unwrap();
        assert!((uv[0][0] - (721.5 * p[0] / p[2] + 621.0)).abs() < 1e-9);
        assert!((uv[0][1] - (721.5 * p[1] / p[2] + 187.5)).abs() < 1e-9);
    }
}

#[test]
fn extract_frustum_full_cover_and_empty() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // velodyne frame with identity transforms: z is already depth
    let pc = random_cloud(&mut rng, 100);
    let calib = Calibration::pinhole(700.0, 600.0, 180.0);
    let huge = Box2D::new(-1e9, -1e9, 1e9, 1e9);
    let idx = extract_frustum(&pc, &huge, &calib).unwrap();
    let expected: Vec<usize> = (0..pc.len()).filter(|&i| pc.points[i][2] > Z_MIN).collect();
    assert_eq!(idx, expected);

    let tiny = Box2D::new(1e8, 1e8, 1e8 + 1.0, 1e8 + 1.0);
    assert!(extract_frustum(&pc, &tiny, &calib).unwrap().is_empty());
}

#[test]
fn extract_frustum_members_reproject_inside() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let calib = Calibration::pinhole(700.0, 600.0, 180.0);
    for _ in 0..10 {
        let pc = random_cloud(&mut rng, 200);
        let q = Box2D::new(
            rng.gen_range(0.0..500.0),
            rng.gen_range(0.0..150.0),
            rng.gen_range(600.0..1200.0),
            rng.gen_range(200.0..360.0),
        );
        let idx = extract_frustum(&pc, &q, &calib).unwrap();
        // brute-force membership oracle
        let rect = velo_to_rect(&pc, &calib).unwrap();
        let (uv, valid) = rect_to_image(&rect, &calib).unwrap();
        let oracle: Vec<usize> = (0..pc.len())
            .filter(|&i| valid[i] && q.contains(uv[i][0], uv[i][1]))
            .collect();
        assert_eq!(idx, oracle);
        for &i in &idx {
            assert!(q.contains(uv[i][0], uv[i][1]));
        }
    }
}

#[test]
fn rotate_to_frustum_axis_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let calib = Calibration::pinhole(721.0, 621.0, 187.5);

    // box centered at the principal point: angle 0, points unchanged
    let q = Box2D::new(620.0, 186.5, 622.0, 188.5);
    let pc = PointCloud::new(vec![[1.0, 2.0, 3.0]], Frame::CameraRect);
    let (out, angle) = rotate_to_frustum_axis(&pc, &q, &calib).unwrap();
    assert!(angle.abs() < 1e-12);
    assert_eq!(out.points, pc.points);

    for _ in 0..10 {
        let q = Box2D::new(
            rng.gen_range(0.0..1000.0),
            rng.gen_range(0.0..300.0),
            rng.gen_range(1000.0..1242.0),
            rng.gen_range(300.0..375.0),
        );
        let pts: Vec<[f64; 3]> = (0..50)
            .map(|_| {
                [
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(1.0..40.0),
                ]
            })
            .collect();
        let pc = PointCloud::new(pts, Frame::CameraRect);
        let (rot, angle) = rotate_to_frustum_axis(&pc, &q, &calib).unwrap();
        // inverse property
        for (orig, r) in pc.points.iter().zip(&rot.points) {
            let back = rotate_y(r, angle);
            for i in 0..3 {
                assert!((back[i] - orig[i]).abs() < 1e-9);
            }
        }
        // rigid: pairwise distances preserved
        for i in 1..pc.len() {
            let d0 = dist(&pc.points[0], &pc.points[i]);
            let d1 = dist(&rot.points[0], &rot.points[i]);
            assert!((d0 - d1).abs() < 1e-9);
        }
    }
}

#[test]
fn frustum_centroid_aligns_with_z_axis() {
    // points sampled around the ray through the box center should land
    // near x = 0 after rotation
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let calib = Calibration::pinhole(721.0, 621.0, 187.5);
    for _ in 0..10 {
        let u = rng.gen_range(100.0..1100.0);
        let v = rng.gen_range(50.0..350.0);
        let q = Box2D::new(u - 5.0, v - 5.0, u + 5.0, v + 5.0);
        // cluster around the central ray at various depths
        let pts: Vec<[f64; 3]> = (0..200)
            .map(|_| {
                let z = rng.gen_range(5.0..40.0);
                let x = (u - 621.0) / 721.0 * z + rng.gen_range(-0.05..0.05);
                let y = (v - 187.5) / 721.0 * z + rng.gen_range(-0.05..0.05);
                [x, y, z]
            })
            .collect();
        let pc = PointCloud::new(pts, Frame::CameraRect);
        let (rot, _) = rotate_to_frustum_axis(&pc, &q, &calib).unwrap();
        let cx: f64 = rot.points.iter().map(|p| p[0]).sum::<f64>() / rot.len() as f64;
        let cz: f64 = rot.points.iter().map(|p| p[2]).sum::<f64>() / rot.len() as f64;
        assert!((cx / cz).abs() < 0.01, "cx/cz = {}", cx / cz);
    }
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[test]
fn resample_exact_size_is_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let pc = random_cloud(&mut rng, 16);
    let (out, idx) = resample_points(&pc, 16, 99).unwrap();
    assert_eq!(out.len(), 16);
    let mut sorted = idx.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..16).collect::<Vec<_>>());
}

#[test]
fn resample_replacement_and_determinism() {
    let pc = PointCloud::new(vec![[1.0, 2.0, 3.0]], Frame::Velodyne);
    let (out, _) = resample_points(&pc, 8, 1).unwrap();
    assert_eq!(out.len(), 8);
    assert!(out.points.iter().all(|p| *p == [1.0, 2.0, 3.0]));

    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let pc = random_cloud(&mut rng, 100);
    let (a, _) = resample_points(&pc, 32, 7).unwrap();
    let (b, _) = resample_points(&pc, 32, 7).unwrap();
    assert_eq!(a.points, b.points);

    let empty = PointCloud::new(vec![], Frame::Velodyne);
    assert!(matches!(
        resample_points(&empty, 8, 0),
        Err(GeometryError::EmptyFrustum)
    ));
}

#[test]
fn encode_examples() {
    let anchors = SizeAnchors::default();
    let gt = Box3D {
        h: 1.53,
        w: 1.63,
        l: 3.88,
        cx: 1.0,
        cy: 0.5,
        cz: 10.0,
        theta: 0.0,
    };
    // gt center equals centroid + tnet center -> zero residual
    let t = encode_box_targets(&gt, 0.0, [0.6, 0.5, 9.0], [0.4, 0.0, 1.0], 0, &anchors);
    for c in t.center_residual {
        assert!(c.abs() < 1e-12);
    }
    assert_eq!(t.heading_bin, 0);
    assert!(t.heading_residual.abs() < 1e-12);
    for s in t.size_residual {
        assert!(s.abs() < 1e-12);
    }

    // corrected theta = pi/2 + 0.1 -> bin 3, residual 0.1 / (pi/12)
    let gt2 = Box3D {
        theta: PI / 2.0 + 0.1,
        ..gt
    };
    let t2 = encode_box_targets(&gt2, 0.0, [0.0; 3], [0.0; 3], 0, &anchors);
    assert_eq!(t2.heading_bin, 3);
    assert!((t2.heading_residual - 0.1 / (PI / 12.0)).abs() < 1e-12);
}

#[test]
fn decode_bin3_gives_quarter_turn() {
    let anchors = SizeAnchors::default();
    let mut t = BoxTargets {
        center_residual: [0.0; 3],
        heading_bin: 3,
        heading_residual: 0.0,
        size_class: 0,
        size_residual: [0.0; 3],
    };
    let hv = head_values_from_targets(&t);
    let mut warn = DecodeWarnings::default();
    let b = decode_box(&hv, [0.0; 3], [0.0; 3], 0.0, &anchors, &mut warn);
    assert!((b.theta - PI / 2.0).abs() < 1e-12);

    t.size_residual = [-1.5, 0.0, 0.0];
    let hv = head_values_from_targets(&t);
    let b = decode_box(&hv, [0.0; 3], [0.0; 3], 0.0, &anchors, &mut warn);
    assert_eq!(b.h, 0.01);
    assert_eq!(warn.size_clamped, 1);
}

#[test]
fn decode_encode_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let anchors = SizeAnchors::default();
    for _ in 0..1000 {
        let b = random_box(&mut rng);
        let cls = rng.gen_range(0..NS);
        let frustum_angle = rng.gen_range(-1.0..1.0);
        let centroid = [
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(5.0..20.0),
        ];
        let tnet = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let t = encode_box_targets(&b, frustum_angle, centroid, tnet, cls, &anchors);
        assert!(t.heading_residual.abs() <= 1.0 + 1e-12);
        let hv = head_values_from_targets(&t);
        let mut warn = DecodeWarnings::default();
        let d = decode_box(&hv, centroid, tnet, frustum_angle, &anchors, &mut warn);
        assert!((d.cx - b.cx).abs() < 1e-9);
        assert!((d.cy - b.cy).abs() < 1e-9);
        assert!((d.cz - b.cz).abs() < 1e-9);
        assert!((d.h - b.h).abs() < 1e-9);
        assert!((d.w - b.w).abs() < 1e-9);
        assert!((d.l - b.l).abs() < 1e-9);
        let dtheta = wrap_angle(d.theta - b.theta);
        assert!(dtheta.abs() < 1e-9, "dtheta = {dtheta}");
    }
}

#[test]
fn corners_symmetry_cases() {
    let b = Box3D {
        h: 2.0,
        w: 2.0,
        l: 2.0,
        cx: 0.0,
        cy: 0.0,
        cz: 0.0,
        theta: 0.0,
    };
    for c in box3d_corners(&b) {
        assert!((c[0].abs() - 1.0).abs() < 1e-12);
        assert!((c[2].abs() - 1.0).abs() < 1e-12);
        assert!(c[1] == 0.0 || c[1] == -2.0);
    }

    // quarter turn swaps the roles of l and w in the footprint
    let b2 = Box3D {
        l: 4.0,
        w: 2.0,
        theta: PI / 2.0,
        ..b
    };
    let cs = box3d_corners(&b2);
    let max_x = cs.iter().map(|c| c[0].abs()).fold(0.0, f64::max);
    let max_z = cs.iter().map(|c| c[2].abs()).fold(0.0, f64::max);
    assert!((max_x - 1.0).abs() < 1e-9);
    assert!((max_z - 2.0).abs() < 1e-9);
}

#[test]
fn corners_centroid_and_edge_lengths() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..100 {
        let b = random_box(&mut rng);
        let cs = box3d_corners(&b);
        let mut centroid = [0.0; 3];
        for c in &cs {
            for i in 0..3 {
                centroid[i] += c[i] / 8.0;
            }
        }
        assert!((centroid[0] - b.cx).abs() < 1e-9);
        assert!((centroid[1] - (b.cy - b.h / 2.0)).abs() < 1e-9);
        assert!((centroid[2] - b.cz).abs() < 1e-9);
        // edges of the bottom face reproduce w and l; vertical edge h
        assert!((dist(&cs[0], &cs[1]) - b.w).abs() < 1e-9);
        assert!((dist(&cs[1], &cs[2]) - b.l).abs() < 1e-9);
        assert!((dist(&cs[0], &cs[4]) - b.h).abs() < 1e-9);
    }
}

#[test]
fn iou_trivial_cases() {
    let a = Box3D {
        h: 1.0,
        w: 1.0,
        l: 1.0,
        cx: 0.0,
        cy: 0.0,
        cz: 0.0,
        theta: 0.0,
    };
    assert!((iou3d(&a, &a, IouMode::Full3d) - 1.0).abs() < 1e-12);
    assert!((iou3d(&a, &a, IouMode::Bev) - 1.0).abs() < 1e-12);

    let far = Box3D { cx: 10.0, ..a };
    assert_eq!(iou3d(&a, &far, IouMode::Full3d), 0.0);

    // unit cubes offset 0.5 along x: intersection 0.5, union 1.5
    let shifted = Box3D { cx: 0.5, ..a };
    assert!((iou3d(&a, &shifted, IouMode::Full3d) - 1.0 / 3.0).abs() < 1e-12);
}

fn point_in_bev(b: &Box3D, x: f64, z: f64) -> bool {
    let local = rotate_y(&[x - b.cx, 0.0, z - b.cz], -b.theta);
    local[0].abs() <= b.l / 2.0 && local[2].abs() <= b.w / 2.0
}

/// Monte-Carlo volume oracle for full-3d IoU.
pub(super) fn monte_carlo_iou3d(a: &Box3D, b: &Box3D, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ca = box3d_corners(a);
    let cb = box3d_corners(b);
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for c in ca.iter().chain(cb.iter()) {
        for i in 0..3 {
            lo[i] = lo[i].min(c[i]);
            hi[i] = hi[i].max(c[i]);
        }
    }
    let bbox_vol: f64 = (0..3).map(|i| hi[i] - lo[i]).product();
    let mut inter = 0usize;
    let mut uni = 0usize;
    for _ in 0..samples {
        let p = [
            rng.gen_range(lo[0]..hi[0]),
            rng.gen_range(lo[1]..hi[1]),
            rng.gen_range(lo[2]..hi[2]),
        ];
        let ina = point_in_bev(a, p[0], p[2]) && p[1] <= a.cy && p[1] >= a.cy - a.h;
        let inb = point_in_bev(b, p[0], p[2]) && p[1] <= b.cy && p[1] >= b.cy - b.h;
        if ina && inb {
            inter += 1;
        }
        if ina || inb {
            uni += 1;
        }
    }
    if uni == 0 {
        return 0.0;
    }
    let _ = bbox_vol;
    inter as f64 / uni as f64
}

#[test]
fn iou_against_monte_carlo_oracle_smoke() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..10 {
        let a = random_box(&mut rng);
        // correlated second box so intersections actually occur
        let b = Box3D {
            cx: a.cx + rng.gen_range(-1.0..1.0),
            cy: a.cy + rng.gen_range(-0.5..0.5),
            cz: a.cz + rng.gen_range(-1.0..1.0),
            theta: a.theta + rng.gen_range(-0.5..0.5),
            h: rng.gen_range(0.5..3.0),
            w: rng.gen_range(0.5..3.0),
            l: rng.gen_range(0.5..5.0),
        };
        let exact = iou3d(&a, &b, IouMode::Full3d);
        let mc = monte_carlo_iou3d(&a, &b, 200_000, trial);
        assert!((exact - mc).abs() < 0.02, "exact {exact} mc {mc}");
    }
}

#[test]
fn iou_symmetry_and_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for _ in 0..200 {
        let a = random_box(&mut rng);
        let b = Box3D {
            cx: a.cx + rng.gen_range(-2.0..2.0),
            cz: a.cz + rng.gen_range(-2.0..2.0),
            theta: rng.gen_range(-PI..PI),
            ..random_box(&mut rng)
        };
        for mode in [IouMode::Bev, IouMode::Full3d] {
            let ab = iou3d(&a, &b, mode);
            let ba = iou3d(&b, &a, mode);
            assert!((ab - ba).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&ab));
        }
    }
}

#[test]
fn point_in_box_matches_corner_hull() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for _ in 0..50 {
        let b = random_box(&mut rng);
        // points slightly inside each corner must be inside
        let cs = box3d_corners(&b);
        let centroid = [b.cx, b.cy - b.h / 2.0, b.cz];
        for c in cs {
            let p = [
                c[0] * 0.99 + centroid[0] * 0.01,
                c[1] * 0.99 + centroid[1] * 0.01,
                c[2] * 0.99 + centroid[2] * 0.01,
            ];
            assert!(point_in_box3d(&p, &b));
            let q = [
                c[0] * 1.05 - centroid[0] * 0.05,
                c[1] * 1.05 - centroid[1] * 0.05,
                c[2] * 1.05 - centroid[2] * 0.05,
            ];
            assert!(!point_in_box3d(&q, &b));
        }
    }
}
