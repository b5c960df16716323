//! Synthetic drive generator: cuboid objects on linear trajectories,
//! surface-sampled LiDAR returns with 1/d^2 density falloff, scripted
//! occlusion windows, and exact labels. Deterministic under the seed.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{box3d_corners, rotate_y, Box2D, Box3D, Calibration};

use super::{CloudSource, DriveRecord, ObjectClass, TrackedObjectRecord};

#[derive(Debug, Clone)]
pub struct OcclusionWindow {
    pub track_id: i64,
    /// Inclusive frame range.
    pub start: usize,
    pub end: usize,
    /// Fraction of the object's returns hidden by the occluder.
    pub drop_fraction: f64,
}

/// Automatically script one occlusion window per track, placed in the
/// middle of its life.
#[derive(Debug, Clone, Copy)]
pub struct AutoOcclusion {
    pub window_len: (usize, usize),
    pub drop_range: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub drive_id: String,
    pub frames: usize,
    pub object_count: usize,
    /// Relative weights for Car / Pedestrian / Cyclist.
    pub class_mix: [f64; 3],
    /// Meters per second.
    pub speed_range: (f64, f64),
    pub frame_rate: f64,
    /// Returns from an object at `density_ref_dist`.
    pub points_base: usize,
    pub density_ref_dist: f64,
    pub noise_sigma: f64,
    /// Fractional per-object size spread around the class mean.
    pub size_jitter: f64,
    /// Track life in frames (min, max).
    pub track_life: (usize, usize),
    /// When set, motion directions are drawn within this many radians
    /// of the lateral road axis (both ways) instead of uniformly.
    pub direction_spread: Option<f64>,
    pub occlusions: Vec<OcclusionWindow>,
    pub auto_occlusion: Option<AutoOcclusion>,
    /// Background points per frame, uniform over the viewing volume.
    pub clutter_points: usize,
    pub seed: u64,
    pub focal: f64,
    pub cu: f64,
    pub cv: f64,
    pub image_size: (usize, usize),
    /// Per-class mean (h, w, l) used for object synthesis.
    pub class_means: [[f64; 3]; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            drive_id: "synth".into(),
            frames: 40,
            object_count: 8,
            class_mix: [0.5, 0.3, 0.2],
            speed_range: (0.5, 8.0),
            frame_rate: 10.0,
            points_base: 400,
            density_ref_dist: 10.0,
            noise_sigma: 0.02,
            size_jitter: 0.2,
            track_life: (12, 30),
            direction_spread: None,
            occlusions: Vec::new(),
            auto_occlusion: None,
            clutter_points: 200,
            seed: 17,
            focal: 721.0,
            cu: 621.0,
            cv: 187.5,
            image_size: (1242, 375),
            class_means: [
                [1.53, 1.63, 3.88],
                [1.76, 0.66, 0.84],
                [1.74, 0.60, 1.76],
            ],
        }
    }
}

struct SynthObject {
    track_id: i64,
    class: ObjectClass,
    dims: [f64; 3],
    start: [f64; 3],
    velocity: [f64; 3],
    theta: f64,
    born: usize,
    dies: usize, // exclusive
}

/// Axis permutation used for all synthetic drives:
/// x_cam = -y_velo, y_cam = -z_velo, z_cam = x_velo.
fn synth_calibration(cfg: &SynthConfig) -> Calibration {
    let mut c = Calibration::pinhole(cfg.focal, cfg.cu, cfg.cv);
    c.t_velo_to_cam = [
        [0.0, -1.0, 0.0, 0.0],
        [0.0, 0.0, -1.0, 0.0],
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ];
    c
}

fn rect_to_velo(p: &[f64; 3]) -> [f64; 3] {
    [p[2], -p[0], -p[1]]
}

fn pick_class(rng: &mut ChaCha8Rng, mix: &[f64; 3]) -> ObjectClass {
    let total: f64 = mix.iter().sum();
    let mut x = rng.gen_range(0.0..total.max(1e-12));
    for (i, &w) in mix.iter().enumerate() {
        if x < w {
            return ObjectClass::from_index(i);
        }
        x -= w;
    }
    ObjectClass::Car
}

pub fn synth_generate(cfg: &SynthConfig) -> DriveRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let calib = synth_calibration(cfg);
    let dt = 1.0 / cfg.frame_rate;
    let (img_w, img_h) = (cfg.image_size.0 as f64, cfg.image_size.1 as f64);

    let mut objects = Vec::with_capacity(cfg.object_count);
    for i in 0..cfg.object_count {
        let class = pick_class(&mut rng, &cfg.class_mix);
        let mean = cfg.class_means[class.index().unwrap()];
        let mut dims = [0.0; 3];
        for (d, m) in dims.iter_mut().zip(&mean) {
            *d = m * (1.0 + cfg.size_jitter * rng.gen_range(-1.0..1.0));
        }
        let life = rng.gen_range(cfg.track_life.0..=cfg.track_life.1.max(cfg.track_life.0));
        let born = if cfg.frames > life {
            rng.gen_range(0..=(cfg.frames - life))
        } else {
            0
        };
        let dies = (born + life).min(cfg.frames);

        // keep the track's center projection inside the image over its
        // whole life; retry with fresh draws
        let mut chosen = None;
        for _attempt in 0..64 {
            let z0 = rng.gen_range(10.0..32.0);
            let x0 = rng.gen_range(-0.55..0.55) * z0 * img_w / (2.0 * cfg.focal);
            let y0 = rng.gen_range(1.3..1.7);
            let speed = rng.gen_range(cfg.speed_range.0..=cfg.speed_range.1);
            let dir = match cfg.direction_spread {
                Some(s) => {
                    let base = if rng.gen_bool(0.5) { 0.0 } else { std::f64::consts::PI };
                    base + rng.gen_range(-s..=s)
                }
                None => rng.gen_range(0.0..std::f64::consts::TAU),
            };
            let velocity = [speed * dir.cos(), 0.0, speed * dir.sin() * 0.4];
            let mut ok = true;
            for f in born..dies {
                let t = (f - born) as f64 * dt;
                let c = [
                    x0 + velocity[0] * t,
                    y0,
                    z0 + velocity[2] * t,
                ];
                if c[2] < 6.0 || c[2] > 45.0 {
                    ok = false;
                    break;
                }
                let u = cfg.focal * c[0] / c[2] + cfg.cu;
                let v = cfg.focal * (c[1] - dims[0] / 2.0) / c[2] + cfg.cv;
                if !(60.0..img_w - 60.0).contains(&u) || !(20.0..img_h - 20.0).contains(&v) {
                    ok = false;
                    break;
                }
            }
            if ok {
                let theta = (-velocity[2]).atan2(velocity[0]);
                chosen = Some(([x0, y0, z0], velocity, theta));
                break;
            }
        }
        let (start, velocity, theta) =
            chosen.unwrap_or(([0.0, 1.5, 20.0], [0.0, 0.0, 0.0], 0.0));
        objects.push(SynthObject {
            track_id: i as i64 + 1,
            class,
            dims,
            start,
            velocity,
            theta,
            born,
            dies,
        });
    }

    // occlusion script: explicit windows plus one auto window per track
    let mut windows = cfg.occlusions.clone();
    if let Some(auto) = cfg.auto_occlusion {
        for o in &objects {
            let len = rng.gen_range(auto.window_len.0..=auto.window_len.1);
            let life = o.dies - o.born;
            if life <= len + 2 {
                continue;
            }
            let start = o.born + (life - len) / 2;
            windows.push(OcclusionWindow {
                track_id: o.track_id,
                start,
                end: start + len - 1,
                drop_fraction: rng.gen_range(auto.drop_range.0..=auto.drop_range.1),
            });
        }
    }

    let mut frames: Vec<Vec<TrackedObjectRecord>> = Vec::with_capacity(cfg.frames);
    let mut clouds: Vec<Vec<[f64; 3]>> = Vec::with_capacity(cfg.frames);

    for f in 0..cfg.frames {
        let mut records = Vec::new();
        let mut cloud = Vec::new();
        for o in &objects {
            if f < o.born || f >= o.dies {
                continue;
            }
            let t = (f - o.born) as f64 * dt;
            let center = [
                o.start[0] + o.velocity[0] * t,
                o.start[1],
                o.start[2] + o.velocity[2] * t,
            ];
            let gt = Box3D {
                h: o.dims[0],
                w: o.dims[1],
                l: o.dims[2],
                cx: center[0],
                cy: center[1],
                cz: center[2],
                theta: o.theta,
            };
            let corners = box3d_corners(&gt);
            let (mut u1, mut v1) = (f64::INFINITY, f64::INFINITY);
            let (mut u2, mut v2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for c in &corners {
                let u = cfg.focal * c[0] / c[2] + cfg.cu;
                let v = cfg.focal * c[1] / c[2] + cfg.cv;
                u1 = u1.min(u);
                v1 = v1.min(v);
                u2 = u2.max(u);
                v2 = v2.max(v);
            }
            let full_area = (u2 - u1) * (v2 - v1);
            let cu1 = u1.max(0.0);
            let cv1 = v1.max(0.0);
            let cu2 = u2.min(img_w);
            let cv2 = v2.min(img_h);
            let vis_area = ((cu2 - cu1).max(0.0)) * ((cv2 - cv1).max(0.0));
            let truncation = if full_area > 0.0 {
                (1.0 - vis_area / full_area).clamp(0.0, 1.0)
            } else {
                0.0
            };

            let dist = (center[0].powi(2) + center[1].powi(2) + center[2].powi(2)).sqrt();
            let density_scale = (cfg.density_ref_dist / dist).powi(2);
            let mut count =
                ((cfg.points_base as f64) * density_scale).round() as usize;
            count = count.min(cfg.points_base * 4);

            let window = windows
                .iter()
                .find(|w| w.track_id == o.track_id && (w.start..=w.end).contains(&f));
            let occluded = window.is_some();
            let mut pts_local: Vec<[f64; 3]> = (0..count)
                .map(|_| sample_cuboid_surface(&mut rng, &o.dims))
                .collect();
            if let Some(w) = window {
                // occluders leave only a central patch visible (as when
                // an object is glimpsed through a gap): keep the returns
                // closest to the object's horizontal center, so its
                // extent is hidden while the centroid of the surviving
                // returns stays close to the true center
                pts_local.sort_by(|a, b| {
                    (a[0] * a[0] + a[2] * a[2]).total_cmp(&(b[0] * b[0] + b[2] * b[2]))
                });
                let keep = ((count as f64) * (1.0 - w.drop_fraction)).floor() as usize;
                pts_local.truncate(keep);
            }

            for p_local in pts_local {
                let rotated = rotate_y(&p_local, o.theta);
                let p = [
                    center[0] + rotated[0] + rng.gen_range(-1.0..1.0) * cfg.noise_sigma,
                    center[1] + rotated[1] + rng.gen_range(-1.0..1.0) * cfg.noise_sigma,
                    center[2] + rotated[2] + rng.gen_range(-1.0..1.0) * cfg.noise_sigma,
                ];
                cloud.push(rect_to_velo(&p));
            }

            records.push(TrackedObjectRecord {
                frame: f,
                track_id: o.track_id,
                class: o.class,
                truncation,
                occlusion: if occluded { 2 } else { 0 },
                alpha: 0.0,
                box2d: Box2D {
                    x1: u1,
                    y1: v1,
                    x2: u2,
                    y2: v2,
                },
                box3d: gt,
            });
        }
        for _ in 0..cfg.clutter_points {
            let p = [
                rng.gen_range(-25.0..25.0),
                rng.gen_range(-0.5..2.0),
                rng.gen_range(5.0..45.0),
            ];
            cloud.push(rect_to_velo(&p));
        }
        frames.push(records);
        clouds.push(cloud);
    }

    DriveRecord {
        drive_id: cfg.drive_id.clone(),
        calib,
        frames,
        clouds: CloudSource::InMemory(clouds),
        image_size: cfg.image_size,
    }
}

/// Uniform point on a cuboid surface (local frame, bottom center at the
/// origin, y down so the box spans y in [-h, 0]).
fn sample_cuboid_surface(rng: &mut ChaCha8Rng, dims: &[f64; 3]) -> [f64; 3] {
    let (h, w, l) = (dims[0], dims[1], dims[2]);
    let areas = [l * w, l * w, l * h, l * h, w * h, w * h];
    let total: f64 = areas.iter().sum();
    let mut x = rng.gen_range(0.0..total);
    let mut face = 0;
    for (i, &a) in areas.iter().enumerate() {
        if x < a {
            face = i;
            break;
        }
        x -= a;
    }
    let u = rng.gen_range(-0.5..0.5);
    let v = rng.gen_range(-0.5..0.5);
    match face {
        0 => [u * l, 0.0, v * w],      // bottom
        1 => [u * l, -h, v * w],       // top
        2 => [u * l, -h / 2.0 + v * h, w / 2.0],
        3 => [u * l, -h / 2.0 + v * h, -w / 2.0],
        4 => [l / 2.0, -h / 2.0 + v * h, u * w],
        _ => [-l / 2.0, -h / 2.0 + v * h, u * w],
    }
}
