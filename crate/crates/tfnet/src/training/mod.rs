//! Multi-task loss, the Adam training loop with batch gradient
//! accumulation, and checkpoint-based prediction/evaluation.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use thiserror::Error;

use crate::data::{DataError, SequenceSample};
use crate::evaluation::{
    assign_difficulty, evaluate_detections, ApMode, ApReport, Detection, GroundTruth,
};
use crate::geometry::{
    bin_to_heading, box3d_corners, decode_box, heading_to_bin, Box3D, DecodeWarnings, HeadValues,
    SizeAnchors, NH,
};
use crate::model::{full_forward, head_values, Binder, ModelConfig, ModelOutput};
use crate::tensor::{
    adam_step, load_params, save_params, softmax, AdamState, CheckpointError, ParamStore, Tape,
    TensorError, TensorId,
};


#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss in term {0}")]
    NonFiniteLoss(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("no training samples")]
    NoSamples,
}

/// Weights of the loss terms; terms with zero weight are not built.
#[derive(Debug, Clone)]
pub struct LossConfig {
    pub seg_weight: f64,
    pub tnet_center_weight: f64,
    pub center_weight: f64,
    pub heading_cls_weight: f64,
    pub heading_res_weight: f64,
    pub size_cls_weight: f64,
    pub size_res_weight: f64,
    pub corner_weight: f64,
    /// Temporal consistency: mean cosine distance between consecutive
    /// per-frame features.
    pub cos_weight: f64,
    pub huber_delta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            seg_weight: 1.0,
            tnet_center_weight: 1.0,
            center_weight: 1.0,
            heading_cls_weight: 1.0,
            heading_res_weight: 1.0,
            size_cls_weight: 1.0,
            size_res_weight: 1.0,
            corner_weight: 0.0,
            cos_weight: 1.0,
            huber_delta: 1.0,
        }
    }
}

/// Scalar loss root plus the unweighted value of every active term.
#[derive(Debug)]
pub struct LossBreakdown {
    pub total: TensorId,
    pub terms: BTreeMap<&'static str, f64>,
}

/// Build the multi-task loss for one forward pass. Center residuals are
/// re-encoded at runtime against the predicted mask centroid, so the
/// gradient reaches both the T-Net and the head.
pub fn compute_sample_loss(
    tape: &mut Tape,
    out: &ModelOutput,
    sample: &SequenceSample,
    anchors: &SizeAnchors,
    lc: &LossConfig,
) -> Result<LossBreakdown, TrainError> {
    let newest = out.newest();
    let gt = &sample.gt_box_frustum;
    let delta = lc.huber_delta;
    let mut terms: Vec<(&'static str, f64, TensorId)> = Vec::new();

    if lc.seg_weight != 0.0 {
        let labels: Vec<usize> = sample
            .frames
            .last()
            .unwrap()
            .seg_labels
            .iter()
            .map(|&l| if l > 0.5 { 1 } else { 0 })
            .collect();
        let t = tape.softmax_cross_entropy_rows(newest.seg_logits, &labels)?;
        terms.push(("seg", lc.seg_weight, t));
    }

    let gt_center = tape.leaf(&[3], gt.center().to_vec());
    if lc.tnet_center_weight != 0.0 {
        let t = tape.huber_loss(newest.center, gt_center, delta)?;
        terms.push(("tnet_center", lc.tnet_center_weight, t));
    }
    if lc.center_weight != 0.0 {
        let pred = tape.add(newest.center, out.head.center_residual)?;
        let t = tape.huber_loss(pred, gt_center, delta)?;
        terms.push(("center", lc.center_weight, t));
    }

    let (gt_bin, gt_res) = heading_to_bin(gt.theta);
    if lc.heading_cls_weight != 0.0 {
        let t = tape.softmax_cross_entropy(out.head.heading_scores, gt_bin)?;
        terms.push(("heading_cls", lc.heading_cls_weight, t));
    }
    if lc.heading_res_weight != 0.0 {
        let pred = tape.slice(out.head.heading_residuals, gt_bin, 1)?;
        let target = tape.leaf(&[1], vec![gt_res]);
        let t = tape.huber_loss(pred, target, delta)?;
        terms.push(("heading_res", lc.heading_res_weight, t));
    }

    let sc = sample.class_index;
    if lc.size_cls_weight != 0.0 {
        let t = tape.softmax_cross_entropy(out.head.size_scores, sc)?;
        terms.push(("size_cls", lc.size_cls_weight, t));
    }
    let size_res_pred = tape.slice(out.head.size_residuals, 3 * sc, 3)?;
    if lc.size_res_weight != 0.0 {
        let target = tape.leaf(&[3], sample.targets.size_residual.to_vec());
        let t = tape.huber_loss(size_res_pred, target, delta)?;
        terms.push(("size_res", lc.size_res_weight, t));
    }

    if lc.corner_weight != 0.0 {
        // corners from the predicted center/size/residual-heading with
        // the ground-truth bin and size class, against the ground-truth
        // corners and their pi-flipped twin; keep the smaller loss
        let center = tape.add(newest.center, out.head.center_residual)?;
        let anchor = anchors.dims[sc];
        let anchor_leaf = tape.leaf(&[3], anchor.to_vec());
        let scaled = tape.mul(anchor_leaf, size_res_pred)?;
        let size = tape.add(anchor_leaf, scaled)?;
        let res = tape.slice(out.head.heading_residuals, gt_bin, 1)?;
        let theta = tape.affine(
            res,
            std::f64::consts::PI / NH as f64,
            bin_to_heading(gt_bin, 0.0),
        );
        let corners = tape.box_corners(center, size, theta)?;
        let gt_flat: Vec<f64> = box3d_corners(gt).iter().flatten().copied().collect();
        let flipped = Box3D {
            theta: gt.theta + std::f64::consts::PI,
            ..*gt
        };
        let flip_flat: Vec<f64> = box3d_corners(&flipped).iter().flatten().copied().collect();
        let gt_leaf = tape.leaf(&[24], gt_flat);
        let flip_leaf = tape.leaf(&[24], flip_flat);
        let a = tape.huber_loss(corners, gt_leaf, delta)?;
        let b = tape.huber_loss(corners, flip_leaf, delta)?;
        let t = if tape.scalar_value(a) <= tape.scalar_value(b) { a } else { b };
        terms.push(("corner", lc.corner_weight, t));
    }

    if lc.cos_weight != 0.0 && out.frames.len() >= 2 {
        let pairs = out.frames.len() - 1;
        let mut acc: Option<TensorId> = None;
        for w in out.frames.windows(2) {
            let d = tape.cosine_distance(w[0].feature, w[1].feature)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, d)?,
                None => d,
            });
        }
        let mean = tape.affine(acc.unwrap(), 1.0 / pairs as f64, 0.0);
        terms.push(("cosine", lc.cos_weight, mean));
    }

    let mut breakdown = BTreeMap::new();
    let mut total: Option<TensorId> = None;
    for (name, weight, id) in terms {
        let v = tape.scalar_value(id);
        if !v.is_finite() {
            return Err(TrainError::NonFiniteLoss(name.to_string()));
        }
        breakdown.insert(name, v);
        let weighted = tape.affine(id, weight, 0.0);
        total = Some(match total {
            Some(t) => tape.add(t, weighted)?,
            None => weighted,
        });
    }
    let total = total.ok_or(TrainError::NoSamples)?;
    Ok(LossBreakdown {
        total,
        terms: breakdown,
    })
}

fn sample_points(sample: &SequenceSample) -> Vec<Vec<[f64; 3]>> {
    sample.frames.iter().map(|f| f.points.points.clone()).collect()
}

/// Decoded detection for one sample: rectified-frame box plus the
/// confidence (max heading softmax times max size softmax).
pub fn predict_sample(
    store: &ParamStore,
    cfg: &ModelConfig,
    sample: &SequenceSample,
    anchors: &SizeAnchors,
    warnings: &mut DecodeWarnings,
) -> Result<(Box3D, f64), TrainError> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(store);
    let out = full_forward(
        &mut tape,
        &mut binder,
        cfg,
        &sample_points(sample),
        sample.class_index,
    )?;
    let hv: HeadValues = head_values(&tape, &out);
    let newest = out.newest();
    let tnet = tape.values(newest.tnet_delta);
    let decoded = decode_box(
        &hv,
        newest.centroid,
        [tnet[0], tnet[1], tnet[2]],
        sample.frames.last().unwrap().frustum_angle,
        anchors,
        warnings,
    );
    let hmax = softmax(&hv.heading_scores).into_iter().fold(0.0, f64::max);
    let smax = softmax(&hv.size_scores).into_iter().fold(0.0, f64::max);
    Ok((decoded, hmax * smax))
}

/// Run the detector over samples and score it KITTI-style. Each sample
/// contributes one ground-truth box and one detection; frames are keyed
/// by (drive, frame).
pub fn evaluate_samples(
    store: &ParamStore,
    cfg: &ModelConfig,
    samples: &[SequenceSample],
    anchors: &SizeAnchors,
    mode: ApMode,
) -> Result<(ApReport, Vec<Detection>, Vec<GroundTruth>), TrainError> {
    let mut frame_keys: BTreeMap<(String, usize), usize> = BTreeMap::new();
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    let mut warnings = DecodeWarnings::default();
    for s in samples {
        let newest_frame = s.frames.last().unwrap().frame;
        let next = frame_keys.len();
        let key = *frame_keys
            .entry((s.drive_id.clone(), newest_frame))
            .or_insert(next);
        let (box3d, score) = predict_sample(store, cfg, s, anchors, &mut warnings)?;
        dets.push(Detection {
            frame: key,
            class: s.class,
            box3d,
            box2d: None,
            score,
        });
        gts.push(GroundTruth {
            frame: key,
            class: s.class,
            box3d: s.gt_box_rect,
            box2d: None,
            difficulty: assign_difficulty(
                s.newest_box2d_height,
                s.newest_occlusion,
                s.newest_truncation,
            ),
        });
    }
    let report = evaluate_detections(&dets, &gts, mode);
    Ok((report, dets, gts))
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplicative learning-rate decay applied after every epoch;
    /// 1.0 keeps the rate constant.
    pub lr_decay: f64,
    /// Adam first-moment decay.
    pub beta1: f64,
    pub seed: u64,
    pub loss: LossConfig,
    /// When set, per-epoch checkpoints, the best checkpoint and a TSV
    /// metric log are written here.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            lr: 0.001,
            lr_decay: 1.0,
            beta1: 0.9,
            seed: 17,
            loss: LossConfig::default(),
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_total: f64,
    pub term_means: BTreeMap<&'static str, f64>,
    /// Mean moderate AP on the validation samples, when provided.
    pub val_metric: Option<f64>,
}

pub struct TrainReport {
    pub params: ParamStore,
    pub best_params: ParamStore,
    pub best_epoch: usize,
    pub epochs: Vec<EpochLog>,
    pub mask_fallbacks: usize,
}

fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<(), TrainError> {
    std::fs::write(path, bytes).map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn save_to_file(path: &std::path::Path, store: &ParamStore) -> Result<(), TrainError> {
    let mut buf = Vec::new();
    save_params(&mut buf, store)?;
    write_file(path, &buf)
}

/// Load a checkpoint written by [`train`].
pub fn load_checkpoint(path: &std::path::Path) -> Result<ParamStore, TrainError> {
    let bytes = std::fs::read(path).map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(load_params(&mut bytes.as_slice())?)
}

/// Key=value dump of the configuration, written next to checkpoints.
pub fn config_summary(cfg: &ModelConfig, tc: &TrainConfig) -> String {
    let mut s = String::new();
    s.push_str(&format!("tau={}\n", cfg.tau));
    s.push_str(&format!("branching={}\n", cfg.branching.name()));
    s.push_str(&format!("with_center_concat={}\n", cfg.with_center_concat));
    s.push_str(&format!("num_points={}\n", cfg.num_points));
    s.push_str(&format!("feature_dim={}\n", cfg.feature_dim));
    s.push_str(&format!("epochs={}\n", tc.epochs));
    s.push_str(&format!("batch_size={}\n", tc.batch_size));
    s.push_str(&format!("lr={}\n", tc.lr));
    s.push_str(&format!("lr_decay={}\n", tc.lr_decay));
    s.push_str(&format!("beta1={}\n", tc.beta1));
    s.push_str(&format!("seed={}\n", tc.seed));
    s.push_str(&format!("cos_weight={}\n", tc.loss.cos_weight));
    s.push_str(&format!("corner_weight={}\n", tc.loss.corner_weight));
    s
}

/// Adam training over sequence samples with batch gradient
/// accumulation in a fixed order. Deterministic under the seed.
pub fn train(
    initial: ParamStore,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    train_samples: &[SequenceSample],
    val_samples: &[SequenceSample],
    anchors: &SizeAnchors,
) -> Result<TrainReport, TrainError> {
    if train_samples.is_empty() {
        return Err(TrainError::NoSamples);
    }
    let mut store = initial;
    let mut adam = AdamState::new(tc.lr, tc.beta1);
    let mut logs: Vec<EpochLog> = Vec::new();
    let mut best_params = store.clone();
    let mut best_epoch = 0;
    let mut best_metric = f64::NEG_INFINITY;
    let mut mask_fallbacks = 0usize;

    if let Some(dir) = &tc.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| TrainError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        write_file(&dir.join("config.txt"), config_summary(cfg, tc).as_bytes())?;
    }
    let mut tsv = String::from("epoch\tmean_total\tval_metric\tterms\n");

    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);

        let mut total_sum = 0.0;
        let mut term_sums: BTreeMap<&'static str, f64> = BTreeMap::new();
        let mut seen = 0usize;
        for batch in order.chunks(tc.batch_size) {
            let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for &si in batch {
                let s = &train_samples[si];
                let mut tape = Tape::new();
                let mut binder = Binder::new(&store);
                let out = full_forward(
                    &mut tape,
                    &mut binder,
                    cfg,
                    &sample_points(s),
                    s.class_index,
                )?;
                mask_fallbacks += out.mask_fallbacks;
                let loss = compute_sample_loss(&mut tape, &out, s, anchors, &tc.loss)?;
                total_sum += tape.scalar_value(loss.total);
                for (k, v) in &loss.terms {
                    *term_sums.entry(k).or_insert(0.0) += v;
                }
                seen += 1;
                let grads = tape.backward(loss.total)?;
                let g = binder.bindings.collect_grads(&tape, &grads);
                for (name, gv) in g {
                    let e = acc.entry(name).or_insert_with(|| vec![0.0; gv.len()]);
                    for (a, b) in e.iter_mut().zip(&gv) {
                        *a += b;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for gv in acc.values_mut() {
                for g in gv.iter_mut() {
                    *g *= scale;
                }
            }
            adam_step(&mut store, &acc, &mut adam)?;
        }
        adam.lr *= tc.lr_decay;

        let mean_total = total_sum / seen as f64;
        let term_means: BTreeMap<&'static str, f64> = term_sums
            .iter()
            .map(|(k, v)| (*k, v / seen as f64))
            .collect();
        let val_metric = if val_samples.is_empty() {
            None
        } else {
            let (report, _, _) =
                evaluate_samples(&store, cfg, val_samples, anchors, ApMode::ElevenPoint)?;
            Some(report.mean_moderate())
        };
        // negative loss as fallback metric so "best" is always defined
        let metric = val_metric.unwrap_or(-mean_total);
        if metric > best_metric {
            best_metric = metric;
            best_epoch = epoch;
            best_params = store.clone();
        }

        let terms_str = term_means
            .iter()
            .map(|(k, v)| format!("{k}={v:.6}"))
            .collect::<Vec<_>>()
            .join(",");
        tsv.push_str(&format!(
            "{epoch}\t{mean_total:.6}\t{}\t{terms_str}\n",
            val_metric.map_or("-".to_string(), |v| format!("{v:.6}"))
        ));
        if let Some(dir) = &tc.out_dir {
            save_to_file(&dir.join(format!("ckpt_{epoch}.tfn")), &store)?;
        }
        logs.push(EpochLog {
            epoch,
            mean_total,
            term_means,
            val_metric,
        });
    }

    if let Some(dir) = &tc.out_dir {
        save_to_file(&dir.join("best.tfn"), &best_params)?;
        write_file(&dir.join("metrics.tsv"), tsv.as_bytes())?;
    }

    Ok(TrainReport {
        params: store,
        best_params,
        best_epoch,
        epochs: logs,
        mask_fallbacks,
    })
}
