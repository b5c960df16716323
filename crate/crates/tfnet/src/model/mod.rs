//! The detector: per-frame frustum PointNet (segmentation, T-Net,
//! backbone) whose object features are fused over time by a GRU, with
//! three head wirings for ablation.
//!
//! A forward pass processes one sequence sample (no batch dimension);
//! batching is gradient accumulation in the trainer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{NH, NS};
use crate::tensor::{
    Activation, GruParamIds, ParamBindings, ParamStore, Tape, TensorError, TensorId,
};


/// Head wiring variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branching {
    /// Single head on the fused temporal feature.
    OneBranch,
    /// Head applied to each frame's raw feature, outputs averaged;
    /// no temporal fusion in the box path.
    TwoBranch,
    /// Center and heading from the newest raw feature, sizes from the
    /// fused temporal feature.
    Ours,
}

impl Branching {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ob" => Some(Branching::OneBranch),
            "tb" => Some(Branching::TwoBranch),
            "ours" => Some(Branching::Ours),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Branching::OneBranch => "ob",
            Branching::TwoBranch => "tb",
            Branching::Ours => "ours",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub tau: usize,
    pub branching: Branching,
    /// Concatenate the per-frame estimated center onto the GRU input.
    pub with_center_concat: bool,
    pub num_points: usize,
    /// Width of the fused object feature / GRU hidden state.
    pub feature_dim: usize,
    /// Per-point widths of the first segmentation MLP.
    pub seg_mlp1: Vec<usize>,
    /// Which seg_mlp1 layer output is concatenated with the global
    /// feature for the second stage.
    pub seg_concat_layer: usize,
    /// Widths of the second segmentation MLP (a final 2-logit layer is
    /// appended).
    pub seg_mlp2: Vec<usize>,
    pub tnet_mlp: Vec<usize>,
    /// Post-pool widths of the T-Net (a final 3-output layer is
    /// appended).
    pub tnet_fc: Vec<usize>,
    pub backbone_mlp: Vec<usize>,
    pub head_hidden: usize,
}

/// Width of a head output: center (3), heading scores and residuals
/// (NH each), size scores (NS) and residuals (3 NS).
pub const HEAD_WIDTH: usize = 3 + 2 * NH + 4 * NS;

impl ModelConfig {
    pub fn standard(tau: usize, branching: Branching) -> Self {
        Self {
            tau,
            branching,
            with_center_concat: true,
            num_points: 1024,
            feature_dim: 512,
            seg_mlp1: vec![64, 64, 64, 128, 1024],
            seg_concat_layer: 1,
            seg_mlp2: vec![512, 256, 128, 128],
            tnet_mlp: vec![128, 128, 256],
            tnet_fc: vec![256, 128],
            backbone_mlp: vec![128, 128, 256, 512],
            head_hidden: 256,
        }
    }

    /// Narrow widths for tests and the synthetic benchmark.
    pub fn toy(tau: usize, branching: Branching) -> Self {
        Self {
            tau,
            branching,
            with_center_concat: true,
            num_points: 32,
            feature_dim: 16,
            seg_mlp1: vec![8, 8, 16],
            seg_concat_layer: 1,
            seg_mlp2: vec![16, 8],
            tnet_mlp: vec![8, 16],
            tnet_fc: vec![16],
            backbone_mlp: vec![16, 32],
            head_hidden: 16,
        }
    }

    pub fn gru_input_dim(&self) -> usize {
        self.feature_dim + if self.with_center_concat { 3 } else { 0 }
    }
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn init_linear(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    rows: usize,
    cols: usize,
) {
    store.insert(
        &format!("{prefix}.w"),
        &[rows, cols],
        xavier(rng, rows, cols, rows * cols),
    );
    store.insert(&format!("{prefix}.b"), &[cols], vec![0.0; cols]);
}

/// 1-D linear layer y = W x + b with W stored (out, in).
fn init_fc(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, inp: usize, out: usize) {
    store.insert(
        &format!("{prefix}.w"),
        &[out, inp],
        xavier(rng, inp, out, out * inp),
    );
    store.insert(&format!("{prefix}.b"), &[out], vec![0.0; out]);
}

/// Xavier-initialized parameter store for a config; biases are zero.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();

    let mut inp = 3;
    for (i, &out) in cfg.seg_mlp1.iter().enumerate() {
        init_linear(&mut store, &mut rng, &format!("seg1.{i}"), inp, out);
        inp = out;
    }
    let global_dim = *cfg.seg_mlp1.last().unwrap();
    inp = cfg.seg_mlp1[cfg.seg_concat_layer] + global_dim;
    for (i, &out) in cfg.seg_mlp2.iter().enumerate() {
        init_linear(&mut store, &mut rng, &format!("seg2.{i}"), inp, out);
        inp = out;
    }
    init_linear(&mut store, &mut rng, "seg2.out", inp, 2);

    inp = 3;
    for (i, &out) in cfg.tnet_mlp.iter().enumerate() {
        init_linear(&mut store, &mut rng, &format!("tnet.mlp.{i}"), inp, out);
        inp = out;
    }
    for (i, &out) in cfg.tnet_fc.iter().enumerate() {
        init_fc(&mut store, &mut rng, &format!("tnet.fc.{i}"), inp, out);
        inp = out;
    }
    init_fc(&mut store, &mut rng, "tnet.out", inp, 3);

    inp = 3;
    for (i, &out) in cfg.backbone_mlp.iter().enumerate() {
        init_linear(&mut store, &mut rng, &format!("bb.{i}"), inp, out);
        inp = out;
    }
    init_fc(&mut store, &mut rng, "bb.fc", inp + 3, cfg.feature_dim);

    let h = cfg.feature_dim;
    let x = cfg.gru_input_dim();
    for g in ["z", "r", "h"] {
        store.insert(&format!("gru.w_{g}"), &[h, x], xavier(&mut rng, x, h, h * x));
        store.insert(&format!("gru.u_{g}"), &[h, h], xavier(&mut rng, h, h, h * h));
        // bias the update gate toward retaining history so temporal
        // memory survives early training (cf. forget-gate bias tricks)
        let b0 = if g == "z" { 1.0 } else { 0.0 };
        store.insert(&format!("gru.b_{g}"), &[h], vec![b0; h]);
    }
    init_fc(&mut store, &mut rng, "fuse", h, h);

    init_fc(&mut store, &mut rng, "head.a.0", h, cfg.head_hidden);
    init_fc(&mut store, &mut rng, "head.a.1", cfg.head_hidden, HEAD_WIDTH);
    if cfg.branching != Branching::OneBranch {
        init_fc(&mut store, &mut rng, "head.b.0", h, cfg.head_hidden);
        init_fc(&mut store, &mut rng, "head.b.1", cfg.head_hidden, HEAD_WIDTH);
    }
    store
}

/// Caches one tape leaf per parameter name, so shared weights bind a
/// single leaf regardless of how many frames reuse them.
pub struct Binder<'a> {
    store: &'a ParamStore,
    pub bindings: ParamBindings,
    cache: BTreeMap<String, TensorId>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            bindings: ParamBindings::default(),
            cache: BTreeMap::new(),
        }
    }

    fn get(&mut self, tape: &mut Tape, name: &str) -> TensorId {
        if let Some(&id) = self.cache.get(name) {
            return id;
        }
        let id = self.bindings.bind(tape, self.store, name);
        self.cache.insert(name.to_string(), id);
        id
    }
}

type Result<T> = std::result::Result<T, TensorError>;

/// Row-wise linear layer for (n, in) point features.
fn linear_rows(
    tape: &mut Tape,
    binder: &mut Binder,
    prefix: &str,
    x: TensorId,
    relu: bool,
) -> Result<TensorId> {
    let w = binder.get(tape, &format!("{prefix}.w"));
    let b = binder.get(tape, &format!("{prefix}.b"));
    let y = tape.matmul(x, w)?;
    let y = tape.add_row_broadcast(y, b)?;
    Ok(if relu {
        tape.activation(y, Activation::Relu)
    } else {
        y
    })
}

/// 1-D linear layer y = W x + b.
fn linear_vec(
    tape: &mut Tape,
    binder: &mut Binder,
    prefix: &str,
    x: TensorId,
    relu: bool,
) -> Result<TensorId> {
    let w = binder.get(tape, &format!("{prefix}.w"));
    let b = binder.get(tape, &format!("{prefix}.b"));
    let y = tape.matmul(w, x)?;
    let y = tape.add(y, b)?;
    Ok(if relu {
        tape.activation(y, Activation::Relu)
    } else {
        y
    })
}

/// Everything computed for one frame of the sequence.
pub struct FrameForward {
    pub seg_logits: TensorId,
    pub centroid: [f64; 3],
    pub mask_fallback: bool,
    pub tnet_delta: TensorId,
    /// centroid + tnet_delta, on tape, shape [3].
    pub center: TensorId,
    /// Object feature, shape [feature_dim].
    pub feature: TensorId,
}

/// Per-frame frustum PointNet: instance segmentation, masked centroid,
/// T-Net refinement, and the pooled object feature.
pub fn frame_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    cfg: &ModelConfig,
    points: &[[f64; 3]],
    class_index: usize,
) -> Result<FrameForward> {
    let n = points.len();
    assert!(n > 0, "frame_forward needs at least one point");
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    let pts = tape.leaf(&[n, 3], flat);

    // stage 1: per-point MLP with a global max-pool skip connection
    let mut h = pts;
    let mut concat_feat = pts;
    for i in 0..cfg.seg_mlp1.len() {
        h = linear_rows(tape, binder, &format!("seg1.{i}"), h, true)?;
        if i == cfg.seg_concat_layer {
            concat_feat = h;
        }
    }
    let global = tape.reduce_max_over_points(h)?;
    let mut g = tape.concat_cols_broadcast(concat_feat, global)?;
    for i in 0..cfg.seg_mlp2.len() {
        g = linear_rows(tape, binder, &format!("seg2.{i}"), g, true)?;
    }
    let seg_logits = linear_rows(tape, binder, "seg2.out", g, false)?;

    // hard mask from the logits; fall back to every point when the
    // mask is empty so downstream stages always see geometry
    let logit_vals = tape.values(seg_logits);
    let mut mask_rows: Vec<usize> = (0..n).filter(|&i| logit_vals[2 * i + 1] > logit_vals[2 * i]).collect();
    let mask_fallback = mask_rows.is_empty();
    if mask_fallback {
        mask_rows = (0..n).collect();
    }
    let mut centroid = [0.0; 3];
    for &r in &mask_rows {
        for k in 0..3 {
            centroid[k] += points[r][k];
        }
    }
    for c in &mut centroid {
        *c /= mask_rows.len() as f64;
    }

    let masked = tape.gather_rows(pts, &mask_rows)?;
    let centroid_leaf = tape.leaf(&[3], centroid.to_vec());
    let centered = tape.sub_row_broadcast(masked, centroid_leaf)?;

    // T-Net: residual center shift from the centroid-centered mask
    let mut t = centered;
    for i in 0..cfg.tnet_mlp.len() {
        t = linear_rows(tape, binder, &format!("tnet.mlp.{i}"), t, true)?;
    }
    let mut tv = tape.reduce_max_over_points(t)?;
    for i in 0..cfg.tnet_fc.len() {
        tv = linear_vec(tape, binder, &format!("tnet.fc.{i}"), tv, true)?;
    }
    let tnet_delta = linear_vec(tape, binder, "tnet.out", tv, false)?;

    // backbone on points re-centered by the T-Net shift; the gradient
    // of the box loss reaches the T-Net through this subtraction
    let recentered = tape.sub_row_broadcast(centered, tnet_delta)?;
    let mut bb = recentered;
    for i in 0..cfg.backbone_mlp.len() {
        bb = linear_rows(tape, binder, &format!("bb.{i}"), bb, true)?;
    }
    let pooled = tape.reduce_max_over_points(bb)?;
    let mut onehot = vec![0.0; 3];
    onehot[class_index] = 1.0;
    let class_leaf = tape.leaf(&[3], onehot);
    let with_class = tape.concat_vec(pooled, class_leaf)?;
    let feature = linear_vec(tape, binder, "bb.fc", with_class, true)?;

    let centroid_leaf2 = tape.leaf(&[3], centroid.to_vec());
    let center = tape.add(centroid_leaf2, tnet_delta)?;

    Ok(FrameForward {
        seg_logits,
        centroid,
        mask_fallback,
        tnet_delta,
        center,
        feature,
    })
}

/// GRU over the per-frame features (zero initial state, oldest first)
/// followed by a ReLU projection.
pub fn tfm_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    cfg: &ModelConfig,
    frames: &[FrameForward],
) -> Result<TensorId> {
    let gru = GruParamIds {
        w_z: binder.get(tape, "gru.w_z"),
        w_r: binder.get(tape, "gru.w_r"),
        w_h: binder.get(tape, "gru.w_h"),
        u_z: binder.get(tape, "gru.u_z"),
        u_r: binder.get(tape, "gru.u_r"),
        u_h: binder.get(tape, "gru.u_h"),
        b_z: binder.get(tape, "gru.b_z"),
        b_r: binder.get(tape, "gru.b_r"),
        b_h: binder.get(tape, "gru.b_h"),
    };
    let mut h = tape.leaf(&[cfg.feature_dim], vec![0.0; cfg.feature_dim]);
    for f in frames {
        let x = if cfg.with_center_concat {
            tape.concat_vec(f.feature, f.center)?
        } else {
            f.feature
        };
        h = crate::tensor::gru_cell(tape, x, h, &gru)?;
    }
    linear_vec(tape, binder, "fuse", h, true)
}

fn head(tape: &mut Tape, binder: &mut Binder, prefix: &str, x: TensorId) -> Result<TensorId> {
    let h = linear_vec(tape, binder, &format!("{prefix}.0"), x, true)?;
    linear_vec(tape, binder, &format!("{prefix}.1"), h, false)
}

/// Head output split into its named slices.
pub struct HeadSlices {
    pub center_residual: TensorId,
    pub heading_scores: TensorId,
    pub heading_residuals: TensorId,
    pub size_scores: TensorId,
    pub size_residuals: TensorId,
}

fn split_head(tape: &mut Tape, out: TensorId) -> Result<HeadSlices> {
    let mut off = 0;
    let mut next = |tape: &mut Tape, len: usize| -> Result<TensorId> {
        let s = tape.slice(out, off, len)?;
        off += len;
        Ok(s)
    };
    Ok(HeadSlices {
        center_residual: next(tape, 3)?,
        heading_scores: next(tape, NH)?,
        heading_residuals: next(tape, NH)?,
        size_scores: next(tape, NS)?,
        size_residuals: next(tape, 3 * NS)?,
    })
}

/// Apply the output heads to the newest raw feature `f_t` and the
/// fused feature `fused` according to the branching variant.
///
/// OneBranch: head A on `fused` predicts everything. TwoBranch: head A
/// on `f_t` and head B on `fused`, raw outputs averaged elementwise.
/// Ours: head A on `f_t` supplies center and heading, head B on
/// `fused` supplies the size outputs.
pub fn head_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    branching: Branching,
    f_t: TensorId,
    fused: TensorId,
) -> Result<HeadSlices> {
    match branching {
        Branching::OneBranch => {
            let out = head(tape, binder, "head.a", fused)?;
            split_head(tape, out)
        }
        Branching::TwoBranch => {
            let out_a = head(tape, binder, "head.a", f_t)?;
            let out_b = head(tape, binder, "head.b", fused)?;
            let sum = tape.add(out_a, out_b)?;
            let avg = tape.affine(sum, 0.5, 0.0);
            split_head(tape, avg)
        }
        Branching::Ours => {
            let out_a = head(tape, binder, "head.a", f_t)?;
            let out_b = head(tape, binder, "head.b", fused)?;
            let a = split_head(tape, out_a)?;
            let b = split_head(tape, out_b)?;
            Ok(HeadSlices {
                center_residual: a.center_residual,
                heading_scores: a.heading_scores,
                heading_residuals: a.heading_residuals,
                size_scores: b.size_scores,
                size_residuals: b.size_residuals,
            })
        }
    }
}

pub struct ModelOutput {
    /// Per-frame forwards, oldest first.
    pub frames: Vec<FrameForward>,
    pub fused_feature: TensorId,
    pub head: HeadSlices,
    pub mask_fallbacks: usize,
}

impl ModelOutput {
    pub fn newest(&self) -> &FrameForward {
        self.frames.last().expect("at least one frame")
    }
}

/// Run the whole detector on one sequence of frustum point sets
/// (oldest first; each set must be non-empty).
pub fn full_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    cfg: &ModelConfig,
    frame_points: &[Vec<[f64; 3]>],
    class_index: usize,
) -> Result<ModelOutput> {
    assert!(!frame_points.is_empty(), "at least one frame required");
    let mut frames = Vec::with_capacity(frame_points.len());
    for pts in frame_points {
        frames.push(frame_forward(tape, binder, cfg, pts, class_index)?);
    }
    let fused = tfm_forward(tape, binder, cfg, &frames)?;

    let newest = frames.last().unwrap().feature;
    let head_slices = head_forward(tape, binder, cfg.branching, newest, fused)?;

    let mask_fallbacks = frames.iter().filter(|f| f.mask_fallback).count();
    Ok(ModelOutput {
        frames,
        fused_feature: fused,
        head: head_slices,
        mask_fallbacks,
    })
}

/// Plain-value head outputs of a forward pass, for decoding.
pub fn head_values(tape: &Tape, out: &ModelOutput) -> crate::geometry::HeadValues {
    let v = |id: TensorId| tape.values(id).to_vec();
    let sr = v(out.head.size_residuals);
    crate::geometry::HeadValues {
        center_residual: {
            let c = v(out.head.center_residual);
            [c[0], c[1], c[2]]
        },
        heading_scores: v(out.head.heading_scores),
        heading_residuals: v(out.head.heading_residuals),
        size_scores: v(out.head.size_scores),
        size_residuals: (0..NS).map(|i| [sr[3 * i], sr[3 * i + 1], sr[3 * i + 2]]).collect(),
    }
}
