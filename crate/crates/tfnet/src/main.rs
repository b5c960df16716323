//! Command-line entry points: ingestion checks, synthetic drive
//! generation, training, evaluation, gradient checking and detection
//! export.
//!
//! Exit codes: 0 success, 1 a check or run failed, 2 usage error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tfnet::data::{
    anchors_from_drives, build_sequence_samples, load_drive, split_train_val, synth_generate,
    write_drive_to_disk, AutoOcclusion, DriveRecord, SequenceSample, SynthConfig,
};
use tfnet::evaluation::{format_report, ApMode};
use tfnet::geometry::SizeAnchors;
use tfnet::model::{init_params, Branching, Binder, ModelConfig};
use tfnet::tensor::{run_op_suite, Tape};
use tfnet::training::{
    evaluate_samples, load_checkpoint, train, TrainConfig,
};

#[derive(Parser)]
#[command(name = "tfnet", version, about = "Frustum point-cloud detector with temporal fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// KITTI tracking layout root; falls back to TFN_DATA_ROOT.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Comma-separated drive ids; default: every drive under label_02.
    #[arg(long, value_delimiter = ',')]
    drives: Option<Vec<u32>>,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Temporal window length.
    #[arg(long, default_value_t = 3)]
    tau: usize,
    /// Head wiring: ob, tb or ours.
    #[arg(long, default_value = "ours")]
    branching: String,
    /// Concatenate per-frame center estimates onto the GRU input.
    #[arg(long, default_value_t = true)]
    with_center: bool,
    /// Points per frustum after resampling.
    #[arg(long, default_value_t = 1024)]
    num_points: usize,
    /// Narrow test-scale widths instead of the full model.
    #[arg(long, default_value_t = false)]
    toy: bool,
}

impl ModelArgs {
    fn config(&self) -> Result<ModelConfig> {
        let branching = Branching::parse(&self.branching)
            .ok_or_else(|| anyhow!("unknown branching {:?} (use ob, tb or ours)", self.branching))?;
        let mut cfg = if self.toy {
            ModelConfig::toy(self.tau, branching)
        } else {
            ModelConfig::standard(self.tau, branching)
        };
        cfg.with_center_concat = self.with_center;
        cfg.num_points = self.num_points;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse a data root and report per-drive statistics.
    IngestCheck {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Generate a synthetic drive in the KITTI tracking layout.
    SynthGen {
        /// Output root directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "0000")]
        drive_id: String,
        #[arg(long, default_value_t = 40)]
        frames: usize,
        #[arg(long, default_value_t = 8)]
        objects: usize,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        /// Add one scripted occlusion window per track.
        #[arg(long, default_value_t = false)]
        occlude: bool,
    },
    /// Train a model and write checkpoints plus a metric log.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Output directory for checkpoints and logs.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.001)]
        lr: f64,
        /// Multiplicative learning-rate decay applied after each epoch.
        #[arg(long, default_value_t = 1.0)]
        lr_decay: f64,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        /// Temporal consistency loss weight.
        #[arg(long, default_value_t = 1.0)]
        cos_weight: f64,
        /// Corner loss weight.
        #[arg(long, default_value_t = 0.0)]
        corner_weight: f64,
        /// Validation drives (comma separated); default 11,15,16,18
        /// when present.
        #[arg(long, value_delimiter = ',')]
        val_drives: Option<Vec<u32>>,
        /// Worker processes; only 1 (deterministic) is implemented.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// key=value file overriding the flags above.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the validation drives and print the AP
    /// table.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',')]
        val_drives: Option<Vec<u32>>,
        /// Use 40-point interpolation instead of 11-point.
        #[arg(long, default_value_t = false)]
        r40: bool,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 17)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        trials: usize,
    },
    /// Write decoded detections for the validation drives to a file.
    ExportDetections {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        val_drives: Option<Vec<u32>>,
    },
}

fn resolve_data_root(data: &DataArgs) -> Result<PathBuf> {
    if let Some(p) = &data.data_root {
        return Ok(p.clone());
    }
    if let Ok(p) = std::env::var("TFN_DATA_ROOT") {
        return Ok(PathBuf::from(p));
    }
    bail!("no data root: pass --data-root or set TFN_DATA_ROOT")
}

fn discover_drives(root: &Path) -> Result<Vec<u32>> {
    let label_dir = root.join("label_02");
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(&label_dir)
        .with_context(|| format!("reading {}", label_dir.display()))?
    {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".txt") {
            if let Ok(id) = stem.parse::<u32>() {
                ids.push(id);
            }
        }
    }
    ids.sort_unstable();
    if ids.is_empty() {
        bail!("no drives under {}", label_dir.display());
    }
    Ok(ids)
}

fn load_drives(root: &Path, ids: &[u32]) -> Result<Vec<DriveRecord>> {
    ids.iter()
        .map(|&id| load_drive(root, id).with_context(|| format!("loading drive {id:04}")))
        .collect()
}

fn collect_samples(
    drives: &[DriveRecord],
    tau: usize,
    n: usize,
    anchors: &SizeAnchors,
) -> Result<(Vec<SequenceSample>, usize)> {
    let mut samples = Vec::new();
    let mut skipped = 0;
    for d in drives {
        let (mut s, stats) = build_sequence_samples(d, tau, n, anchors)?;
        samples.append(&mut s);
        skipped += stats.skipped_empty;
    }
    Ok((samples, skipped))
}

/// key=value lines; unknown keys are an error so typos fail loudly.
fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{}:{}: expected key=value", path.display(), lineno + 1))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn cmd_ingest_check(data: &DataArgs) -> Result<()> {
    let root = resolve_data_root(data)?;
    let ids = match &data.drives {
        Some(v) => v.clone(),
        None => discover_drives(&root)?,
    };
    let drives = load_drives(&root, &ids)?;
    let (train_ids, val_ids) = split_train_val(&ids, None)?;
    println!("root: {}", root.display());
    println!("drives: {} (train {}, val {})", ids.len(), train_ids.len(), val_ids.len());
    let mut total_objects = 0usize;
    for d in &drives {
        let objects: usize = d.frames.iter().map(|f| f.len()).sum();
        total_objects += objects;
        let cloud_pts = d.cloud(0).map(|c| c.len()).unwrap_or(0);
        println!(
            "  drive {}: {} frames, {} labels, {} points in frame 0",
            d.drive_id,
            d.num_frames(),
            objects,
            cloud_pts
        );
    }
    let anchors = anchors_from_drives(&drives);
    println!("total labels: {total_objects}");
    println!(
        "car anchor (h,w,l): {:.2} {:.2} {:.2}",
        anchors.dims[0][0], anchors.dims[0][1], anchors.dims[0][2]
    );
    Ok(())
}

fn cmd_synth_gen(
    out: &Path,
    drive_id: &str,
    frames: usize,
    objects: usize,
    seed: u64,
    occlude: bool,
) -> Result<()> {
    let cfg = SynthConfig {
        drive_id: drive_id.to_string(),
        frames,
        object_count: objects,
        seed,
        auto_occlusion: occlude.then_some(AutoOcclusion {
            window_len: (3, 6),
            drop_range: (0.8, 1.0),
        }),
        ..SynthConfig::default()
    };
    let drive = synth_generate(&cfg);
    write_drive_to_disk(&drive, out)?;
    let labels: usize = drive.frames.iter().map(|f| f.len()).sum();
    println!(
        "wrote drive {} to {}: {} frames, {} labels",
        drive_id,
        out.display(),
        frames,
        labels
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &DataArgs,
    model: &ModelArgs,
    out: &Path,
    mut tc: TrainConfig,
    cos_weight: f64,
    corner_weight: f64,
    val_drives: Option<&[u32]>,
    workers: usize,
    config: Option<&Path>,
) -> Result<()> {
    let mut model = model.clone();
    if let Some(path) = config {
        let kv = parse_config_file(path)?;
        for (k, v) in &kv {
            match k.as_str() {
                "tau" => model.tau = v.parse()?,
                "branching" => model.branching = v.clone(),
                "with_center" => model.with_center = v.parse()?,
                "num_points" => model.num_points = v.parse()?,
                "toy" => model.toy = v.parse()?,
                "epochs" => tc.epochs = v.parse()?,
                "batch_size" => tc.batch_size = v.parse()?,
                "lr" => tc.lr = v.parse()?,
                "lr_decay" => tc.lr_decay = v.parse()?,
                "seed" => tc.seed = v.parse()?,
                "cos_weight" => tc.loss.cos_weight = v.parse()?,
                "corner_weight" => tc.loss.corner_weight = v.parse()?,
                other => bail!("unknown config key {other:?} in {}", path.display()),
            }
        }
    } else {
        tc.loss.cos_weight = cos_weight;
        tc.loss.corner_weight = corner_weight;
    }
    if workers > 1 {
        eprintln!("note: --workers {workers} requested; running single-threaded for determinism");
    }
    let cfg = model.config()?;

    let root = resolve_data_root(data)?;
    let ids = match &data.drives {
        Some(v) => v.clone(),
        None => discover_drives(&root)?,
    };
    let (train_ids, val_ids) = split_train_val(&ids, val_drives)?;
    let train_drives = load_drives(&root, &train_ids)?;
    let val_drives = load_drives(&root, &val_ids)?;
    let anchors = anchors_from_drives(&train_drives);

    let (train_samples, skipped) =
        collect_samples(&train_drives, cfg.tau, cfg.num_points, &anchors)?;
    let (val_samples, _) = collect_samples(&val_drives, cfg.tau, cfg.num_points, &anchors)?;
    println!(
        "samples: {} train, {} val ({} skipped on empty frustums)",
        train_samples.len(),
        val_samples.len(),
        skipped
    );

    tc.out_dir = Some(out.to_path_buf());
    let initial = init_params(&cfg, tc.seed);
    let report = train(initial, &cfg, &tc, &train_samples, &val_samples, &anchors)?;
    for e in &report.epochs {
        println!(
            "epoch {}: loss {:.6}{}",
            e.epoch,
            e.mean_total,
            e.val_metric
                .map_or(String::new(), |v| format!(", val AP {v:.4}"))
        );
    }
    println!("best epoch: {} (best.tfn)", report.best_epoch);
    Ok(())
}

fn val_setup(
    data: &DataArgs,
    cfg: &ModelConfig,
    val_drives: Option<&[u32]>,
) -> Result<(Vec<SequenceSample>, SizeAnchors)> {
    let root = resolve_data_root(data)?;
    let ids = match &data.drives {
        Some(v) => v.clone(),
        None => discover_drives(&root)?,
    };
    let (train_ids, val_ids) = split_train_val(&ids, val_drives)?;
    // anchors must come from the training split, as in training
    let train_drives = load_drives(&root, &train_ids)?;
    let anchors = if train_drives.is_empty() {
        SizeAnchors::default()
    } else {
        anchors_from_drives(&train_drives)
    };
    let drives = load_drives(&root, &val_ids)?;
    let (samples, _) = collect_samples(&drives, cfg.tau, cfg.num_points, &anchors)?;
    if samples.is_empty() {
        bail!("no validation samples");
    }
    Ok((samples, anchors))
}

fn cmd_eval(
    data: &DataArgs,
    model: &ModelArgs,
    checkpoint: &Path,
    val_drives: Option<&[u32]>,
    r40: bool,
) -> Result<()> {
    let cfg = model.config()?;
    let (samples, anchors) = val_setup(data, &cfg, val_drives)?;
    let store = load_checkpoint(checkpoint)?;
    let mode = if r40 { ApMode::R40 } else { ApMode::ElevenPoint };
    let (report, _, _) = evaluate_samples(&store, &cfg, &samples, &anchors, mode)?;
    print!("{}", format_report(&report));
    println!("mean moderate AP: {:.4}", report.mean_moderate());
    Ok(())
}

fn cmd_gradcheck(seed: u64, trials: usize) -> Result<()> {
    let results = run_op_suite(seed, trials);
    let mut worst = 0.0f64;
    for (name, err) in &results {
        println!("{name:<24} max rel err {err:.3e}");
        worst = worst.max(*err);
    }

    // end-to-end: compare the full model's analytic gradient against
    // central differences on a sample of parameter entries
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let cfg = ModelConfig::toy(2, Branching::Ours);
    let store = init_params(&cfg, seed);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let frames: Vec<Vec<[f64; 3]>> = (0..2)
        .map(|_| {
            (0..16)
                .map(|_| {
                    [
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(8.0..12.0),
                    ]
                })
                .collect()
        })
        .collect();
    let eval_loss = |s: &tfnet::tensor::ParamStore| -> f64 {
        let mut tape = Tape::new();
        let mut binder = Binder::new(s);
        let out = tfnet::model::full_forward(&mut tape, &mut binder, &cfg, &frames, 0).unwrap();
        let mut total = tape.sum(out.head.center_residual);
        for id in [
            out.head.heading_scores,
            out.head.heading_residuals,
            out.head.size_scores,
            out.head.size_residuals,
        ] {
            let s = tape.sum(id);
            total = tape.add(total, s).unwrap();
        }
        tape.scalar_value(total)
    };
    let mut tape = Tape::new();
    let mut binder = Binder::new(&store);
    let out = tfnet::model::full_forward(&mut tape, &mut binder, &cfg, &frames, 0)?;
    let mut total = tape.sum(out.head.center_residual);
    for id in [
        out.head.heading_scores,
        out.head.heading_residuals,
        out.head.size_scores,
        out.head.size_residuals,
    ] {
        let s = tape.sum(id);
        total = tape.add(total, s)?;
    }
    let grads = tape.backward(total)?;
    let analytic = binder.bindings.collect_grads(&tape, &grads);
    let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
    let eps = 1e-6;
    let mut e2e_worst = 0.0f64;
    for _ in 0..30 {
        let name = &names[rng.gen_range(0..names.len())];
        let len = store.get(name).unwrap().values.len();
        let idx = rng.gen_range(0..len);
        let mut plus = store.clone();
        plus.get_mut(name).unwrap().values[idx] += eps;
        let mut minus = store.clone();
        minus.get_mut(name).unwrap().values[idx] -= eps;
        let numeric = (eval_loss(&plus) - eval_loss(&minus)) / (2.0 * eps);
        let a = analytic.get(name).map(|g| g[idx]).unwrap_or(0.0);
        let rel = (a - numeric).abs() / a.abs().max(1.0);
        e2e_worst = e2e_worst.max(rel);
    }
    println!("{:<24} max rel err {e2e_worst:.3e}", "model end-to-end");

    if worst >= 1e-5 || e2e_worst >= 1e-4 {
        bail!("gradient check failed: ops {worst:.3e} (limit 1e-5), end-to-end {e2e_worst:.3e} (limit 1e-4)");
    }
    println!("all gradients within tolerance");
    Ok(())
}

fn cmd_export(
    data: &DataArgs,
    model: &ModelArgs,
    checkpoint: &Path,
    out: &Path,
    val_drives: Option<&[u32]>,
) -> Result<()> {
    let cfg = model.config()?;
    let (samples, anchors) = val_setup(data, &cfg, val_drives)?;
    let store = load_checkpoint(checkpoint)?;
    let mut warnings = tfnet::geometry::DecodeWarnings::default();
    let mut text = String::new();
    for s in &samples {
        let (b, score) =
            tfnet::training::predict_sample(&store, &cfg, s, &anchors, &mut warnings)?;
        let frame = s.frames.last().unwrap().frame;
        text.push_str(&format!(
            "{} {} {} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
            s.drive_id,
            frame,
            s.class.name(),
            score,
            b.h,
            b.w,
            b.l,
            b.cx,
            b.cy,
            b.cz,
            b.theta,
        ));
    }
    std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    if warnings.size_clamped > 0 {
        eprintln!("note: {} decoded sizes clamped to 0.01 m", warnings.size_clamped);
    }
    println!("wrote {} detections to {}", samples.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::IngestCheck { data } => cmd_ingest_check(&data),
        Command::SynthGen {
            out,
            drive_id,
            frames,
            objects,
            seed,
            occlude,
        } => cmd_synth_gen(&out, &drive_id, frames, objects, seed, occlude),
        Command::Train {
            data,
            model,
            out,
            epochs,
            batch_size,
            lr,
            lr_decay,
            seed,
            cos_weight,
            corner_weight,
            val_drives,
            workers,
            config,
        } => {
            let tc = TrainConfig {
                epochs,
                batch_size,
                lr,
                lr_decay,
                seed,
                ..TrainConfig::default()
            };
            cmd_train(
                &data,
                &model,
                &out,
                tc,
                cos_weight,
                corner_weight,
                val_drives.as_deref(),
                workers,
                config.as_deref(),
            )
        }
        Command::Eval {
            data,
            model,
            checkpoint,
            val_drives,
            r40,
        } => cmd_eval(&data, &model, &checkpoint, val_drives.as_deref(), r40),
        Command::Gradcheck { seed, trials } => cmd_gradcheck(seed, trials),
        Command::ExportDetections {
            data,
            model,
            checkpoint,
            out,
            val_drives,
        } => cmd_export(&data, &model, &checkpoint, &out, val_drives.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
