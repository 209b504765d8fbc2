//! Command-line front end: synthetic dataset generation, training, inference,
//! evaluation, and gradient verification.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use sprd_core::checkpoint::peek_config;
use sprd_core::data::dataset::ANNOTATIONS_FILE;
use sprd_core::data::synth::CLASS_NAMES;
use sprd_core::eval::{eval_images_from_annotations, EvalImage};
use sprd_core::gradcheck::{network_gradcheck, run_gradcheck};
use sprd_core::infer::to_record;
use sprd_core::{
    detect_image, load_checkpoint, read_dataset, read_detections, save_checkpoint, summarize,
    write_dataset, write_detections, write_eval_result, write_pr_csv, DetectionRec, Element,
    EvalConfig, Precision, RunConfig, Sample, SceneSpec, StepMetrics, TrainSession,
};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "sprd", version, about = "One-stage instance segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic shape dataset (PPM images + annotation JSON).
    Synth {
        /// Dataset seed; scenes are deterministic per (seed, index).
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Number of images.
        #[arg(long, default_value_t = 20)]
        count: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 128)]
        image_size: usize,
        /// Fewest instances per image.
        #[arg(long, default_value_t = 1)]
        min_instances: usize,
        /// Most instances per image.
        #[arg(long, default_value_t = 3)]
        max_instances: usize,
    },
    /// Train on a dataset directory and write a checkpoint.
    Train {
        /// Dataset directory from `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Config file (flat key=value text); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override train.steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Checkpoint output path.
        #[arg(long)]
        out_ckpt: PathBuf,
        /// Mask feature fusion: dilated | consecutive | parallel1246.
        #[arg(long)]
        fusion: Option<String>,
        /// Pyramid mode: gfpn | fpn.
        #[arg(long)]
        pyramid: Option<String>,
        /// Decoder shortcut: on | off.
        #[arg(long)]
        shortcut: Option<String>,
        /// Mask-pixel positive IoU threshold.
        #[arg(long)]
        mask_iou_thresh: Option<f64>,
        /// Override the run seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Numeric mode: fast (f32) | verify (f64).
        #[arg(long)]
        precision: Option<String>,
        /// Extra config overrides, repeatable: --set train.lr=5e-4.
        #[arg(long, value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Write the per-step metrics CSV here instead of stdout.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Detect instances over a dataset and write detection JSON.
    Infer {
        /// Checkpoint from `train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory to run on.
        #[arg(long)]
        data: PathBuf,
        /// Detection output path.
        #[arg(long)]
        out_json: PathBuf,
        /// Config file that must match the checkpoint digest.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Accept a checkpoint whose config digest differs from --config.
        #[arg(long)]
        force: bool,
    },
    /// Score detection JSON against dataset annotations.
    Eval {
        /// Detection JSON from `infer`.
        #[arg(long)]
        pred_json: PathBuf,
        /// Annotation JSON file, or a dataset directory containing one.
        #[arg(long)]
        ann_json: PathBuf,
        /// EvalResult JSON output path.
        #[arg(long)]
        out: PathBuf,
        /// Optional per-class PR curve CSV.
        #[arg(long)]
        pr_csv: Option<PathBuf>,
    },
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        /// "all" or one op name (e.g. conv2d, focal_loss).
        #[arg(long, default_value = "all")]
        ops: String,
        /// Largest allowed relative error.
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        /// Random trials per op.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0xA11D1FF)]
        seed: u64,
        /// Also differentiate a full miniature network end to end.
        #[arg(long)]
        network: bool,
    },
}

fn main() {
    init_threads();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    };
    std::process::exit(code);
}

/// SPRD_THREADS caps the worker pool; unset leaves the rayon default.
fn init_threads() {
    if let Ok(v) = std::env::var("SPRD_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Synth { seed, count, out, image_size, min_instances, max_instances } => {
            synth(seed, count, &out, image_size, min_instances, max_instances)
        }
        Cmd::Train {
            data,
            config,
            steps,
            out_ckpt,
            fusion,
            pyramid,
            shortcut,
            mask_iou_thresh,
            seed,
            precision,
            set,
            log,
        } => {
            let mut run = match &config {
                Some(p) => {
                    let text = fs::read_to_string(p).with_context(|| p.display().to_string())?;
                    RunConfig::from_text(&text)?
                }
                None => RunConfig::default(),
            };
            let mut overrides: Vec<(String, String)> = Vec::new();
            if let Some(v) = seed {
                overrides.push(("seed".into(), v.to_string()));
            }
            if let Some(v) = precision {
                overrides.push(("precision".into(), v));
            }
            if let Some(v) = steps {
                overrides.push(("train.steps".into(), v.to_string()));
            }
            if let Some(v) = fusion {
                overrides.push(("fusion.mode".into(), v));
            }
            if let Some(v) = pyramid {
                overrides.push(("pyramid".into(), v));
            }
            if let Some(v) = shortcut {
                overrides.push(("decoder.shortcut".into(), v));
            }
            if let Some(v) = mask_iou_thresh {
                overrides.push(("assign.mask_pos_iou".into(), v.to_string()));
            }
            for kv in &set {
                let (k, v) = kv
                    .split_once('=')
                    .with_context(|| format!("--set needs KEY=VALUE, got {kv}"))?;
                overrides.push((k.trim().into(), v.trim().into()));
            }
            for (k, v) in &overrides {
                run.apply(k, v).with_context(|| format!("override {k}={v}"))?;
            }
            run.validate()?;
            match run.precision {
                Precision::Fast => train::<f32>(run, &data, &out_ckpt, log.as_deref()),
                Precision::Verify => train::<f64>(run, &data, &out_ckpt, log.as_deref()),
            }
        }
        Cmd::Infer { ckpt, data, out_json, config, force } => {
            let expect = match &config {
                Some(p) => {
                    let text = fs::read_to_string(p).with_context(|| p.display().to_string())?;
                    Some(RunConfig::from_text(&text)?)
                }
                None => None,
            };
            let run = peek_config(&ckpt)?;
            match run.precision {
                Precision::Fast => infer::<f32>(&ckpt, expect.as_ref(), force, &data, &out_json),
                Precision::Verify => infer::<f64>(&ckpt, expect.as_ref(), force, &data, &out_json),
            }
        }
        Cmd::Eval { pred_json, ann_json, out, pr_csv } => {
            eval(&pred_json, &ann_json, &out, pr_csv.as_deref())
        }
        Cmd::Gradcheck { ops, tol, trials, seed, network } => {
            gradcheck(&ops, tol, trials, seed, network)
        }
    }
}

fn synth(
    seed: u64,
    count: usize,
    out: &Path,
    image_size: usize,
    min_instances: usize,
    max_instances: usize,
) -> Result<i32> {
    // Shape sizes scale with the canvas; at the 128 px default this is the
    // stock (16, 56) range.
    let lo = (image_size as f64 / 8.0).max(5.0);
    let hi = (image_size as f64 * 7.0 / 16.0).max(lo);
    let spec = SceneSpec {
        seed,
        image_size,
        min_instances,
        max_instances,
        size_range: (lo, hi),
        ..SceneSpec::default()
    };
    spec.validate()?;
    let scenes = (0..count as u64)
        .into_par_iter()
        .map(|i| sprd_core::synth_scene(&spec, i))
        .collect::<sprd_core::Result<Vec<_>>>()?;
    for (i, s) in scenes.iter().enumerate() {
        if s.instances.len() < s.planned {
            eprintln!(
                "image {i}: placed {} of {} planned instances",
                s.instances.len(),
                s.planned
            );
        }
    }
    write_dataset(out, &scenes)?;
    let total: usize = scenes.iter().map(|s| s.instances.len()).sum();
    println!(
        "wrote {} images, {} instances ({}) to {}",
        scenes.len(),
        total,
        CLASS_NAMES.join("/"),
        out.display()
    );
    Ok(0)
}

fn train<E: Element>(run: RunConfig, data: &Path, out_ckpt: &Path, log: Option<&Path>) -> Result<i32> {
    let samples = read_dataset(data)?;
    let steps = run.train.steps;
    let mut session = TrainSession::<E>::new(&run, &samples)?;
    let mut sink: Box<dyn Write> = match log {
        Some(p) => Box::new(fs::File::create(p).with_context(|| p.display().to_string())?),
        None => Box::new(std::io::stdout().lock()),
    };
    writeln!(sink, "{}", StepMetrics::csv_header())?;
    let mut write_err = None;
    session.run_steps(steps as u64, |m| {
        if write_err.is_none() {
            if let Err(e) = writeln!(sink, "{}", m.csv_row()) {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    if let Some(dir) = out_ckpt.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    save_checkpoint(out_ckpt, &session.store, &session.run)?;
    println!("trained {steps} steps on {} images; checkpoint at {}", samples.len(), out_ckpt.display());
    Ok(0)
}

fn infer<E: Element>(
    ckpt: &Path,
    expect: Option<&RunConfig>,
    force: bool,
    data: &Path,
    out_json: &Path,
) -> Result<i32> {
    let loaded = load_checkpoint::<E>(ckpt, expect, force)?;
    let samples = read_dataset(data)?;
    let per_image = samples
        .par_iter()
        .map(|s: &Sample| -> sprd_core::Result<Vec<DetectionRec>> {
            let dets = detect_image(&loaded.store, &loaded.config, &s.image)?;
            Ok(dets
                .iter()
                .map(|d| to_record(d, s.id, s.image.h, s.image.w, loaded.config.infer.mask_bin))
                .collect())
        })
        .collect::<sprd_core::Result<Vec<_>>>()?;
    let recs: Vec<DetectionRec> = per_image.into_iter().flatten().collect();
    write_detections(out_json, &recs)?;
    println!("{} detections over {} images -> {}", recs.len(), samples.len(), out_json.display());
    Ok(0)
}

fn eval(pred_json: &Path, ann_json: &Path, out: &Path, pr_csv: Option<&Path>) -> Result<i32> {
    let ann_path = if ann_json.is_dir() { ann_json.join(ANNOTATIONS_FILE) } else { ann_json.to_path_buf() };
    let ann = sprd_core::data::dataset::read_annotations(&ann_path)?;
    let recs = read_detections(pred_json)?;
    let images: Vec<EvalImage> = eval_images_from_annotations(&ann, &recs)?;
    let classes = ann
        .instances
        .iter()
        .map(|i| i.class + 1)
        .chain(recs.iter().map(|r| r.class + 1))
        .max()
        .unwrap_or(0);
    let cfg = EvalConfig::default();
    let result = summarize(&images, classes, &cfg)?;
    write_eval_result(out, &result)?;
    if let Some(p) = pr_csv {
        write_pr_csv(p, &images, classes, &cfg)?;
    }
    let fmt = |v: Option<f64>| match v {
        Some(x) => format!("{x:.4}"),
        None => "  n/a".into(),
    };
    for (name, m) in [("box", &result.box_metrics), ("mask", &result.mask_metrics)] {
        println!(
            "{name:4} AP {} AP50 {} AP75 {} | AP_S {} AP_M {} AP_L {} | AR_1 {} AR_10 {} AR_100 {}",
            fmt(m.ap),
            fmt(m.ap50),
            fmt(m.ap75),
            fmt(m.ap_small),
            fmt(m.ap_medium),
            fmt(m.ap_large),
            fmt(m.ar_1),
            fmt(m.ar_10),
            fmt(m.ar_100),
        );
    }
    println!("wrote {}", out.display());
    Ok(0)
}

fn gradcheck(ops: &str, tol: f64, trials: usize, seed: u64, network: bool) -> Result<i32> {
    let list: Vec<String> = if ops == "all" { vec![] } else { vec![ops.to_string()] };
    let checks = run_gradcheck(&list, trials, tol, seed)?;
    let mut all_pass = true;
    for c in &checks {
        println!(
            "{:<18} trials {:>4} coords {:>7} max_rel_err {:.3e} {:>4} ({:.2}s)",
            c.op,
            c.trials,
            c.coords,
            c.max_rel_err,
            if c.pass { "ok" } else { "FAIL" },
            c.seconds
        );
        all_pass &= c.pass;
    }
    if network {
        let net_tol = tol.max(1e-4);
        let n = network_gradcheck(200, net_tol, seed)?;
        println!(
            "{:<18} params {:>5} coords {:>7} max_rel_err {:.3e} {:>4} ({:.2}s)",
            "network",
            n.params,
            n.coords,
            n.max_rel_err,
            if n.pass { "ok" } else { "FAIL" },
            n.seconds
        );
        if let (false, Some((path, ci, a, fd))) = (n.pass, &n.worst) {
            eprintln!("worst: {path}[{ci}] analytic {a:.6e} vs finite-difference {fd:.6e}");
        }
        all_pass &= n.pass;
    }
    if !all_pass {
        bail!("gradient check failed");
    }
    Ok(0)
}
