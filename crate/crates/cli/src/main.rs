//! `vlora`: synthesize datasets, train, evaluate, check gradients and warp images.
//!
//! Exit codes: 0 success, 1 gradient check failed, 2 configuration error,
//! 3 I/O error, 4 corrupt checkpoint.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};
use vlora_core::checkpoint::Checkpoint;
use vlora_core::config::{hex, sha256};
use vlora_core::geometry::{reproject, synthesize_view};
use vlora_core::gradcheck::{check_component, COMPONENTS};
use vlora_core::imaging::{psnr, read_pfm, write_pfm};
use vlora_core::synth::{export_dataset, load_dataset, render_scene};
use vlora_core::trainer::{evaluate, fit, Split};
use vlora_core::{Alignment, CameraIntrinsics, DepthMap, Error, ExperimentConfig, Image, Model, Pose};

const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "vlora", version, about = "Vector-LoRA self-supervised depth on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the configured scene and export it as a dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides scene.texture_seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on an exported dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from `<out>/last.ckpt`.
        #[arg(long)]
        resume: bool,
        /// Overrides loss.ms_ssim.scales (weights are truncated and renormalized).
        #[arg(long)]
        scales: Option<usize>,
        /// Stop after this many optimizer steps in total.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Depth metrics and trajectory error of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Also write per-frame predicted depth as PFM.
        #[arg(long)]
        export_depth: bool,
        #[arg(long, default_value = "similarity")]
        align: Alignment,
        /// Evaluate every frame instead of the held-out tail.
        #[arg(long)]
        all_frames: bool,
    },
    /// Compare analytic and finite-difference gradients of one component.
    Gradcheck {
        component: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Synthesize a view from an image, a depth map and a relative pose.
    Warp {
        /// Source image (PNG).
        #[arg(long)]
        image: PathBuf,
        /// Target-view depth (PFM).
        #[arg(long)]
        depth: PathBuf,
        /// Target-to-source transform: twelve numbers, row-major [R | t].
        #[arg(long, allow_hyphen_values = true)]
        pose: String,
        #[arg(long)]
        intrinsics: PathBuf,
        /// Output PNG; the validity mask goes next to it as `<stem>_mask.png`.
        #[arg(long)]
        out: PathBuf,
        /// Optional target image to report PSNR against.
        #[arg(long)]
        target: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Shape(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::Checkpoint(_) => 4,
        Error::Numeric(_) => 1,
    }
}

fn load_config(path: Option<&Path>) -> vlora_core::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> vlora_core::Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn check_threads() -> vlora_core::Result<()> {
    if let Ok(v) = std::env::var("VLORA_THREADS") {
        let n: usize =
            v.parse().map_err(|_| Error::Config(format!("VLORA_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(Error::Config("VLORA_THREADS must be at least 1".into()));
        }
    }
    Ok(())
}

fn run(cli: Cli) -> vlora_core::Result<u8> {
    check_threads()?;
    match cli.command {
        Command::Synth { config, out, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.scene.texture_seed = s;
            }
            let scene = render_scene(&cfg.scene)?;
            let manifest = export_dataset(&scene, &out)?;
            let path = out.join("manifest.json");
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            info!("wrote {} frames to {}", manifest.frames.len(), out.display());
            println!("{}", hex(&sha256(&bytes)));
        }
        Command::Train { config, data, out, seed, resume, scales, max_steps } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(m) = scales {
                let ms = &mut cfg.loss.ms_ssim;
                if m == 0 || m > ms.weights.len() {
                    return Err(Error::Config(format!("--scales must be in 1..={}", ms.weights.len())));
                }
                let sum: f64 = ms.weights[..m].iter().sum();
                ms.weights = ms.weights[..m].iter().map(|w| w / sum).collect();
                ms.scales = m;
            }
            cfg.validate()?;
            let scene = load_dataset(&data)?;
            let trainer = fit(&cfg, scene, &out, resume, max_steps)?;
            println!("step,best_abs_rel");
            println!("{},{}", trainer.step, trainer.best_abs_rel);
        }
        Command::Eval { checkpoint, data, out, export_depth, align, all_frames } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let mut model = Model::new(&ckpt.config.model, ckpt.config.lora.as_ref(), ckpt.config.train.seed)
                .map_err(|e| Error::Checkpoint(format!("stored config does not build a model: {e}")))?;
            ckpt.restore_into(&mut model.store)?;
            let scene = load_dataset(&data)?;
            let frames: Vec<usize> = if all_frames {
                (0..scene.len()).collect()
            } else {
                let split = Split::new(scene.len(), &ckpt.config.train.frame_offsets, ckpt.config.train.val_fraction)?;
                if split.val_frames.len() >= 2 {
                    split.val_frames
                } else {
                    (0..scene.len()).collect()
                }
            };
            let (report, preds) = evaluate(&model, &scene, &frames, &ckpt.config.eval, align)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write(&out.join("depth_metrics.csv"), report.depth_csv())?;
            write(&out.join("ate.csv"), report.ate_csv())?;
            if export_depth {
                let dir = out.join("pred_depth");
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for (f, d) in frames.iter().zip(&preds) {
                    write_pfm(&dir.join(format!("{f:06}.pfm")), d.width, d.height, &d.values)?;
                }
            }
            println!("{},ate", vlora_core::DepthMetrics::CSV_HEADER);
            println!("{},{:.6}", report.mean.csv_row(), report.ate);
        }
        Command::Gradcheck { component, seed } => {
            let report = check_component(&component, seed)?;
            let max = report.max_rel_err();
            let pass = max < GRADCHECK_TOLERANCE;
            if let Some(w) = report.worst() {
                info!(
                    "worst probe: input {} index {} analytic {:e} numeric {:e}",
                    w.input, w.index, w.analytic, w.numeric
                );
            }
            println!("component,probes,max_rel_err,pass");
            println!("{component},{},{max:e},{pass}", report.probes.len());
            return Ok(if pass { 0 } else { 1 });
        }
        Command::Warp { image, depth, pose, intrinsics, out, target } => {
            let src = Image::load_png(&image)?;
            let (w, h, values) = read_pfm(&depth)?;
            let depth = DepthMap::new(w, h, values)?;
            let text = fs::read_to_string(&intrinsics).map_err(|e| Error::io(&intrinsics, e))?;
            let k: CameraIntrinsics =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", intrinsics.display())))?;
            k.validate()?;
            let pose = Pose::from_line(&pose)?;
            let (warped, valid) = synthesize_view(&src, &depth, &k, &pose)?;
            warped.save_png(&out)?;
            let mask = Image::new(w, h, 1, valid.iter().map(|&v| v as u8 as f64).collect())?;
            let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("warped");
            mask.save_png(&out.with_file_name(format!("{stem}_mask.png")))?;
            if let Some(t) = target {
                let tgt = Image::load_png(&t)?;
                if (tgt.width, tgt.height) != (w, h) {
                    return Err(Error::Shape(format!("target is {}x{}, depth is {w}x{h}", tgt.width, tgt.height)));
                }
                // Score only pixels that land inside the source frame.
                let grid = reproject(&depth, &k, &pose)?;
                let inside: Vec<bool> = grid
                    .coords
                    .iter()
                    .zip(&valid)
                    .map(|(c, &v)| {
                        v && (0.0..=(w - 1) as f64).contains(&c[0]) && (0.0..=(h - 1) as f64).contains(&c[1])
                    })
                    .collect();
                if inside.iter().filter(|&&b| b).count() * 2 < inside.len() {
                    warn!("fewer than half of the pixels land inside the source image");
                }
                println!("psnr_db");
                println!("{:.4}", psnr(&warped.quantized(), &tgt, Some(&inside)));
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Command::Gradcheck { component, .. } = &cli.command {
        if !COMPONENTS.contains(&component.as_str()) {
            eprintln!("error: unknown component {component:?}; valid: {}", COMPONENTS.join(", "));
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
