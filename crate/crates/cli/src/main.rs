use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use msdyn_core::dataset::{pose_from_matrix, rgb_from_f64, CameraMatrix};
use msdyn_core::gaussians::pose_field;
use msdyn_core::io::{atomic_write, load_checkpoint, load_dataset, save_checkpoint, save_dataset, write_png, Checkpoint};
use msdyn_core::losses::LossWeights;
use msdyn_core::optim::{evaluate_heldout, fit, OptimConfig, TrainingData};
use msdyn_core::render::{rasterize, Camera, RasterConfig};
use msdyn_core::synth::{generate, verify_dataset, SceneKind, SceneSpec};
use msdyn_core::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "msdyn", version, about = "Dynamic Gaussian reconstruction with multi-scale motion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Rigid,
    Articulated,
    Deformable,
}

impl From<Kind> for SceneKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Rigid => SceneKind::Rigid,
            Kind::Articulated => SceneKind::Articulated,
            Kind::Deformable => SceneKind::Deformable,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    Synth {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long, default_value_t = 24)]
        frames: usize,
        /// Resolution as WIDTHxHEIGHT.
        #[arg(long, default_value = "64x64", value_parser = parse_res)]
        res: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Relative standard deviation of depth noise.
        #[arg(long, default_value_t = 0.0)]
        noise_depth: f64,
        /// Track jitter in pixels.
        #[arg(long, default_value_t = 0.0)]
        noise_track: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model to a dataset and write a checkpoint.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        epochs: usize,
        #[arg(long, default_value_t = 5)]
        k_primitive: usize,
        #[arg(long, default_value_t = 10)]
        k_grain: usize,
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(1..=3))]
        levels: u8,
        /// Five comma-separated weights: rgb, mask, depth, track, rigidity.
        #[arg(long, value_delimiter = ',', num_args = 1)]
        loss_weights: Option<Vec<f64>>,
        /// Supervise with the color loss only.
        #[arg(long, conflicts_with = "loss_weights")]
        rgb_only: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Target number of dynamic Gaussians at initialization.
        #[arg(long, default_value_t = 5000)]
        dynamic_gaussians: usize,
        /// Target number of static Gaussians at initialization.
        #[arg(long, default_value_t = 10000)]
        static_gaussians: usize,
        #[arg(long)]
        no_densify: bool,
    },
    /// Render one frame of a checkpoint to a PNG.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        frame: usize,
        /// `train`, `eval`, or 16 comma- or space-separated floats (row-major
        /// world-to-camera).
        #[arg(long, default_value = "train")]
        camera: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset's held-out views.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a summary of a checkpoint.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Check a dataset's internal consistency.
    Verify {
        #[arg(long)]
        data: PathBuf,
    },
}

fn parse_res(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WIDTHxHEIGHT, got `{s}`"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width in `{s}`"))?;
    let h = h.trim().parse().map_err(|_| format!("bad height in `{s}`"))?;
    Ok((w, h))
}

fn sidecar(ckpt: &Path, suffix: &str) -> PathBuf {
    let mut name = ckpt.file_stem().unwrap_or_default().to_os_string();
    name.push(suffix);
    ckpt.with_file_name(name)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    atomic_write(path, text.as_bytes())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            kind,
            frames,
            res,
            seed,
            noise_depth,
            noise_track,
            out,
        } => {
            let spec = SceneSpec {
                frames,
                width: res.0,
                height: res.1,
                seed,
                noise_depth,
                noise_track,
                ..SceneSpec::new(kind.into())
            };
            let g = generate(&spec)?;
            save_dataset(&g.dataset, &out)?;
            println!(
                "wrote {} {} frames at {}x{} to {} (canonical frame {})",
                spec.kind,
                frames,
                res.0,
                res.1,
                out.display(),
                g.dataset.canonical_frame
            );
        }
        Command::Fit {
            data,
            out,
            epochs,
            k_primitive,
            k_grain,
            levels,
            loss_weights,
            rgb_only,
            seed,
            dynamic_gaussians,
            static_gaussians,
            no_densify,
        } => {
            let ds = load_dataset(&data)?;
            let mut cfg = OptimConfig {
                epochs,
                seed,
                dynamic_target: dynamic_gaussians,
                static_target: static_gaussians,
                ..OptimConfig::default()
            };
            cfg.hierarchy.k_primitive = k_primitive;
            cfg.hierarchy.k_grain = k_grain;
            cfg.hierarchy.levels = levels as usize;
            cfg.densify.enabled = !no_densify;
            if rgb_only {
                cfg.loss_weights = LossWeights::rgb_only();
            } else if let Some(w) = loss_weights {
                cfg.loss_weights = LossWeights::from_slice(&w)?;
            }
            cfg.validate()?;
            let td = TrainingData::new(&ds)?;
            let outcome = fit(&td, &cfg, |e| {
                println!("epoch {:>4}  loss {:.6}  gaussians {}", e.epoch, e.loss.total, e.gaussians);
            })?;
            let config = serde_json::to_value(&cfg).map_err(|e| Error::Config(e.to_string()))?;
            let ck = Checkpoint::from_state(&outcome.state.field, &outcome.state.dynamics, ds.scene_cameras(), config);
            save_checkpoint(&ck, &out)?;
            atomic_write(&sidecar(&out, ".loss.csv"), outcome.loss_csv().as_bytes())?;
            let heldout = evaluate_heldout(&ck.field(), &ck.dynamics(), &ds, &cfg.raster)?;
            let summary = json!({
                "epochs": epochs,
                "gaussians": ck.len(),
                "track_rms": outcome.track_rms,
                "seconds": outcome.seconds,
                "mean_psnr": heldout.as_ref().and_then(|e| e.mean_psnr),
                "mean_ssim": heldout.as_ref().and_then(|e| e.mean_ssim),
            });
            write_json(&sidecar(&out, ".summary.json"), &summary)?;
            println!("{summary}");
        }
        Command::Render { ckpt, frame, camera, out } => {
            let ck = load_checkpoint(&ckpt)?;
            let dyn_ = ck.dynamics();
            if frame >= dyn_.frames {
                return Err(Error::Config(format!("frame {frame} out of range (checkpoint has {} frames)", dyn_.frames)));
            }
            let intr = ck.scene.intrinsics;
            let matrix: CameraMatrix = match camera.as_str() {
                "train" => ck.scene.cameras[frame],
                "eval" => *ck
                    .scene
                    .eval_cameras
                    .get(frame)
                    .or(ck.scene.eval_cameras.last())
                    .ok_or_else(|| Error::Config("checkpoint has no evaluation camera".into()))?,
                other => {
                    let v: Vec<f64> = other
                        .split([',', ' '])
                        .filter(|s| !s.is_empty())
                        .map(|s| s.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::Config(format!("bad camera matrix: {e}")))?;
                    v.try_into().map_err(|v: Vec<f64>| Error::Config(format!("camera matrix needs 16 values, got {}", v.len())))?
                }
            };
            let cam = Camera::new(intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height, pose_from_matrix(&matrix))?;
            let posed = pose_field(&ck.field(), &dyn_.evaluate(frame))?;
            let img = rasterize(&posed, &cam, &RasterConfig::default());
            write_png(&out, &rgb_from_f64(&img.color), intr.width, intr.height)?;
            println!("wrote {}", out.display());
        }
        Command::Eval { ckpt, data, out } => {
            let ck = load_checkpoint(&ckpt)?;
            let ds = load_dataset(&data)?;
            let result = evaluate_heldout(&ck.field(), &ck.dynamics(), &ds, &RasterConfig::default())?
                .ok_or_else(|| Error::Config(format!("{} has no evaluation views", data.display())))?;
            let value = serde_json::to_value(&result).map_err(|e| Error::Config(e.to_string()))?;
            write_json(&out, &value)?;
            println!(
                "mPSNR {}  mSSIM {}",
                result.mean_psnr.map_or("n/a".into(), |v| format!("{v:.3}")),
                result.mean_ssim.map_or("n/a".into(), |v| format!("{v:.4}"))
            );
        }
        Command::Inspect { ckpt } => {
            let ck = load_checkpoint(&ckpt)?;
            let field = ck.field();
            let dyn_ = ck.dynamics();
            println!("gaussians {} (dynamic {}, static {})", field.len(), field.dynamic_count(), field.len() - field.dynamic_count());
            println!("frames {}  canonical frame {}", dyn_.frames, dyn_.canonical_frame);
            for (l, level) in dyn_.levels.iter().enumerate() {
                let (mut angle, mut trans, mut n) = (0.0, 0.0, 0usize);
                for p in level.patterns.iter().flatten() {
                    angle += p.rotation.angle();
                    trans += p.translation.norm();
                    n += 1;
                }
                let n = n.max(1) as f64;
                println!(
                    "level {}: {} patterns, mean rotation {:.4} rad, mean translation {:.4} m",
                    l + 1,
                    level.len(),
                    angle / n,
                    trans / n
                );
            }
        }
        Command::Verify { data } => {
            let ds = load_dataset(&data)?;
            let report = verify_dataset(&ds)?;
            for v in &report.violations {
                println!("violation: {v}");
            }
            println!("{} track samples checked, {} violation(s)", report.checked_samples, report.violations.len());
            if !report.is_ok() {
                return Err(Error::Config(format!("{} failed verification", data.display())));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
