//! Command-line entry point: ingestion, fitting, rendering, the full
//! pipeline, and evaluation.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 numerical or runtime
//! failure.

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use splatnvs::camera::CameraIntrinsics;
use splatnvs::colmap;
use splatnvs::dataset::{load_dataset, PoseJson};
use splatnvs::enhance::EnhancerSpec;
use splatnvs::error::Error;
use splatnvs::fit::{fit, init_from_pointcloud};
use splatnvs::image::{read_image, read_mask, write_image, ImageBuffer, PixelMask};
use splatnvs::metrics::lpips_ingest;
use splatnvs::pipeline::{
    evaluate_run_named, render_frame_name, run_full, write_run_artifacts, PipelineConfig,
};
use splatnvs::render::render;
use splatnvs::splat::{load_scene, save_scene};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "splatnvs", version, about = "Gaussian-splat novel-view-synthesis pipeline")]
struct Cli {
    /// Worker thread cap; results never depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Summarize a COLMAP sparse reconstruction directory.
    Inspect {
        /// Directory holding cameras/images/points3D files.
        colmap_dir: PathBuf,
        /// Print the summary as JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Fit a scene from a dataset manifest and write a checkpoint.
    Fit(FitArgs),
    /// Render a checkpoint from a list of poses.
    Render(RenderArgs),
    /// Full pipeline: fit, render targets, enhance, write artifacts.
    Run(RunArgs),
    /// Score an output directory against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Pipeline config JSON (a run.json is accepted too).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint path to write (a .json sidecar is written next to it).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<u32>,
    /// Integer image downscale factor.
    #[arg(long)]
    downscale: Option<u32>,
    /// Cap on points taken from the reconstruction (uniform random).
    #[arg(long)]
    max_points: Option<usize>,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON view list: {"views": [{"pose": {...}, "intrinsics": {...}}]}.
    #[arg(long)]
    poses: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Refinement rounds K (0 = basic pipeline).
    #[arg(long)]
    k_refine: Option<u32>,
    #[arg(long, value_enum)]
    enhancer: Option<EnhancerKind>,
    /// Command line for the external enhancer.
    #[arg(long)]
    enhancer_cmd: Option<String>,
    #[arg(long)]
    downscale: Option<u32>,
    #[arg(long)]
    max_points: Option<usize>,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of generated frames.
    #[arg(long)]
    outputs: PathBuf,
    /// Directory of ground-truth frames with matching filenames.
    #[arg(long)]
    gt: PathBuf,
    /// Optional directory of masks with matching filenames.
    #[arg(long)]
    masks: Option<PathBuf>,
    /// JSON map from output filename to LPIPS value.
    #[arg(long)]
    lpips_file: Option<PathBuf>,
    /// Report path; defaults to <outputs>/metrics.json.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum EnhancerKind {
    Identity,
    ColorMatch,
    External,
}

/// Everything needed to reproduce a run, written as run.json.
#[derive(Serialize, Deserialize)]
struct RunManifest {
    tool_version: String,
    manifest: PathBuf,
    seed: u64,
    config: PipelineConfig,
    started_unix: u64,
    finished_unix: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version exit cleanly; everything else is a usage error.
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    if let Some(threads) = cli.threads {
        if let Err(e) = splatnvs::configure_threads(threads) {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_runtime() { 2 } else { 1 })
        }
    }
}

fn dispatch(command: Command) -> Result<(), Error> {
    match command {
        Command::Inspect { colmap_dir, json } => cmd_inspect(&colmap_dir, json),
        Command::Fit(args) => cmd_fit(args),
        Command::Render(args) => cmd_render(args),
        Command::Run(args) => cmd_run(args),
        Command::Eval(args) => cmd_eval(args),
    }
}

fn cmd_inspect(dir: &Path, json: bool) -> Result<(), Error> {
    let summary = colmap::summarize(dir)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&summary).expect("serializable"));
    } else {
        println!("cameras:           {}", summary.num_cameras);
        println!("images:            {}", summary.num_images);
        println!("points:            {}", summary.num_points);
        match (summary.bbox_min, summary.bbox_max) {
            (Some(lo), Some(hi)) => {
                println!(
                    "bounding box:      [{:.3}, {:.3}, {:.3}] .. [{:.3}, {:.3}, {:.3}]",
                    lo[0], lo[1], lo[2], hi[0], hi[1], hi[2]
                );
            }
            _ => println!("bounding box:      (no points)"),
        }
        println!("mean track length: {:.3}", summary.mean_track_length);
    }
    Ok(())
}

/// Loads a pipeline config; a run.json produced by `run` works as well.
fn load_config(path: Option<&Path>) -> Result<PipelineConfig, Error> {
    let Some(path) = path else {
        return Ok(PipelineConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Load(format!("cannot read config {}: {e}", path.display())))?;
    if let Ok(manifest) = serde_json::from_str::<RunManifest>(&text) {
        return Ok(manifest.config);
    }
    serde_json::from_str(&text).map_err(|e| Error::Load(format!("invalid config JSON: {e}")))
}

fn refuse_existing_file(path: &Path, overwrite: bool) -> Result<(), Error> {
    if path.exists() && !overwrite {
        return Err(Error::InvalidInput(format!(
            "{} already exists; pass --overwrite to replace it",
            path.display()
        )));
    }
    Ok(())
}

fn refuse_existing_dir(path: &Path, overwrite: bool) -> Result<(), Error> {
    let occupied = path.exists()
        && path
            .read_dir()
            .map(|mut d| d.next().is_some())
            .unwrap_or(false);
    if occupied && !overwrite {
        return Err(Error::InvalidInput(format!(
            "{} already exists and is not empty; pass --overwrite to replace it",
            path.display()
        )));
    }
    Ok(())
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn prepared_dataset(
    manifest: &Path,
    downscale: Option<u32>,
    max_points: Option<usize>,
    seed: u64,
) -> Result<splatnvs::dataset::SceneDataset, Error> {
    let mut ds = load_dataset(manifest)?;
    if let Some(factor) = downscale {
        ds = ds.downscaled(factor)?;
    }
    if let Some(cap) = max_points {
        ds.point_cloud = ds.point_cloud.subsample(cap, seed);
    }
    Ok(ds)
}

#[derive(Serialize, Deserialize)]
struct CheckpointSidecar {
    iterations: u32,
    loss: Option<f64>,
    config_hash: String,
    seed: u64,
}

fn cmd_fit(args: FitArgs) -> Result<(), Error> {
    refuse_existing_file(&args.out, args.overwrite)?;
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.fit.seed = seed;
    }
    if let Some(iters) = args.iterations {
        config.fit.iterations = iters;
    }
    let dataset = prepared_dataset(
        &args.manifest,
        args.downscale,
        args.max_points,
        config.fit.seed,
    )?;
    let init = init_from_pointcloud(&dataset.point_cloud, &config.fit)?;
    let out = fit(&dataset, &init, &config.fit)?;
    save_scene(&args.out, &out.scene)?;
    let sidecar = CheckpointSidecar {
        iterations: config.fit.iterations,
        loss: out.loss_history.last().copied(),
        config_hash: config.fit.hash(),
        seed: config.fit.seed,
    };
    let sidecar_path = args.out.with_extension("json");
    std::fs::write(
        &sidecar_path,
        serde_json::to_string_pretty(&sidecar).expect("serializable"),
    )?;
    eprintln!(
        "fitted {} primitives over {} iterations -> {}",
        out.scene.len(),
        config.fit.iterations,
        args.out.display()
    );
    Ok(())
}

#[derive(Deserialize)]
struct ViewList {
    views: Vec<ViewEntry>,
}

#[derive(Deserialize)]
struct ViewEntry {
    pose: PoseJson,
    intrinsics: IntrinsicsJson,
}

#[derive(Deserialize)]
struct IntrinsicsJson {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

fn cmd_render(args: RenderArgs) -> Result<(), Error> {
    refuse_existing_dir(&args.out, args.overwrite)?;
    let scene = load_scene(&args.checkpoint)?;
    let text = std::fs::read_to_string(&args.poses)
        .map_err(|e| Error::Load(format!("cannot read poses {}: {e}", args.poses.display())))?;
    let views: ViewList = serde_json::from_str(&text)
        .map_err(|e| Error::Load(format!("invalid pose list JSON: {e}")))?;
    std::fs::create_dir_all(&args.out)?;
    for (i, view) in views.views.iter().enumerate() {
        let intr = CameraIntrinsics::new(
            view.intrinsics.fx,
            view.intrinsics.fy,
            view.intrinsics.cx,
            view.intrinsics.cy,
            view.intrinsics.width,
            view.intrinsics.height,
        )?;
        let img = render(&scene, &view.pose.to_pose()?, &intr)?;
        write_image(&args.out.join(render_frame_name(i)), &img)?;
    }
    eprintln!("rendered {} views -> {}", views.views.len(), args.out.display());
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<(), Error> {
    refuse_existing_dir(&args.out, args.overwrite)?;
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.fit.seed = seed;
    }
    if let Some(k) = args.k_refine {
        config.refine_steps_k = k;
    }
    match args.enhancer {
        Some(EnhancerKind::Identity) => config.enhancer = EnhancerSpec::Identity,
        Some(EnhancerKind::ColorMatch) => config.enhancer = EnhancerSpec::ColorMatch,
        Some(EnhancerKind::External) => {
            let command = args.enhancer_cmd.clone().ok_or_else(|| {
                Error::InvalidInput("--enhancer external requires --enhancer-cmd".into())
            })?;
            config.enhancer = EnhancerSpec::External {
                command,
                timeout_s: None,
            };
        }
        None => {
            if let Some(command) = args.enhancer_cmd.clone() {
                config.enhancer = EnhancerSpec::External {
                    command,
                    timeout_s: None,
                };
            }
        }
    }
    let dataset = prepared_dataset(
        &args.manifest,
        args.downscale,
        args.max_points,
        config.fit.seed,
    )?;
    let started_unix = unix_now();
    let run = run_full(&dataset, &config)?;
    write_run_artifacts(&args.out, &run)?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        manifest: args.manifest.clone(),
        seed: config.fit.seed,
        config,
        started_unix,
        finished_unix: unix_now(),
    };
    std::fs::write(
        args.out.join("run.json"),
        serde_json::to_string_pretty(&manifest).expect("serializable"),
    )?;
    eprintln!(
        "pipeline produced {} target frames -> {}",
        run.enhanced.len(),
        args.out.display()
    );
    Ok(())
}

fn png_names_sorted(dir: &Path) -> Result<Vec<String>, Error> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir)
        .map_err(|e| Error::Load(format!("cannot read {}: {e}", dir.display())))?
    {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".png") || name.ends_with(".ppm") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let report_path = args
        .out
        .clone()
        .unwrap_or_else(|| args.outputs.join("metrics.json"));
    refuse_existing_file(&report_path, args.overwrite)?;

    let gt_names = png_names_sorted(&args.gt)?;
    if gt_names.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no frames found in {}",
            args.gt.display()
        )));
    }
    let mut outputs: Vec<ImageBuffer> = Vec::new();
    let mut gts: Vec<ImageBuffer> = Vec::new();
    let mut masks: Vec<PixelMask> = Vec::new();
    for name in &gt_names {
        let out_path = args.outputs.join(name);
        if !out_path.is_file() {
            return Err(Error::InvalidInput(format!(
                "output frame {} missing for ground-truth {}",
                out_path.display(),
                name
            )));
        }
        outputs.push(read_image(&out_path)?);
        gts.push(read_image(&args.gt.join(name))?);
        if let Some(mask_dir) = &args.masks {
            masks.push(read_mask(&mask_dir.join(name))?);
        }
    }
    let lpips = match &args.lpips_file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Load(format!("cannot read {}: {e}", path.display())))?;
            let by_name: BTreeMap<String, f64> = serde_json::from_str(&text)
                .map_err(|e| Error::Load(format!("invalid LPIPS JSON: {e}")))?;
            let by_name = lpips_ingest(&by_name)?;
            let mut by_index = BTreeMap::new();
            for (i, name) in gt_names.iter().enumerate() {
                if let Some(v) = by_name.get(name) {
                    by_index.insert(i, *v);
                }
            }
            Some(by_index)
        }
        None => None,
    };
    let report = evaluate_run_named(
        &outputs,
        &gts,
        if args.masks.is_some() { Some(&masks) } else { None },
        lpips.as_ref(),
        Some(&gt_names),
    )?;
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).expect("serializable"),
    )?;
    println!(
        "frames: {}  mean PSNR: {:.3} dB  mean SSIM: {:.4}{}",
        report.frames.len(),
        report.aggregate.psnr,
        report.aggregate.ssim,
        match report.aggregate.score {
            Some(s) => format!("  score: {s:.4}"),
            None => String::new(),
        }
    );
    eprintln!("report -> {}", report_path.display());
    Ok(())
}
