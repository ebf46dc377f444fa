use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use stereofuse::calib::{self, Rectifier};
use stereofuse::disparity::{self, DisparityParams};
use stereofuse::pipeline::{self, PipelineConfig};
use stereofuse::raster;
use stereofuse::synth::{self, SceneDocument};

#[derive(Parser)]
#[command(name = "stereofuse", version, about = "Stereo disparity fused with 2D detections")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Process a manifest of stereo frames into reports and LDM frames.
    Run(RunArgs),
    /// Render synthetic stereo pairs with ground truth from a scene file.
    Synth {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute a single disparity map and write it as a 16-bit PGM.
    Disparity(DisparityArgs),
}

#[derive(Args, Clone, Default)]
struct MatchArgs {
    /// Block size as WxH, e.g. 5x5.
    #[arg(long)]
    block: Option<String>,
    #[arg(long)]
    block_step: Option<usize>,
    #[arg(long)]
    max_disparity: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// TOML file with defaults for any of the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[command(flatten)]
    matching: MatchArgs,
    #[arg(long)]
    min_valid: Option<usize>,
    #[arg(long)]
    side_range: Option<f64>,
    #[arg(long)]
    front_range: Option<f64>,
    /// Comma-separated labels to keep.
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<String>>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Include per-stage timings in each frame report.
    #[arg(long)]
    record_timings: bool,
}

#[derive(Args)]
struct DisparityArgs {
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    left: PathBuf,
    #[arg(long)]
    right: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Optional 8-bit PNG visualization.
    #[arg(long)]
    preview: Option<PathBuf>,
    #[command(flatten)]
    matching: MatchArgs,
}

/// Config file contents; every key is optional.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    threshold: Option<f64>,
    block: Option<String>,
    block_step: Option<usize>,
    max_disparity: Option<usize>,
    min_valid: Option<usize>,
    side_range: Option<f64>,
    front_range: Option<f64>,
    labels: Option<Vec<String>>,
    out: Option<PathBuf>,
    jobs: Option<usize>,
}

fn parse_block(s: &str) -> Result<(usize, usize)> {
    let (w, h) = match s.split_once(['x', 'X']) {
        Some((w, h)) => (w, h),
        None => (s, s),
    };
    let w = w.trim().parse().with_context(|| format!("bad block size {s:?}"))?;
    let h = h.trim().parse().with_context(|| format!("bad block size {s:?}"))?;
    Ok((w, h))
}

fn disparity_params(args: &MatchArgs, file: &FileConfig) -> Result<DisparityParams> {
    let mut p = DisparityParams::default();
    if let Some(block) = args.block.as_ref().or(file.block.as_ref()) {
        (p.block_w, p.block_h) = parse_block(block)?;
    }
    if let Some(step) = args.block_step.or(file.block_step) {
        p.block_step = step;
    }
    if let Some(d) = args.max_disparity.or(file.max_disparity) {
        p.max_disparity = d;
    }
    Ok(p)
}

fn load_rig(path: &Path) -> Result<calib::StereoRig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    calib::parse_calibration(&text).with_context(|| format!("parsing {}", path.display()))
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let file: FileConfig = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => FileConfig::default(),
    };
    let defaults = PipelineConfig::default();
    let mut config = PipelineConfig {
        threshold: args.threshold.or(file.threshold).unwrap_or(defaults.threshold),
        disparity: disparity_params(&args.matching, &file)?,
        min_valid: args.min_valid.or(file.min_valid).unwrap_or(defaults.min_valid),
        labels: args.labels.clone().or(file.labels.clone()),
        jobs: args.jobs.or(file.jobs).unwrap_or(defaults.jobs),
        record_timings: args.record_timings,
        ..defaults
    };
    config.ldm.side_range = args.side_range.or(file.side_range).unwrap_or(config.ldm.side_range);
    config.ldm.front_range = args.front_range.or(file.front_range).unwrap_or(config.ldm.front_range);
    let out = args.out.clone().or(file.out.clone()).unwrap_or_else(|| PathBuf::from("out"));

    let rig = load_rig(&args.calib)?;
    let summary = pipeline::run_sequence(&args.manifest, &rig, &config, &out)?;
    log::info!(
        "{} frames, {} failed, mean {:.1} ms/frame; output in {}",
        summary.frame_count,
        summary.error_count,
        summary.timings_mean_ms.total(),
        out.display()
    );
    Ok(if summary.success() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn run_disparity(args: DisparityArgs) -> Result<ExitCode> {
    let rig = load_rig(&args.calib)?;
    let params = disparity_params(&args.matching, &FileConfig::default())?;
    let left = raster::load_rgb(&args.left).with_context(|| format!("reading {}", args.left.display()))?;
    let right = raster::load_rgb(&args.right).with_context(|| format!("reading {}", args.right.display()))?;
    if left.dims() != right.dims() {
        bail!("left image is {:?}, right image is {:?}", left.dims(), right.dims());
    }
    let rectifier = Rectifier::new(&rig, left.dims())?;
    let (l, r) = rectifier.apply(&left.to_gray(), &right.to_gray())?;
    let map = disparity::compute_disparity_map(&l, &r, &params)?;
    let file = fs::File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    map.write_pgm(std::io::BufWriter::new(file))?;
    if let Some(preview) = &args.preview {
        raster::save_png_gray(preview, &map.to_preview(params.max_disparity))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn run_synth(scene: &Path, out: &Path) -> Result<ExitCode> {
    let text = fs::read_to_string(scene).with_context(|| format!("reading {}", scene.display()))?;
    let doc = SceneDocument::parse(&text).with_context(|| format!("parsing {}", scene.display()))?;
    let manifest = synth::write_scene(&doc, out)?;
    log::info!("wrote {} frames; manifest {}", doc.frames.len(), manifest.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Synth { scene, out } => run_synth(&scene, &out),
        Command::Disparity(args) => run_disparity(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
