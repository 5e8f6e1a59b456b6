//! Command line front end: chains the library stages and writes their
//! artifacts.
//!
//! Exit codes are stable and scriptable:
//!   0 — success
//!   2 — configuration problem (bad flags, malformed or invalid config)
//!   3 — input data problem (unreadable dataset, missing ground truth)
//!   4 — runtime failure (artifact writes, internal stage errors)
//!
//! Configuration validation happens before any output path is touched, so
//! a failed run never leaves partial artifacts behind.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use vinetrack::dataset::{self, Dataset, DatasetError, FrameIterStats, SyncedFrame};
use vinetrack::eval;
use vinetrack::pipeline::{self, PipelineConfig, PipelineOutput};
use vinetrack::simulator;
use vinetrack::yield_est::WeightModelChoice;

#[derive(Parser)]
#[command(
    name = "vinetrack",
    version,
    about = "Fruit counting and weight estimation from depth-camera row scans"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a seeded scene description.
    Simulate(SimulateArgs),
    /// Fuse detections with depth and build 3D tracks from a dataset.
    Track(TrackArgs),
    /// Count and weigh reliable tracks from a dataset.
    Yield(YieldArgs),
    /// Score a dataset run against its ground truth.
    Eval(EvalArgs),
    /// Re-project final tracks into each frame for inspection.
    Overlay(OverlayArgs),
    /// Simulate, track, estimate and evaluate in one pass.
    RunAll(RunAllArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum WeightModelArg {
    /// Cubic height-to-weight model.
    Paper,
    /// Quadratic fit through the calibration samples.
    Fitted,
}

impl From<WeightModelArg> for WeightModelChoice {
    fn from(arg: WeightModelArg) -> Self {
        match arg {
            WeightModelArg::Paper => WeightModelChoice::Paper,
            WeightModelArg::Fitted => WeightModelChoice::Fitted,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Pipeline config file (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory to write the dataset into.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrackArgs {
    /// Dataset directory to read.
    #[arg(long)]
    dataset: PathBuf,
    /// Pipeline config file (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for tracks.jsonl and frame summaries.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct YieldArgs {
    /// Dataset directory to read.
    #[arg(long)]
    dataset: PathBuf,
    /// Pipeline config file (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured weight model.
    #[arg(long, value_enum)]
    weight_model: Option<WeightModelArg>,
    /// Optional directory for yield.json; prints to stdout regardless.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory to read (must carry ground truth).
    #[arg(long)]
    dataset: PathBuf,
    /// Pipeline config file (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured weight model.
    #[arg(long, value_enum)]
    weight_model: Option<WeightModelArg>,
    /// Spot-check sampling interval in seconds.
    #[arg(long, default_value_t = 1.0)]
    interval: f64,
    /// Optional directory for metrics.json and frame_samples.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OverlayArgs {
    /// Dataset directory to read.
    #[arg(long)]
    dataset: PathBuf,
    /// Pipeline config file (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for overlay.jsonl (and rasters with --raster).
    #[arg(long)]
    out: PathBuf,
    /// Also write one PPM image per frame.
    #[arg(long)]
    raster: bool,
}

#[derive(Args)]
struct RunAllArgs {
    /// Pipeline config file (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured weight model.
    #[arg(long, value_enum)]
    weight_model: Option<WeightModelArg>,
    /// Root directory for all artifacts of this run.
    #[arg(long)]
    out: PathBuf,
    /// Also write per-frame overlay rasters.
    #[arg(long)]
    raster: bool,
    /// Spot-check sampling interval in seconds.
    #[arg(long, default_value_t = 1.0)]
    interval: f64,
}

enum CliError {
    Config(String),
    Data(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Runtime(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.code())
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Track(args) => cmd_track(args),
        Command::Yield(args) => cmd_yield(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Overlay(args) => cmd_overlay(args),
        Command::RunAll(args) => cmd_run_all(args),
    }
}

/// Read, parse and validate the config before anything else runs.
fn load_config(path: Option<&Path>) -> Result<PipelineConfig, CliError> {
    let config = match path {
        None => PipelineConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("config {}: {e}", p.display())))?
        }
    };
    config.validate().map_err(CliError::Config)?;
    Ok(config)
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    dataset::load_dataset(path).map_err(|e| CliError::Data(e.to_string()))
}

fn write_err(e: DatasetError) -> CliError {
    CliError::Runtime(e.to_string())
}

fn run_pipeline(
    ds: &Dataset,
    config: &PipelineConfig,
) -> Result<(PipelineOutput, FrameIterStats), CliError> {
    pipeline::run_on_dataset(ds, &config.tracker, &config.yield_config)
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn simulate_from(config: &PipelineConfig) -> Result<simulator::Simulation, CliError> {
    simulator::simulate(
        &config.scene,
        &config.trajectory,
        &config.noise,
        &config.intrinsics,
        config.seed,
    )
    .map_err(|e| CliError::Config(e.to_string()))
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let sim = simulate_from(&config)?;
    simulator::export(&sim, &args.out).map_err(write_err)?;
    let detections: usize = sim.frames.iter().map(|f| f.detections.len()).sum();
    println!(
        "wrote {} frames, {} fruits, {} detections to {}",
        sim.frames.len(),
        sim.fruits.len(),
        detections,
        args.out.display()
    );
    Ok(())
}

fn cmd_track(args: TrackArgs) -> Result<(), CliError> {
    let config = load_config(args.config.as_deref())?;
    let ds = load_dataset(&args.dataset)?;
    let (output, stats) = run_pipeline(&ds, &config)?;

    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", args.out.display())))?;
    dataset::write_jsonl(&args.out.join("tracks.jsonl"), &output.reliable_tracks)
        .map_err(write_err)?;
    dataset::write_jsonl(&args.out.join("all_tracks.jsonl"), &output.all_tracks)
        .map_err(write_err)?;
    dataset::write_jsonl(&args.out.join("frame_summaries.jsonl"), &output.frame_summaries)
        .map_err(write_err)?;

    println!("{stats}");
    println!("rejected boxes: {}", output.rejections);
    println!(
        "tracks: {} total, {} reliable -> {}",
        output.all_tracks.len(),
        output.reliable_tracks.len(),
        args.out.display()
    );
    Ok(())
}

fn apply_weight_model(config: &mut PipelineConfig, arg: Option<WeightModelArg>) {
    if let Some(model) = arg {
        config.yield_config.weight_model = model.into();
    }
}

fn cmd_yield(args: YieldArgs) -> Result<(), CliError> {
    let mut config = load_config(args.config.as_deref())?;
    apply_weight_model(&mut config, args.weight_model);
    let ds = load_dataset(&args.dataset)?;
    let (output, _) = run_pipeline(&ds, &config)?;

    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
        dataset::write_json(&out.join("yield.json"), &output.report).map_err(write_err)?;
    }

    let report = &output.report;
    println!("counted fruits: {}", report.count);
    println!("total weight: {:.1} g", report.total_weight_g);
    match report.average_weight_g {
        Some(avg) => println!("average weight: {:.2} g", avg),
        None => println!("average weight: n/a"),
    }
    println!(
        "filtered out: {} region, {} volume, {} class",
        report.rejections.region, report.rejections.volume, report.rejections.class
    );
    Ok(())
}

/// Load frames once for stages that need the raw images (overlay).
fn load_all_frames(ds: &Dataset) -> (Vec<SyncedFrame>, FrameIterStats) {
    ds.load_frames()
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let mut config = load_config(args.config.as_deref())?;
    apply_weight_model(&mut config, args.weight_model);
    let ds = load_dataset(&args.dataset)?;
    let fruits = ds
        .ground_truth
        .clone()
        .ok_or_else(|| CliError::Data("eval requires a dataset with ground truth".into()))?;
    let (output, _) = run_pipeline(&ds, &config)?;

    let matching =
        eval::match_to_ground_truth(&output.reliable_tracks, &fruits, eval::DEFAULT_MATCH_RADIUS);
    let metrics = eval::compute_metrics(&output.report, &fruits, &matching);
    let samples = eval::frame_sample_report(
        &ds.poses,
        &fruits,
        &output.reliable_tracks,
        &ds.intrinsics,
        ds.manifest.frame_rate,
        args.interval,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;

    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
        dataset::write_json(&out.join("metrics.json"), &metrics).map_err(write_err)?;
        dataset::write_json(&out.join("frame_samples.json"), &samples).map_err(write_err)?;
    }

    println!("{metrics}");
    println!("{samples}");
    Ok(())
}

fn cmd_overlay(args: OverlayArgs) -> Result<(), CliError> {
    let config = load_config(args.config.as_deref())?;
    let ds = load_dataset(&args.dataset)?;
    let (output, _) = run_pipeline(&ds, &config)?;
    let (frames, _) = load_all_frames(&ds);
    let stats = eval::export_overlay(
        &frames,
        &output.reliable_tracks,
        &ds.intrinsics,
        &args.out,
        args.raster,
    )
    .map_err(write_err)?;
    println!(
        "wrote {} overlay records over {} frames ({} rasters) to {}",
        stats.records,
        stats.frames,
        stats.rasters,
        args.out.display()
    );
    Ok(())
}

fn cmd_run_all(args: RunAllArgs) -> Result<(), CliError> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    apply_weight_model(&mut config, args.weight_model);
    if !(args.interval > 0.0) {
        return Err(CliError::Config(format!(
            "interval must be positive, got {}",
            args.interval
        )));
    }

    // Stage 1: simulate and persist the dataset.
    let sim = simulate_from(&config)?;
    let dataset_dir = args.out.join("dataset");
    simulator::export(&sim, &dataset_dir).map_err(write_err)?;

    // Stage 2: fuse + track + yield, in memory on the same frames.
    let output = pipeline::run_on_frames(
        &sim.frames,
        &sim.intrinsics,
        &config.tracker,
        &config.yield_config,
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    dataset::write_jsonl(&args.out.join("tracks.jsonl"), &output.reliable_tracks)
        .map_err(write_err)?;
    dataset::write_json(&args.out.join("yield.json"), &output.report).map_err(write_err)?;

    // Stage 3: score against the ground truth we just generated.
    let matching = eval::match_to_ground_truth(
        &output.reliable_tracks,
        &sim.fruits,
        eval::DEFAULT_MATCH_RADIUS,
    );
    let metrics = eval::compute_metrics(&output.report, &sim.fruits, &matching);
    let poses: Vec<dataset::PoseRecord> = sim
        .frames
        .iter()
        .map(|f| dataset::PoseRecord { frame_id: f.frame_id, timestamp: f.timestamp, pose: f.pose.clone() })
        .collect();
    let samples = eval::frame_sample_report(
        &poses,
        &sim.fruits,
        &output.reliable_tracks,
        &sim.intrinsics,
        config.trajectory.frame_rate,
        args.interval,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    dataset::write_json(&args.out.join("metrics.json"), &metrics).map_err(write_err)?;
    dataset::write_json(&args.out.join("frame_samples.json"), &samples).map_err(write_err)?;

    // Stage 4: overlays for inspection.
    let overlay_stats = eval::export_overlay(
        &sim.frames,
        &output.reliable_tracks,
        &sim.intrinsics,
        &args.out.join("overlay"),
        args.raster,
    )
    .map_err(write_err)?;

    println!("dataset: {} frames, {} fruits", sim.frames.len(), sim.fruits.len());
    println!(
        "tracks: {} total, {} reliable; overlay records: {}",
        output.all_tracks.len(),
        output.reliable_tracks.len(),
        overlay_stats.records
    );
    println!("{metrics}");
    Ok(())
}
