use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maskforge_core::attention_io::{
    load_attention, save_attention, save_selection, selection_to_csv, selection_to_json,
    SelectionFormat,
};
use maskforge_core::curriculum::{CurriculumConfig, Seeds};
use maskforge_core::geometry::{
    apply_rotation, load_cloud, patchify, sample_rotation, CloudFormat, PointCloud, RotationMode,
};
use maskforge_core::grid_mask::Granularity;
use maskforge_core::harness::{
    curriculum_trace, demo_cloud, mask_cloud, rotation_study, AttentionSource, PipelineOptions,
    RotationScenario,
};
use maskforge_core::semantic_mask::{synth_attention, AttentionMap};
use maskforge_core::{Error, Result};

/// Dual-stream (spatial grid + semantic) patch masking for point clouds.
///
/// Point clouds are read as ASCII `.xyz` (one `x y z` per line) or binary
/// `.pcf`. Exit codes: 0 success, 1 I/O error, 2 bad arguments,
/// 3 malformed or invalid input.
#[derive(Parser, Debug)]
#[command(name = "maskforge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Mask one cloud at iteration t and write the selection.
    Mask(MaskArgs),
    /// Evaluate the curriculum at evenly spaced iterations and write CSV rows
    /// of t, alpha, C, tau, masked_count.
    Trace(TraceArgs),
    /// Compare masks between a base and a rotated copy of a cloud.
    ///
    /// Scenarios name the base/rotated regimes of the two masking runs:
    /// aa (aligned/aligned), ar (aligned/full), zz (z-axis/z-axis),
    /// zr (z-axis/full), rr (full/full). They describe the masking runs
    /// compared here, not a train/test classification protocol.
    Rotcheck(RotcheckArgs),
    /// Synthesize an attention map from patch-center distances and save it as ATN1.
    SynthAttn(SynthArgs),
}

#[derive(Args, Debug)]
struct PipelineArgs {
    /// Number of patches K.
    #[arg(long, default_value_t = 64)]
    patches: usize,
    /// Points per patch k.
    #[arg(long, default_value_t = 32)]
    knn: usize,
    /// Grid block size per axis, "g" or "gx,gy,gz".
    #[arg(long, default_value = "4,4,4")]
    grid: String,
    /// Fraction of patches to mask.
    #[arg(long, default_value_t = 0.75)]
    ratio: f64,
    /// Curriculum exponent.
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
    /// Component count at t = 0.
    #[arg(long, default_value_t = 40)]
    cmax: usize,
    /// Component count at t = T.
    #[arg(long, default_value_t = 10)]
    cmin: usize,
    /// Training iteration.
    #[arg(long, default_value_t = 0)]
    t: u64,
    /// Total training iterations.
    #[arg(long = "T", default_value_t = 100)]
    total: u64,
    /// Master seed; falls back to MASKFORGE_SEED, then 0.
    #[arg(long, env = "MASKFORGE_SEED", default_value_t = 0)]
    seed: u64,
    /// ATN1 attention map to cluster (must have K rows).
    #[arg(long, conflicts_with = "synth_bandwidth")]
    attention: Option<PathBuf>,
    /// Bandwidth of the synthetic attention used when no map is given.
    #[arg(long, default_value_t = 0.25)]
    synth_bandwidth: f64,
}

impl PipelineArgs {
    fn options(&self) -> Result<PipelineOptions> {
        let config = CurriculumConfig {
            total_iters: self.total,
            gamma: self.gamma,
            ratio: self.ratio,
            c_max: self.cmax,
            c_min: self.cmin,
            granularity: self.grid.parse::<Granularity>()?,
            seeds: Seeds::from_master(self.seed),
            ..CurriculumConfig::default()
        };
        config.validate()?;
        if self.t > self.total {
            return Err(Error::Argument(format!("t = {} exceeds T = {}", self.t, self.total)));
        }
        let attention = match &self.attention {
            Some(path) => AttentionSource::Fixed(load_attention(path)?),
            None => AttentionSource::Synthetic {
                bandwidth: self.synth_bandwidth,
                noise: 0.0,
                seed: self.seed,
            },
        };
        Ok(PipelineOptions {
            num_patches: self.patches,
            knn: self.knn,
            attention,
            config,
        })
    }
}

#[derive(Args, Debug)]
struct MaskArgs {
    /// Input cloud (.xyz or .pcf).
    #[arg(long)]
    points: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Rotate the cloud before masking: a (none), z (about +z) or r (uniform).
    #[arg(long, default_value = "a")]
    rotation: String,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format; inferred from --out's extension, else json.
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args, Debug)]
struct TraceArgs {
    /// Input cloud; a built-in 1024-point test shape when absent.
    #[arg(long)]
    points: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Number of evenly spaced iterations, endpoints included.
    #[arg(long, default_value_t = 11)]
    steps: usize,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RotcheckArgs {
    #[arg(long)]
    points: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// One of aa, ar, zz, zr, rr.
    #[arg(long, default_value = "rr")]
    scenario: String,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    /// Output JSON report; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    points: PathBuf,
    #[arg(long, default_value_t = 64)]
    patches: usize,
    #[arg(long, default_value_t = 32)]
    knn: usize,
    /// Gaussian kernel bandwidth over center distances.
    #[arg(long, default_value_t = 0.25)]
    bandwidth: f64,
    /// Multiplicative noise amplitude in [0, 1).
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Iteration recorded in the file header.
    #[arg(long, default_value_t = 0)]
    t: u64,
    #[arg(long, env = "MASKFORGE_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn read_cloud(path: &Path) -> Result<PointCloud> {
    load_cloud(path, CloudFormat::from_path(path))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        }),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        }),
    }
}

fn run_mask(args: &MaskArgs) -> Result<()> {
    let opts = args.pipeline.options()?;
    let mode: RotationMode = args.rotation.parse()?;
    let format = match (&args.format, &args.out) {
        (Some(f), _) => f.parse()?,
        (None, Some(path)) => SelectionFormat::from_path(path),
        (None, None) => SelectionFormat::Json,
    };
    let cloud = read_cloud(&args.points)?;
    let cloud = apply_rotation(&cloud, &sample_rotation(mode, args.pipeline.seed));
    let (_, run) = mask_cloud(&cloud, &opts, args.pipeline.t, None)?;
    log::info!(
        "alpha = {}, C = {}, tau = {}, masked {} of {}",
        run.alpha,
        run.components,
        run.tau,
        run.selection.masked_count(),
        run.selection.num_patches()
    );
    match &args.out {
        Some(path) => save_selection(&run.selection, path, format),
        None => emit(
            None,
            &match format {
                SelectionFormat::Json => selection_to_json(&run.selection),
                SelectionFormat::Csv => selection_to_csv(&run.selection),
            },
        ),
    }
}

fn run_trace(args: &TraceArgs) -> Result<()> {
    let opts = args.pipeline.options()?;
    let cloud = match &args.points {
        Some(path) => read_cloud(path)?,
        None => demo_cloud(1024, args.pipeline.seed)?,
    };
    let trace = curriculum_trace(&cloud, &opts, args.steps)?;
    emit(args.out.as_deref(), &trace.to_csv())
}

fn run_rotcheck(args: &RotcheckArgs) -> Result<()> {
    let opts = args.pipeline.options()?;
    let scenario: RotationScenario = args.scenario.parse()?;
    let cloud = read_cloud(&args.points)?;
    let report = rotation_study(&cloud, scenario, args.trials, args.pipeline.t, &opts, args.pipeline.seed)?;
    emit(args.out.as_deref(), &report.to_json())
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let cloud = read_cloud(&args.points)?;
    let patches = patchify(&cloud, args.patches, args.knn)?;
    let attn = synth_attention(&patches, args.bandwidth, args.noise, args.seed)?;
    save_attention(&AttentionMap::new(attn.matrix().clone(), args.t)?, &args.out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Mask(a) => run_mask(a),
        Command::Trace(a) => run_trace(a),
        Command::Rotcheck(a) => run_rotcheck(a),
        Command::SynthAttn(a) => run_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("maskforge: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
