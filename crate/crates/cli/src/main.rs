//! `gsvr`: simulate, reconstruct, evaluate and export slice-to-volume
//! reconstructions with Gaussian primitives.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 when the
//! input data cannot be read or processed.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{error::ErrorKind, Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "gsvr", version, about = "Slice-to-volume reconstruction with Gaussian primitives")]
struct Cli {
    /// TOML run configuration. Flags given on the command line override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Root random seed (overrides `seed` in the configuration).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Only report warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a phantom and acquire motion-corrupted slice stacks from it.
    Simulate(SimulateArgs),
    /// Fit a Gaussian field and slice motion to one or more stacks.
    Reconstruct(ReconstructArgs),
    /// Compare a volume against a reference.
    Evaluate(EvaluateArgs),
    /// Write a stored field as a point cloud, volume or PNG montage.
    Export(ExportArgs),
    /// Extract the quality-over-time curve from a training history.
    Convergence(ConvergenceArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Phantom voxels per axis.
    #[arg(long)]
    pub size: Option<usize>,
    /// Number of orthogonal stacks, taken in axial, coronal, sagittal order.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub stacks: Option<u8>,
    /// Slice thickness in mm.
    #[arg(long)]
    pub thickness: Option<f64>,
    /// In-plane pixel size in mm.
    #[arg(long)]
    pub inplane: Option<f64>,
    /// Noise standard deviation as a fraction of the phantom's range.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Per-axis slice rotation bound in degrees.
    #[arg(long)]
    pub rot_max: Option<f64>,
    /// Per-axis slice translation bound in mm.
    #[arg(long)]
    pub trans_max: Option<f64>,
    /// Sample the phantom at pixel centers instead of integrating the PSF.
    #[arg(long)]
    pub no_psf: bool,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    /// Input stacks (NIfTI-1).
    #[arg(long = "stack", required = true, num_args = 1.., value_name = "FILE")]
    pub stacks: Vec<PathBuf>,
    /// Mask for each stack, in the same order; nonzero voxels are fitted.
    #[arg(long = "mask", num_args = 1.., value_name = "FILE")]
    pub masks: Vec<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Ground-truth volume to score the training history against. Also
    /// defines the output grid.
    #[arg(long, value_name = "FILE")]
    pub reference: Option<PathBuf>,
    /// Voxel mask for scoring; all voxels when absent.
    #[arg(long, value_name = "FILE", requires = "reference")]
    pub reference_mask: Option<PathBuf>,
    /// True slice poses (as written by `simulate`). Scored fields and the
    /// output volume are moved into their frame.
    #[arg(long, value_name = "FILE")]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub n_gaussians: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub lambda_reg: Option<f64>,
    /// Score against the reference every this many epochs.
    #[arg(long)]
    pub metric_every: Option<usize>,
    /// Fit without the slice PSF.
    #[arg(long)]
    pub no_psf: bool,
    /// Output voxel size in mm when no reference is given (default: the
    /// finest in-plane pixel size).
    #[arg(long)]
    pub spacing: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Volume to score.
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference volume on the same grid.
    #[arg(long)]
    pub gt: PathBuf,
    /// Voxel mask; nonzero voxels are scored (all voxels when absent).
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Also write the metrics as a one-row CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Field file written by `reconstruct`.
    #[arg(long)]
    pub field: PathBuf,
    /// Write an ASCII PLY point cloud.
    #[arg(long, value_name = "FILE")]
    pub ply: Option<PathBuf>,
    /// Axis-length factor of the point cloud, in (0, 1].
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Rasterize and write a PNG montage.
    #[arg(long, value_name = "FILE")]
    pub png: Option<PathBuf>,
    /// Rasterize and write a NIfTI-1 volume.
    #[arg(long, value_name = "FILE")]
    pub nifti: Option<PathBuf>,
    /// Montage slice axis: x, y or z.
    #[arg(long)]
    pub axis: Option<String>,
    /// NIfTI whose grid the field is rasterized onto; otherwise a grid
    /// bounding the primitives.
    #[arg(long, value_name = "FILE")]
    pub grid: Option<PathBuf>,
    /// Voxel size in mm of the bounding grid.
    #[arg(long, default_value_t = 0.5)]
    pub spacing: f64,
}

#[derive(Args, Debug)]
pub struct ConvergenceArgs {
    /// History CSV written by `reconstruct`.
    #[arg(long)]
    pub history: PathBuf,
    /// Output CSV with one row per scored epoch.
    #[arg(long)]
    pub out: PathBuf,
    /// SSIM level whose first crossing is reported.
    #[arg(long, default_value_t = 0.8)]
    pub ssim_target: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = commands::load_config(cli.config.as_deref(), cli.seed).and_then(|cfg| match cli.command {
        Command::Simulate(a) => commands::simulate(cfg, &a),
        Command::Reconstruct(a) => commands::reconstruct(cfg, &a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Export(a) => commands::export(cfg, &a),
        Command::Convergence(a) => commands::convergence(&a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
