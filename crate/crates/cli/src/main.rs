//! `aberration`: dataset generation, training, prediction, restoration,
//! evaluation and PSF/wavefront rendering.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime error.

mod commands;
mod dataset;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "aberration",
    version,
    about = "Estimate and restore optical aberrations in 3D microscopy volumes"
)]
pub struct Cli {
    /// Progress messages on stderr (also enabled by ABERRATION_VERBOSE=1).
    #[arg(short, long, global = true)]
    pub verbose: bool,
    /// Worker threads for generation and evaluation; results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone)]
pub struct ConfigArgs {
    /// JSON configuration document.
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config value, e.g. `--set train.epochs=10` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_key_value)]
    pub overrides: Vec<(String, String)>,
    /// Sets both `generator.seed` and `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand)]
pub enum Command {
    /// Write train/val volumes and per-mode test series with manifests.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        n_train: usize,
        #[arg(long, default_value_t = 0)]
        n_val: usize,
        #[arg(long, default_value_t = 0)]
        n_test_per_mode: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on generator output.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory with a validation manifest (default: draw from the generator).
        #[arg(long)]
        val_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict the amplitude vector of a volume.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        /// Amplitude JSON output.
        #[arg(long)]
        out: PathBuf,
        /// Also write the PSF synthesized from the prediction.
        #[arg(long)]
        psf: Option<PathBuf>,
        /// PSF shape `z,y,x` (default: model input shape).
        #[arg(long, value_parser = parse_triple)]
        psf_shape: Option<[usize; 3]>,
        /// Crop offset `z,y,x` (default: centred crop).
        #[arg(long, value_parser = parse_triple)]
        crop: Option<[usize; 3]>,
        /// Voxel size `dz,dy,dx` in µm for files without one.
        #[arg(long, value_parser = parse_voxel)]
        voxel: Option<[f64; 3]>,
    },
    /// Richardson–Lucy restoration with a predicted or given PSF.
    #[command(group(ArgGroup::new("source").required(true).args(["checkpoint", "psf_file"])))]
    Restore {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        psf_file: Option<PathBuf>,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        /// Config whose `deconv` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_triple)]
        psf_shape: Option<[usize; 3]>,
        #[arg(long, value_parser = parse_triple)]
        crop: Option<[usize; 3]>,
        #[arg(long, value_parser = parse_voxel)]
        voxel: Option<[f64; 3]>,
    },
    /// Evaluate a model on test series; writes eval.csv and summary.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a PSF volume.
    Psf {
        #[command(flatten)]
        config: ConfigArgs,
        /// Amplitude JSON as written by `predict` (default: unaberrated).
        #[arg(long)]
        amplitudes: Option<PathBuf>,
        #[arg(long, value_parser = parse_triple)]
        shape: Option<[usize; 3]>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a pupil wavefront map (µm) as a single-page TIFF.
    Wavefront {
        #[arg(long)]
        amplitudes: PathBuf,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Foreground/background statistics from mask TIFFs, as JSON.
    Measure {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        foreground: PathBuf,
        #[arg(long)]
        background: PathBuf,
    },
}

fn parse_key_value(s: &str) -> Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    if k.is_empty() {
        return Err("empty key".into());
    }
    Ok((k.to_string(), v.to_string()))
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<[T; 3], String> {
    let parts: Vec<T> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad number `{p}`")))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| format!("expected three comma-separated values, got `{s}`"))
}

fn parse_triple(s: &str) -> Result<[usize; 3], String> {
    parse_list(s)
}

fn parse_voxel(s: &str) -> Result<[f64; 3], String> {
    parse_list(s)
}

pub enum CliError {
    Usage(String),
    Core(aberration::Error),
}

impl From<aberration::Error> for CliError {
    fn from(e: aberration::Error) -> Self {
        CliError::Core(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be positive");
            return ExitCode::from(1);
        }
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let verbose = cli.verbose
        || std::env::var("ABERRATION_VERBOSE").is_ok_and(|v| !v.is_empty() && v != "0");
    match commands::run(cli.command, verbose) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Core(e)) => {
            eprintln!("error: {e}");
            match e.kind() {
                aberration::ErrorKind::Validation => ExitCode::from(2),
                aberration::ErrorKind::Runtime => ExitCode::from(3),
            }
        }
    }
}
