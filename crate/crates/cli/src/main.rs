//! `ca3d`: train and run the bidirectional CC/MLO view-translation model.
//!
//! Exit codes are a stable contract: 0 success, 1 I/O failure, 2 usage
//! error, 3 numerical failure (NaN loss), 4 verification failure.

mod commands;
mod verify;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

pub const EXIT_IO: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_VERIFY: u8 = 4;

/// Command error carrying its exit code.
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: msg.into(),
        }
    }

    pub fn io(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_IO,
            message: msg.into(),
        }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_NUMERIC,
            message: msg.into(),
        }
    }
}

impl From<ca3d_core::Error> for CliError {
    fn from(e: ca3d_core::Error) -> Self {
        let code = match &e {
            ca3d_core::Error::Config(_) | ca3d_core::Error::InvalidArg(_) => EXIT_USAGE,
            _ => EXIT_IO,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

pub type CliResult = Result<(), CliError>;

#[derive(Parser)]
#[command(name = "ca3d", version, about = "Bidirectional CC/MLO view translation with a column-aware, 3D-conditioned diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom view-pair dataset with an 80/10/10 split.
    GenData {
        /// Output directory for pair files and the manifest.
        #[arg(long)]
        out: PathBuf,
        /// Number of view pairs.
        #[arg(long)]
        count: usize,
        /// Image edge length (phantom grid size).
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the denoiser on a generated dataset.
    Train {
        /// Dataset directory (from gen-data).
        #[arg(long)]
        data: PathBuf,
        /// Optional config file (key = value); defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path; the loss log goes to <out>.log.
        #[arg(long)]
        out: PathBuf,
        /// Number of optimizer steps.
        #[arg(long)]
        steps: usize,
        /// Ablation: zero the column-aware attention bias.
        #[arg(long)]
        no_caca: bool,
        /// Ablation: zero the implicit 3D feature pathway.
        #[arg(long)]
        no_im3d: bool,
    },
    /// Translate a single view image to the other view.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Input image: PGM (P5) or a container file.
        #[arg(long)]
        input: PathBuf,
        /// cc2mlo or mlo2cc.
        #[arg(long)]
        direction: String,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 3.0)]
        guidance: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output stem; writes <out>.pgm and <out>.ca3d.
        #[arg(long)]
        out: PathBuf,
    },
    /// Translate every pair of a split in both directions and report
    /// PSNR/SSIM per direction.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 3.0)]
        guidance: f32,
        /// Diagnostic: score ground truth against itself instead of sampling.
        #[arg(long)]
        identity: bool,
    },
    /// Run the projection-geometry oracle suite and print PASS/FAIL lines.
    VerifyGeometry {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Test hook: perturb the rotation angle by this many radians.
        #[arg(long, default_value_t = 0.0)]
        perturb_theta: f64,
    },
}

fn init_threads() {
    let threads = std::env::var("CA3D_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1);
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn main() -> ExitCode {
    init_threads();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {
            out,
            count,
            size,
            seed,
        } => commands::gen_data(&out, count, size, seed),
        Command::Train {
            data,
            config,
            out,
            steps,
            no_caca,
            no_im3d,
        } => commands::train(&data, config.as_deref(), &out, steps, no_caca, no_im3d),
        Command::Translate {
            ckpt,
            input,
            direction,
            steps,
            guidance,
            seed,
            out,
        } => commands::translate(&ckpt, &input, &direction, steps, guidance, seed, &out),
        Command::Eval {
            ckpt,
            data,
            split,
            out,
            seed,
            steps,
            guidance,
            identity,
        } => commands::eval(&ckpt, &data, &split, &out, seed, steps, guidance, identity),
        Command::VerifyGeometry {
            seed,
            perturb_theta,
        } => verify::verify_geometry(seed, perturb_theta),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
