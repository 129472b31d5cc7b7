//! `lowmark` — low-frequency latent watermarking workflows.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use lowmark::attacks::{AttackKind, AttackSpec};
use lowmark_cli::{config::RunConfig, CliError};

#[derive(Parser)]
#[command(
    name = "lowmark",
    about = "Robust blind image watermarking in the low-frequency deep-feature space",
    version
)]
struct Cli {
    /// TOML configuration file; omitted means built-in defaults.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Cap worker threads (overrides the config key; 0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Frequency-band stability study: per-image spectral errors and paired
    /// significance tests under the configured attacks.
    AnalyzeStability,
    /// Pre-train the tiny latent codec and write its parameter file.
    PretrainCodec,
    /// Two-stage watermark training (codec frozen, no attacks in the loop).
    Train {
        /// Continue from the latest snapshot in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Embed a message into an image (lossless PNG out).
    Embed {
        /// Model checkpoint (defaults to <output_dir>/checkpoint.lwck).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        /// Message as hex (msb-first) or as a bitstring of exactly L bits.
        #[arg(long, short)]
        message: String,
    },
    /// Recover the message from a (possibly attacked) image.
    Extract {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, short)]
        input: PathBuf,
        /// True message (hex or bitstring); prints bit accuracy when given.
        #[arg(long)]
        expect: Option<String>,
    },
    /// Apply one attack to an image.
    Attack {
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        /// identity | gaussian_noise | salt_pepper | jpeg | contrast |
        /// brightness | gaussian_filter | mean_filter | median_filter |
        /// random_dropout | external
        #[arg(long)]
        kind: String,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        density: Option<f64>,
        #[arg(long)]
        quality: Option<u8>,
        #[arg(long)]
        factor: Option<f64>,
        #[arg(long)]
        kernel: Option<usize>,
        #[arg(long)]
        min_fraction: Option<f64>,
        #[arg(long)]
        max_fraction: Option<f64>,
        /// Adapter name for external attacks.
        #[arg(long)]
        adapter: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Attack-grid robustness evaluation; writes JSON/CSV (and SVG) reports.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn build_attack_spec(
    kind: &str,
    sigma: Option<f64>,
    density: Option<f64>,
    quality: Option<u8>,
    factor: Option<f64>,
    kernel: Option<usize>,
    min_fraction: Option<f64>,
    max_fraction: Option<f64>,
    adapter: Option<String>,
    seed: Option<u64>,
) -> Result<AttackSpec, CliError> {
    let need = |name: &str| CliError::validation(format!("attack '{kind}' requires --{name}"));
    let kind = match kind {
        "identity" => AttackKind::Identity,
        "gaussian_noise" => AttackKind::GaussianNoise { sigma: sigma.ok_or_else(|| need("sigma"))? },
        "salt_pepper" => AttackKind::SaltPepper { density: density.ok_or_else(|| need("density"))? },
        "jpeg" => AttackKind::Jpeg { quality: quality.ok_or_else(|| need("quality"))? },
        "contrast" => AttackKind::Contrast { factor: factor.ok_or_else(|| need("factor"))? },
        "brightness" => AttackKind::Brightness { factor: factor.ok_or_else(|| need("factor"))? },
        "gaussian_filter" => AttackKind::GaussianFilter { kernel: kernel.ok_or_else(|| need("kernel"))? },
        "mean_filter" => AttackKind::MeanFilter { kernel: kernel.ok_or_else(|| need("kernel"))? },
        "median_filter" => AttackKind::MedianFilter { kernel: kernel.ok_or_else(|| need("kernel"))? },
        "random_dropout" => AttackKind::RandomDropout {
            min_fraction: min_fraction.unwrap_or(0.10),
            max_fraction: max_fraction.unwrap_or(0.30),
        },
        "external" => AttackKind::External { adapter: adapter.ok_or_else(|| need("adapter"))? },
        other => {
            return Err(CliError::validation(format!("unknown attack kind '{other}'")));
        }
    };
    Ok(AttackSpec { kind, seed })
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let cfg = RunConfig::default();
            cfg.validate()?;
            cfg
        }
    };

    let jobs = cli.jobs.unwrap_or(cfg.jobs);
    if jobs > 0 {
        // Results do not depend on the thread count; this only caps CPU use.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }

    match cli.command {
        Command::AnalyzeStability => lowmark_cli::cmd_analyze_stability(&cfg),
        Command::PretrainCodec => lowmark_cli::cmd_pretrain_codec(&cfg),
        Command::Train { resume } => lowmark_cli::cmd_train(&cfg, resume),
        Command::Embed { checkpoint, input, output, message } => {
            lowmark_cli::cmd_embed(&cfg, checkpoint.as_deref(), &input, &output, &message)
        }
        Command::Extract { checkpoint, input, expect } => {
            lowmark_cli::cmd_extract(&cfg, checkpoint.as_deref(), &input, expect.as_deref())
        }
        Command::Attack {
            input,
            output,
            kind,
            sigma,
            density,
            quality,
            factor,
            kernel,
            min_fraction,
            max_fraction,
            adapter,
            seed,
        } => {
            let spec = build_attack_spec(
                &kind, sigma, density, quality, factor, kernel, min_fraction, max_fraction,
                adapter, seed,
            )?;
            lowmark_cli::cmd_attack(&cfg, &spec, &input, &output)
        }
        Command::Evaluate { checkpoint } => {
            lowmark_cli::cmd_evaluate(&cfg, checkpoint.as_deref())
        }
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code);
    }
}
