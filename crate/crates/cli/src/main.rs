use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lpl_core::config::RunConfig;
use lpl_core::{harness, LabError, Result};

#[derive(Parser)]
#[command(name = "lpl-lab", version, about = "Latent perceptual loss experiments on synthetic textures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic textured dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train and freeze the autoencoder.
    TrainAe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the latent generator (pretraining then LPL post-training).
    TrainGen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ae: Option<PathBuf>,
        /// Checkpoint file or run directory to resume from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Draw samples from a generator checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        ae: Option<PathBuf>,
    },
    /// Compare generated images against real ones.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        real: Option<PathBuf>,
        #[arg(long)]
        fake: Option<PathBuf>,
        #[arg(long)]
        ae: Option<PathBuf>,
    },
    /// Radial power spectra and band errors.
    Spectrum {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        real: Option<PathBuf>,
        #[arg(long)]
        fake: Option<PathBuf>,
    },
    /// Autoencoder resampling, perturbation and linearization probes.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ae: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Check the linear-decoder projection penalty identity on random instances.
    VerifyTheory {
        #[command(flatten)]
        common: Common,
    },
    /// Train, sample and evaluate once per value of a parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// tau, w_lpl or gamma_ema.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ae: Option<PathBuf>,
    },
}

fn config(c: &Common) -> Result<RunConfig> {
    match &c.config {
        Some(p) => RunConfig::load(p),
        None => {
            let cfg = RunConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn run(cmd: Command) -> Result<harness::RunManifest> {
    harness::configure_threads()?;
    match cmd {
        Command::GenData { common } => harness::gen_data(&config(&common)?, &common.out),
        Command::TrainAe { common, data } => harness::train_ae(&config(&common)?, data.as_deref(), &common.out),
        Command::TrainGen { common, data, ae, resume } => {
            harness::train_gen(&config(&common)?, data.as_deref(), ae.as_deref(), resume.as_deref(), &common.out)
        }
        Command::Sample { common, checkpoint, ae } => {
            harness::sample_cmd(&config(&common)?, checkpoint.as_deref(), ae.as_deref(), &common.out)
        }
        Command::Eval { common, real, fake, ae } => {
            harness::eval_cmd(&config(&common)?, real.as_deref(), fake.as_deref(), ae.as_deref(), &common.out)
        }
        Command::Spectrum { common, real, fake } => {
            harness::spectrum_cmd(&config(&common)?, real.as_deref(), fake.as_deref(), &common.out)
        }
        Command::Probe { common, ae, data } => harness::probe_cmd(&config(&common)?, ae.as_deref(), data.as_deref(), &common.out),
        Command::VerifyTheory { common } => harness::verify_theory(&config(&common)?, &common.out),
        Command::Sweep { common, param, values, data, ae } => {
            harness::sweep(&config(&common)?, &param, &values, data.as_deref(), ae.as_deref(), &common.out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(m) => {
            println!("{}", serde_json::to_string(&m.summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &LabError) -> u8 {
    e.exit_code() as u8
}
