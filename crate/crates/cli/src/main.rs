use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use performer_cli::commands::{self, Options, GRADCHECK_TOL};
use performer_cli::config::RunConfig;
use performer_cli::{error_line, exit_code};
use performer_core::multimodal::InputVariant;
use performer_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "performer", version, about = "PPG-to-ECG reconstruction and multimodal classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Output directory for artifacts and report.toml
    #[arg(long)]
    out: Option<PathBuf>,
    /// Single-stage baseline with this many samples per token (must divide 512)
    #[arg(long, value_name = "N")]
    fixed_patch: Option<usize>,
    /// Dataset directory with manifest.csv (overrides data.dir)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Sample rate forced onto input files
    #[arg(long)]
    hz: Option<f64>,
}

#[derive(Args, Debug)]
struct ModelInput {
    /// Checkpoint directory
    #[arg(long)]
    model: PathBuf,
    /// Signal CSV
    #[arg(long)]
    input: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic paired PPG/ECG corpus
    Synth(Common),
    /// Train the PPG-to-ECG reconstructor
    TrainRecon(Common),
    /// Train the multimodal classifier
    TrainClf {
        #[command(flatten)]
        common: Common,
        /// Reconstructor checkpoint for reconstructed-ECG variants
        #[arg(long)]
        recon: Option<PathBuf>,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<InputVariant>,
    },
    /// Reconstruct ECG from the PPG column of a signal file
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: ModelInput,
    },
    /// Classify every window of a signal file
    Classify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: ModelInput,
        #[arg(long)]
        recon: Option<PathBuf>,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<InputVariant>,
    },
    /// Score a checkpoint on the configured dataset
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        recon: Option<PathBuf>,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<InputVariant>,
    },
    /// Per-class accuracy of each classifier input variant
    Ablation {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        recon: Option<PathBuf>,
    },
    /// Finite-difference check of the full model gradient
    Gradcheck(Common),
    /// Export attention weights of one input window
    Attnmap {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: ModelInput,
        /// Window index within the input
        #[arg(long, default_value_t = 0)]
        window: usize,
    },
}

fn parse_variant(s: &str) -> std::result::Result<InputVariant, String> {
    toml::Value::String(s.into())
        .try_into()
        .map_err(|_| format!("unknown variant `{s}` (ppg-only, ecg-only, recon-ecg-only, ppg-ecg, ppg-recon-ecg)"))
}

type CommandFn = fn(&RunConfig, &Options) -> Result<performer_cli::report::EvalReport>;

fn dispatch(cmd: Command) -> (PathBuf, Options, CommandFn) {
    let base = |c: &Common| Options {
        out: c.out.clone(),
        fixed_patch: c.fixed_patch,
        hz: c.hz,
        data: c.data.clone(),
        ..Options::default()
    };
    match cmd {
        Command::Synth(c) => (c.config.clone(), base(&c), commands::synth),
        Command::TrainRecon(c) => (c.config.clone(), base(&c), commands::train_recon),
        Command::TrainClf { common, recon, variant } => {
            let o = Options { recon, variant, ..base(&common) };
            (common.config, o, commands::train_clf)
        }
        Command::Reconstruct { common, io } => {
            let o = Options { model: Some(io.model), input: Some(io.input), ..base(&common) };
            (common.config, o, commands::reconstruct)
        }
        Command::Classify { common, io, recon, variant } => {
            let o = Options { model: Some(io.model), input: Some(io.input), recon, variant, ..base(&common) };
            (common.config, o, commands::classify)
        }
        Command::Evaluate { common, model, recon, variant } => {
            let o = Options { model: Some(model), recon, variant, ..base(&common) };
            (common.config, o, commands::evaluate)
        }
        Command::Ablation { common, recon } => {
            let o = Options { recon, ..base(&common) };
            (common.config, o, commands::ablation)
        }
        Command::Gradcheck(c) => (c.config.clone(), base(&c), commands::gradcheck),
        Command::Attnmap { common, io, window } => {
            let o = Options { model: Some(io.model), input: Some(io.input), window, ..base(&common) };
            (common.config, o, commands::attnmap)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let is_gradcheck = matches!(cli.command, Command::Gradcheck(_));
    let (config, opts, f) = dispatch(cli.command);
    let outcome = RunConfig::load(&config).and_then(|cfg| commands::run(f, &cfg, &opts));
    match outcome {
        Ok(report) => {
            if is_gradcheck && report.gradcheck_max_rel_error.map_or(true, |e| !(e <= GRADCHECK_TOL)) {
                let err = Error::Numeric {
                    op: "gradcheck",
                    detail: format!("worst relative error exceeds {GRADCHECK_TOL:e}"),
                };
                eprintln!("{}", error_line(&err));
                return ExitCode::from(3);
            }
            print!("{}", report.to_toml());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
