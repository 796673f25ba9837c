use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use lego_cli::commands::{self, AblateWhich, Ctx};
use lego_cli::config::{resolve_workdir, RunConfig};

#[derive(Parser)]
#[command(
    name = "lego",
    about = "Post-training domain adaptation for image restoration with a generative oracle",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum WhichArg {
    Filter,
    Mix,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Working directory for all artifacts (falls back to the config's
    /// workdir field, then $LEGO_WORKDIR, then ./lego-work).
    #[arg(long)]
    workdir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize all dataset splits and manifests.
    GenData(CommonArgs),
    /// Fit the mixture oracle and calibrate the quality scale.
    FitOracle(CommonArgs),
    /// Pre-train the restoration model on the weak domain.
    Pretrain(CommonArgs),
    /// Run the three-stage adaptation and write the adapted checkpoint.
    Adapt(CommonArgs),
    /// Evaluate baseline (and adapted, if present) on both test domains.
    Eval(CommonArgs),
    /// Run an ablation protocol over the frozen Stage-1 pool.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        /// Which ablation to run.
        #[arg(long, value_enum)]
        which: WhichArg,
    },
}

fn build_ctx(args: &CommonArgs) -> Result<Ctx, lego_core::error::Error> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let workdir = resolve_workdir(args.workdir.as_deref(), &cfg);
    Ok(Ctx::new(cfg, workdir))
}

fn run() -> Result<(), lego_core::error::Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData(args) => commands::cmd_gen_data(&build_ctx(&args)?),
        Command::FitOracle(args) => commands::cmd_fit_oracle(&build_ctx(&args)?),
        Command::Pretrain(args) => commands::cmd_pretrain(&build_ctx(&args)?),
        Command::Adapt(args) => commands::cmd_adapt(&build_ctx(&args)?),
        Command::Eval(args) => commands::cmd_eval(&build_ctx(&args)?),
        Command::Ablate { common, which } => {
            let which = match which {
                WhichArg::Filter => AblateWhich::Filter,
                WhichArg::Mix => AblateWhich::Mix,
            };
            commands::cmd_ablate(&build_ctx(&common)?, which)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(commands::exit_code(&err) as u8)
        }
    }
}
