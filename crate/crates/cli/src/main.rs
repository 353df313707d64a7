use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use log::error;
use maskcount::commands::{self, Ctx};
use maskcount::config::Config;
use maskcount::error::{exit_code, CliError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Command {
    Gen,
    TrainBase,
    PseudoLabel,
    TrainSeg,
    Count,
    Eval,
    Ablate,
    BenchTime,
}

/// Segment-then-count pipeline for exemplar-conditioned multi-class counting.
#[derive(Debug, Parser)]
#[command(name = "maskcount", version)]
struct Cli {
    command: Command,
    /// TOML config file; relative paths inside it resolve against its directory.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the root seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Write mask and density PGM files alongside the artifacts.
    #[arg(long)]
    dump_images: bool,
    /// Use artifacts even when their config fingerprint differs.
    #[arg(long)]
    force: bool,
    /// `count` only: a scene directory to count instead of the test split.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// `count` only: P5 PGM mask (values >= 0.5 keep a cell) used instead of the segmenter.
    #[arg(long)]
    mask: Option<PathBuf>,
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("MASKCOUNT_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("MASKCOUNT_THREADS = {v:?} is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    let mut cfg = Config::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let ctx = Ctx::new(cfg, cli.dump_images, cli.force);
    if cli.command != Command::Count && (cli.scene.is_some() || cli.mask.is_some()) {
        return Err(CliError::Config("--scene and --mask only apply to `count`".into()).into());
    }
    match cli.command {
        Command::Gen => commands::cmd_gen(&ctx),
        Command::TrainBase => commands::cmd_train_base(&ctx),
        Command::PseudoLabel => commands::cmd_pseudo_label(&ctx),
        Command::TrainSeg => commands::cmd_train_seg(&ctx),
        Command::Count => commands::cmd_count(&ctx, cli.scene.as_deref(), cli.mask.as_deref()),
        Command::Eval => commands::cmd_eval(&ctx),
        Command::Ablate => commands::cmd_ablate(&ctx),
        Command::BenchTime => commands::cmd_bench_time(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
