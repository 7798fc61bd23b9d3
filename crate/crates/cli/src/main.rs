use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use worldkit_cli::commands;
use worldkit_cli::config::{Overrides, RunConfig};
use worldkit_cli::error::CliError;
use worldkit_model::config::{LossMode, TargetMode};

#[derive(Parser)]
#[command(name = "worldkit", version, about = "Text-game world model toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    beam_width: Option<usize>,
    #[arg(long, global = true)]
    loss: Option<LossArg>,
    #[arg(long, global = true)]
    target: Option<TargetArg>,
    #[arg(long, global = true)]
    multitask: Option<Switch>,
    /// Wall-clock budget in seconds (per training run or ablation row).
    #[arg(long, global = true)]
    budget: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Sos,
    Seq,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Diff,
    Full,
    AddDel,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train and test corpora.
    GenWorld,
    /// Masked-token pretraining of the encoders.
    Pretrain,
    /// Train the world model.
    Train,
    /// Score a checkpoint on a test corpus.
    Eval,
    /// Run the component ablation grids.
    Ablate,
    /// Print the difference between two graph files.
    Diff { before: PathBuf, after: PathBuf },
    /// Corpus statistics.
    Stats,
    /// Run the invariant battery.
    Verify,
}

impl Global {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            beam_width: self.beam_width,
            loss: self.loss.map(|l| match l {
                LossArg::Sos => LossMode::Sos,
                LossArg::Seq => LossMode::Seq,
            }),
            target: self.target.map(|t| match t {
                TargetArg::Diff => TargetMode::Diff,
                TargetArg::Full => TargetMode::Full,
                TargetArg::AddDel => TargetMode::AddDel,
            }),
            multitask: self.multitask.map(|s| matches!(s, Switch::On)),
            budget: self.budget,
        }
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("WORLDKIT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("WORLDKIT_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Other(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    if let Command::Diff { before, after } = &cli.command {
        let (a, b) = (commands::read_graph(before)?, commands::read_graph(after)?);
        for line in commands::diff_lines(&a, &b) {
            println!("{line}");
        }
        return Ok(());
    }
    let file = match &cli.global.config {
        Some(p) => RunConfig::load_any(p)?,
        None => RunConfig::default(),
    };
    let cfg = file.resolve(&cli.global.overrides())?;
    let resolved = cfg.write_resolved()?;
    log::info!("resolved config written to {}", resolved.display());
    match cli.command {
        Command::GenWorld => commands::gen_world(&cfg).map(|_| ()),
        Command::Pretrain => commands::cmd_pretrain(&cfg).map(|_| ()),
        Command::Train => commands::cmd_train(&cfg).map(|_| ()),
        Command::Eval => commands::cmd_eval(&cfg).map(|_| ()),
        Command::Ablate => commands::cmd_ablate(&cfg).map(|_| ()),
        Command::Stats => commands::stats(&cfg),
        Command::Verify => commands::cmd_verify(&cfg).map(|_| ()),
        Command::Diff { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { worldkit_cli::error::EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
