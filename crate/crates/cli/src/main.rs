mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use semiopf::Mode;

use crate::artifacts::MissingArtifact;
use crate::commands::Ctx;
use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "semiopf", version, about = "Semi-supervised AC-OPF proxy pipeline")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Gradient mode for train/eval: EXACT, M0, M1, M2, M3 or M4.
    #[arg(long, global = true)]
    mode: Option<Mode>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single-threaded, fixed reduction order.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample demand scenarios.
    GenDemands,
    /// Solve the reference OPF on the labeled budget.
    SolveRef,
    /// Fit the ridge model and complete pseudo labels through the power flow.
    PseudoLabel,
    /// Build the reduced branch set from the pseudo labels.
    BranchSet,
    /// Train the network under one gradient mode.
    Train,
    /// Evaluate a trained model on the test split.
    Eval,
    /// Collect evaluation results into report.md.
    Report,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

/// Invalid configuration or command line.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| ConfigError(format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = cli.mode {
        cfg.train.mode = m;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    cfg.validate().map_err(|e| ConfigError(format!("{e:#}")))?;
    Ok(cfg)
}

fn setup_threads(cfg: &RunConfig) -> anyhow::Result<()> {
    let n = if cfg.deterministic { 1 } else { cfg.threads };
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    if let Command::ShowConfig = cli.cmd {
        print!("{}", toml::to_string(&cfg)?);
        return Ok(());
    }
    setup_threads(&cfg)?;
    let ctx = Ctx::new(cfg)?;
    match cli.cmd {
        Command::GenDemands => commands::gen_demands(&ctx),
        Command::SolveRef => commands::solve_ref(&ctx),
        Command::PseudoLabel => commands::pseudo_label_cmd(&ctx),
        Command::BranchSet => commands::branch_set(&ctx),
        Command::Train => commands::train_cmd(&ctx, cli.mode),
        Command::Eval => commands::eval_cmd(&ctx, cli.mode),
        Command::Report => commands::report(&ctx),
        Command::ShowConfig => unreachable!(),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<semiopf::Error>() {
            if e.is_numerical() {
                return 3;
            }
            if matches!(e, semiopf::Error::InvalidArgument(_) | semiopf::Error::Parse { .. }) {
                return 2;
            }
        }
        if cause.is::<MissingArtifact>() {
            return 1;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
