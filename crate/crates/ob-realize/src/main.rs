use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use ob_realize::config::{RunConfig, Stage};
use ob_realize::pipeline;

/// Spectral design, reduction, control and fast–slow realization pipeline.
#[derive(Debug, Parser)]
#[command(name = "ob-realize", version)]
struct Cli {
    /// Stage to run (overrides --stage and the config).
    #[arg(value_enum)]
    command: Option<Stage>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    stage: Option<Stage>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (fallback: OB_REALIZE_THREADS, then all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Emit SVG phase portraits.
    #[arg(long)]
    plot: bool,
    /// Dotted-path override, e.g. `--set profile.b=40`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match RunConfig::load(cli.config.as_deref(), &cli.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    if let Some(s) = cli.command.or(cli.stage) {
        cfg.stage = s;
    }
    if let Some(o) = cli.out {
        cfg.out = o;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.plot |= cli.plot;
    let env_threads = std::env::var("OB_REALIZE_THREADS").ok().and_then(|v| v.parse().ok());
    if let Some(n) = cli.threads.or(env_threads).or(cfg.threads) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match pipeline::run(&cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
