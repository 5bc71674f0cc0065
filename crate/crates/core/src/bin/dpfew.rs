use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use dpfew::config::{load_config, ExperimentKind, WorkbenchConfig};
use dpfew::workbench::run_experiment;

#[derive(Parser)]
#[command(name = "dpfew", version, about = "Differentially private few-shot transfer workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Privacy accounting for given (sigma, q, steps, delta) or a target epsilon
    Account(Common),
    /// Tune, train and evaluate one (shots, mode, epsilon) cell
    Train(Common),
    /// Grid over shots x epsilon x mode
    Sweep(Common),
    /// Likelihood-ratio membership inference on a shadow population
    Attack(Common),
    /// Federated fine-tuning with user-level DP
    Fedsim(Common),
    /// Transfer difficulty, shot multipliers and regimes from a sweep summary
    Analyze(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config; defaults are used for omitted keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed, overrides the config
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overrides the config
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads
    #[arg(long)]
    threads: Option<usize>,
}

fn run(kind: ExperimentKind, args: Common) -> anyhow::Result<()> {
    let mut cfg = match &args.config {
        Some(path) => load_config(path).with_context(|| format!("loading {}", path.display()))?,
        None => WorkbenchConfig::for_kind(kind),
    };
    if cfg.kind != kind {
        anyhow::bail!(dpfew::Error::Config(format!(
            "config is for '{}' but the '{kind}' subcommand was used",
            cfg.kind
        )));
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(t) = args.threads {
        cfg.threads = Some(t);
    }
    let out = args
        .out
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let threads = cfg.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    let report = pool.install(|| run_experiment(&cfg, &out))?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn fail(tag: &str, message: String) -> ExitCode {
    eprintln!("{}", serde_json::json!({ "error": tag, "message": message }));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim_end().to_string()),
    };
    let (kind, args) = match cli.command {
        Command::Account(a) => (ExperimentKind::Account, a),
        Command::Train(a) => (ExperimentKind::Train, a),
        Command::Sweep(a) => (ExperimentKind::Sweep, a),
        Command::Attack(a) => (ExperimentKind::Attack, a),
        Command::Fedsim(a) => (ExperimentKind::Fedsim, a),
        Command::Analyze(a) => (ExperimentKind::Analyze, a),
    };
    match run(kind, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let tag = e.chain().find_map(|c| c.downcast_ref::<dpfew::Error>()).map_or("internal", |d| d.kind());
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            fail(tag, chain.join(": "))
        }
    }
}
