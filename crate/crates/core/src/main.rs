use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rfm_core::harness::{self, ExperimentConfig, HarnessError};

#[derive(Parser)]
#[command(name = "rfm", version, about = "Representative forgery mining experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to load; defaults to `<out>/checkpoints/final.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Materialise the train and test splits.
    GenData(Common),
    /// Train a detector.
    Train(Common),
    /// Evaluate a checkpoint on the standard and less-forgery test sets.
    Eval(Common),
    /// Run the ablation grid.
    Ablate(Common),
    /// Average attention maps, their correlations and class activation maps.
    Visualize(Common),
    /// Write before/after images for the configured augmentation.
    ErasePreview(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if common.seed.is_some() {
        config.seed = common.seed;
    }
    if common.out.is_some() {
        config.out = common.out.clone();
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::GenData(c) => {
            let m = harness::run_generate(&load(&c)?)?;
            println!("wrote {} files", m.files.len());
        }
        Command::Train(c) => {
            let m = harness::run_training(&load(&c)?)?;
            for ckpt in &m.checkpoints {
                println!("{ckpt}");
            }
        }
        Command::Eval(c) => {
            for r in harness::run_evaluation(&load(&c)?, c.checkpoint.as_deref())? {
                let tdr: Vec<String> = r.tdr.iter().map(|e| format!("tdr@{}={:.4}", e.fdr, e.tdr)).collect();
                println!("{} auc={:.4} {}", r.test_set, r.auc, tdr.join(" "));
            }
        }
        Command::Ablate(c) => {
            let table = harness::run_ablation(&load(&c)?)?;
            print!("{}", String::from_utf8_lossy(&table.to_csv()));
        }
        Command::Visualize(c) => {
            for f in harness::run_visualization(&load(&c)?, c.checkpoint.as_deref())? {
                println!("{f}");
            }
        }
        Command::ErasePreview(c) => {
            for f in harness::run_erase_preview(&load(&c)?, c.checkpoint.as_deref())? {
                println!("{f}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
