use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use keygate::evalkit::ReportFormat;
use keygate_cli::commands::{self, Run};
use keygate_cli::{CliError, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(name = "keygate", version, about = "Key-gated personalization of neural policies")]
struct Cli {
    /// Experiment configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Checkpoint to start from or evaluate.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,

    /// Report format.
    #[arg(long, global = true, value_parser = ["csv", "json"], default_value = "json")]
    format: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the general policy.
    Pretrain,
    /// Attach key encoders and train on the composite objective; trains from
    /// scratch when no --checkpoint is given.
    Personalize,
    /// Evaluate a checkpoint per key class, plus score/privacy or entropy.
    Eval,
    /// Personalized-objective metric against Hamming distance from the user key.
    Leakage,
    /// Personalize with wrong keys trained toward uniform noise.
    Obfuscate,
    /// Train the parameter-matched key-concatenation baseline; --checkpoint
    /// adds a keyed policy to the comparison.
    Baseline,
    /// Finite-difference gradient check on random small instances.
    Gradcheck,
    /// Print the hex key derived from a passphrase.
    DeriveKey {
        #[arg(long)]
        passphrase: String,
        #[arg(long, default_value_t = 128)]
        bits: usize,
    },
}

fn load_run(cli: &Cli) -> Result<Run, CliError> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Run::create(cfg)
}

fn need_checkpoint(cli: &Cli) -> Result<&PathBuf, CliError> {
    cli.checkpoint.as_ref().ok_or_else(|| CliError::Config("--checkpoint is required".into()))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let format: ReportFormat = cli.format.parse()?;
    if let Command::DeriveKey { passphrase, bits } = &cli.command {
        println!("{}", commands::derive_key(passphrase, *bits)?);
        return Ok(());
    }
    let run = load_run(cli)?;
    println!("run directory: {}", run.dir.display());
    match &cli.command {
        Command::Pretrain => {
            let out = commands::pretrain(&run)?;
            println!(
                "pretrain: {} epochs, null-key {} {:.4}",
                out.summary.epochs_run, out.summary.metric, out.summary.null_metric.mean
            );
            println!("wrote {}", out.checkpoint.display());
        }
        Command::Personalize => {
            let path = commands::personalize(&run, cli.checkpoint.as_deref())?;
            println!("wrote {}", path.display());
        }
        Command::Obfuscate => {
            let path = commands::obfuscate(&run, cli.checkpoint.as_deref())?;
            println!("wrote {}", path.display());
        }
        Command::Eval => {
            let (report, files) = commands::eval(&run, need_checkpoint(cli)?, format)?;
            for cell in &report.cells {
                println!(
                    "{:<10} {:<12} {:<8} {:.4} ± {:.4}",
                    cell.key_class, format!("{:?}", cell.objective).to_lowercase(), cell.metric, cell.summary.mean, cell.summary.stderr
                );
            }
            if let Some(sp) = &report.score_privacy {
                println!("score {:.3}  privacy {:.3}", sp.score.mean, sp.privacy.mean);
            }
            files.iter().for_each(|f| println!("wrote {}", f.display()));
        }
        Command::Leakage => {
            let (report, files) = commands::leakage(&run, need_checkpoint(cli)?, format)?;
            for p in &report.leakage {
                println!("d={:<4} {:.4} ± {:.4}", p.distance, p.summary.mean, p.summary.stderr);
            }
            files.iter().for_each(|f| println!("wrote {}", f.display()));
        }
        Command::Baseline => {
            let out = commands::baseline(&run, cli.checkpoint.as_deref(), format)?;
            let c = &out.comparison;
            println!("baseline params {}", c.baseline_params);
            if let Some(sp) = &c.baseline {
                println!("baseline score {:.3}  privacy {:.3}", sp.score.mean, sp.privacy.mean);
            }
            if let Some(sp) = &c.keyed {
                println!("keyed    score {:.3}  privacy {:.3}", sp.score.mean, sp.privacy.mean);
            }
            println!("wrote {}", out.checkpoint.display());
        }
        Command::Gradcheck => {
            let r = commands::gradcheck(&run)?;
            println!(
                "{} instances: dense {:.3e}, keyed {:.3e}, baseline {:.3e}, max {:.3e}",
                r.instances, r.dense, r.keyed, r.baseline, r.max_error
            );
        }
        Command::DeriveKey { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
