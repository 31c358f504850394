use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bayesmtr::attention::Mode;
use bayesmtr::config::{RunConfig, SEED_ENV};
use bayesmtr::metrics::table_text;
use bayesmtr::pipeline;
use bayesmtr::Error;
use clap::{Parser, Subcommand};

/// Multi-target Bayesian transformer for longitudinal biomarker prediction.
#[derive(Debug, Parser)]
#[command(name = "bayesmtr", version)]
struct Cli {
    /// Run configuration (flat `section.key = value` file).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides the config file and BAYESMTR_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Use the mean attention weights everywhere (no sampling).
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic cohort and its ground-truth sidecar.
    Generate,
    /// Parse, filter and split a cohort CSV.
    Ingest,
    /// Train a model and write its checkpoint and report.
    Train,
    /// Point metrics and band coverage on the test split.
    Evaluate,
    /// Monte-Carlo predictions with uncertainty bands.
    Predict {
        /// One patient from the cohort; defaults to the whole test split.
        #[arg(long)]
        patient: Option<String>,
    },
    /// Train and evaluate the full model and both ablations.
    Ablate,
    /// Write per-head attention matrices for one patient.
    AttentionDump {
        /// Patient id from the cohort.
        #[arg(long)]
        patient: String,
    },
}

/// Prints a line, ignoring a closed stdout (e.g. output piped into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_)
        | Error::Parse { .. }
        | Error::Csv(_)
        | Error::InconsistentDemographics { .. }
        | Error::OutOfRange { .. }
        | Error::TooFewPatients(_)
        | Error::NoPreOnsetVisits(_)
        | Error::NoPostOnsetVisits(_)
        | Error::SequenceTooLong { .. }
        | Error::EmptySequence => 3,
        Error::Checkpoint(_) => 4,
        Error::UnknownPatient(_) => 5,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::parse("", Path::new("."))?,
    };
    let env = std::env::var(SEED_ENV).ok();
    cfg.resolve_seed(cli.seed, env.as_deref())?;
    if cli.deterministic {
        cfg.model.attention.mode = Mode::Deterministic;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Generate => {
            pipeline::cmd_generate(&cfg)?;
            say!("cohort: {}", cfg.paths.data.display());
            say!("ground truth: {}", cfg.paths.truth.display());
        }
        Command::Ingest => {
            let p = pipeline::cmd_ingest(&cfg)?;
            say!(
                "dropped {}; train {} / val {} / test {} patients",
                p.dropped,
                p.train.len(),
                p.val.len(),
                p.test.len()
            );
        }
        Command::Train => {
            let report = pipeline::cmd_train(&cfg)?;
            let last = report.epochs.last().expect("at least one epoch");
            say!(
                "{}: {} epochs in {:.1}s, final train loss {:.5}, best epoch {}",
                report.variant,
                report.epochs.len(),
                report.wall_clock_secs,
                last.train.total,
                report.best_epoch
            );
            say!("checkpoint: {}", cfg.paths.checkpoint.display());
        }
        Command::Evaluate => {
            let (report, calibration) = pipeline::cmd_evaluate(&cfg)?;
            say!("{}", table_text(std::slice::from_ref(&report), false).trim_end());
            say!("band coverage (z = {}, T = {}): {:?}", calibration.z, calibration.samples, calibration.coverage);
        }
        Command::Predict { patient } => {
            let path = pipeline::cmd_predict(&cfg, patient.as_deref())?;
            say!("predictions: {}", path.display());
        }
        Command::Ablate => {
            let reports = pipeline::cmd_ablate(&cfg)?;
            say!("{}", table_text(&reports, false).trim_end());
        }
        Command::AttentionDump { patient } => {
            let files = pipeline::cmd_attention_dump(&cfg, patient)?;
            for f in files {
                say!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
