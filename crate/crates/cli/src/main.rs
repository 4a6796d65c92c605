//! `sparseattn`: train, analyse and cost top-k sparse attention encoders.

mod analyze;
mod artifacts;
mod flops;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit code for bad flags or configuration.
pub const EXIT_USAGE: u8 = 2;
/// Exit code for unreadable, missing or malformed data.
pub const EXIT_DATA: u8 = 3;
/// Exit code for training failures such as a non-finite loss.
pub const EXIT_TRAINING: u8 = 4;

#[derive(Parser)]
#[command(name = "sparseattn", version, about = "Top-k sparse attention experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its run directory.
    Train(train::TrainArgs),
    /// Print the analytic FLOPs table and write flops.json.
    Flops(flops::FlopsArgs),
    /// Aggregate finished runs into correlation, sparsity and entropy reports.
    Analyze(analyze::AnalyzeArgs),
    /// Write a synthetic corpus as train.tsv / validation.tsv.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, env = "SPARSEATTN_SEED", default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    size: usize,
    #[arg(long, default_value_t = 1000)]
    vocab_size: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    #[arg(long)]
    out: PathBuf,
}

/// A failed command: exit code plus a one-line diagnostic.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            msg: msg.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            msg: msg.into(),
        }
    }
}

impl From<sparseattn::Error> for Failure {
    fn from(e: sparseattn::Error) -> Self {
        use sparseattn::Error as E;
        let code = match &e {
            E::Config(_) => EXIT_USAGE,
            E::Data(_) | E::DataLine { .. } | E::Io { .. } => EXIT_DATA,
            E::Training { .. } => EXIT_TRAINING,
            _ => 1,
        };
        Self {
            code,
            msg: e.to_string(),
        }
    }
}

fn gen_data(args: GenDataArgs) -> Result<(), Failure> {
    let corpus = sparseattn::data::gen_synthetic(args.seed, args.size, args.vocab_size, args.max_len)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Failure::data(format!("{}: {e}", args.out.display())))?;
    sparseattn::data::write_tsv(&args.out.join("train.tsv"), &corpus.train)?;
    sparseattn::data::write_tsv(&args.out.join("validation.tsv"), &corpus.validation)?;
    println!(
        "wrote {} train / {} validation examples to {}",
        corpus.train.len(),
        corpus.validation.len(),
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(args) => train::run(args),
        Command::Flops(args) => flops::run(args),
        Command::Analyze(args) => analyze::run(args),
        Command::GenData(args) => gen_data(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
