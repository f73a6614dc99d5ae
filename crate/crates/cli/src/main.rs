//! `otgdl` command-line front end.

mod commands;
mod provenance;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "otgdl", version, about = "Optimal-transport graph dictionary learning with amortized plan prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainMode {
    Agdl,
    Baseline,
    GdlExact,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Agdl => "agdl",
            TrainMode::Baseline => "baseline",
            TrainMode::GdlExact => "gdl-exact",
        }
    }
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{s:?} is not a number: {e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("alpha must lie in [0, 1], got {v}"))
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus: template, native and common graphs, manifest.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the transport-plan predictor; writes a checkpoint and a trace CSV.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus directory or manifest file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn a dictionary; writes a checkpoint and a trace CSV.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "agdl")]
        mode: TrainMode,
        /// Predictor checkpoint, required in agdl mode.
        #[arg(long)]
        predictor: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Unmix every graph of the corpus into an embedding table CSV.
    Embed {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        predictor: Option<PathBuf>,
        /// Single alpha; the config grid is used when absent.
        #[arg(long, value_parser = unit_interval)]
        alpha: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Nearest-neighbour probes and atom statistics over an embedding table.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        embeddings: PathBuf,
        /// Output directory for probes.csv and atom_stats.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Export dictionary atoms per alpha as graph files and one CSV.
    Atoms {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_parser = unit_interval)]
        alpha: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render loss curves and accuracy-versus-alpha charts from CSV outputs.
    Report {
        /// Directory holding *.trace.csv and probes.csv files.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(commands::Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
