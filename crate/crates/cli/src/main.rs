//! `humsearch`: synthesize, preprocess, train, index, query and evaluate.
//!
//! Results go to stdout; logs and errors go to stderr. Exit codes: 0 on
//! success, 1 when some input data failed, 2 on configuration or usage errors.

mod commands;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Failure;

#[derive(Parser, Debug)]
#[command(name = "humsearch", version, about = "Query-by-humming retrieval engine")]
struct Cli {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic song/hum corpus as WAV files plus labels.tsv.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Hum rendition family; overrides the config.
        #[arg(long)]
        hum_variant: Option<u64>,
    },
    /// Convert every WAV under a directory into a mel array file.
    Preprocess {
        #[arg(long)]
        wavs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the embedder on mel files; writes a checkpoint and a history CSV.
    Train {
        /// Mel directories; repeatable.
        #[arg(long, required = true)]
        mels: Vec<PathBuf>,
        /// Label files mapping hum files to song ids; repeatable. Files not
        /// listed are labeled by their own stem.
        #[arg(long)]
        labels: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed every mel file under a directory into an embedding table.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the configured index over an embedding table.
    BuildIndex {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the top-k songs for one WAV or mel file.
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(short, long, default_value_t = 10)]
        k: usize,
    },
    /// Evaluate labeled hums; prints MRR@10 and writes report.tsv and summary.json.
    Eval {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        hums: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
