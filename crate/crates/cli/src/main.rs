mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use posh::LengthScaling;

#[derive(Parser, Debug)]
#[command(name = "posh", version, about = "Protein structure search with learned binary hash codes")]
pub struct Cli {
    /// Worker threads (falls back to POSH_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// More log output on stderr (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

/// Run configuration sources shared by the model-facing subcommands.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// `key = value` config file applied over the defaults.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set lr=0.001`; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parse a directory of PDB files into a chain file.
    Ingest {
        dir: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Chain identifier to read from every file (default: first chain).
        #[arg(long)]
        chain: Option<String>,
    },
    /// Build residue graphs from a chain file.
    Featurize {
        chains: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Identity-alignment TM-scores.
    Tmscore {
        chains: PathBuf,
        /// All-pairs similarity matrix over residue i <-> residue i.
        #[arg(long, conflicts_with = "fragments", required_unless_present = "fragments")]
        pairs: bool,
        /// Minimum substructure length per chain (TM of window vs chain >= alpha).
        #[arg(long)]
        fragments: bool,
        #[arg(long, default_value_t = 0.9)]
        alpha: f64,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Train an encoder.
    Train {
        graphs: PathBuf,
        sim: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Chain file matching the graphs; enables substructure positives.
        #[arg(long)]
        chains: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Binary codes for every graph, with a trained checkpoint.
    Encode {
        checkpoint: PathBuf,
        graphs: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Build a search index from a codes file.
    Index {
        codes: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Top-k search for a codes file or a PDB structure.
    Search {
        index: PathBuf,
        /// Codes file (one query per line) or a `.pdb` file.
        #[arg(long)]
        query: PathBuf,
        #[arg(short, default_value_t = 10)]
        k: usize,
        /// Checkpoint used to encode a structure query.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `divide` or `multiply` the hamming distance by the length penalty.
        #[arg(long, default_value = "divide")]
        length_scaling: LengthScaling,
    },
    /// Retrieval metrics of query codes against an index.
    Eval {
        index: PathBuf,
        queries: PathBuf,
        sim: PathBuf,
        #[arg(long, default_value = "divide")]
        length_scaling: LengthScaling,
    },
    /// Generate a synthetic family dataset.
    Synth {
        /// `key = value` family spec; defaults when omitted.
        spec: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("posh: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
