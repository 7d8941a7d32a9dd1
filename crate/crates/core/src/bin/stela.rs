use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use stela::cli::{self, CliOptions, OutputFormat};

#[derive(Parser)]
#[command(
    name = "stela",
    about = "Sparse temporal local attention: data prep, training, ablations, benchmarks"
)]
struct Args {
    #[command(subcommand)]
    verb: Verb,
    /// Flat `key = value` experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Worker threads; 1 gives bit-reproducible reports.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Verb {
    /// Bin the configured data and cache voxel sets.
    Prepare,
    /// Train and evaluate every entry of a config grid.
    Ablate,
    /// Time local against global attention.
    Bench,
    /// Run the three-stage schedule on the configured data.
    TrainToy,
    /// Evaluate a checkpoint on the held-out split.
    Eval,
    /// Write the neighborhood table of one training sample.
    DumpNeighborhood {
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let opts = CliOptions {
        config: args.config,
        seed: args.seed,
        out: args.out,
        format: match args.format {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
        },
    };
    let result = match args.verb {
        Verb::Prepare => cli::prepare(&opts).map(|_| ()),
        Verb::Ablate => cli::ablate(&opts).map(|_| ()),
        Verb::Bench => cli::bench(&opts).map(|_| ()),
        Verb::TrainToy => cli::train_toy(&opts).map(|_| ()),
        Verb::Eval => cli::eval(&opts).map(|_| ()),
        Verb::DumpNeighborhood { sample } => cli::dump_neighborhood(&opts, sample).map(|_| ()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
