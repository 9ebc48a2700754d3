use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

use commands::CliError;

#[derive(Parser)]
#[command(name = "morphnas", version, about = "Network-morphism architecture search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run or resume a search.
    Search(SearchArgs),
    /// Print the edit distance between two architectures and its parts.
    Distance {
        a: PathBuf,
        b: PathBuf,
        /// Weight of the skip-connection term.
        #[arg(long, default_value_t = morphnas_core::kernel::DEFAULT_LAMBDA)]
        lambda: f64,
    },
    /// Write the kernel and cost-similarity matrices of a run as CSV.
    Kernel {
        run_dir: PathBuf,
        /// Directory for K.csv and P.csv; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply one morphism, or a JSON list of them, to an architecture.
    Morph {
        arch: PathBuf,
        op: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Copy an evaluated architecture out of a run directory.
    Export {
        run_dir: PathBuf,
        /// Defaults to the lowest-cost record.
        arch_id: Option<u64>,
        /// Destination; defaults to arch_<id>.json in the current directory.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Write the default starting architecture.
    DefaultArch {
        #[arg(long, short)]
        out: PathBuf,
        /// Input height, width and channels.
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [32, 32, 3])]
        input_shape: Vec<u32>,
        #[arg(long, default_value_t = 10)]
        classes: u32,
    },
}

#[derive(clap::Args)]
pub struct SearchArgs {
    /// JSON search configuration; defaults apply to missing fields.
    #[arg(long, conflicts_with = "resume")]
    config: Option<PathBuf>,
    /// Output directory for a fresh run.
    #[arg(long, alias = "output", conflicts_with = "resume")]
    out: Option<PathBuf>,
    /// Continue the run stored in this directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Evaluations in this invocation, not counting the initial architecture.
    #[arg(long)]
    evals: Option<u32>,
    /// Stop starting new evaluations after this many seconds.
    #[arg(long)]
    time_budget: Option<f64>,
    #[arg(long, conflicts_with = "resume")]
    seed: Option<u64>,
    /// bayesian, random or bfs.
    #[arg(long, conflicts_with = "resume")]
    strategy: Option<String>,
    /// Generate the next candidate only after the previous result arrives.
    #[arg(long, conflicts_with = "resume")]
    no_pipeline: bool,
    /// Suppress the per-step table.
    #[arg(long, short)]
    quiet: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Search(args) => commands::search(args),
        Command::Distance { a, b, lambda } => commands::distance(&a, &b, lambda),
        Command::Kernel { run_dir, out } => commands::kernel(&run_dir, out.as_deref()),
        Command::Morph { arch, op, out } => commands::morph(&arch, &op, &out),
        Command::Export { run_dir, arch_id, out } => commands::export(&run_dir, arch_id, out),
        Command::DefaultArch {
            out,
            input_shape,
            classes,
        } => commands::default_arch(&out, &input_shape, classes),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !matches!(e, CliError::Interrupted) {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
