mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;

#[derive(Parser, Debug)]
#[command(name = "ksat", version, about = "Knowledge-infused self-attention pipeline")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalOpts {
    /// Seed for every stochastic step
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Taxonomy JSON (concepts, outcome map, layer contexts); defaults to the bundled CSSRS tree
    #[arg(long, global = true)]
    pub taxonomy: Option<PathBuf>,

    /// Embedding dimension (64, or 16 for gradcheck, when omitted)
    #[arg(long, global = true)]
    pub dim: Option<usize>,

    /// Precomputed embeddings, one `id v1 v2 ...` record per line
    #[arg(long, global = true)]
    pub embeddings: Option<PathBuf>,

    /// Worker threads
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// Suppress progress messages on stderr
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with planted concept triggers
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mark concept presence per sentence and post
    Annotate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fit thresholds and fragment size against gold labels
        #[arg(long, conflicts_with_all = ["thetas", "frag_size"])]
        grid_search: bool,
        /// Lattice spacing for --grid-search
        #[arg(long, default_value_t = ksat_core::annotation::DEFAULT_THETA_STEP, requires = "grid_search")]
        theta_step: f64,
        /// Comma-separated per-concept thresholds
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        thetas: Option<Vec<f64>>,
        #[arg(long)]
        frag_size: Option<usize>,
    },
    /// Train a model on an annotated corpus
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long)]
        no_kg_bias: bool,
        /// Hold out this stratified fraction and report its metrics
        #[arg(long)]
        test_fraction: Option<f64>,
        /// Run record (config, loss trace, metrics, alpha); defaults to <out>.run.json
        #[arg(long)]
        run_out: Option<PathBuf>,
    },
    /// Accuracy, macro AUC and confusion matrix
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_kg_bias: bool,
    },
    /// Per-layer contribution and pairwise distance reports
    Report {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Closeness threshold; defaults to the 25th percentile of z_kcls distances
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Compare analytic gradients with central finite differences
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        posts: usize,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let g = &cli.global;
    match cli.command {
        Command::Synth { n, out } => commands::synth(g, n, &out),
        Command::Annotate {
            data,
            out,
            grid_search,
            theta_step,
            thetas,
            frag_size,
        } => {
            let mode = if grid_search {
                commands::AnnotateMode::GridSearch { step: theta_step }
            } else {
                commands::AnnotateMode::Fixed { thetas, frag_size }
            };
            commands::annotate(g, &data, &out, mode)
        }
        Command::Train {
            data,
            out,
            epochs,
            lr,
            no_kg_bias,
            test_fraction,
            run_out,
        } => {
            let run_out = run_out.unwrap_or_else(|| out.with_extension("run.json"));
            let opts = commands::TrainOpts {
                epochs,
                lr,
                kg_bias: !no_kg_bias,
                test_fraction,
            };
            commands::train(g, &data, &out, &run_out, &opts)
        }
        Command::Eval {
            data,
            model,
            out,
            no_kg_bias,
        } => commands::eval(g, &data, &model, &out, no_kg_bias),
        Command::Report {
            data,
            model,
            out_dir,
            epsilon,
        } => commands::report(g, &data, &model, &out_dir, epsilon),
        Command::Gradcheck { posts } => commands::gradcheck(g, posts),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            return commands::report_error(&CliError::Usage(first.trim_start_matches("error: ").to_string()));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => commands::report_error(&e),
    }
}
