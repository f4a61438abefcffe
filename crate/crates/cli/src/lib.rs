//! The `bvqa` command line. Exit codes: 0 success, 2 configuration or usage
//! errors, 3 data errors, 4 numeric failures.

use std::ffi::OsString;
use std::path::PathBuf;

use bvqa_core::Stream;
use clap::{Args, Parser, Subcommand};

mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use config::{RunConfig, CONFIG_ENV};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "bvqa", version, about = "Blind video quality assessment: training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by commands that train or sample.
#[derive(Debug, Clone, Args)]
pub struct Seeded {
    /// JSON run configuration (defaults to $BVQA_CONFIG)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Random seed, overriding the config
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads, overriding the config
    #[arg(long)]
    pub threads: Option<usize>,
}

/// Flags shared by commands that only score.
#[derive(Debug, Clone, Args)]
pub struct Parallel {
    /// JSON run configuration (defaults to $BVQA_CONFIG)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads, overriding the config
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pool raw [T, H, W, C] activations into [T, 2C] GAP/GSP sequences
    Pool {
        /// Directory of activation tensor files
        #[arg(long)]
        activations: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Stream the activations belong to
        #[arg(long, value_parser = ["spatial", "motion"])]
        stream: String,
    },
    /// Subsample spatial sequences and concatenate them with motion sequences
    Fuse {
        /// Directory of pooled spatial sequences
        #[arg(long)]
        spatial: PathBuf,
        /// Directory of pooled motion sequences with matching file names
        #[arg(long)]
        motion: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a manifest 60/20/20 into train, val and test manifests
    Split {
        /// Manifest listing every video
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Seeded,
    },
    /// Fine-tune the temporal head on one or more databases
    Train {
        /// Training manifest, repeatable for mixed-database training
        #[arg(long = "train", required = true)]
        train: Vec<PathBuf>,
        /// Validation manifest used for model selection
        #[arg(long)]
        val: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Number of epochs
        #[arg(long)]
        epochs: Option<usize>,
        /// Videos per list
        #[arg(long)]
        batch_size: Option<usize>,
        /// Initial learning rate
        #[arg(long)]
        lr: Option<f64>,
        /// Weight of the SRCC loss term
        #[arg(long)]
        lambda: Option<f64>,
        /// Stop once validation SRCC reaches this value
        #[arg(long)]
        stop_srcc: Option<f64>,
        /// Independent runs with consecutive seeds
        #[arg(long)]
        repetitions: Option<usize>,
        #[command(flatten)]
        common: Seeded,
    },
    /// Report SRCC and PLCC of a model or a score file against a manifest
    Eval {
        /// Manifest with ground-truth MOS
        #[arg(long)]
        manifest: PathBuf,
        /// Trained model to score the manifest with
        #[arg(long, conflicts_with = "scores", required_unless_present = "scores")]
        model: Option<PathBuf>,
        /// Precomputed score file (JSON lines of video_id and Q_p)
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Also write the report as JSON
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        common: Parallel,
    },
    /// Score every video of a manifest
    Predict {
        /// Manifest of videos to score
        #[arg(long)]
        manifest: PathBuf,
        /// Trained model
        #[arg(long)]
        model: PathBuf,
        /// Output score file (JSON lines)
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Parallel,
    },
    /// CORAL distance between the time-averaged features of two manifests
    Coral {
        /// Source-domain manifest
        #[arg(long)]
        source: PathBuf,
        /// Target-domain manifest
        #[arg(long)]
        target: PathBuf,
    },
    /// Convex combination of two score files, or a sweep over the weight
    Ensemble {
        /// First score file, weighted by kappa
        #[arg(long)]
        a: PathBuf,
        /// Second score file, weighted by 1 - kappa
        #[arg(long)]
        b: PathBuf,
        /// Weight of the first score file
        #[arg(long, conflicts_with = "sweep", required_unless_present = "sweep")]
        kappa: Option<f64>,
        /// Evaluate kappa = 0, 0.01, ..., 1 against --manifest
        #[arg(long, requires = "manifest")]
        sweep: bool,
        /// Validation manifest for the sweep
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output file: scores for --kappa, the sweep table for --sweep
        #[arg(long, required_unless_present = "sweep")]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences
    Gradcheck {
        /// Number of seeds to run, starting at --seed
        #[arg(long)]
        cases: Option<u64>,
        /// Also write the per-op errors as JSON
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Seeded,
    },
    /// Pre-train the desk-scale quality model on an image pair list
    Pretrain {
        /// Pair list JSON
        #[arg(long)]
        pairs: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Number of epochs
        #[arg(long)]
        epochs: Option<usize>,
        /// Pairs per batch
        #[arg(long)]
        batch_size: Option<usize>,
        /// Initial learning rate
        #[arg(long)]
        lr: Option<f64>,
        /// Hidden width of the model
        #[arg(long)]
        hidden: Option<usize>,
        #[command(flatten)]
        common: Seeded,
    },
}

/// The clap command tree, for help rendering and introspection.
pub fn command() -> clap::Command {
    <Cli as clap::CommandFactory>::command()
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Pool { activations, out, stream } => {
            let stream: Stream = stream.parse()?;
            commands::pool(&activations, &out, stream)
        }
        Command::Fuse { spatial, motion, out } => commands::fuse(&spatial, &motion, &out),
        Command::Split { manifest, out, common } => commands::split(&manifest, &out, &common),
        Command::Train {
            train,
            val,
            out,
            epochs,
            batch_size,
            lr,
            lambda,
            stop_srcc,
            repetitions,
            common,
        } => commands::train(
            &train,
            &val,
            &out,
            commands::TrainOverrides {
                epochs,
                batch_size,
                lr,
                lambda,
                stop_srcc,
                repetitions,
            },
            &common,
        ),
        Command::Eval {
            manifest,
            model,
            scores,
            report,
            common,
        } => commands::eval(&manifest, model.as_deref(), scores.as_deref(), report.as_deref(), &common),
        Command::Predict {
            manifest,
            model,
            out,
            common,
        } => commands::predict(&manifest, &model, &out, &common),
        Command::Coral { source, target } => commands::coral(&source, &target),
        Command::Ensemble {
            a,
            b,
            kappa,
            sweep: _,
            manifest,
            out,
        } => commands::ensemble(&a, &b, kappa, manifest.as_deref(), out.as_deref()),
        Command::Gradcheck { cases, out, common } => commands::gradcheck(cases, out.as_deref(), &common),
        Command::Pretrain {
            pairs,
            out,
            epochs,
            batch_size,
            lr,
            hidden,
            common,
        } => commands::pretrain(
            &pairs,
            &out,
            commands::PretrainOverrides {
                epochs,
                batch_size,
                lr,
                hidden,
            },
            &common,
        ),
    }
}
