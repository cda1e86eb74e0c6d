use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use fusehar::commands::{evaluate_checkpoint, run_experiment, RunSummary};
use fusehar::compare::compare_runs;
use fusehar::plots::emit_plots;
use fusehar::{exit_code, RunArgs, EXIT_CONFIG};
use fusehar_core::eval::SUMMARY_COLUMNS;
use fusehar_core::experiment::ExperimentKind;
use fusehar_core::training::Condition;

/// Two-stage IMU + video activity recognition experiments.
///
/// The dataset root comes from the config's `data.root` or, failing that,
/// the FUSEHAR_DATA_ROOT environment variable. Exit status: 0 success,
/// 1 config error, 2 runtime failure.
#[derive(Debug, Parser)]
#[command(name = "fusehar", version)]
struct Cli {
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,

    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Stage-1 pre-training and, for FUSED, stage-2 fine-tuning on the full
    /// training split; scores the configured condition on the test split.
    Train(RunArgs),
    /// Scores a saved checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// A `.safetensors` file written under `checkpoints/` by a training run.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// IMU, VIDEO or FUSED; defaults to what the checkpoint holds.
        #[arg(long)]
        condition: Option<Condition>,
    },
    /// Full training on stratified subsets of the training split, for every
    /// configured ratio and seed.
    SweepRatio(RunArgs),
    /// Hides classes from one modality's training data and scores the
    /// single-modality and fused models on all classes.
    ZeroShot(RunArgs),
    /// SVG figures from the summary.csv files found under RESULTS.
    Plot {
        #[arg(required = true, value_name = "RESULTS")]
        results: Vec<PathBuf>,
        #[arg(long, value_name = "DIR", default_value = "plots")]
        output: PathBuf,
    },
    /// Comparison table (CSV and text) of two or more summaries.
    Compare {
        #[arg(required = true, value_name = "RESULTS")]
        results: Vec<PathBuf>,
        #[arg(long, value_name = "DIR", default_value = "comparison")]
        output: PathBuf,
    },
}

fn print_reports(run: &RunSummary) {
    println!("{}", SUMMARY_COLUMNS.join(","));
    for r in &run.reports {
        println!("{}", r.summary_row().join(","));
    }
    println!("results in {}", run.output_dir.display());
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train(args) => print_reports(&run_experiment(&args, ExperimentKind::Baseline, "train")?),
        Command::SweepRatio(args) => print_reports(&run_experiment(&args, ExperimentKind::RatioSweep, "sweep-ratio")?),
        Command::ZeroShot(args) => print_reports(&run_experiment(&args, ExperimentKind::ZeroShot, "zero-shot")?),
        Command::Evaluate {
            run,
            checkpoint,
            condition,
        } => print_reports(&evaluate_checkpoint(&run, &checkpoint, condition)?),
        Command::Plot { results, output } => {
            for path in emit_plots(&results, &output)? {
                println!("{}", path.display());
            }
        }
        Command::Compare { results, output } => {
            let table = compare_runs(&results, &output)?;
            print!("{}", table.to_text());
            println!("written to {}", output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { 0 });
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
