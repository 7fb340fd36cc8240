//! `zsqd` drives the full data-free quantization pipeline: render a shapes
//! dataset, train the full-precision teacher, invert it into a synthetic
//! calibration set, distill a low-bit student, and score or compare the
//! results. Every command writes its artifacts plus a `run.json`
//! provenance record under `--out`.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation error, 3 training
//! divergence.

mod commands;
mod grid;
mod provenance;
mod report;

use clap::Parser;

#[derive(Parser)]
#[command(name = "zsqd", version, about, propagate_version = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Subcommand)]
enum Command {
    /// Render a synthetic shapes detection dataset
    GenData(commands::GenDataArgs),
    /// Train the full-precision teacher detector
    TrainTeacher(commands::TrainTeacherArgs),
    /// Invert a frozen teacher into a synthetic calibration set
    Synthesize(commands::SynthesizeArgs),
    /// Distill a low-bit student from the teacher on a calibration set
    Qat(commands::QatArgs),
    /// Score a checkpoint on a dataset split
    Eval(commands::EvalArgs),
    /// Run the calibration-method grid and tabulate student accuracy
    CompareBaselines(grid::CompareArgs),
    /// Render every CSV artifact under a directory as plain-text tables
    Report(report::ReportArgs),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage_error = !matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if usage_error { 1 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => commands::cmd_gen_data(a),
        Command::TrainTeacher(a) => commands::cmd_train_teacher(a),
        Command::Synthesize(a) => commands::cmd_synthesize(a),
        Command::Qat(a) => commands::cmd_qat(a),
        Command::Eval(a) => commands::cmd_eval(a),
        Command::CompareBaselines(a) => grid::cmd_compare_baselines(a),
        Command::Report(a) => report::cmd_report(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                zsqd::Error::Diverged(_) => 3,
                _ => 2,
            }
        }
    }
}
