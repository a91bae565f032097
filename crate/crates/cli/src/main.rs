//! `clasp`: data generation, training, grounding, evaluation, servoing and
//! reporting, one run directory per invocation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{EvalPredArgs, GenDataArgs, GroundArgs, PcaArgs, ReportArgs, ServoArgs, SweepArgs, TrainArgs, TransplantArgs};

#[derive(Parser, Debug)]
#[command(name = "clasp", version, about = "Learn an agent's action space from unlabeled video")]
struct Cli {
    /// Flat key=value file supplying defaults for the subcommand's options.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Parent directory of per-invocation run directories.
    #[arg(long, global = true, env = "CLASP_RUN_ROOT", default_value = "runs")]
    run_root: PathBuf,
    /// Use this run directory instead of a fresh timestamped one.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Render a reacher dataset.
    GenData(GenDataArgs),
    /// Train a predictor (clasp, no-comp or supervised).
    Train(TrainArgs),
    /// Fit the action grounding maps on a labeled subset.
    Ground(GroundArgs),
    /// Action-conditioned prediction with baselines.
    EvalPred(EvalPredArgs),
    /// Roll donor motion out from recipient context.
    Transplant(TransplantArgs),
    /// Visual servoing episodes with the random control.
    Servo(ServoArgs),
    /// Principal components of inferred latents.
    Pca(PcaArgs),
    /// Label-efficiency study across budgets.
    Sweep(SweepArgs),
    /// Collect reports into tables and figures.
    #[command(alias = "make-paper-figs")]
    Report(ReportArgs),
}

const SUBCOMMANDS: [&str; 10] = ["gen-data", "train", "ground", "eval-pred", "transplant", "servo", "pca", "sweep", "report", "make-paper-figs"];

fn run() -> anyhow::Result<()> {
    let args = config::merge_config_args(std::env::args().collect(), &SUBCOMMANDS)?;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // help and version are successes; everything else is a usage error
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let ctx = commands::Ctx { run_root: cli.run_root, run_dir: cli.run_dir };
    match cli.cmd {
        Cmd::GenData(a) => commands::gen_data(&ctx, a),
        Cmd::Train(a) => commands::train(&ctx, a),
        Cmd::Ground(a) => commands::ground(&ctx, a),
        Cmd::EvalPred(a) => commands::eval_pred(&ctx, a),
        Cmd::Transplant(a) => commands::transplant(&ctx, a),
        Cmd::Servo(a) => commands::servo(&ctx, a),
        Cmd::Pca(a) => commands::pca(&ctx, a),
        Cmd::Sweep(a) => commands::sweep(&ctx, a),
        Cmd::Report(a) => commands::report(&ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.chain().find_map(|c| c.downcast_ref::<clasp_core::Error>()).map_or(1, |c| c.exit_code());
            ExitCode::from(code as u8)
        }
    }
}
