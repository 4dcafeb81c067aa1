//! Command-line front end for the experiment harness.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fsmcmc::harness::{self, ExperimentPlan};

#[derive(Parser)]
#[command(name = "fsmcmc", version, about = "Function-space MCMC for wide Bayesian neural networks")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Execute every cell of a plan.
    Run(PlanArgs),
    /// Recompute diagnostics and CSVs from stored chains.
    Diagnose(OutArgs),
    /// Continue a plan from its checkpoints and completed chains.
    Resume(PlanArgs),
    /// Emit figure tables from a finished run.
    PlotData(OutArgs),
}

#[derive(Args)]
struct PlanArgs {
    /// Plan file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    common: OutArgs,
    /// Worker threads for cell-level parallelism.
    #[arg(long)]
    workers: Option<usize>,
    /// CIFAR-10 binary batch file.
    #[arg(long, conflicts_with_all = ["synthetic", "teacher"])]
    data: Option<PathBuf>,
    /// Synthetic Gaussian data of shape `n,m,k`.
    #[arg(long, conflicts_with = "teacher")]
    synthetic: Option<String>,
    /// Teacher-network data of shape `n,m,k`.
    #[arg(long)]
    teacher: Option<String>,
    /// Comma-separated chain seeds.
    #[arg(long)]
    seed: Option<String>,
}

#[derive(Args)]
struct OutArgs {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sequential execution; results are bitwise reproducible.
    #[arg(long)]
    strict: bool,
}

const DEFAULT_OUT: &str = "results";

fn build_plan(a: &PlanArgs, resume: bool) -> fsmcmc::Result<ExperimentPlan> {
    let mut plan = match (&a.config, &a.common.out) {
        (Some(path), _) => ExperimentPlan::from_file(path)?,
        (None, Some(out)) if resume => harness::load_plan(out)?,
        (None, None) if resume => harness::load_plan(DEFAULT_OUT.as_ref())?,
        _ => ExperimentPlan::default(),
    };
    if let Some(out) = &a.common.out {
        plan.out_dir = out.clone();
    }
    if a.common.strict {
        plan.strict = true;
    }
    if let Some(w) = a.workers {
        plan.set("workers", &w.to_string())?;
    }
    if let Some(d) = &a.data {
        plan.data = harness::DataSource::Cifar10(d.clone());
    }
    if let Some(s) = &a.synthetic {
        plan.set("synthetic", s)?;
    }
    if let Some(s) = &a.teacher {
        plan.set("teacher", s)?;
    }
    if let Some(s) = &a.seed {
        plan.set("seeds", s)?;
    }
    plan.validate()?;
    Ok(plan)
}

fn out_dir(a: &OutArgs) -> PathBuf {
    a.out.clone().unwrap_or_else(|| DEFAULT_OUT.into())
}

fn dispatch(cli: Cli) -> fsmcmc::Result<i32> {
    let report = match cli.verb {
        Verb::Run(a) => harness::run_plan(&build_plan(&a, false)?)?,
        Verb::Resume(a) => harness::resume_plan(&build_plan(&a, true)?)?,
        Verb::Diagnose(a) => harness::diagnose(&out_dir(&a), a.strict)?,
        Verb::PlotData(a) => {
            for p in harness::emit_plot_data(&out_dir(&a))? {
                println!("{}", p.display());
            }
            return Ok(0);
        }
    };
    for c in &report.cells {
        match &c.status {
            harness::CellStatus::Complete => {}
            harness::CellStatus::Incomplete => eprintln!("{}: incomplete", c.cell.name()),
            harness::CellStatus::Failed(e) => eprintln!("{}: failed: {e}", c.cell.name()),
        }
    }
    println!(
        "{} of {} cells complete",
        report.cells.len() - report.failures(),
        report.cells.len()
    );
    Ok(report.exit_code())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            // Per-cell failures never reach here; any error that aborts the
            // whole plan is reported as a configuration error.
            ExitCode::from(2)
        }
    }
}
