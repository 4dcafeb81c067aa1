//! Width and step-size sweeps: runs every `(sampler, width, beta, seed)`
//! cell of an [`ExperimentPlan`] and persists chains, per-cell diagnostics
//! and a run manifest under the plan's output directory.
//!
//! Output layout (CSV schema version [`CSV_SCHEMA_VERSION`]):
//!
//! ```text
//! plan.cfg                  canonical plan
//! manifest.json             hashes, seeds, versions, cell status
//! results.csv               one row per completed cell
//! acceptance_<cell>.csv     chain,window,end_step,acceptance_rate
//! trace_<cell>.csv          step,pc1..pcK (chain 0)
//! rhat_<cell>.csv           step,rhat_mean,rhat_sd,rhat_min,rhat_max,undefined
//! chains/<cell>_c<i>.chain  stored samples
//! checkpoints/<cell>_c<i>.ckpt
//! ```

mod output;
mod plan;
mod store;

use std::path::{Path, PathBuf};

use crate::dataset::{subsample_indices, Dataset};
use crate::diagnostics::{ess, gelman_rubin, pc_traces, rhat_series};
use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::par;
use crate::posterior::PosteriorTarget;
use crate::samplers::{resume_chain, run_chain, Chain, Init, RunOptions, SamplerConfig, Target};

pub use output::{emit_plot_data, read_results, PLOT_FILES};
pub use plan::{parse_synthetic, Cell, DataSource, ExperimentPlan};
pub use store::{chain_from_bytes, chain_to_bytes, load_chain, save_chain, write_atomic};

pub const CSV_SCHEMA_VERSION: u32 = 1;

/// Summary of one completed cell, as written to `results.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub cell: Cell,
    pub steps: usize,
    pub n_chains: usize,
    /// Post burn-in acceptance rate, averaged over chains.
    pub acceptance_rate: f64,
    /// Per-step ESS over monitored coordinates; chain-averaged mean, and
    /// the extreme min and max across chains.
    pub mean_ess: f64,
    pub min_ess: f64,
    pub max_ess: f64,
    pub rhat_mean: Option<f64>,
    pub rhat_sd: Option<f64>,
    /// Seconds, summed over chains.
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellStatus {
    Complete,
    /// Some chain stopped early and left a checkpoint.
    Incomplete,
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct CellReport {
    pub cell: Cell,
    pub status: CellStatus,
    pub row: Option<ResultRow>,
    /// Per-cell files written, relative to the output directory.
    pub outputs: Vec<String>,
    /// Chain files the outputs were computed from.
    pub inputs: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub cells: Vec<CellReport>,
}

impl RunReport {
    pub fn rows(&self) -> Vec<&ResultRow> {
        self.cells.iter().filter_map(|c| c.row.as_ref()).collect()
    }

    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.status != CellStatus::Complete).count()
    }

    /// 0 when every cell completed, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        i32::from(self.failures() > 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Mode {
    Run,
    Resume,
    Diagnose,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Run => "run",
            Mode::Resume => "resume",
            Mode::Diagnose => "diagnose",
        }
    }
}

/// Executes every cell from scratch.
pub fn run_plan(plan: &ExperimentPlan) -> Result<RunReport> {
    execute(plan, Mode::Run)
}

/// Reuses complete chain files, continues chains from checkpoints and runs
/// the rest. `halt_after` is ignored.
pub fn resume_plan(plan: &ExperimentPlan) -> Result<RunReport> {
    let mut plan = plan.clone();
    plan.halt_after = None;
    execute(&plan, Mode::Resume)
}

/// Recomputes diagnostics and CSVs from the chain files in `out_dir`.
pub fn diagnose(out_dir: &Path, strict: bool) -> Result<RunReport> {
    let mut plan = load_plan(out_dir)?;
    plan.out_dir = out_dir.to_path_buf();
    plan.strict = strict;
    execute(&plan, Mode::Diagnose)
}

/// The plan stored by a previous run in `out_dir`.
pub fn load_plan(out_dir: &Path) -> Result<ExperimentPlan> {
    ExperimentPlan::from_file(&out_dir.join("plan.cfg"))
}

/// Creates the output tree and checks it is writable.
fn prepare_out_dir(dir: &Path) -> Result<()> {
    let unwritable = |e: std::io::Error| {
        Error::Config(format!("output directory {} is not writable: {e}", dir.display()))
    };
    for sub in ["", "chains", "checkpoints"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(unwritable)?;
    }
    let probe = dir.join(".write-probe");
    std::fs::write(&probe, b"").map_err(unwritable)?;
    std::fs::remove_file(&probe).map_err(unwritable)
}

fn network_for(plan: &ExperimentPlan, data: &Dataset, width: usize) -> Result<NetworkConfig> {
    NetworkConfig::wide_default(data.m(), vec![width; plan.depth], data.k(), plan.activation)
}

fn chain_file(cell: &Cell, i: usize) -> String {
    format!("chains/{}_c{i}.chain", cell.name())
}

fn checkpoint_file(cell: &Cell, i: usize) -> String {
    format!("checkpoints/{}_c{i}.ckpt", cell.name())
}

/// Seeded choice of `count` coordinates out of `total`, sorted; `None`
/// keeps everything.
fn monitored(total: usize, count: usize, seed: u64) -> Option<Vec<usize>> {
    (count < total).then(|| {
        let mut idx = subsample_indices(total, count, seed ^ 0x006d_6f6e_6974_6f72);
        idx.sort_unstable();
        idx
    })
}

fn execute(plan: &ExperimentPlan, mode: Mode) -> Result<RunReport> {
    plan.validate()?;
    prepare_out_dir(&plan.out_dir)?;
    let data = match mode {
        Mode::Diagnose => None,
        _ => {
            write_atomic(&plan.out_dir.join("plan.cfg"), plan.to_config_string().as_bytes())?;
            Some(plan.load_dataset()?)
        }
    };
    let cells = plan.cells();
    let reports: Vec<CellReport> = par::with_workers(plan.workers, plan.strict, || {
        par::map_indices(cells.len(), plan.strict, |i| {
            run_cell(plan, data.as_ref(), &cells[i], mode)
        })
    });
    let report = RunReport { cells: reports };
    output::write_results(plan, &report)?;
    output::write_manifest(plan, data.as_ref(), &report, mode.name())?;
    Ok(report)
}

fn run_cell(plan: &ExperimentPlan, data: Option<&Dataset>, cell: &Cell, mode: Mode) -> CellReport {
    let inputs: Vec<String> = (0..plan.n_chains).map(|i| chain_file(cell, i)).collect();
    let failed = |e: Error| CellReport {
        cell: *cell,
        status: CellStatus::Failed(e.to_string()),
        row: None,
        outputs: Vec::new(),
        inputs: Vec::new(),
    };
    let chains = match cell_chains(plan, data, cell, mode) {
        Ok(Some(c)) => c,
        Ok(None) => {
            return CellReport {
                cell: *cell,
                status: CellStatus::Incomplete,
                row: None,
                outputs: Vec::new(),
                inputs: Vec::new(),
            }
        }
        Err(e) => return failed(e),
    };
    match summarize(plan, cell, &chains) {
        Ok((row, outputs)) => CellReport {
            cell: *cell,
            status: CellStatus::Complete,
            row: Some(row),
            outputs,
            inputs,
        },
        Err(e) => failed(e),
    }
}

/// All chains of a cell, or `None` if any stopped early.
fn cell_chains(
    plan: &ExperimentPlan,
    data: Option<&Dataset>,
    cell: &Cell,
    mode: Mode,
) -> Result<Option<Vec<Chain>>> {
    let out = &plan.out_dir;
    let Some(data) = data else {
        let chains = (0..plan.n_chains)
            .map(|i| load_chain(&out.join(chain_file(cell, i))))
            .collect::<Result<Vec<_>>>()?;
        if chains.iter().any(|c| !c.is_complete()) {
            return Err(Error::Format(format!("{} has incomplete chain files", cell.name())));
        }
        return Ok(Some(chains));
    };
    let target = PosteriorTarget::new(network_for(plan, data, cell.width)?, data.clone(), plan.noise_var, plan.mode)?;
    let config = SamplerConfig::new(cell.sampler, cell.beta, plan.steps, plan.burn_in, plan.thin, cell.seed)?;
    let total = target.dim() + target.completion_len();
    let monitor = monitored(total, plan.monitor, cell.seed);
    let checkpointing = plan.checkpoint_every > 0 || plan.halt_after.is_some();
    let chains = par::map_indices(plan.n_chains, plan.strict, |i| -> Result<Chain> {
        let ckpt = out.join(checkpoint_file(cell, i));
        let opts = RunOptions {
            monitor: monitor.clone(),
            checkpoint_path: checkpointing.then(|| ckpt.clone()),
            checkpoint_every: plan.checkpoint_every,
            halt_after: plan.halt_after,
            chain_index: i as u64,
            ..RunOptions::default()
        };
        let path = out.join(chain_file(cell, i));
        if mode == Mode::Resume {
            if let Ok(c) = load_chain(&path) {
                if c.is_complete() && c.config_hash == crate::samplers::config_hash(&target, &config, &opts) {
                    return Ok(c);
                }
            }
        }
        let chain = if mode == Mode::Resume && ckpt.exists() {
            let opts = RunOptions {
                checkpoint_path: Some(ckpt.clone()),
                ..opts
            };
            resume_chain(&target, &config, &opts)?
        } else {
            run_chain(&target, &config, Init::PriorDraw, &opts)?
        };
        if chain.is_complete() {
            save_chain(&path, &chain)?;
            if ckpt.exists() {
                std::fs::remove_file(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
            }
        }
        Ok(chain)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(chains.iter().all(Chain::is_complete).then_some(chains))
}

/// Diagnostics for one cell; writes the per-cell CSVs.
fn summarize(plan: &ExperimentPlan, cell: &Cell, chains: &[Chain]) -> Result<(ResultRow, Vec<String>)> {
    let mats: Vec<_> = chains.iter().map(Chain::sample_matrix).collect();
    let mut mean_ess = 0.0;
    let mut min_ess = f64::INFINITY;
    let mut max_ess = f64::NEG_INFINITY;
    for m in &mats {
        let s = ess(m)?;
        mean_ess += s.mean_per_step_ess / mats.len() as f64;
        min_ess = min_ess.min(s.min_per_step_ess);
        max_ess = max_ess.max(s.max_per_step_ess);
    }
    let acceptance_rate =
        chains.iter().map(Chain::post_burn_in_acceptance_rate).sum::<f64>() / chains.len() as f64;
    let name = cell.name();
    let mut outputs = Vec::new();

    let acc = format!("acceptance_{name}.csv");
    output::write_acceptance(&plan.out_dir.join(&acc), chains)?;
    outputs.push(acc);

    let pcs = pc_traces(&mats[0], plan.n_components)?;
    let trace = format!("trace_{name}.csv");
    output::write_trace(&plan.out_dir.join(&trace), plan, &pcs)?;
    outputs.push(trace);

    let (mut rhat_mean, mut rhat_sd) = (None, None);
    if chains.len() >= 2 {
        let n = mats[0].nrows();
        let lengths: Vec<usize> = (1..=10).map(|j| (n * j / 10).max(2)).collect();
        let series = rhat_series(&mats, &lengths)?;
        let rhat = format!("rhat_{name}.csv");
        output::write_rhat(&plan.out_dir.join(&rhat), plan, &series)?;
        outputs.push(rhat);
        if let Some((m, s)) = gelman_rubin(&mats)?.mean_sd() {
            rhat_mean = Some(m);
            rhat_sd = Some(s);
        }
    }
    let row = ResultRow {
        cell: *cell,
        steps: plan.steps,
        n_chains: chains.len(),
        acceptance_rate,
        mean_ess,
        min_ess,
        max_ess,
        rhat_mean,
        rhat_sd,
        wall_time: chains.iter().map(|c| c.wall_time).sum(),
    };
    Ok((row, outputs))
}

/// Path helper for callers that only know the output directory.
pub fn results_path(out_dir: &Path) -> PathBuf {
    out_dir.join("results.csv")
}
