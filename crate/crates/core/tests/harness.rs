//! End-to-end tests of the experiment harness on small synthetic plans.

use std::fs;
use std::path::Path;

use fsmcmc::harness::{self, CellStatus, ExperimentPlan, PLOT_FILES};

fn small_plan(out: &Path) -> ExperimentPlan {
    let mut plan = ExperimentPlan::parse(
        "samplers = pcn\nwidths = 8,16\nsteps = 300\nburn_in = 60\nthin = 4\n\
         synthetic = 12,3,1\nseeds = 3\nn_chains = 2\nmonitor = 4\nstrict = true\n",
    )
    .unwrap();
    plan.out_dir = out.to_path_buf();
    plan
}

/// results.csv with the trailing wall_time column removed.
fn results_without_time(out: &Path) -> String {
    fs::read_to_string(out.join("results.csv"))
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn one_sampler_two_widths_gives_two_rows() {
    let dir = tempfile::tempdir().unwrap();
    let report = harness::run_plan(&small_plan(dir.path())).unwrap();
    assert_eq!(report.exit_code(), 0);
    let rows = harness::read_results(dir.path()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].cell.width, 8);
    assert_eq!(rows[1].cell.width, 16);
    for r in &rows {
        assert_eq!(r.steps, 300);
        assert_eq!(r.n_chains, 2);
        assert!((0.0..=1.0).contains(&r.acceptance_rate));
        assert!(r.min_ess <= r.mean_ess && r.mean_ess <= r.max_ess);
        assert!(r.rhat_mean.is_some());
    }
    for f in ["manifest.json", "plan.cfg", "trace_pcn_w8_b0.1_s3.csv", "acceptance_pcn_w16_b0.1_s3.csv"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["plan_hash"], small_plan(dir.path()).config_hash());
    assert!(manifest["dataset"]["provenance"].as_str().unwrap().starts_with("synthetic"));
    assert_eq!(manifest["cells"].as_array().unwrap().len(), 2);
}

#[test]
fn strict_runs_are_identical_apart_from_wall_time() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    harness::run_plan(&small_plan(a.path())).unwrap();
    harness::run_plan(&small_plan(b.path())).unwrap();
    assert_eq!(results_without_time(a.path()), results_without_time(b.path()));
    let trace = "trace_pcn_w16_b0.1_s3.csv";
    assert_eq!(
        fs::read(a.path().join(trace)).unwrap(),
        fs::read(b.path().join(trace)).unwrap()
    );
}

#[test]
fn parallel_cells_match_strict_cells() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    harness::run_plan(&small_plan(a.path())).unwrap();
    let mut par = small_plan(b.path());
    par.strict = false;
    par.workers = 2;
    harness::run_plan(&par).unwrap();
    assert_eq!(results_without_time(a.path()), results_without_time(b.path()));
}

#[test]
fn halted_run_resumes_to_the_uninterrupted_result() {
    let full = tempfile::tempdir().unwrap();
    harness::run_plan(&small_plan(full.path())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut plan = small_plan(dir.path());
    plan.checkpoint_every = 50;
    plan.halt_after = Some(130);
    let report = harness::run_plan(&plan).unwrap();
    assert_eq!(report.exit_code(), 1);
    assert!(report.cells.iter().all(|c| c.status == CellStatus::Incomplete));
    assert!(fs::read_dir(dir.path().join("checkpoints")).unwrap().count() > 0);

    let report = harness::resume_plan(&plan).unwrap();
    assert_eq!(report.exit_code(), 0);
    assert_eq!(results_without_time(full.path()), results_without_time(dir.path()));
    assert_eq!(fs::read_dir(dir.path().join("checkpoints")).unwrap().count(), 0);

    // A second resume reuses the stored chains.
    let again = harness::resume_plan(&plan).unwrap();
    assert_eq!(again.exit_code(), 0);
    assert_eq!(results_without_time(full.path()), results_without_time(dir.path()));
}

#[test]
fn diagnose_reproduces_results_from_stored_chains() {
    let dir = tempfile::tempdir().unwrap();
    harness::run_plan(&small_plan(dir.path())).unwrap();
    let before = results_without_time(dir.path());
    let report = harness::diagnose(dir.path(), true).unwrap();
    assert_eq!(report.exit_code(), 0);
    assert_eq!(before, results_without_time(dir.path()));
}

#[test]
fn failing_cell_is_recorded_and_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = small_plan(dir.path());
    plan.set("samplers", "pcn,pcnl").unwrap();
    plan.set("widths", "8").unwrap();
    plan.set("betas", "1.0").unwrap();
    let report = harness::run_plan(&plan).unwrap();
    assert_eq!(report.exit_code(), 1);
    assert_eq!(report.failures(), 1);
    assert!(matches!(report.cells[1].status, CellStatus::Failed(_)));
    let rows = harness::read_results(dir.path()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].cell.sampler.to_string(), "pcn");
    let manifest = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert!(manifest.contains("failed"));
}

#[test]
fn unwritable_output_dir_fails_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let plan = small_plan(&blocker.join("sub"));
    let err = harness::run_plan(&plan).unwrap_err();
    assert!(matches!(err, fsmcmc::Error::Config(_)), "{err}");
}

#[test]
fn plot_data_leaves_gaps_for_missing_cells() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = small_plan(dir.path());
    plan.set("samplers", "pcn,pcnl").unwrap();
    plan.set("widths", "8").unwrap();
    plan.set("betas", "1.0").unwrap();
    harness::run_plan(&plan).unwrap();
    let paths = harness::emit_plot_data(dir.path()).unwrap();
    assert_eq!(paths.len(), PLOT_FILES.len());
    let fig1 = fs::read_to_string(dir.path().join("fig1_acceptance.csv")).unwrap();
    let lines: Vec<&str> = fig1.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("pcn,8,1,"));
    assert_eq!(lines[2], "pcnl,8,1,,,,0");
    let rhat = fs::read_to_string(dir.path().join("fig_rhat.csv")).unwrap();
    assert!(rhat.lines().any(|l| l == "pcnl,8,1,3,,,"));
    let manifest = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert!(manifest.contains("fig2_ess.csv"));
}

#[test]
fn plan_file_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let plan = small_plan(dir.path());
    harness::run_plan(&plan).unwrap();
    let stored = harness::load_plan(dir.path()).unwrap();
    assert_eq!(stored.config_hash(), plan.config_hash());
}
