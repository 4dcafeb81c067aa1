//! CSV writers, the run manifest and plot-ready figure tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{load_plan, write_atomic, CellReport, CellStatus, ExperimentPlan, ResultRow, RunReport, CSV_SCHEMA_VERSION};
use crate::dataset::Dataset;
use crate::diagnostics::{GelmanRubin, PcTraces};
use crate::error::{Error, Result};
use crate::samplers::{Chain, RunOptions, SamplerKind};

pub const PLOT_FILES: [&str; 3] = ["fig1_acceptance.csv", "fig2_ess.csv", "fig_rhat.csv"];

const RESULT_HEADER: [&str; 15] = [
    "sampler",
    "width",
    "beta",
    "seed",
    "steps",
    "burn_in",
    "thin",
    "n_chains",
    "acceptance_rate",
    "mean_ess",
    "min_ess",
    "max_ess",
    "rhat_mean",
    "rhat_sd",
    "wall_time",
];

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

/// Serializes `rows` under `header` and writes the file atomically.
fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    write_atomic(path, &bytes)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub(super) fn write_results(plan: &ExperimentPlan, report: &RunReport) -> Result<()> {
    let rows: Vec<Vec<String>> = report
        .rows()
        .into_iter()
        .map(|r| {
            vec![
                r.cell.sampler.to_string(),
                r.cell.width.to_string(),
                r.cell.beta.to_string(),
                r.cell.seed.to_string(),
                r.steps.to_string(),
                plan.burn_in.to_string(),
                plan.thin.to_string(),
                r.n_chains.to_string(),
                r.acceptance_rate.to_string(),
                r.mean_ess.to_string(),
                r.min_ess.to_string(),
                r.max_ess.to_string(),
                opt(r.rhat_mean),
                opt(r.rhat_sd),
                r.wall_time.to_string(),
            ]
        })
        .collect();
    write_csv(&super::results_path(&plan.out_dir), &RESULT_HEADER, &rows)
}

fn parse_field<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, i: usize) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("{}: bad field {} in {:?}", path.display(), RESULT_HEADER[i], rec)))
}

/// Reads `results.csv` back into rows.
pub fn read_results(out_dir: &Path) -> Result<Vec<ResultRow>> {
    let path = super::results_path(out_dir);
    let mut r = csv::Reader::from_path(&path).map_err(|e| csv_err(&path, e))?;
    let header = r.headers().map_err(|e| csv_err(&path, e))?.clone();
    if header.iter().ne(RESULT_HEADER) {
        return Err(Error::Format(format!("{}: unexpected header", path.display())));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(&path, e))?;
        let optional = |i: usize| -> Result<Option<f64>> {
            match rec.get(i) {
                Some("") => Ok(None),
                _ => parse_field(&path, &rec, i).map(Some),
            }
        };
        let sampler: String = parse_field(&path, &rec, 0)?;
        rows.push(ResultRow {
            cell: super::Cell {
                sampler: sampler.parse()?,
                width: parse_field(&path, &rec, 1)?,
                beta: parse_field(&path, &rec, 2)?,
                seed: parse_field(&path, &rec, 3)?,
            },
            steps: parse_field(&path, &rec, 4)?,
            n_chains: parse_field(&path, &rec, 7)?,
            acceptance_rate: parse_field(&path, &rec, 8)?,
            mean_ess: parse_field(&path, &rec, 9)?,
            min_ess: parse_field(&path, &rec, 10)?,
            max_ess: parse_field(&path, &rec, 11)?,
            rhat_mean: optional(12)?,
            rhat_sd: optional(13)?,
            wall_time: parse_field(&path, &rec, 14)?,
        });
    }
    Ok(rows)
}

pub(super) fn write_acceptance(path: &Path, chains: &[Chain]) -> Result<()> {
    let window = RunOptions::default().window;
    let mut rows = Vec::new();
    for c in chains {
        for (w, rate) in c.acceptance_series.iter().enumerate() {
            let end = ((w + 1) * window).min(c.config.steps);
            rows.push(vec![c.chain_index.to_string(), w.to_string(), end.to_string(), rate.to_string()]);
        }
    }
    write_csv(path, &["chain", "window", "end_step", "acceptance_rate"], &rows)
}

pub(super) fn write_trace(path: &Path, plan: &ExperimentPlan, pcs: &PcTraces) -> Result<()> {
    let k = plan.n_components;
    let mut header = vec!["step".to_string()];
    header.extend((1..=k).map(|c| format!("pc{c}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = (0..pcs.scores.nrows())
        .map(|i| {
            let mut r = vec![(plan.burn_in + (i + 1) * plan.thin).to_string()];
            r.extend((0..k).map(|c| {
                if c < pcs.scores.ncols() {
                    pcs.scores[(i, c)].to_string()
                } else {
                    String::new()
                }
            }));
            r
        })
        .collect();
    write_csv(path, &header, &rows)
}

pub(super) fn write_rhat(path: &Path, plan: &ExperimentPlan, series: &[(usize, GelmanRubin)]) -> Result<()> {
    let rows: Vec<Vec<String>> = series
        .iter()
        .map(|(len, g)| {
            let defined: Vec<f64> = g.r_hat.iter().copied().filter(|r| r.is_finite()).collect();
            let (m, s) = g.mean_sd().map_or((None, None), |(m, s)| (Some(m), Some(s)));
            vec![
                (plan.burn_in + len * plan.thin).to_string(),
                opt(m),
                opt(s),
                opt(defined.iter().copied().reduce(f64::min)),
                opt(defined.iter().copied().reduce(f64::max)),
                g.undefined.iter().filter(|u| **u).count().to_string(),
            ]
        })
        .collect();
    write_csv(path, &["step", "rhat_mean", "rhat_sd", "rhat_min", "rhat_max", "undefined"], &rows)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn dataset_hash(d: &Dataset) -> String {
    let mut h = Sha256::new();
    for v in d.inputs().iter().chain(d.targets().iter()) {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn status_json(c: &CellReport) -> Value {
    let (status, error) = match &c.status {
        CellStatus::Complete => ("complete", None),
        CellStatus::Incomplete => ("incomplete", None),
        CellStatus::Failed(e) => ("failed", Some(e.clone())),
    };
    json!({ "name": c.cell.name(), "status": status, "error": error })
}

fn unix_time() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn read_manifest(out: &Path) -> Option<Value> {
    let text = std::fs::read_to_string(out.join("manifest.json")).ok()?;
    serde_json::from_str(&text).ok()
}

fn write_manifest_value(out: &Path, v: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("manifest serializes");
    write_atomic(&out.join("manifest.json"), text.as_bytes())
}

pub(super) fn write_manifest(
    plan: &ExperimentPlan,
    data: Option<&Dataset>,
    report: &RunReport,
    command: &str,
) -> Result<()> {
    let out = &plan.out_dir;
    let previous = read_manifest(out);
    let dataset = match data {
        Some(d) => json!({ "provenance": d.provenance(), "sha256": dataset_hash(d) }),
        None => previous
            .as_ref()
            .and_then(|m| m.get("dataset").cloned())
            .unwrap_or(Value::Null),
    };
    let mut chain_hashes = BTreeMap::new();
    let mut outputs = BTreeMap::new();
    let mut all_inputs = Vec::new();
    for c in &report.cells {
        let mut ins = Vec::new();
        for f in &c.inputs {
            let h = sha256_file(&out.join(f))?;
            chain_hashes.insert(f.clone(), h.clone());
            ins.push(json!({ "file": f, "sha256": h }));
        }
        for f in &c.outputs {
            outputs.insert(f.clone(), json!({ "sha256": sha256_file(&out.join(f))?, "inputs": ins }));
        }
        all_inputs.extend(ins);
    }
    outputs.insert(
        "results.csv".into(),
        json!({ "sha256": sha256_file(&super::results_path(out))?, "inputs": all_inputs }),
    );
    let manifest = json!({
        "csv_schema_version": CSV_SCHEMA_VERSION,
        "crate_version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "created_unix": unix_time(),
        "plan_hash": plan.config_hash(),
        "plan": plan.to_config_string(),
        "seeds": plan.seeds,
        "parallel": crate::par::parallel_enabled() && !plan.strict,
        "dataset": dataset,
        "cells": report.cells.iter().map(status_json).collect::<Vec<_>>(),
        "chains": chain_hashes,
        "outputs": outputs,
    });
    write_manifest_value(out, &manifest)
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Writes the figure tables from `results.csv` and the per-cell R-hat
/// files. Every `(sampler, width, beta)` of the stored plan gets a row;
/// combinations without completed cells have empty value fields.
pub fn emit_plot_data(out_dir: &Path) -> Result<Vec<PathBuf>> {
    let plan = load_plan(out_dir)?;
    let rows = read_results(out_dir)?;
    let mut fig1 = Vec::new();
    let mut fig2 = Vec::new();
    let mut rhat = Vec::new();
    let mut rhat_inputs = Vec::new();
    for &sampler in &plan.samplers {
        for &width in &plan.widths {
            for &beta in &plan.betas {
                let group: Vec<&ResultRow> = rows
                    .iter()
                    .filter(|r| r.cell.sampler == sampler && r.cell.width == width && r.cell.beta == beta)
                    .collect();
                let key = |s: SamplerKind| vec![s.to_string(), width.to_string(), beta.to_string()];
                let mut r1 = key(sampler);
                let mut r2 = key(sampler);
                if group.is_empty() {
                    r1.extend([String::new(), String::new(), String::new(), "0".into()]);
                    r2.extend([String::new(), String::new(), String::new(), "0".into()]);
                } else {
                    let acc: Vec<f64> = group.iter().map(|r| r.acceptance_rate).collect();
                    let (m, s) = mean_sd(&acc);
                    r1.extend([m.to_string(), s.to_string(), median(&acc).to_string(), group.len().to_string()]);
                    let ess: Vec<f64> = group.iter().map(|r| r.mean_ess).collect();
                    let lo = group.iter().map(|r| r.min_ess).fold(f64::INFINITY, f64::min);
                    let hi = group.iter().map(|r| r.max_ess).fold(f64::NEG_INFINITY, f64::max);
                    r2.extend([mean_sd(&ess).0.to_string(), lo.to_string(), hi.to_string(), group.len().to_string()]);
                }
                fig1.push(r1);
                fig2.push(r2);
                if plan.n_chains >= 2 {
                    for &seed in &plan.seeds {
                        let cell = super::Cell { sampler, width, beta, seed };
                        let file = format!("rhat_{}.csv", cell.name());
                        let mut prefix = key(sampler);
                        prefix.push(seed.to_string());
                        let path = out_dir.join(&file);
                        if !path.exists() {
                            let mut r = prefix;
                            r.extend([String::new(), String::new(), String::new()]);
                            rhat.push(r);
                            continue;
                        }
                        rhat_inputs.push(file);
                        let mut rd = csv::Reader::from_path(&path).map_err(|e| csv_err(&path, e))?;
                        for rec in rd.records() {
                            let rec = rec.map_err(|e| csv_err(&path, e))?;
                            let mut r = prefix.clone();
                            r.extend((0..3).map(|i| rec.get(i).unwrap_or("").to_string()));
                            rhat.push(r);
                        }
                    }
                }
            }
        }
    }
    let paths: Vec<PathBuf> = PLOT_FILES.iter().map(|f| out_dir.join(f)).collect();
    write_csv(&paths[0], &["sampler", "width", "beta", "acceptance_mean", "acceptance_sd", "acceptance_median", "n_seeds"], &fig1)?;
    write_csv(&paths[1], &["sampler", "width", "beta", "mean_ess", "min_ess", "max_ess", "n_seeds"], &fig2)?;
    write_csv(&paths[2], &["sampler", "width", "beta", "seed", "step", "rhat_mean", "rhat_sd"], &rhat)?;

    if let Some(mut manifest) = read_manifest(out_dir) {
        let results_hash = sha256_file(&super::results_path(out_dir))?;
        let outputs = manifest
            .get_mut("outputs")
            .and_then(Value::as_object_mut)
            .ok_or_else(|| Error::Format("manifest has no outputs table".into()))?;
        for (i, f) in PLOT_FILES.iter().enumerate() {
            let inputs: Vec<Value> = if i == 2 {
                rhat_inputs
                    .iter()
                    .map(|r| Ok(json!({ "file": r, "sha256": sha256_file(&out_dir.join(r))? })))
                    .collect::<Result<_>>()?
            } else {
                vec![json!({ "file": "results.csv", "sha256": results_hash })]
            };
            outputs.insert(f.to_string(), json!({ "sha256": sha256_file(&paths[i])?, "inputs": inputs }));
        }
        write_manifest_value(out_dir, &manifest)?;
    }
    Ok(paths)
}
