//! Run reports and plot-ready CSV tables.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::eval::{Evaluation, RoutingMatrix};
use super::experiments::{AblationReport, SweepRow};
use super::flops::FlopsEstimate;
use super::pipeline::TaskLog;
use crate::composer::CompositionKind;
use crate::error::{contract, Result};
use crate::io::write_atomic;
use crate::memory::Regime;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RouterLog {
    pub cil_epoch_losses: Vec<f64>,
    pub til_epoch_losses: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StaticWeights {
    /// `[layer][task]`.
    pub cil: Vec<Vec<f64>>,
    /// `[stack][layer][task]`, one stack per task.
    pub til: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seed: u64,
    pub order: usize,
    pub tasks: Vec<String>,
    pub composition: CompositionKind,
    pub regime: Regime,
    pub parameter_fraction: f64,
    pub memory_entries: usize,
    pub task_training: Vec<TaskLog>,
    pub router_training: RouterLog,
    pub static_merge_weights: StaticWeights,
    pub evaluations: Vec<Evaluation>,
    pub routing: Vec<RoutingMatrix>,
    pub flops: Vec<FlopsEstimate>,
}

impl RunReport {
    pub fn evaluation(&self, mode: CompositionKind, regime: Regime) -> Option<&Evaluation> {
        self.evaluations.iter().find(|e| e.mode == mode && e.regime == regime)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

fn csv_bytes<F>(header: &[&str], fill: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>,
{
    let wrap = |e: csv::Error| contract(format!("CSV encoding failed: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(wrap)?;
    fill(&mut w).map_err(wrap)?;
    w.into_inner().map_err(|e| contract(format!("CSV encoding failed: {e}")))
}

/// One row per (mode, regime, task), plus an `average` row per pair.
pub fn accuracy_csv(evaluations: &[Evaluation], tasks: &[String]) -> Result<Vec<u8>> {
    csv_bytes(&["mode", "regime", "task", "accuracy"], |w| {
        for e in evaluations {
            for (name, acc) in tasks.iter().zip(&e.per_task) {
                w.write_record([e.mode.name(), e.regime.name(), name, &acc.to_string()])?;
            }
            w.write_record([e.mode.name(), e.regime.name(), "average", &e.average.to_string()])?;
        }
        Ok(())
    })
}

/// One file per layer: rows are adapters, columns are evaluation tasks.
pub fn write_routing_csvs(dir: &Path, prefix: &str, matrix: &RoutingMatrix, tasks: &[String]) -> Result<Vec<PathBuf>> {
    let mut header = vec!["adapter"];
    header.extend(tasks.iter().map(String::as_str));
    let mut paths = Vec::with_capacity(matrix.layers.len());
    for (l, rows) in matrix.layers.iter().enumerate() {
        let bytes = csv_bytes(&header, |w| {
            for (name, row) in tasks.iter().zip(rows) {
                let mut rec = vec![name.clone()];
                rec.extend(row.iter().map(f64::to_string));
                w.write_record(&rec)?;
            }
            Ok(())
        })?;
        let path = dir.join(format!("{prefix}_layer{l}.csv"));
        write_atomic(&path, &bytes)?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    csv_bytes(&["seed", "fraction", "memory_entries", "average_accuracy"], |w| {
        for r in rows {
            w.write_record([
                r.seed.to_string(),
                r.fraction.to_string(),
                r.memory_entries.to_string(),
                r.average.to_string(),
            ])?;
        }
        Ok(())
    })
}

pub fn ablation_csv(report: &AblationReport) -> Result<Vec<u8>> {
    csv_bytes(&["seed", "relaxation", "average_accuracy"], |w| {
        for r in &report.rows {
            w.write_record([r.seed.to_string(), r.relaxation.name().to_string(), r.average.to_string()])?;
        }
        Ok(())
    })
}

pub fn flops_csv(estimates: &[FlopsEstimate]) -> Result<Vec<u8>> {
    csv_bytes(&["method", "num_tasks", "seq_len", "flops", "gflops"], |w| {
        for e in estimates {
            w.write_record([
                e.method.name().to_string(),
                e.num_tasks.to_string(),
                e.seq_len.to_string(),
                e.flops.to_string(),
                format!("{:.6}", e.flops as f64 / 1e9),
            ])?;
        }
        Ok(())
    })
}

/// Plain-text table with one row per mode and one column per run.
pub fn accuracy_table(columns: &[String], rows: &[(CompositionKind, Vec<Option<f64>>)]) -> String {
    let width = columns.iter().map(String::len).max().unwrap_or(0).max(8);
    let mut out = format!("{:<16}", "method");
    for c in columns {
        out.push_str(&format!(" {c:>width$}"));
    }
    out.push('\n');
    for (mode, values) in rows {
        out.push_str(&format!("{:<16}", mode.name()));
        for v in values {
            match v {
                Some(v) => out.push_str(&format!(" {:>width$.2}", 100.0 * v)),
                None => out.push_str(&format!(" {:>width$}", "-")),
            }
        }
        out.push('\n');
    }
    out
}

pub const CSV_SCHEMA: &str = "\
accuracy.csv            mode, regime, task, accuracy (fraction correct; task = average for the mean row)
routing_<regime>_layer<l>.csv
                        adapter, then one column per evaluation task; mean deterministic routing score
sweep_memory.csv        seed, fraction, memory_entries, average_accuracy
ablate_relaxation.csv   seed, relaxation, average_accuracy
routing_<relaxation>_seed<s>_layer<l>.csv
                        as routing_<regime>_layer<l>.csv, for the ablation runs
flops.csv               method, num_tasks, seq_len, flops, gflops
";
