//! Command implementations shared by the binary and the tests. Every
//! command writes under `output_root/<config hash>` and replaces files
//! atomically, so reruns with the same inputs overwrite identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::eval::Evaluator;
use super::experiments::{ablate_relaxation, sweep_memory, AblationReport, SweepRow};
use super::flops::{estimate_flops, FlopsEstimate, FlopsMethod};
use super::pipeline::{run_stream, train_routers, Routers, TrainedRouter, TrainedState};
use super::report::{self, RouterLog, RunReport, StaticWeights};
use crate::adapter::AdapterBank;
use crate::backbone::Backbone;
use crate::composer::{CompositionKind, TaskCentroid};
use crate::error::{contract, Result};
use crate::head::ClassifierHeads;
use crate::io::write_atomic;
use crate::memory::{MemoryBuffer, Regime};
use crate::rng;
use crate::router::RouterStack;

pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.json";
pub const MEMORY_FILE: &str = "memory.jsonl";
const HEADS_FILE: &str = "heads.bin";
const CENTROIDS_FILE: &str = "centroids.json";
const ROUTERS_FILE: &str = "routers.json";
const SCHEMA_FILE: &str = "csv_schema.txt";

pub fn til_router_file(task: usize) -> String {
    format!("router_til_task{}.bin", task + 1)
}

pub const CIL_ROUTER_FILE: &str = "router_cil.bin";

#[derive(Serialize, Deserialize)]
struct RouterMeta {
    static_weights: Vec<Vec<f64>>,
    epoch_losses: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RoutersMeta {
    cil: Option<RouterMeta>,
    til: Vec<RouterMeta>,
}

/// Creates the run directory and echoes the effective configuration into it.
pub fn prepare_run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    write_atomic(&dir.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
    write_atomic(&dir.join(SCHEMA_FILE), report::CSV_SCHEMA.as_bytes())?;
    Ok(dir)
}

pub fn save_state(state: &TrainedState, routers: &Routers, dir: &Path) -> Result<()> {
    state.backbone.save(dir)?;
    state.bank.save(dir)?;
    state.heads.save(&dir.join(HEADS_FILE))?;
    state.memory.save(&dir.join(MEMORY_FILE))?;
    write_atomic(&dir.join(CENTROIDS_FILE), &serde_json::to_vec_pretty(&state.centroids)?)?;
    let meta = |r: &TrainedRouter| RouterMeta {
        static_weights: r.static_weights.clone(),
        epoch_losses: r.epoch_losses.clone(),
    };
    if let Some(r) = &routers.cil {
        r.stack.save(&dir.join(CIL_ROUTER_FILE))?;
    }
    for (t, r) in routers.til.iter().enumerate() {
        r.stack.save(&dir.join(til_router_file(t)))?;
    }
    let all = RoutersMeta {
        cil: routers.cil.as_ref().map(meta),
        til: routers.til.iter().map(meta).collect(),
    };
    write_atomic(&dir.join(ROUTERS_FILE), &serde_json::to_vec_pretty(&all)?)
}

/// Reloads a trained run from its directory.
pub fn load_state(dir: &Path) -> Result<(RunConfig, TrainedState, Routers, RunReport)> {
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let stream = cfg.stream()?;
    let report = RunReport::load(&dir.join(REPORT_FILE))?;
    let backbone = Backbone::load(dir)?;
    let bank = AdapterBank::load(dir, stream.num_tasks())?;
    let heads = ClassifierHeads::load(&dir.join(HEADS_FILE))?;
    let memory = MemoryBuffer::load(&dir.join(MEMORY_FILE), cfg.memory.fraction, rng::derive_seed(cfg.seed, "memory"))?;
    let centroids: Vec<TaskCentroid> = serde_json::from_slice(&fs::read(dir.join(CENTROIDS_FILE))?)?;
    let meta: RoutersMeta = serde_json::from_slice(&fs::read(dir.join(ROUTERS_FILE))?)?;
    let cil = match meta.cil {
        Some(m) => Some(TrainedRouter {
            stack: RouterStack::load(&dir.join(CIL_ROUTER_FILE))?,
            static_weights: m.static_weights,
            epoch_losses: m.epoch_losses,
        }),
        None => None,
    };
    let til = meta
        .til
        .into_iter()
        .enumerate()
        .map(|(t, m)| {
            Ok(TrainedRouter {
                stack: RouterStack::load(&dir.join(til_router_file(t)))?,
                static_weights: m.static_weights,
                epoch_losses: m.epoch_losses,
            })
        })
        .collect::<Result<_>>()?;
    let task_logs = report.task_training.clone();
    let state = TrainedState {
        stream,
        backbone,
        bank,
        heads,
        memory,
        centroids,
        task_logs,
    };
    Ok((cfg, state, Routers { cil, til }, report))
}

fn all_flops(cfg: &RunConfig, tasks: usize) -> Result<Vec<FlopsEstimate>> {
    FlopsMethod::ALL
        .into_iter()
        .map(|m| estimate_flops(&cfg.backbone, cfg.adapter.rank, tasks, m))
        .collect()
}

/// Trains the stream and both router regimes, evaluates every mode, and
/// writes all artifacts. Returns the run directory.
pub fn train(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = prepare_run_dir(cfg)?;
    let stream = cfg.stream()?;
    let state = run_stream(&stream, cfg)?;
    let routers = train_routers(&state, &cfg.router, &[Regime::Cil, Regime::Til], cfg.seed)?;
    let tasks: Vec<String> = stream.tasks().iter().map(|t| t.name.clone()).collect();

    let eval = Evaluator::new(&state, &routers)?;
    let mut evaluations = Vec::new();
    for regime in [Regime::Cil, Regime::Til] {
        for kind in CompositionKind::ALL {
            evaluations.push(eval.evaluate(kind, regime)?);
        }
    }
    let routing = vec![eval.routing_scores(Regime::Cil)?, eval.routing_scores(Regime::Til)?];
    for m in &routing {
        let prefix = format!("routing_{}", m.regime.name().to_lowercase());
        report::write_routing_csvs(&dir, &prefix, m, &tasks)?;
    }

    let report = RunReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        order: cfg.data.order,
        tasks: tasks.clone(),
        composition: cfg.composition,
        regime: cfg.regime,
        parameter_fraction: state.bank.parameter_fraction(&state.backbone)?,
        memory_entries: state.memory.len(),
        task_training: state.task_logs.clone(),
        router_training: RouterLog {
            cil_epoch_losses: routers.cil.as_ref().map(|r| r.epoch_losses.clone()).unwrap_or_default(),
            til_epoch_losses: routers.til.iter().map(|r| r.epoch_losses.clone()).collect(),
        },
        static_merge_weights: StaticWeights {
            cil: routers.cil.as_ref().map(|r| r.static_weights.clone()).unwrap_or_default(),
            til: routers.til.iter().map(|r| r.static_weights.clone()).collect(),
        },
        flops: all_flops(cfg, stream.num_tasks())?,
        evaluations,
        routing,
    };
    save_state(&state, &routers, &dir)?;
    write_atomic(&dir.join("accuracy.csv"), &report::accuracy_csv(&report.evaluations, &tasks)?)?;
    write_atomic(&dir.join("flops.csv"), &report::flops_csv(&report.flops)?)?;
    report.save(&dir.join(REPORT_FILE))?;
    Ok(dir)
}

/// Re-evaluates persisted runs. Returns the accuracy table (rows = modes,
/// columns = runs) and writes `eval_<regime>.csv` into each run directory.
pub fn eval(run_dirs: &[PathBuf], modes: &[CompositionKind], regime: Regime) -> Result<String> {
    if run_dirs.is_empty() {
        return Err(contract("eval needs at least one run directory"));
    }
    let mut columns = Vec::with_capacity(run_dirs.len());
    let mut results = Vec::with_capacity(run_dirs.len());
    for dir in run_dirs {
        let (cfg, state, routers, _) = load_state(dir)?;
        let evaluator = Evaluator::new(&state, &routers)?;
        let evals = modes
            .iter()
            .map(|&m| evaluator.evaluate(m, regime))
            .collect::<Result<Vec<_>>>()?;
        let tasks: Vec<String> = state.stream.tasks().iter().map(|t| t.name.clone()).collect();
        let name = format!("eval_{}.csv", regime.name().to_lowercase());
        write_atomic(&dir.join(name), &report::accuracy_csv(&evals, &tasks)?)?;
        columns.push(format!("order{}/s{}", cfg.data.order, cfg.seed));
        results.push(evals);
    }
    let rows = modes
        .iter()
        .enumerate()
        .map(|(i, &m)| (m, results.iter().map(|r| Some(r[i].average)).collect()))
        .collect::<Vec<_>>();
    Ok(report::accuracy_table(&columns, &rows))
}

/// Memory-size sweep; writes `sweep_memory.csv` and one JSON per seed.
pub fn sweep(cfg: &RunConfig, fractions: &[f64], seeds: &[u64], workers: usize) -> Result<(PathBuf, Vec<SweepRow>)> {
    let dir = prepare_run_dir(cfg)?;
    let rows = sweep_memory(cfg, fractions, seeds, workers)?;
    for &seed in seeds {
        let mine: Vec<&SweepRow> = rows.iter().filter(|r| r.seed == seed).collect();
        let sub = dir.join(format!("seed{seed}"));
        write_atomic(&sub.join("sweep.json"), &serde_json::to_vec_pretty(&mine)?)?;
    }
    let path = dir.join("sweep_memory.csv");
    write_atomic(&path, &report::sweep_csv(&rows)?)?;
    Ok((path, rows))
}

/// Gumbel-sigmoid against softmax; writes the paired CSV, the report and
/// the routing matrices of every run.
pub fn ablate(cfg: &RunConfig, seeds: &[u64], workers: usize) -> Result<(PathBuf, AblationReport)> {
    let dir = prepare_run_dir(cfg)?;
    let result = ablate_relaxation(cfg, seeds, workers)?;
    let tasks: Vec<String> = cfg.stream()?.tasks().iter().map(|t| t.name.clone()).collect();
    for (row, matrix) in result.rows.iter().zip(&result.routing) {
        let sub = dir.join(format!("seed{}", row.seed));
        fs::create_dir_all(&sub)?;
        let prefix = format!("routing_{}", row.relaxation.name());
        report::write_routing_csvs(&sub, &prefix, matrix, &tasks)?;
    }
    write_atomic(&dir.join("ablation.json"), &serde_json::to_vec_pretty(&result)?)?;
    let path = dir.join("ablate_relaxation.csv");
    write_atomic(&path, &report::ablation_csv(&result)?)?;
    Ok((path, result))
}

/// FLOPs of every method for `tasks` adapters; writes `flops.csv`.
pub fn flops(cfg: &RunConfig, tasks: usize) -> Result<(PathBuf, Vec<FlopsEstimate>)> {
    let dir = prepare_run_dir(cfg)?;
    let estimates = all_flops(cfg, tasks)?;
    let path = dir.join("flops.csv");
    write_atomic(&path, &report::flops_csv(&estimates)?)?;
    Ok((path, estimates))
}

/// Writes the routing-score CSVs of a trained run for one regime.
pub fn export_routing_scores(run_dir: &Path, regime: Regime, out: Option<&Path>) -> Result<Vec<PathBuf>> {
    let (_, state, routers, _) = load_state(run_dir)?;
    let matrix = Evaluator::new(&state, &routers)?.routing_scores(regime)?;
    let tasks: Vec<String> = state.stream.tasks().iter().map(|t| t.name.clone()).collect();
    let target = out.unwrap_or(run_dir);
    fs::create_dir_all(target)?;
    let prefix = format!("routing_{}", regime.name().to_lowercase());
    report::write_routing_csvs(target, &prefix, &matrix, &tasks)
}
