//! Multi-seed experiments: memory-size sweep and relaxation ablation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::eval::{Evaluator, RoutingMatrix};
use super::pipeline::{run_stream, train_routers, TrainedState};
use crate::error::{contract, Result};
use crate::router::Relaxation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub fraction: f64,
    pub memory_entries: usize,
    pub average: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub relaxation: Relaxation,
    pub average: f64,
    pub per_task: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// One matrix per row, in the same order.
    pub routing: Vec<RoutingMatrix>,
}

impl AblationReport {
    pub fn mean(&self, relaxation: Relaxation) -> f64 {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.relaxation == relaxation)
            .map(|r| r.average)
            .collect();
        super::eval::mean(&v)
    }
}

impl RunConfig {
    /// The same configuration replicated at another seed: the run, backbone
    /// and generator seeds all move together.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.seed = seed;
        cfg.backbone.seed = seed;
        cfg.data.generator.seed = seed;
        cfg
    }
}

/// Runs `f` for each seed on at most `workers` threads, keeping seed order.
pub fn for_seeds<T, F>(seeds: &[u64], workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    if workers <= 1 {
        return seeds.iter().map(|&s| f(s)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| contract(format!("cannot start worker pool: {e}")))?;
    pool.install(|| seeds.par_iter().map(|&s| f(s)).collect())
}

fn check_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() {
        return Err(contract("memory sweep needs at least one fraction"));
    }
    if fractions.windows(2).any(|w| w[0] > w[1]) {
        return Err(contract("memory fractions must be sorted"));
    }
    if let Some(p) = fractions.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return Err(contract(format!(
            "memory fraction {p} leaves routers without examples; fractions must lie in (0, 1]"
        )));
    }
    Ok(())
}

fn evaluate_configured(cfg: &RunConfig, state: &TrainedState, relaxation: Relaxation) -> Result<(super::eval::Evaluation, RoutingMatrix)> {
    let mut router_cfg = cfg.router.clone();
    router_cfg.relaxation = relaxation;
    let routers = train_routers(state, &router_cfg, &[cfg.regime], cfg.seed)?;
    let eval = Evaluator::new(state, &routers)?;
    Ok((eval.evaluate(cfg.composition, cfg.regime)?, eval.routing_scores(cfg.regime)?))
}

/// For each seed: train the stream once, then for each fraction resample the
/// memory, retrain the routers and evaluate the configured mode.
pub fn sweep_memory(cfg: &RunConfig, fractions: &[f64], seeds: &[u64], workers: usize) -> Result<Vec<SweepRow>> {
    check_fractions(fractions)?;
    if !cfg.composition.uses_router() {
        return Err(contract(format!("{} does not use a router", cfg.composition.name())));
    }
    let per_seed = for_seeds(seeds, workers, |seed| {
        let c = cfg.with_seed(seed);
        let mut state = run_stream(&c.stream()?, &c)?;
        let mut rows = Vec::with_capacity(fractions.len());
        for &p in fractions {
            state.repopulate_memory(p, c.seed)?;
            let (ev, _) = evaluate_configured(&c, &state, c.router.relaxation)?;
            rows.push(SweepRow {
                seed,
                fraction: p,
                memory_entries: state.memory.len(),
                average: ev.average,
            });
        }
        Ok(rows)
    })?;
    Ok(per_seed.into_iter().flatten().collect())
}

/// For each seed: train the stream once, then train and evaluate routers
/// under each relaxation.
pub fn ablate_relaxation(cfg: &RunConfig, seeds: &[u64], workers: usize) -> Result<AblationReport> {
    if !cfg.composition.uses_router() {
        return Err(contract(format!("{} does not use a router", cfg.composition.name())));
    }
    let per_seed = for_seeds(seeds, workers, |seed| {
        let c = cfg.with_seed(seed);
        let state = run_stream(&c.stream()?, &c)?;
        [Relaxation::GumbelSigmoid, Relaxation::Softmax]
            .into_iter()
            .map(|relaxation| {
                let (ev, routing) = evaluate_configured(&c, &state, relaxation)?;
                Ok((
                    AblationRow {
                        seed,
                        relaxation,
                        average: ev.average,
                        per_task: ev.per_task,
                    },
                    routing,
                ))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let (rows, routing) = per_seed.into_iter().flatten().unzip();
    Ok(AblationReport { rows, routing })
}
