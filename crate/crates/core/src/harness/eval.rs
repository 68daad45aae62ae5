//! Class- and task-incremental evaluation under every composition mode.

use serde::{Deserialize, Serialize};

use super::pipeline::{argmax, predict_global, routed_logits, Routers, TrainedRouter, TrainedState};
use crate::composer::{centroid_weights, Composer, CompositionKind, MergedAdapter, Weights};
use crate::error::{contract, Result};
use crate::head::ClassifierHeads;
use crate::memory::Regime;
use crate::router::Noise;
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mode: CompositionKind,
    pub regime: Regime,
    /// Test accuracy per task, in stream order.
    pub per_task: Vec<f64>,
    pub average: f64,
}

/// Mean deterministic routing scores, indexed `[layer][adapter][eval task]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingMatrix {
    pub regime: Regime,
    pub layers: Vec<Vec<Vec<f64>>>,
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Read-only view of a trained state and its routers, with the static merges
/// formed once up front.
pub struct Evaluator<'a> {
    state: &'a TrainedState,
    routers: &'a Routers,
    merged_cil: Option<MergedAdapter>,
    merged_til: Vec<MergedAdapter>,
    column_classes: Vec<usize>,
}

impl<'a> Evaluator<'a> {
    pub fn new(state: &'a TrainedState, routers: &'a Routers) -> Result<Self> {
        let merged_cil = routers
            .cil
            .as_ref()
            .map(|r| MergedAdapter::new(&state.bank, &r.static_weights))
            .transpose()?;
        let merged_til = routers
            .til
            .iter()
            .map(|r| MergedAdapter::new(&state.bank, &r.static_weights))
            .collect::<Result<_>>()?;
        Ok(Self {
            state,
            routers,
            merged_cil,
            merged_til,
            column_classes: state.column_classes(),
        })
    }

    fn router(&self, regime: Regime, task: Option<usize>) -> Result<&TrainedRouter> {
        match regime {
            Regime::Cil => self
                .routers
                .cil
                .as_ref()
                .ok_or_else(|| contract("no class-incremental router has been trained")),
            Regime::Til => {
                let t = task.ok_or_else(|| contract("TIL evaluation needs a task id"))?;
                self.routers
                    .til
                    .get(t)
                    .ok_or_else(|| contract(format!("no task-incremental router for task {t}")))
            }
        }
    }

    /// Logits for one input: every head block under CIL, the given task's
    /// block under TIL. Also returns the per-layer weights applied.
    pub fn logits(
        &self,
        kind: CompositionKind,
        regime: Regime,
        tokens: &[u32],
        task: Option<usize>,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        if regime == Regime::Til && task.is_none() {
            return Err(contract("TIL evaluation needs a task id"));
        }
        let state = self.state;
        let num_tasks = state.num_tasks();
        let mut tape = Tape::new();
        let bound = state.bind(&mut tape);

        if matches!(kind, CompositionKind::Wavg | CompositionKind::MergePerInput) {
            let router = self.router(regime, task)?.stack.bind(&mut tape)?;
            if kind == CompositionKind::Wavg {
                let (logits, trace) = routed_logits(
                    state,
                    &mut tape,
                    &bound,
                    &router,
                    Noise::Deterministic,
                    tokens,
                    regime,
                    task.unwrap_or(0),
                )?;
                return Ok((tape.value(logits).to_vec(), trace));
            }
            let weights = Weights::Routed {
                router: &router,
                noise: Noise::Deterministic,
            };
            return self.finish(&mut tape, &bound, Composer::new(&bound.adapters, weights, true), tokens, regime, task);
        }

        let weights = match kind {
            CompositionKind::MergeStatic => {
                self.router(regime, task)?;
                let merged = match regime {
                    Regime::Cil => self.merged_cil.as_ref(),
                    Regime::Til => task.and_then(|t| self.merged_til.get(t)),
                }
                .ok_or_else(|| contract("no static merge available"))?;
                Weights::Merged(merged.bind(&mut tape))
            }
            CompositionKind::LowerBound => Weights::Fixed(vec![1.0; num_tasks]),
            CompositionKind::UpperBound => {
                let t = task.ok_or_else(|| contract("upper-bound composition needs a task id"))?;
                let mut w = vec![0.0; num_tasks];
                w[t] = 1.0;
                Weights::Fixed(w)
            }
            CompositionKind::Centroid => {
                let h = state.backbone.pooled_base(tokens)?;
                Weights::Fixed(centroid_weights(&state.centroids, &h))
            }
            CompositionKind::Wavg | CompositionKind::MergePerInput => unreachable!("handled above"),
        };
        self.finish(&mut tape, &bound, Composer::new(&bound.adapters, weights, false), tokens, regime, task)
    }

    fn finish(
        &self,
        tape: &mut Tape,
        bound: &super::pipeline::Bound,
        mut overlay: Composer<'_>,
        tokens: &[u32],
        regime: Regime,
        task: Option<usize>,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let enc = self.state.backbone.encode(tape, &bound.backbone, tokens, &mut overlay)?;
        let logits = match regime {
            Regime::Cil => ClassifierHeads::all_logits(tape, &bound.heads, enc.pooled)?,
            Regime::Til => {
                let t = task.ok_or_else(|| contract("TIL evaluation needs a task id"))?;
                ClassifierHeads::block_logits(tape, bound.heads[t], enc.pooled)?
            }
        };
        Ok((tape.value(logits).to_vec(), overlay.trace))
    }

    /// Predicted class: global under CIL, task-local under TIL.
    pub fn predict(&self, kind: CompositionKind, regime: Regime, tokens: &[u32], task: Option<usize>) -> Result<usize> {
        let (logits, _) = self.logits(kind, regime, tokens, task)?;
        Ok(match regime {
            Regime::Cil => predict_global(&logits, &self.column_classes, self.state.stream.global_classes().len()),
            Regime::Til => argmax(&logits),
        })
    }

    /// Test accuracy of every task under one mode and regime. Task ids are
    /// passed to the model only under TIL or for the upper bound.
    pub fn evaluate(&self, kind: CompositionKind, regime: Regime) -> Result<Evaluation> {
        let stream = &self.state.stream;
        let mut per_task = Vec::with_capacity(stream.num_tasks());
        for (t, task) in stream.tasks().iter().enumerate() {
            let given = (regime == Regime::Til || kind == CompositionKind::UpperBound).then_some(t);
            let mut correct = 0usize;
            for ex in &task.test {
                let want = match regime {
                    Regime::Cil => stream.global_label(t, ex.label),
                    Regime::Til => ex.label,
                };
                correct += usize::from(self.predict(kind, regime, &ex.tokens, given)? == want);
            }
            per_task.push(if task.test.is_empty() {
                0.0
            } else {
                correct as f64 / task.test.len() as f64
            });
        }
        Ok(Evaluation {
            mode: kind,
            regime,
            average: mean(&per_task),
            per_task,
        })
    }

    /// Deterministic routing scores averaged over each task's test split.
    pub fn routing_scores(&self, regime: Regime) -> Result<RoutingMatrix> {
        let state = self.state;
        let t_count = state.num_tasks();
        let num_layers = state.backbone.config().num_layers;
        let mut layers = vec![vec![vec![0.0; t_count]; t_count]; num_layers];
        for (e, task) in state.stream.tasks().iter().enumerate() {
            for ex in &task.test {
                let (_, trace) = self.logits(CompositionKind::Wavg, regime, &ex.tokens, Some(e))?;
                for (l, row) in trace.iter().enumerate() {
                    for (a, v) in row.iter().enumerate() {
                        layers[l][a][e] += v / task.test.len() as f64;
                    }
                }
            }
        }
        Ok(RoutingMatrix { regime, layers })
    }
}
