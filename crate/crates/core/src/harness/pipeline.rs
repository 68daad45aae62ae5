//! Sequential task training followed by one round of router learning.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{RouterConfig, RunConfig, TrainingConfig};
use crate::adapter::{AdapterBank, BoundAdapter};
use crate::backbone::{Backbone, BoundBackbone};
use crate::composer::{Composer, TaskCentroid, Weights};
use crate::data::{Example, Task, TaskStream};
use crate::error::{contract, Error, Result};
use crate::head::{BoundBlock, ClassifierHeads};
use crate::memory::{MemoryBuffer, Regime, RouterExample};
use crate::rng;
use crate::router::{BoundRouter, Noise, RouterStack};
use crate::tensor::{softmax_in_place, AdamW, AdamWConfig, LinearWarmup, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    pub task: String,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub best_val_loss: f64,
}

/// Everything produced by the task stream: frozen backbone, one adapter and
/// head block per task, the memory and the task centroids.
#[derive(Clone, Debug)]
pub struct TrainedState {
    pub stream: TaskStream,
    pub backbone: Backbone,
    pub bank: AdapterBank,
    pub heads: ClassifierHeads,
    pub memory: MemoryBuffer,
    pub centroids: Vec<TaskCentroid>,
    pub task_logs: Vec<TaskLog>,
}

/// Model parameters placed on one tape.
pub(crate) struct Bound {
    pub backbone: BoundBackbone,
    pub adapters: Vec<BoundAdapter>,
    pub heads: Vec<BoundBlock>,
}

impl TrainedState {
    pub(crate) fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            backbone: self.backbone.bind(tape),
            adapters: self.bank.bind(tape),
            heads: self.heads.bind(tape),
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.stream.num_tasks()
    }

    /// Global class id of every concatenated head column.
    pub fn column_classes(&self) -> Vec<usize> {
        self.stream.column_classes()
    }

    /// Head columns that represent global class `class`.
    pub fn class_columns(&self, class: usize) -> Vec<usize> {
        self.column_classes()
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// Resamples the memory at a new fraction.
    pub fn repopulate_memory(&mut self, fraction: f64, seed: u64) -> Result<()> {
        let mut memory = MemoryBuffer::new(fraction, rng::derive_seed(seed, "memory"))?;
        for (t, task) in self.stream.tasks().iter().enumerate() {
            memory.populate(task, t, &global_ids(&self.stream, t))?;
        }
        self.memory = memory;
        Ok(())
    }
}

fn global_ids(stream: &TaskStream, t: usize) -> Vec<usize> {
    (0..stream.task(t).num_classes())
        .map(|c| stream.global_label(t, c))
        .collect()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Global class with the largest summed probability over its columns.
pub(crate) fn predict_global(logits: &[f64], column_classes: &[usize], num_classes: usize) -> usize {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    let mut by_class = vec![0.0; num_classes];
    for (prob, &c) in p.iter().zip(column_classes) {
        by_class[c] += prob;
    }
    argmax(&by_class)
}

fn mean_loss(tape: &mut Tape, losses: &[Var]) -> Result<Var> {
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    Ok(tape.scale(total, 1.0 / losses.len() as f64))
}

fn step(opt: &mut AdamW, params: &mut [&mut Tensor], lr: f64) -> Result<()> {
    opt.step_with_lr(params, lr)?;
    params.iter_mut().for_each(|p| p.clear_grad());
    Ok(())
}

/// Trains one task's adapter and head block in isolation.
struct TaskTrainer<'a> {
    backbone: &'a Backbone,
    cfg: &'a TrainingConfig,
    task: &'a Task,
    index: usize,
}

impl TaskTrainer<'_> {
    fn block_forward(
        &self,
        tape: &mut Tape,
        backbone: &BoundBackbone,
        adapter: &BoundAdapter,
        block: BoundBlock,
        ex: &Example,
        dropout: Option<&mut rand_chacha::ChaCha8Rng>,
    ) -> Result<Var> {
        let state = match dropout {
            Some(rng) => {
                let mut overlay = Composer::training(adapter, rng);
                self.backbone.encode(tape, backbone, &ex.tokens, &mut overlay)?
            }
            None => {
                let mut overlay = Composer::new(std::slice::from_ref(adapter), Weights::Fixed(vec![1.0]), false);
                self.backbone.encode(tape, backbone, &ex.tokens, &mut overlay)?
            }
        };
        ClassifierHeads::block_logits(tape, block, state.pooled)
    }

    /// Accuracy and mean loss on the validation split.
    fn validate(&self, bank: &AdapterBank, heads: &ClassifierHeads) -> Result<(f64, f64)> {
        let val = &self.task.val;
        if val.is_empty() {
            return Ok((0.0, 0.0));
        }
        let (mut correct, mut loss) = (0usize, 0.0);
        for ex in val {
            let mut tape = Tape::new();
            let bb = self.backbone.bind(&mut tape);
            let ba = bank.get(self.index).bind(&mut tape);
            let hb = heads.bind(&mut tape)[self.index];
            let logits = self.block_forward(&mut tape, &bb, &ba, hb, ex, None)?;
            let nll = tape.group_nll(logits, &[ex.label])?;
            loss += tape.scalar_value(nll);
            correct += usize::from(argmax(tape.value(logits)) == ex.label);
        }
        Ok((correct as f64 / val.len() as f64, loss / val.len() as f64))
    }

    fn train(&self, bank: &mut AdapterBank, heads: &mut ClassifierHeads, seed: u64) -> Result<TaskLog> {
        let cfg = self.cfg;
        let name = &self.task.name;
        let mut order_rng = rng::stream(seed, &format!("train/{name}/order"));
        let mut dropout_rng = rng::stream(seed, &format!("train/{name}/dropout"));
        let steps_per_epoch = self.task.train.len().div_ceil(cfg.batch_size);
        let schedule = LinearWarmup::new(cfg.lr, cfg.warmup_ratio, cfg.max_epochs * steps_per_epoch);
        let mut opt = AdamW::new(AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        });

        let mut best = (f64::NEG_INFINITY, f64::INFINITY);
        let mut best_epoch = 0;
        let mut snapshot = (bank.get(self.index).clone(), heads.block(self.index).clone());
        let mut stale = 0;
        let mut epochs_run = 0;
        let mut indices: Vec<usize> = (0..self.task.train.len()).collect();
        let mut global_step = 0;

        for epoch in 0..cfg.max_epochs {
            epochs_run = epoch + 1;
            indices.shuffle(&mut order_rng);
            for batch in indices.chunks(cfg.batch_size) {
                let mut tape = Tape::new();
                let bb = self.backbone.bind(&mut tape);
                let ba = bank.get(self.index).bind(&mut tape);
                let hb = heads.bind(&mut tape)[self.index];
                let mut losses = Vec::with_capacity(batch.len());
                for &i in batch {
                    let ex = &self.task.train[i];
                    let logits = self.block_forward(&mut tape, &bb, &ba, hb, ex, Some(&mut dropout_rng))?;
                    losses.push(tape.group_nll(logits, &[ex.label])?);
                }
                let loss = mean_loss(&mut tape, &losses)?;
                if !tape.scalar_value(loss).is_finite() {
                    return Err(Error::Divergence { task: name.clone() });
                }
                tape.backward(loss)?;

                let adapter = bank.get_mut(self.index);
                for (l, layer) in ba.layers.iter().enumerate() {
                    let target = &mut adapter.layers[l];
                    tape.accumulate_into(layer[0].down, &mut target.query.down)?;
                    tape.accumulate_into(layer[0].up, &mut target.query.up)?;
                    tape.accumulate_into(layer[1].down, &mut target.value.down)?;
                    tape.accumulate_into(layer[1].up, &mut target.value.up)?;
                }
                let block = heads.block_mut(self.index);
                tape.accumulate_into(hb.weight, &mut block.weight)?;
                tape.accumulate_into(hb.bias, &mut block.bias)?;

                let mut params = adapter.tensors_mut();
                params.push(&mut block.weight);
                params.push(&mut block.bias);
                step(&mut opt, &mut params, schedule.rate(global_step))?;
                global_step += 1;
            }

            let (acc, loss) = self.validate(bank, heads)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { task: name.clone() });
            }
            if acc > best.0 || (acc == best.0 && loss < best.1) {
                best = (acc, loss);
                best_epoch = epoch + 1;
                snapshot = (bank.get(self.index).clone(), heads.block(self.index).clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }

        *bank.get_mut(self.index) = snapshot.0;
        *heads.block_mut(self.index) = snapshot.1;
        Ok(TaskLog {
            task: name.clone(),
            epochs_run,
            best_epoch,
            best_val_accuracy: best.0,
            best_val_loss: best.1,
        })
    }
}

/// Mean pooled base representation over a task's training split.
pub fn task_centroid(backbone: &Backbone, task: &Task) -> Result<TaskCentroid> {
    let d = backbone.config().hidden_dim;
    let mut sum = vec![0.0; d];
    for ex in &task.train {
        for (s, v) in sum.iter_mut().zip(backbone.pooled_base(&ex.tokens)?) {
            *s += v;
        }
    }
    let n = task.train.len().max(1) as f64;
    Ok(TaskCentroid {
        task: task.name.clone(),
        centroid: sum.into_iter().map(|s| s / n).collect(),
    })
}

/// Hook called after each task, with the state so far.
pub type TaskHook<'a> = dyn FnMut(usize, &AdapterBank) -> Result<()> + 'a;

/// Trains the stream task by task. Each task gets a fresh adapter and head
/// block, trained with every earlier adapter frozen; its memory share and
/// centroid are recorded afterwards.
pub fn run_stream(stream: &TaskStream, cfg: &RunConfig) -> Result<TrainedState> {
    run_stream_with_hook(stream, cfg, &mut |_, _| Ok(()))
}

pub fn run_stream_with_hook(stream: &TaskStream, cfg: &RunConfig, hook: &mut TaskHook<'_>) -> Result<TrainedState> {
    cfg.validate()?;
    let backbone = Backbone::new(cfg.backbone.clone())?;
    let mut bank = AdapterBank::new();
    let mut heads = ClassifierHeads::new();
    let mut memory = MemoryBuffer::new(cfg.memory.fraction, rng::derive_seed(cfg.seed, "memory"))?;
    let mut centroids = Vec::with_capacity(stream.num_tasks());
    let mut task_logs = Vec::with_capacity(stream.num_tasks());
    let d = backbone.config().hidden_dim;

    for (t, task) in stream.tasks().iter().enumerate() {
        for ex in task.train.iter().chain(&task.val).chain(&task.test) {
            backbone.check_tokens(&ex.tokens)?;
        }
        bank.add_task_adapter(backbone.config(), &cfg.adapter, &task.name, cfg.seed)?;
        heads.grow(&task.name, d, task.num_classes());
        heads.set_trainable(Some(t));
        let trainer = TaskTrainer {
            backbone: &backbone,
            cfg: &cfg.training,
            task,
            index: t,
        };
        task_logs.push(trainer.train(&mut bank, &mut heads, cfg.seed)?);
        bank.set_trainable(None);
        heads.set_trainable(None);
        memory.populate(task, t, &global_ids(stream, t))?;
        centroids.push(task_centroid(&backbone, task)?);
        hook(t, &bank)?;
    }

    Ok(TrainedState {
        stream: stream.clone(),
        backbone,
        bank,
        heads,
        memory,
        centroids,
        task_logs,
    })
}

/// A router stack trained on memory, plus the per-layer merge weights derived
/// from it: the mean deterministic routing vector over the same memory view.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedRouter {
    pub stack: RouterStack,
    pub static_weights: Vec<Vec<f64>>,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// The class-incremental stack and one task-incremental stack per task.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Routers {
    pub cil: Option<TrainedRouter>,
    pub til: Vec<TrainedRouter>,
}

/// Forward pass with a bound router; returns the logits used for the loss
/// under `regime` and the routing trace.
#[allow(clippy::too_many_arguments)]
pub(crate) fn routed_logits(
    state: &TrainedState,
    tape: &mut Tape,
    bound: &Bound,
    router: &BoundRouter,
    noise: Noise<'_>,
    tokens: &[u32],
    regime: Regime,
    task: usize,
) -> Result<(Var, Vec<Vec<f64>>)> {
    let mut overlay = Composer::new(&bound.adapters, Weights::Routed { router, noise }, false);
    let enc = state.backbone.encode(tape, &bound.backbone, tokens, &mut overlay)?;
    let logits = match regime {
        Regime::Cil => ClassifierHeads::all_logits(tape, &bound.heads, enc.pooled)?,
        Regime::Til => ClassifierHeads::block_logits(tape, bound.heads[task], enc.pooled)?,
    };
    Ok((logits, overlay.trace))
}

fn target_columns(state: &TrainedState, regime: Regime, task: usize) -> Vec<Vec<usize>> {
    match regime {
        Regime::Cil => (0..state.stream.global_classes().len())
            .map(|c| state.class_columns(c))
            .collect(),
        Regime::Til => (0..state.stream.task(task).num_classes()).map(|c| vec![c]).collect(),
    }
}

/// Router training loss for one example: the model is bound to `tape` as
/// constants, so only the router nodes can carry gradients. `target` is a
/// global class under CIL and a local class of `task` under TIL.
#[allow(clippy::too_many_arguments)]
pub fn router_example_loss(
    state: &TrainedState,
    tape: &mut Tape,
    router: &BoundRouter,
    noise: Noise<'_>,
    tokens: &[u32],
    regime: Regime,
    task: usize,
    target: usize,
) -> Result<Var> {
    let columns = target_columns(state, regime, task);
    let cols = columns
        .get(target)
        .ok_or_else(|| contract(format!("target class {target} out of range")))?;
    let bound = state.bind(tape);
    let (logits, _) = routed_logits(state, tape, &bound, router, noise, tokens, regime, task)?;
    tape.group_nll(logits, cols)
}

/// Deterministic routing vectors at every layer for one input.
pub fn routing_trace(state: &TrainedState, stack: &RouterStack, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let bound = state.bind(&mut tape);
    let router = stack.bind(&mut tape)?;
    let (_, trace) = routed_logits(state, &mut tape, &bound, &router, Noise::Deterministic, tokens, Regime::Cil, 0)?;
    Ok(trace)
}

fn mean_trace(state: &TrainedState, stack: &RouterStack, examples: &[RouterExample<'_>]) -> Result<Vec<Vec<f64>>> {
    let mut acc = vec![vec![0.0; stack.num_tasks()]; stack.num_layers()];
    for ex in examples {
        for (a, row) in acc.iter_mut().zip(routing_trace(state, stack, ex.tokens)?) {
            a.iter_mut().zip(row).for_each(|(x, v)| *x += v);
        }
    }
    let n = examples.len() as f64;
    Ok(acc
        .into_iter()
        .map(|row| row.into_iter().map(|x| x / n).collect())
        .collect())
}

/// Trains a zero-initialized router stack on a memory view. Only router
/// parameters receive gradients; all model parameters stay frozen.
pub fn train_router(
    state: &TrainedState,
    cfg: &RouterConfig,
    regime: Regime,
    task: Option<usize>,
    seed: u64,
) -> Result<TrainedRouter> {
    let examples = state.memory.router_training_view(regime, task)?;
    if examples.is_empty() {
        return Err(contract("router training needs a non-empty memory view"));
    }
    let task_index = task.unwrap_or(0);
    let label = match (regime, task) {
        (Regime::Til, Some(t)) => format!("router/til/{}", state.stream.task(t).name),
        _ => "router/cil".to_string(),
    };
    let mut stack = RouterStack::zeros(
        state.backbone.config().num_layers,
        state.backbone.config().hidden_dim,
        state.num_tasks(),
        cfg.relaxation,
        cfg.temperature,
    )?;
    stack.set_requires_grad(true);

    let mut order_rng = rng::stream(seed, &format!("{label}/order"));
    let mut noise_rng = rng::stream(seed, &format!("{label}/noise"));
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let schedule = LinearWarmup::new(cfg.lr, cfg.warmup_ratio, cfg.epochs * steps_per_epoch);
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let targets = target_columns(state, regime, task_index);

    let mut indices: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0;
    for _ in 0..cfg.epochs {
        indices.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for batch in indices.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = state.bind(&mut tape);
            let router = stack.bind(&mut tape)?;
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let ex = &examples[i];
                let noise = Noise::Sampled(&mut noise_rng);
                let (logits, _) =
                    routed_logits(state, &mut tape, &bound, &router, noise, ex.tokens, regime, task_index)?;
                losses.push(tape.group_nll(logits, &targets[ex.target])?);
            }
            let loss = mean_loss(&mut tape, &losses)?;
            let value = tape.scalar_value(loss);
            if !value.is_finite() {
                return Err(Error::Divergence { task: label });
            }
            epoch_loss += value * batch.len() as f64;
            tape.backward(loss)?;
            for (layer, bl) in stack.layers_mut().iter_mut().zip(&router.layers) {
                tape.accumulate_into(bl.weight, &mut layer.weight)?;
                tape.accumulate_into(bl.bias, &mut layer.bias)?;
            }
            step(&mut opt, &mut stack.tensors_mut(), schedule.rate(global_step))?;
            global_step += 1;
        }
        epoch_losses.push(epoch_loss / examples.len() as f64);
    }
    stack.set_requires_grad(false);
    let static_weights = mean_trace(state, &stack, &examples)?;
    Ok(TrainedRouter {
        stack,
        static_weights,
        epoch_losses,
    })
}

/// Trains the routers needed by `regimes`.
pub fn train_routers(state: &TrainedState, cfg: &RouterConfig, regimes: &[Regime], seed: u64) -> Result<Routers> {
    let mut routers = Routers::default();
    if regimes.contains(&Regime::Cil) {
        routers.cil = Some(train_router(state, cfg, Regime::Cil, None, seed)?);
    }
    if regimes.contains(&Regime::Til) {
        routers.til = (0..state.num_tasks())
            .map(|t| train_router(state, cfg, Regime::Til, Some(t), seed))
            .collect::<Result<_>>()?;
    }
    Ok(routers)
}
