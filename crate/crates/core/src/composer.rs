//! Composition of the adapter bank under per-layer weights.
//!
//! Output averaging adds `Σ_t w_t·H_t` to a projection, where `H_t` is the
//! delta of task `t`'s adapter. Merging first forms `ΔW = Σ_t w_t·B_t·A_t`
//! and applies it once. Both are linear in the adapters, so per-input merging
//! agrees with output averaging up to rounding; a merge with weights fixed
//! ahead of time is where the two differ.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{apply_pair, AdapterBank, BoundAdapter};
use crate::backbone::{Projection, ProjectionOverlay};
use crate::error::{contract, Result};
use crate::router::{BoundRouter, Noise};
use crate::tensor::{softmax_in_place, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompositionKind {
    Wavg,
    MergePerInput,
    MergeStatic,
    LowerBound,
    UpperBound,
    Centroid,
}

impl CompositionKind {
    pub const ALL: [CompositionKind; 6] = [
        CompositionKind::Wavg,
        CompositionKind::MergePerInput,
        CompositionKind::MergeStatic,
        CompositionKind::LowerBound,
        CompositionKind::UpperBound,
        CompositionKind::Centroid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CompositionKind::Wavg => "wavg",
            CompositionKind::MergePerInput => "merge-per-input",
            CompositionKind::MergeStatic => "merge-static",
            CompositionKind::LowerBound => "lower-bound",
            CompositionKind::UpperBound => "upper-bound",
            CompositionKind::Centroid => "centroid",
        }
    }

    pub fn uses_router(self) -> bool {
        matches!(
            self,
            CompositionKind::Wavg | CompositionKind::MergePerInput | CompositionKind::MergeStatic
        )
    }
}

impl std::str::FromStr for CompositionKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown composition mode `{s}`"))
    }
}

/// A composition kind plus, for `merge-static`, the per-layer weights fixed
/// before evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionMode {
    pub kind: CompositionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub static_weights: Option<Vec<Vec<f64>>>,
}

impl CompositionMode {
    pub fn new(kind: CompositionKind) -> Self {
        Self {
            kind,
            static_weights: None,
        }
    }
}

/// Mean pooled base-encoder representation of one task's training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskCentroid {
    pub task: String,
    pub centroid: Vec<f64>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Softmax over cosine similarities between `h` and each centroid.
pub fn centroid_weights(centroids: &[TaskCentroid], h: &[f64]) -> Vec<f64> {
    let mut w: Vec<f64> = centroids.iter().map(|c| cosine(&c.centroid, h)).collect();
    softmax_in_place(&mut w);
    w
}

/// One merged `[d, d]` matrix per layer and projection, oriented so that the
/// delta is `x·M`.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedAdapter {
    layers: Vec<[Tensor; 2]>,
}

impl MergedAdapter {
    /// `M_ℓ = Σ_t w_ℓ[t]·(scaling·B·A)ᵀ` for every layer `ℓ`.
    pub fn new(bank: &AdapterBank, weights: &[Vec<f64>]) -> Result<Self> {
        let first = bank.adapters().first().ok_or_else(|| contract("merge of an empty bank"))?;
        if weights.len() != first.layers.len() {
            return Err(contract(format!(
                "{} weight rows for {} layers",
                weights.len(),
                first.layers.len()
            )));
        }
        let d = first.layers[0].query.dim();
        let layers = weights
            .iter()
            .enumerate()
            .map(|(l, w)| {
                check_len(w.len(), bank.len())?;
                let mut out = [Tensor::zeros(&[d, d]), Tensor::zeros(&[d, d])];
                for (target, m) in Projection::ALL.into_iter().zip(out.iter_mut()) {
                    let md = m.data_mut();
                    for (a, &wt) in bank.adapters().iter().zip(w) {
                        let dw = a.layers[l].pair(target).delta_weight();
                        for i in 0..d {
                            for j in 0..d {
                                md[j * d + i] += wt * dw[i * d + j];
                            }
                        }
                    }
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<[Var; 2]> {
        self.layers
            .iter()
            .map(|[q, v]| [tape.leaf(q), tape.leaf(v)])
            .collect()
    }
}

fn check_len(got: usize, tasks: usize) -> Result<()> {
    if got == tasks {
        Ok(())
    } else {
        Err(contract(format!("{got} composition weights for {tasks} adapters")))
    }
}

/// Source of the per-layer adapter weights.
pub enum Weights<'a> {
    /// Routed from the [CLS] row entering each layer.
    Routed { router: &'a BoundRouter, noise: Noise<'a> },
    /// The same weights at every layer.
    Fixed(Vec<f64>),
    /// A pre-merged adapter.
    Merged(Vec<[Var; 2]>),
}

enum Current {
    Var(Var),
    Values(Vec<f64>),
}

/// A [`ProjectionOverlay`] that composes bound adapters.
pub struct Composer<'a> {
    adapters: &'a [BoundAdapter],
    weights: Weights<'a>,
    merge: bool,
    dropout: Option<&'a mut ChaCha8Rng>,
    current: Option<Current>,
    /// Routing vector used at each layer so far.
    pub trace: Vec<Vec<f64>>,
}

impl<'a> Composer<'a> {
    /// Output averaging (`merge = false`) or per-input merging (`merge = true`).
    pub fn new(adapters: &'a [BoundAdapter], weights: Weights<'a>, merge: bool) -> Self {
        Self {
            adapters,
            weights,
            merge,
            dropout: None,
            current: None,
            trace: Vec::new(),
        }
    }

    /// Single-adapter forward with dropout on the adapter input.
    pub fn training(adapter: &'a BoundAdapter, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            dropout: Some(rng),
            ..Self::new(std::slice::from_ref(adapter), Weights::Fixed(vec![1.0]), false)
        }
    }

    fn term(&mut self, tape: &mut Tape, t: usize, layer: usize, target: Projection, x: Var) -> Result<Var> {
        let pair = self.adapters[t].pair(layer, target);
        if self.merge {
            let at = tape.transpose(pair.down)?;
            let bt = tape.transpose(pair.up)?;
            let m = tape.matmul(at, bt)?;
            Ok(if pair.scaling == 1.0 { m } else { tape.scale(m, pair.scaling) })
        } else {
            apply_pair(tape, pair, x, self.dropout.as_deref_mut())
        }
    }
}

impl ProjectionOverlay for Composer<'_> {
    fn enter_layer(&mut self, tape: &mut Tape, layer: usize, cls: Var) -> Result<()> {
        let current = match &mut self.weights {
            Weights::Routed { router, noise } => {
                let n = router.num_tasks(tape);
                check_len(n, self.adapters.len())?;
                let u = router.draws(noise, layer, n);
                let z = router.route(tape, layer, cls, u.as_deref())?;
                self.trace.push(tape.value(z).to_vec());
                Current::Var(z)
            }
            Weights::Fixed(w) => {
                check_len(w.len(), self.adapters.len())?;
                self.trace.push(w.clone());
                Current::Values(w.clone())
            }
            Weights::Merged(m) => {
                if layer >= m.len() {
                    return Err(contract(format!("merged adapter has no layer {layer}")));
                }
                return Ok(());
            }
        };
        self.current = Some(current);
        Ok(())
    }

    fn delta(&mut self, tape: &mut Tape, layer: usize, target: Projection, x: Var) -> Result<Option<Var>> {
        if let Weights::Merged(m) = &self.weights {
            return Ok(Some(tape.matmul(x, m[layer][target as usize])?));
        }
        let mut acc: Option<Var> = None;
        for t in 0..self.adapters.len() {
            let term = match &self.current {
                Some(Current::Values(w)) => {
                    let wt = w[t];
                    if wt == 0.0 {
                        continue;
                    }
                    let h = self.term(tape, t, layer, target, x)?;
                    if wt == 1.0 {
                        h
                    } else {
                        tape.scale(h, wt)
                    }
                }
                Some(Current::Var(z)) => {
                    let z = *z;
                    let h = self.term(tape, t, layer, target, x)?;
                    let wt = tape.select(z, t)?;
                    tape.mul(h, wt)?
                }
                None => return Err(contract("composer used before entering a layer")),
            };
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
        match (acc, self.merge) {
            (Some(m), true) => Ok(Some(tape.matmul(x, m)?)),
            (acc, _) => Ok(acc),
        }
    }
}

fn compose(bank: &AdapterBank, layer: usize, target: Projection, weights: &[f64], x: &Tensor, merge: bool) -> Result<Tensor> {
    check_len(weights.len(), bank.len())?;
    let mut tape = Tape::new();
    let bound = bank.bind(&mut tape);
    let xv = tape.leaf(x);
    let mut c = Composer::new(&bound, Weights::Fixed(weights.to_vec()), merge);
    c.enter_layer(&mut tape, layer, xv)?;
    match c.delta(&mut tape, layer, target, xv)? {
        Some(v) => Ok(tape.to_tensor(v)),
        None => Ok(Tensor::zeros(x.shape())),
    }
}

/// `Σ_t w_t·H_t` at one layer and projection for rows `x: [n, d]`.
pub fn compose_wavg(bank: &AdapterBank, layer: usize, target: Projection, weights: &[f64], x: &Tensor) -> Result<Tensor> {
    compose(bank, layer, target, weights, x, false)
}

/// `x·(Σ_t w_t·ΔW_t)` at one layer and projection.
pub fn compose_merge(bank: &AdapterBank, layer: usize, target: Projection, weights: &[f64], x: &Tensor) -> Result<Tensor> {
    compose(bank, layer, target, weights, x, true)
}
