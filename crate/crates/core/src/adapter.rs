//! Per-task low-rank adapters on the query and value projections.
//!
//! A pair `(A, B)` with `A: [r, d]` and `B: [d, r]` contributes
//! `(α/r)·B·A·x` to a projection. `B` starts at zero, so a new adapter is an
//! exact identity. The scaling numerator α equals the rank, making α/r = 1.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backbone::{Backbone, BackboneConfig, Projection};
use crate::error::{config, contract, Error, Result};
use crate::io::{self, Manifest};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub rank: usize,
    pub dropout: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            dropout: 0.1,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.rank == 0 || self.rank > dim {
            return Err(config(
                "adapter.rank",
                format!("rank {} must lie in 1..={dim}", self.rank),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config("adapter.dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    /// Down projection `A`, `[r, d]`.
    pub down: Tensor,
    /// Up projection `B`, `[d, r]`.
    pub up: Tensor,
    pub scaling: f64,
    pub dropout: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundPair {
    pub down: Var,
    pub up: Var,
    pub scaling: f64,
    pub dropout: f64,
}

impl LoraPair {
    pub fn new(dim: usize, cfg: &AdapterConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate(dim)?;
        let bound = 1.0 / (dim as f64).sqrt();
        let down = (0..cfg.rank * dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Ok(Self {
            down: Tensor::new(vec![cfg.rank, dim], down)?,
            up: Tensor::zeros(&[dim, cfg.rank]),
            scaling: 1.0,
            dropout: cfg.dropout,
        })
    }

    pub fn from_parts(down: Tensor, up: Tensor, scaling: f64, dropout: f64) -> Result<Self> {
        let (r, d) = match down.shape() {
            [r, d] => (*r, *d),
            s => return Err(contract(format!("down projection must be 2-D, got {s:?}"))),
        };
        if up.shape() != [d, r] || r == 0 {
            return Err(Error::Shape {
                op: "lora_pair",
                lhs: down.shape().to_vec(),
                rhs: up.shape().to_vec(),
            });
        }
        Ok(Self {
            down,
            up,
            scaling,
            dropout,
        })
    }

    pub fn rank(&self) -> usize {
        self.down.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.down.shape()[1]
    }

    pub fn parameter_count(&self) -> usize {
        self.down.numel() + self.up.numel()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundPair {
        BoundPair {
            down: tape.leaf(&self.down),
            up: tape.leaf(&self.up),
            scaling: self.scaling,
            dropout: self.dropout,
        }
    }

    /// `scaling·B·A`, the `[d, d]` weight delta, row-major.
    pub fn delta_weight(&self) -> Vec<f64> {
        let (r, d) = (self.rank(), self.dim());
        let a = self.down.data();
        let b = self.up.data();
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for k in 0..r {
                let s = self.scaling * b[i * r + k];
                if s == 0.0 {
                    continue;
                }
                for j in 0..d {
                    out[i * d + j] += s * a[k * d + j];
                }
            }
        }
        out
    }

    fn set_requires_grad(&mut self, on: bool) {
        self.down.set_requires_grad(on);
        self.up.set_requires_grad(on);
    }
}

/// Applies a bound pair to token rows `x: [n, d]`, returning `[n, d]`.
/// Dropout on the adapter input is applied only when `dropout_rng` is given.
pub fn apply_pair(
    tape: &mut Tape,
    pair: &BoundPair,
    x: Var,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let d = tape.shape(pair.down)[1];
    let x_shape = tape.shape(x).to_vec();
    if x_shape.len() != 2 || x_shape[1] != d {
        return Err(contract(format!(
            "adapter expects width {d}, got input of shape {x_shape:?}"
        )));
    }
    let input = match dropout_rng {
        Some(rng) if pair.dropout > 0.0 => {
            let keep = 1.0 - pair.dropout;
            let mask = (0..x_shape[0] * d)
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            tape.dropout_mask(x, mask)?
        }
        _ => x,
    };
    let at = tape.transpose(pair.down)?;
    let low = tape.matmul(input, at)?;
    let bt = tape.transpose(pair.up)?;
    let out = tape.matmul(low, bt)?;
    Ok(if pair.scaling == 1.0 {
        out
    } else {
        tape.scale(out, pair.scaling)
    })
}

/// `(α/r)·B·(A·x)` for each row of `x`, with dropout on `x` when `training`.
pub fn adapter_delta(
    pair: &LoraPair,
    x: &Tensor,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = pair.bind(&mut tape);
    let xv = tape.leaf(x);
    let out = apply_pair(&mut tape, &bound, xv, training.then_some(rng))?;
    Ok(tape.to_tensor(out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerAdapter {
    pub query: LoraPair,
    pub value: LoraPair,
}

impl LayerAdapter {
    pub fn pair(&self, target: Projection) -> &LoraPair {
        match target {
            Projection::Query => &self.query,
            Projection::Value => &self.value,
        }
    }

    pub fn pair_mut(&mut self, target: Projection) -> &mut LoraPair {
        match target {
            Projection::Query => &mut self.query,
            Projection::Value => &mut self.value,
        }
    }
}

/// All adapters of one task: one query pair and one value pair per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskAdapter {
    pub task: String,
    pub layers: Vec<LayerAdapter>,
}

#[derive(Clone, Debug)]
pub struct BoundAdapter {
    pub layers: Vec<[BoundPair; 2]>,
}

impl BoundAdapter {
    pub fn pair(&self, layer: usize, target: Projection) -> &BoundPair {
        &self.layers[layer][target as usize]
    }
}

impl TaskAdapter {
    pub fn new(task: &str, backbone: &BackboneConfig, cfg: &AdapterConfig, seed: u64) -> Result<Self> {
        let layers = (0..backbone.num_layers)
            .map(|l| -> Result<LayerAdapter> {
                let pair = |target: Projection| {
                    let mut r = rng::stream(seed, &format!("adapter/{task}/{l}/{}", target.name()));
                    LoraPair::new(backbone.hidden_dim, cfg, &mut r)
                };
                Ok(LayerAdapter {
                    query: pair(Projection::Query)?,
                    value: pair(Projection::Value)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            task: task.to_string(),
            layers,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.query.parameter_count() + l.value.parameter_count())
            .sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundAdapter {
        BoundAdapter {
            layers: self
                .layers
                .iter()
                .map(|l| [l.query.bind(tape), l.value.bind(tape)])
                .collect(),
        }
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        for l in &mut self.layers {
            l.query.set_requires_grad(on);
            l.value.set_requires_grad(on);
        }
    }

    /// Trainable tensors in a fixed order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(self.layers.len() * 4);
        for l in &mut self.layers {
            out.push(&mut l.query.down);
            out.push(&mut l.query.up);
            out.push(&mut l.value.down);
            out.push(&mut l.value.up);
        }
        out
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for target in Projection::ALL {
                let p = layer.pair(target);
                out.push((format!("layer{l}.{}.down", target.name()), &p.down));
                out.push((format!("layer{l}.{}.up", target.name()), &p.up));
            }
        }
        out
    }

    /// Serialized form: manifest bundle with the task name, scaling and
    /// dropout in the metadata.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let named = self.named();
        let (scaling, dropout) = self
            .layers
            .first()
            .map_or((1.0, 0.0), |l| (l.query.scaling, l.query.dropout));
        let manifest = Manifest::new(
            "adapter",
            json!({ "task": self.task, "scaling": scaling, "dropout": dropout }),
            &named,
        );
        let tensors: Vec<&Tensor> = named.iter().map(|(_, t)| *t).collect();
        io::bundle_bytes(&manifest, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, tensors) = io::parse_bundle(bytes)?;
        if manifest.kind != "adapter" || tensors.len() % 4 != 0 {
            return Err(contract("not an adapter bundle"));
        }
        let task = manifest.meta["task"]
            .as_str()
            .ok_or_else(|| contract("adapter bundle lacks a task name"))?
            .to_string();
        let scaling = manifest.meta["scaling"].as_f64().unwrap_or(1.0);
        let dropout = manifest.meta["dropout"].as_f64().unwrap_or(0.0);
        let mut it = tensors.into_iter();
        let mut layers = Vec::new();
        while let (Some(qa), Some(qb), Some(va), Some(vb)) = (it.next(), it.next(), it.next(), it.next()) {
            layers.push(LayerAdapter {
                query: LoraPair::from_parts(qa, qb, scaling, dropout)?,
                value: LoraPair::from_parts(va, vb, scaling, dropout)?,
            });
        }
        Ok(Self { task, layers })
    }
}

/// Ordered adapters for tasks `1..=T`; at most one is trainable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdapterBank {
    adapters: Vec<TaskAdapter>,
    trainable: Option<usize>,
}

impl AdapterBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_adapters(adapters: Vec<TaskAdapter>) -> Self {
        let mut bank = Self {
            adapters,
            trainable: None,
        };
        bank.set_trainable(None);
        bank
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn adapters(&self) -> &[TaskAdapter] {
        &self.adapters
    }

    pub fn get(&self, index: usize) -> &TaskAdapter {
        &self.adapters[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut TaskAdapter {
        &mut self.adapters[index]
    }

    pub fn trainable(&self) -> Option<usize> {
        self.trainable
    }

    /// Number of adapters flagged trainable.
    pub fn trainable_count(&self) -> usize {
        self.adapters
            .iter()
            .filter(|a| a.layers.iter().any(|l| l.query.down.requires_grad()))
            .count()
    }

    /// Appends a zero-`B` adapter for `task`, makes it the only trainable
    /// one, and returns its 1-based task ordinal.
    pub fn add_task_adapter(
        &mut self,
        backbone: &BackboneConfig,
        cfg: &AdapterConfig,
        task: &str,
        seed: u64,
    ) -> Result<usize> {
        let adapter = TaskAdapter::new(task, backbone, cfg, seed)?;
        self.adapters.push(adapter);
        let index = self.adapters.len() - 1;
        self.set_trainable(Some(index));
        Ok(index + 1)
    }

    /// Makes adapter `index` (0-based) the sole trainable one, or freezes all.
    pub fn set_trainable(&mut self, index: Option<usize>) {
        for (i, a) in self.adapters.iter_mut().enumerate() {
            a.set_requires_grad(Some(i) == index);
        }
        self.trainable = index;
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<BoundAdapter> {
        self.adapters.iter().map(|a| a.bind(tape)).collect()
    }

    /// Trainable parameters of one task's adapters over backbone parameters.
    pub fn parameter_fraction(&self, backbone: &Backbone) -> Result<f64> {
        let per_task = self
            .adapters
            .first()
            .ok_or_else(|| contract("parameter fraction of an empty bank"))?
            .parameter_count();
        Ok(per_task as f64 / backbone.parameter_count() as f64)
    }

    pub fn file_name(ordinal: usize) -> String {
        format!("adapter_task{ordinal}.bin")
    }

    /// Writes `adapter_task{t}.bin` for every task into `dir`.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        self.adapters
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let path = dir.join(Self::file_name(i + 1));
                io::write_atomic(&path, &a.to_bytes()?)?;
                Ok(path)
            })
            .collect()
    }

    pub fn load(dir: &Path, count: usize) -> Result<Self> {
        let adapters = (1..=count)
            .map(|t| TaskAdapter::from_bytes(&std::fs::read(dir.join(Self::file_name(t)))?))
            .collect::<Result<_>>()?;
        Ok(Self::from_adapters(adapters))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn cfg() -> BackboneConfig {
        BackboneConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            vocab_size: 20,
            max_seq_len: 8,
            seed: 1,
        }
    }

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn hand_computed_delta() {
        let pair = LoraPair::from_parts(mat(1, 2, &[1.0, 0.0]), mat(2, 1, &[1.0, 0.0]), 1.0, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = adapter_delta(&pair, &mat(1, 2, &[3.0, 9.0]), false, &mut rng).unwrap();
        assert_eq!(out.data(), &[3.0, 0.0]);
    }

    #[test]
    fn zero_up_projection_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pair = LoraPair::new(8, &AdapterConfig::default(), &mut rng).unwrap();
        let x = mat(3, 8, &(0..24).map(|i| i as f64 - 7.0).collect::<Vec<_>>());
        let out = adapter_delta(&pair, &x, false, &mut rng).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn width_mismatch_is_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pair = LoraPair::new(8, &AdapterConfig::default(), &mut rng).unwrap();
        let err = adapter_delta(&pair, &Tensor::zeros(&[2, 5]), false, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn rank_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let zero = AdapterConfig { rank: 0, dropout: 0.0 };
        assert!(LoraPair::new(8, &zero, &mut rng).is_err());
        let wide = AdapterConfig { rank: 9, dropout: 0.0 };
        assert!(LoraPair::new(8, &wide, &mut rng).is_err());
    }

    #[test]
    fn add_marks_only_newest_trainable() {
        let mut bank = AdapterBank::new();
        let id = bank.add_task_adapter(&cfg(), &AdapterConfig::default(), "a", 0).unwrap();
        assert_eq!((id, bank.len()), (1, 1));
        assert_eq!(bank.trainable_count(), 1);
        let id = bank.add_task_adapter(&cfg(), &AdapterConfig::default(), "b", 0).unwrap();
        assert_eq!(id, 2);
        assert_eq!(bank.trainable_count(), 1);
        assert_eq!(bank.trainable(), Some(1));
        assert!(!bank.get(0).layers[0].query.down.requires_grad());
        assert!(bank.get(0).layers.iter().all(|l| l.query.up.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn parameter_fraction_is_linear_in_rank() {
        let b = Backbone::new(cfg()).unwrap();
        let mut bank4 = AdapterBank::new();
        bank4
            .add_task_adapter(&cfg(), &AdapterConfig { rank: 2, dropout: 0.1 }, "a", 0)
            .unwrap();
        let mut bank8 = AdapterBank::new();
        bank8
            .add_task_adapter(&cfg(), &AdapterConfig { rank: 4, dropout: 0.1 }, "a", 0)
            .unwrap();
        assert_eq!(bank8.get(0).parameter_count(), 2 * bank4.get(0).parameter_count());
        // 2 layers × 2 targets × (r·d + d·r) with r=2, d=8
        assert_eq!(bank4.get(0).parameter_count(), 2 * 2 * 32);
        let f = bank4.parameter_fraction(&b).unwrap();
        assert!((f - 128.0 / b.parameter_count() as f64).abs() < 1e-15);
    }

    #[test]
    fn bytes_round_trip() {
        let a = TaskAdapter::new("x", &cfg(), &AdapterConfig::default(), 5).unwrap();
        let b = TaskAdapter::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_only_when_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut pair = LoraPair::new(8, &AdapterConfig { rank: 2, dropout: 0.5 }, &mut rng).unwrap();
        pair.up = Tensor::new(vec![8, 2], (0..16).map(|i| i as f64 * 0.1).collect()).unwrap();
        let x = mat(4, 8, &[1.0; 32]);
        let eval1 = adapter_delta(&pair, &x, false, &mut rng).unwrap();
        let eval2 = adapter_delta(&pair, &x, false, &mut rng).unwrap();
        assert_eq!(eval1, eval2);
        let train = adapter_delta(&pair, &x, true, &mut rng).unwrap();
        assert_ne!(train, eval1);
    }

    proptest! {
        #[test]
        fn delta_is_linear(seed in 0u64..1000, xs in proptest::collection::vec(-5.0f64..5.0, 16), ys in proptest::collection::vec(-5.0f64..5.0, 16)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pair = LoraPair::new(8, &AdapterConfig { rank: 3, dropout: 0.1 }, &mut rng).unwrap();
            pair.up = Tensor::new(vec![8, 3], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let x = mat(2, 8, &xs);
            let y = mat(2, 8, &ys);
            let sum = mat(2, 8, &xs.iter().zip(&ys).map(|(a, b)| a + b).collect::<Vec<_>>());
            let dx = adapter_delta(&pair, &x, false, &mut rng).unwrap();
            let dy = adapter_delta(&pair, &y, false, &mut rng).unwrap();
            let ds = adapter_delta(&pair, &sum, false, &mut rng).unwrap();
            for i in 0..16 {
                prop_assert!((ds.data()[i] - dx.data()[i] - dy.data()[i]).abs() < 1e-10);
            }
        }
    }
}
