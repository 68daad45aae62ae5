//! Classifier heads: one column block per task over the pooled [CLS] row.
//!
//! Task-incremental evaluation uses a task's own block. Class-incremental
//! evaluation concatenates every block into one shared head; the head grows by
//! appending a zero-initialized block whenever a task arrives.

use std::path::Path;

use serde_json::json;

use crate::error::{contract, Result};
use crate::io::{self, Manifest};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct HeadBlock {
    pub task: String,
    /// `[d, classes]`.
    pub weight: Tensor,
    /// `[classes]`.
    pub bias: Tensor,
}

impl HeadBlock {
    pub fn num_classes(&self) -> usize {
        self.bias.numel()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassifierHeads {
    blocks: Vec<HeadBlock>,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundBlock {
    pub weight: Var,
    pub bias: Var,
}

impl ClassifierHeads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn blocks(&self) -> &[HeadBlock] {
        &self.blocks
    }

    pub fn block(&self, index: usize) -> &HeadBlock {
        &self.blocks[index]
    }

    pub fn block_mut(&mut self, index: usize) -> &mut HeadBlock {
        &mut self.blocks[index]
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Appends a zero block for a new task and returns its index.
    pub fn grow(&mut self, task: &str, dim: usize, classes: usize) -> usize {
        self.blocks.push(HeadBlock {
            task: task.to_string(),
            weight: Tensor::zeros(&[dim, classes]),
            bias: Tensor::zeros(&[classes]),
        });
        self.blocks.len() - 1
    }

    pub fn total_columns(&self) -> usize {
        self.blocks.iter().map(HeadBlock::num_classes).sum()
    }

    /// First column of each block in the concatenated head.
    pub fn column_offsets(&self) -> Vec<usize> {
        let mut offset = 0;
        self.blocks
            .iter()
            .map(|b| {
                let o = offset;
                offset += b.num_classes();
                o
            })
            .collect()
    }

    pub fn set_trainable(&mut self, index: Option<usize>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let on = Some(i) == index;
            b.weight.set_requires_grad(on);
            b.bias.set_requires_grad(on);
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<BoundBlock> {
        self.blocks
            .iter()
            .map(|b| BoundBlock {
                weight: tape.leaf(&b.weight),
                bias: tape.leaf(&b.bias),
            })
            .collect()
    }

    pub fn block_logits(tape: &mut Tape, block: BoundBlock, pooled: Var) -> Result<Var> {
        let z = tape.matmul(pooled, block.weight)?;
        tape.add(z, block.bias)
    }

    /// Logits of every block, concatenated in task order.
    pub fn all_logits(tape: &mut Tape, blocks: &[BoundBlock], pooled: Var) -> Result<Var> {
        let parts = blocks
            .iter()
            .map(|b| Self::block_logits(tape, *b, pooled))
            .collect::<Result<Vec<_>>>()?;
        tape.concat_cols(&parts)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (manifest, tensors) = self.manifest();
        io::bundle_bytes(&manifest, &tensors)
    }

    fn manifest(&self) -> (Manifest, Vec<&Tensor>) {
        let mut named = Vec::new();
        for b in &self.blocks {
            named.push((format!("{}.weight", b.task), &b.weight));
            named.push((format!("{}.bias", b.task), &b.bias));
        }
        let tasks: Vec<&str> = self.blocks.iter().map(|b| b.task.as_str()).collect();
        let tensors = named.iter().map(|(_, t)| *t).collect();
        (Manifest::new("heads", json!({ "tasks": tasks }), &named), tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, tensors) = io::read_bundle(path)?;
        if manifest.kind != "heads" {
            return Err(contract(format!("expected heads bundle, found {}", manifest.kind)));
        }
        let tasks: Vec<String> = serde_json::from_value(manifest.meta["tasks"].clone())?;
        if tensors.len() != tasks.len() * 2 {
            return Err(contract("heads bundle tensor count mismatch"));
        }
        let mut it = tensors.into_iter();
        let blocks = tasks
            .into_iter()
            .map(|task| HeadBlock {
                task,
                weight: it.next().expect("counted"),
                bias: it.next().expect("counted"),
            })
            .collect();
        Ok(Self { blocks })
    }
}
