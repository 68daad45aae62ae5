//! Episodic memory filled by uniform sampling from each task's training split.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{config, contract, Error, Result};
use crate::rng;

/// One stored example. `task_id` is the task's 0-based stream position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub task_id: usize,
    pub example_id: u64,
    /// Includes the leading [CLS] id.
    pub token_ids: Vec<u32>,
    pub label: usize,
    pub global_label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Regime {
    Cil,
    Til,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Cil => "CIL",
            Regime::Til => "TIL",
        }
    }
}

/// A router training example. `target` is a global class id under CIL and a
/// task-local one under TIL.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RouterExample<'a> {
    pub task_id: usize,
    pub tokens: &'a [u32],
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBuffer {
    fraction: f64,
    seed: u64,
    entries: Vec<MemoryEntry>,
    sampled: BTreeSet<usize>,
}

/// Entries kept from a training split of `n` examples: `p·n` rounded half up.
pub fn capacity(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) + 0.5).floor() as usize
}

pub fn validate_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction <= 1.0 {
        Ok(())
    } else {
        Err(config("memory.fraction", format!("{fraction} is outside (0, 1]")))
    }
}

impl MemoryBuffer {
    pub fn new(fraction: f64, seed: u64) -> Result<Self> {
        validate_fraction(fraction)?;
        Ok(Self {
            fraction,
            seed,
            entries: Vec::new(),
            sampled: BTreeSet::new(),
        })
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn task_entries(&self, task_id: usize) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.iter().filter(move |e| e.task_id == task_id)
    }

    /// Samples `capacity(p, |train|)` training examples of `task` without
    /// replacement. `global_ids[c]` is the global id of local class `c`.
    pub fn populate(&mut self, task: &Task, task_id: usize, global_ids: &[usize]) -> Result<usize> {
        if !self.sampled.insert(task_id) {
            return Err(contract(format!("memory already holds task {task_id}")));
        }
        let n = task.train.len();
        let k = capacity(self.fraction, n).min(n);
        let mut r = rng::stream(self.seed, &format!("memory/{}", task.name));
        for i in index::sample(&mut r, n, k) {
            let ex = &task.train[i];
            self.entries.push(MemoryEntry {
                task_id,
                example_id: ex.id,
                token_ids: ex.tokens.clone(),
                label: ex.label,
                global_label: global_ids[ex.label],
            });
        }
        Ok(k)
    }

    /// Examples for router training: every entry, shuffled, with global
    /// labels under CIL; the entries of `task` with local labels under TIL.
    pub fn router_training_view(&self, regime: Regime, task: Option<usize>) -> Result<Vec<RouterExample<'_>>> {
        fn view(e: &MemoryEntry, target: usize) -> RouterExample<'_> {
            RouterExample {
                task_id: e.task_id,
                tokens: &e.token_ids,
                target,
            }
        }
        match (regime, task) {
            (Regime::Cil, _) => {
                let mut out: Vec<_> = self.entries.iter().map(|e| view(e, e.global_label)).collect();
                out.shuffle(&mut rng::stream(self.seed, "memory/cil-view"));
                Ok(out)
            }
            (Regime::Til, Some(t)) => Ok(self.task_entries(t).map(|e| view(e, e.label)).collect()),
            (Regime::Til, None) => Err(contract("a TIL memory view needs a task id")),
        }
    }

    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_jsonl()?)
    }

    pub fn load(path: &Path, fraction: f64, seed: u64) -> Result<Self> {
        let mut buffer = Self::new(fraction, seed)?;
        for (i, line) in fs::read_to_string(path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: MemoryEntry = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
            buffer.sampled.insert(entry.task_id);
            buffer.entries.push(entry);
        }
        Ok(buffer)
    }
}
