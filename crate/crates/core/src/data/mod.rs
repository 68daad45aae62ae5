//! Task streams: synthetic generators and JSONL ingestion.

mod generate;
mod jsonl;

pub use generate::{generate_stream, Family, GeneratorSpec};
pub use jsonl::{export_jsonl, ingest_jsonl, IngestSchema};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// One labeled sequence. `tokens[0]` is always the [CLS] id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    pub tokens: Vec<u32>,
    /// Index into the owning task's class list.
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Task {
    pub name: String,
    pub classes: Vec<String>,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl Task {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

/// Ordered tasks plus the class-incremental label map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskStream {
    tasks: Vec<Task>,
    shared_labels: bool,
    global_classes: Vec<String>,
    global_ids: Vec<Vec<usize>>,
}

impl TaskStream {
    /// Validates split disjointness and builds global class ids in order of
    /// first appearance. Identical label strings in different tasks are
    /// rejected unless `shared_labels` is set, in which case they share an id.
    pub fn new(tasks: Vec<Task>, shared_labels: bool) -> Result<Self> {
        if tasks.is_empty() {
            return Err(contract("a task stream needs at least one task"));
        }
        let mut names = BTreeSet::new();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        let mut global_classes = Vec::new();
        let mut global_ids = Vec::with_capacity(tasks.len());
        for task in &tasks {
            if !names.insert(task.name.clone()) {
                return Err(contract(format!("duplicate task `{}`", task.name)));
            }
            if task.classes.len() < 2 {
                return Err(contract(format!("task `{}` has fewer than two classes", task.name)));
            }
            let mut ids = BTreeSet::new();
            for split in Split::ALL {
                for ex in task.split(split) {
                    if !ids.insert(ex.id) {
                        return Err(contract(format!(
                            "example id {} repeats within task `{}`",
                            ex.id, task.name
                        )));
                    }
                    if ex.label >= task.classes.len() {
                        return Err(contract(format!(
                            "label {} out of range in task `{}`",
                            ex.label, task.name
                        )));
                    }
                }
            }
            let mut task_ids = Vec::with_capacity(task.classes.len());
            for class in &task.classes {
                let id = match index.get(class) {
                    Some(&id) if shared_labels => id,
                    Some(_) => {
                        return Err(contract(format!(
                            "class `{class}` appears in several tasks of a stream without shared labels"
                        )))
                    }
                    None => {
                        let id = global_classes.len();
                        index.insert(class.clone(), id);
                        global_classes.push(class.clone());
                        id
                    }
                };
                task_ids.push(id);
            }
            global_ids.push(task_ids);
        }
        Ok(Self {
            tasks,
            shared_labels,
            global_classes,
            global_ids,
        })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn task(&self, index: usize) -> &Task {
        &self.tasks[index]
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn shared_labels(&self) -> bool {
        self.shared_labels
    }

    pub fn global_classes(&self) -> &[String] {
        &self.global_classes
    }

    pub fn global_label(&self, task: usize, local: usize) -> usize {
        self.global_ids[task][local]
    }

    /// Global class of every column of the concatenated per-task heads.
    pub fn column_classes(&self) -> Vec<usize> {
        self.global_ids.iter().flatten().copied().collect()
    }

    /// The same tasks in the order given by `order` (a permutation).
    pub fn reordered(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.tasks.len()];
        if order.len() != self.tasks.len()
            || order.iter().any(|&i| i >= seen.len() || std::mem::replace(&mut seen[i], true))
        {
            return Err(contract(format!(
                "order {order:?} is not a permutation of {} tasks",
                self.tasks.len()
            )));
        }
        Self::new(
            order.iter().map(|&i| self.tasks[i].clone()).collect(),
            self.shared_labels,
        )
    }

    /// A stream holding only the listed tasks, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            indices.iter().map(|&i| self.tasks[i].clone()).collect(),
            self.shared_labels,
        )
    }
}

/// Named task orders for a stream of `num_tasks`: identity, reversed, and
/// even positions followed by odd positions.
pub fn default_orders(num_tasks: usize) -> Vec<Vec<usize>> {
    let identity: Vec<usize> = (0..num_tasks).collect();
    let reversed: Vec<usize> = (0..num_tasks).rev().collect();
    let interleaved: Vec<usize> = (0..num_tasks)
        .step_by(2)
        .chain((1..num_tasks).step_by(2))
        .collect();
    vec![identity, reversed, interleaved]
}
