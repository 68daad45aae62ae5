//! Synthetic task streams drawn from per-task, per-class token multinomials.
//!
//! Token id 0 is reserved for [CLS]; generated content uses ids
//! `1..vocab_size`. Every family partitions some part of that range into
//! class "signal" sub-blocks; a token is drawn from the example's signal
//! sub-block with probability `signal`, otherwise from background tokens.
//! With probability `noise_rate` a token is instead drawn uniformly from the
//! whole region the task uses, which may include other classes' signal.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Example, Task, TaskStream};
use crate::backbone::CLS_TOKEN;
use crate::error::{config, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Disjoint vocabulary block per task.
    FarDomain,
    /// One shared vocabulary; class and task signal sets drawn from it.
    NearDomain,
    /// Shared three-class label space; each task speaks its own token dialect
    /// and all tasks share a small block of label-bearing tokens.
    MultilingualLike,
    /// Task `k > 0` refines the factor learned by task `k - 1`: its classes are
    /// pairs (parent factor, own factor), with half of its tokens drawn from
    /// the parent's block.
    Hierarchical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub family: Family,
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub train_per_task: usize,
    pub val_per_task: usize,
    pub test_per_task: usize,
    pub vocab_size: usize,
    /// Content tokens per example, not counting [CLS].
    pub seq_len: usize,
    pub noise_rate: f64,
    pub signal: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            family: Family::FarDomain,
            num_tasks: 3,
            classes_per_task: 2,
            train_per_task: 200,
            val_per_task: 50,
            test_per_task: 50,
            vocab_size: 512,
            seq_len: 15,
            noise_rate: 0.0,
            signal: 0.6,
            seed: 0,
        }
    }
}

const SENTIMENT: [&str; 3] = ["negative", "neutral", "positive"];

/// Contiguous id range `[start, start + len)`.
#[derive(Clone, Copy, Debug)]
struct Range {
    start: u32,
    len: u32,
}

impl Range {
    fn draw(&self, rng: &mut ChaCha8Rng) -> u32 {
        self.start + rng.random_range(0..self.len)
    }
}

/// A vocabulary block split into class sub-blocks and background filler.
#[derive(Clone, Debug)]
struct Block {
    whole: Range,
    classes: Vec<Range>,
    filler: Range,
}

impl Block {
    fn new(start: u32, len: u32, classes: usize) -> Self {
        let k = len / (2 * classes as u32);
        let class_ranges = (0..classes as u32)
            .map(|c| Range {
                start: start + c * k,
                len: k,
            })
            .collect();
        let used = k * classes as u32;
        Self {
            whole: Range { start, len },
            classes: class_ranges,
            filler: Range {
                start: start + used,
                len: len - used,
            },
        }
    }

    fn token(&self, class: usize, spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> u32 {
        if rng.random::<f64>() < spec.noise_rate {
            self.whole.draw(rng)
        } else if rng.random::<f64>() < spec.signal {
            self.classes[class].draw(rng)
        } else {
            self.filler.draw(rng)
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes_per_task < 2 {
            return Err(config("data.classes_per_task", "need at least 2 classes per task"));
        }
        if self.family == Family::MultilingualLike && self.classes_per_task != 3 {
            return Err(config(
                "data.classes_per_task",
                "multilingual-like streams use exactly 3 shared classes",
            ));
        }
        if self.num_tasks == 0 {
            return Err(config("data.num_tasks", "need at least one task"));
        }
        if self.train_per_task == 0 || self.val_per_task == 0 || self.test_per_task == 0 {
            return Err(config("data.train_per_task", "every split needs examples"));
        }
        if self.seq_len == 0 {
            return Err(config("data.seq_len", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(config("data.noise_rate", "must lie in [0, 1]"));
        }
        if !(self.signal > 0.0 && self.signal <= 1.0) {
            return Err(config("data.signal", "must lie in (0, 1]"));
        }
        let block = self.block_len();
        if block < 2 * self.classes_per_task + 1 {
            return Err(config(
                "data.vocab_size",
                format!(
                    "vocabulary of {} leaves blocks of {block} tokens, too few for {} classes",
                    self.vocab_size, self.classes_per_task
                ),
            ));
        }
        Ok(())
    }

    fn blocks_needed(&self) -> usize {
        match self.family {
            Family::FarDomain | Family::Hierarchical => self.num_tasks,
            Family::NearDomain => 1,
            Family::MultilingualLike => self.num_tasks + 1,
        }
    }

    fn block_len(&self) -> usize {
        self.vocab_size.saturating_sub(1) / self.blocks_needed()
    }

    fn blocks(&self) -> Vec<Block> {
        let len = self.block_len() as u32;
        (0..self.blocks_needed() as u32)
            .map(|b| Block::new(1 + b * len, len, self.classes_per_task))
            .collect()
    }

    fn class_names(&self, task: usize) -> Vec<String> {
        let c = self.classes_per_task;
        match self.family {
            Family::MultilingualLike => SENTIMENT.iter().map(|s| s.to_string()).collect(),
            Family::Hierarchical if task > 0 => (0..c * c)
                .map(|k| format!("t{task:02}_a{:02}_b{:02}", k / c, k % c))
                .collect(),
            _ => (0..c).map(|k| format!("t{task:02}_c{k:02}")).collect(),
        }
    }
}

/// Per-task token sampler.
enum Sampler {
    Block(Block),
    Near {
        classes: Vec<Vec<u32>>,
        topic: Vec<u32>,
        vocab: Range,
    },
    Dialect {
        shared: Block,
        dialect: Block,
    },
    Refine {
        parent: Block,
        own: Block,
        factors: usize,
    },
}

const TOPIC_RATE: f64 = 0.15;
const SHARED_RATE: f64 = 0.3;

impl Sampler {
    fn token(&self, label: usize, spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> u32 {
        match self {
            Sampler::Block(b) => b.token(label, spec, rng),
            Sampler::Near {
                classes,
                topic,
                vocab,
            } => {
                if rng.random::<f64>() < spec.noise_rate {
                    return vocab.draw(rng);
                }
                let r = rng.random::<f64>();
                if r < spec.signal {
                    *classes[label].choose(rng).expect("non-empty")
                } else if r < spec.signal + TOPIC_RATE {
                    *topic.choose(rng).expect("non-empty")
                } else {
                    vocab.draw(rng)
                }
            }
            Sampler::Dialect { shared, dialect } => {
                if rng.random::<f64>() < SHARED_RATE * spec.signal {
                    shared.classes[label].draw(rng)
                } else {
                    dialect.token(label, spec, rng)
                }
            }
            Sampler::Refine {
                parent,
                own,
                factors,
            } => {
                if rng.random::<bool>() {
                    parent.token(label / factors, spec, rng)
                } else {
                    own.token(label % factors, spec, rng)
                }
            }
        }
    }
}

fn samplers(spec: &GeneratorSpec) -> Vec<Sampler> {
    let blocks = spec.blocks();
    let c = spec.classes_per_task;
    (0..spec.num_tasks)
        .map(|t| match spec.family {
            Family::FarDomain => Sampler::Block(blocks[t].clone()),
            Family::Hierarchical if t == 0 => Sampler::Block(blocks[0].clone()),
            Family::Hierarchical => Sampler::Refine {
                parent: blocks[t - 1].clone(),
                own: blocks[t].clone(),
                factors: c,
            },
            Family::MultilingualLike => Sampler::Dialect {
                shared: blocks[0].clone(),
                dialect: blocks[t + 1].clone(),
            },
            Family::NearDomain => {
                let vocab = blocks[0].whole;
                let k = ((vocab.len as usize) / (4 * c)).clamp(2, 16);
                let mut r = rng::stream(spec.seed, &format!("near/{t}"));
                let mut ids: Vec<u32> = (vocab.start..vocab.start + vocab.len).collect();
                ids.shuffle(&mut r);
                let classes = (0..c).map(|ci| ids[ci * k..(ci + 1) * k].to_vec()).collect();
                let topic = ids[c * k..(c + 1) * k].to_vec();
                Sampler::Near {
                    classes,
                    topic,
                    vocab,
                }
            }
        })
        .collect()
}

pub fn generate_stream(spec: &GeneratorSpec) -> Result<TaskStream> {
    spec.validate()?;
    let samplers = samplers(spec);
    let mut next_id = 0u64;
    let mut tasks = Vec::with_capacity(spec.num_tasks);
    for (t, sampler) in samplers.iter().enumerate() {
        let classes = spec.class_names(t);
        let mut rng = rng::stream(spec.seed, &format!("examples/{t}"));
        let mut split = |n: usize| -> Vec<Example> {
            let mut labels: Vec<usize> = (0..n).map(|i| i % classes.len()).collect();
            labels.shuffle(&mut rng);
            labels
                .into_iter()
                .map(|label| {
                    let mut tokens = Vec::with_capacity(spec.seq_len + 1);
                    tokens.push(CLS_TOKEN);
                    tokens.extend((0..spec.seq_len).map(|_| sampler.token(label, spec, &mut rng)));
                    next_id += 1;
                    Example {
                        id: next_id - 1,
                        tokens,
                        label,
                    }
                })
                .collect()
        };
        let train = split(spec.train_per_task);
        let val = split(spec.val_per_task);
        let test = split(spec.test_per_task);
        let name = match spec.family {
            Family::MultilingualLike => format!("lang{t:02}"),
            _ => format!("task{t:02}"),
        };
        tasks.push(Task {
            name,
            classes,
            train,
            val,
            test,
        });
    }
    TaskStream::new(tasks, spec.family == Family::MultilingualLike)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use std::collections::HashSet;

    /// Multinomial naive Bayes with add-one smoothing, fit on the training
    /// split of one task.
    fn naive_bayes_accuracy(task: &Task, vocab: usize) -> f64 {
        let c = task.num_classes();
        let mut counts = vec![vec![1.0; vocab]; c];
        let mut totals = vec![vocab as f64; c];
        for ex in &task.train {
            for &tok in &ex.tokens[1..] {
                counts[ex.label][tok as usize] += 1.0;
                totals[ex.label] += 1.0;
            }
        }
        let correct = task
            .test
            .iter()
            .filter(|ex| {
                let score = |k: usize| -> f64 {
                    ex.tokens[1..]
                        .iter()
                        .map(|&t| (counts[k][t as usize] / totals[k]).ln())
                        .sum()
                };
                let best = (0..c)
                    .max_by(|&a, &b| score(a).partial_cmp(&score(b)).unwrap())
                    .unwrap();
                best == ex.label
            })
            .count();
        correct as f64 / task.test.len() as f64
    }

    #[test]
    fn far_domain_is_separable_for_naive_bayes() {
        let spec = GeneratorSpec {
            num_tasks: 3,
            classes_per_task: 4,
            ..Default::default()
        };
        let stream = generate_stream(&spec).unwrap();
        for task in stream.tasks() {
            assert_eq!(naive_bayes_accuracy(task, spec.vocab_size), 1.0, "{}", task.name);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = GeneratorSpec {
            family: Family::NearDomain,
            ..Default::default()
        };
        assert_eq!(generate_stream(&spec).unwrap(), generate_stream(&spec).unwrap());
        let other = GeneratorSpec { seed: 1, ..spec.clone() };
        assert_ne!(generate_stream(&spec).unwrap(), generate_stream(&other).unwrap());
    }

    #[test]
    fn multilingual_shares_labels() {
        let spec = GeneratorSpec {
            family: Family::MultilingualLike,
            classes_per_task: 3,
            num_tasks: 4,
            ..Default::default()
        };
        let stream = generate_stream(&spec).unwrap();
        for task in stream.tasks() {
            assert_eq!(task.classes, stream.task(0).classes);
        }
        assert_eq!(stream.global_classes().len(), 3);
    }

    #[test]
    fn hierarchical_classes_refine_parent() {
        let spec = GeneratorSpec {
            family: Family::Hierarchical,
            num_tasks: 3,
            classes_per_task: 2,
            ..Default::default()
        };
        let stream = generate_stream(&spec).unwrap();
        assert_eq!(stream.task(0).num_classes(), 2);
        assert_eq!(stream.task(1).num_classes(), 4);
        assert_eq!(stream.global_classes().len(), 2 + 4 + 4);
    }

    #[test]
    fn too_few_classes_rejected() {
        let spec = GeneratorSpec {
            classes_per_task: 1,
            ..Default::default()
        };
        assert!(generate_stream(&spec).is_err());
    }

    #[test]
    fn splits_are_disjoint_and_balanced() {
        let spec = GeneratorSpec {
            family: Family::NearDomain,
            classes_per_task: 3,
            train_per_task: 1200,
            ..Default::default()
        };
        let stream = generate_stream(&spec).unwrap();
        for task in stream.tasks() {
            let mut seen = HashSet::new();
            for split in Split::ALL {
                for ex in task.split(split) {
                    assert!(seen.insert(ex.id));
                    assert_eq!(ex.tokens[0], CLS_TOKEN);
                    assert!(ex.tokens[1..].iter().all(|&t| t >= 1 && (t as usize) < spec.vocab_size));
                }
            }
            for k in 0..3 {
                let share = task.train.iter().filter(|e| e.label == k).count() as f64 / 1200.0;
                assert!((share - 1.0 / 3.0).abs() < 0.02);
            }
        }
    }
}
