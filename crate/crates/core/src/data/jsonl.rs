//! JSONL ingestion and export.
//!
//! One record per line:
//! `{"task": "...", "split": "train|val|test", "tokens": [int], "label": "..."}`.
//! Instead of `tokens`, a record may carry `"text"`: whitespace-separated
//! words looked up in a vocabulary file whose 1-based line number is the
//! token id. Id 0 is reserved for [CLS], which ingestion prepends.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Example, Split, Task, TaskStream};
use crate::backbone::CLS_TOKEN;
use crate::error::{config, Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestSchema {
    /// Vocabulary for `text` records.
    pub vocab: Option<PathBuf>,
    /// Train/val/test ratios for records without a `split`.
    pub split_ratios: Option<[f64; 3]>,
    /// Longest sequence kept, counting [CLS]; longer inputs are truncated.
    pub max_seq_len: usize,
    /// When set, records naming other tasks are rejected.
    pub tasks: Option<Vec<String>>,
    /// When set, records with other labels are rejected.
    pub labels: Option<Vec<String>>,
    pub shared_labels: bool,
    pub seed: u64,
}

impl Default for IngestSchema {
    fn default() -> Self {
        Self {
            vocab: None,
            split_ratios: None,
            max_seq_len: 32,
            tasks: None,
            labels: None,
            shared_labels: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    label: String,
}

fn parse_err(line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        line,
        reason: reason.into(),
    }
}

fn load_vocab(path: &Path) -> Result<HashMap<String, u32>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, w)| !w.is_empty())
        .map(|(i, w)| (w.to_string(), i as u32 + 1))
        .collect())
}

struct Pending {
    line: usize,
    split: Option<Split>,
    tokens: Vec<u32>,
    label: String,
}

pub fn ingest_jsonl(path: &Path, schema: &IngestSchema) -> Result<TaskStream> {
    if schema.max_seq_len < 2 {
        return Err(config("ingest.max_seq_len", "must leave room for [CLS] and one token"));
    }
    if let Some(r) = schema.split_ratios {
        if r.iter().any(|&v| v < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(config("ingest.split_ratios", "ratios must be non-negative and sum to 1"));
        }
    }
    let vocab = schema.vocab.as_deref().map(load_vocab).transpose()?;
    let reader = BufReader::new(fs::File::open(path)?);

    let mut order: Vec<String> = Vec::new();
    let mut by_task: HashMap<String, Vec<Pending>> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        if let Some(known) = &schema.tasks {
            if !known.contains(&rec.task) {
                return Err(parse_err(lineno, format!("unknown task `{}`", rec.task)));
            }
        }
        if let Some(known) = &schema.labels {
            if !known.contains(&rec.label) {
                return Err(parse_err(lineno, format!("unknown label `{}`", rec.label)));
            }
        }
        if rec.split.is_none() && schema.split_ratios.is_none() {
            return Err(parse_err(lineno, "record has no split and no split ratios were given"));
        }
        let mut tokens = match (rec.tokens, rec.text) {
            (Some(t), None) => {
                if t.contains(&CLS_TOKEN) {
                    return Err(parse_err(lineno, "token id 0 is reserved for [CLS]"));
                }
                t
            }
            (None, Some(text)) => {
                let vocab = vocab
                    .as_ref()
                    .ok_or_else(|| parse_err(lineno, "text record but no vocabulary file"))?;
                text.split_whitespace()
                    .map(|w| {
                        vocab
                            .get(w)
                            .copied()
                            .ok_or_else(|| parse_err(lineno, format!("word `{w}` not in vocabulary")))
                    })
                    .collect::<Result<_>>()?
            }
            _ => return Err(parse_err(lineno, "record needs exactly one of `tokens` or `text`")),
        };
        if tokens.is_empty() {
            return Err(parse_err(lineno, "record has no tokens"));
        }
        tokens.truncate(schema.max_seq_len - 1);
        if !by_task.contains_key(&rec.task) {
            order.push(rec.task.clone());
        }
        by_task.entry(rec.task).or_default().push(Pending {
            line: lineno,
            split: rec.split,
            tokens,
            label: rec.label,
        });
    }
    if order.is_empty() {
        return Err(parse_err(0, "file holds no records"));
    }

    let mut next_id = 0u64;
    let mut tasks = Vec::with_capacity(order.len());
    for name in order {
        let pending = by_task.remove(&name).expect("recorded");
        let classes: Vec<String> = pending
            .iter()
            .map(|p| p.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let class_index: BTreeMap<&str, usize> =
            classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();

        let mut splits: BTreeMap<Split, Vec<Example>> = BTreeMap::new();
        let mut unsplit = Vec::new();
        for p in &pending {
            let mut tokens = Vec::with_capacity(p.tokens.len() + 1);
            tokens.push(CLS_TOKEN);
            tokens.extend_from_slice(&p.tokens);
            let ex = Example {
                id: next_id,
                tokens,
                label: class_index[p.label.as_str()],
            };
            next_id += 1;
            match p.split {
                Some(s) => splits.entry(s).or_default().push(ex),
                None => unsplit.push(ex),
            }
        }
        if let Some([train, val, _]) = schema.split_ratios {
            let mut r = rng::stream(schema.seed, &format!("split/{name}"));
            unsplit.shuffle(&mut r);
            let n = unsplit.len() as f64;
            let n_train = (train * n).round() as usize;
            let n_val = ((val * n).round() as usize).min(unsplit.len() - n_train);
            let mut rest = unsplit.split_off(n_train);
            let test = rest.split_off(n_val);
            splits.entry(Split::Train).or_default().extend(unsplit);
            splits.entry(Split::Val).or_default().extend(rest);
            splits.entry(Split::Test).or_default().extend(test);
        }

        let train = splits.remove(&Split::Train).unwrap_or_default();
        let train_labels: BTreeSet<usize> = train.iter().map(|e| e.label).collect();
        for p in &pending {
            if !train_labels.contains(&class_index[p.label.as_str()]) {
                return Err(parse_err(
                    p.line,
                    format!("label `{}` of task `{name}` never appears in its training split", p.label),
                ));
            }
        }
        tasks.push(Task {
            name,
            classes,
            train,
            val: splits.remove(&Split::Val).unwrap_or_default(),
            test: splits.remove(&Split::Test).unwrap_or_default(),
        });
    }
    TaskStream::new(tasks, schema.shared_labels)
}

/// Writes every example of the stream, task by task and split by split,
/// without the leading [CLS] token.
pub fn export_jsonl(stream: &TaskStream, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for task in stream.tasks() {
        for split in Split::ALL {
            for ex in task.split(split) {
                let rec = Record {
                    task: task.name.clone(),
                    split: Some(split),
                    tokens: Some(ex.tokens[1..].to_vec()),
                    text: None,
                    label: task.classes[ex.label].clone(),
                };
                serde_json::to_writer(&mut out, &rec)?;
                out.write_all(b"\n")?;
            }
        }
    }
    crate::io::write_atomic(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_stream, Family, GeneratorSpec};

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn empty_file_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "e.jsonl", "");
        assert!(matches!(
            ingest_jsonl(&p, &IngestSchema::default()),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let body = "{\"task\":\"a\",\"split\":\"train\",\"tokens\":[1],\"label\":\"x\"}\n{oops\n";
        let p = write(dir.path(), "m.jsonl", body);
        match ingest_jsonl(&p, &IngestSchema::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn export_import_round_trip() {
        let spec = GeneratorSpec {
            family: Family::MultilingualLike,
            classes_per_task: 3,
            num_tasks: 3,
            train_per_task: 30,
            val_per_task: 9,
            test_per_task: 9,
            ..Default::default()
        };
        let stream = generate_stream(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        export_jsonl(&stream, &p).unwrap();
        let schema = IngestSchema {
            shared_labels: true,
            ..Default::default()
        };
        assert_eq!(ingest_jsonl(&p, &schema).unwrap(), stream);
    }

    #[test]
    fn ratio_split_is_honored() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::new();
        for i in 0..100 {
            body.push_str(&format!(
                "{{\"task\":\"t\",\"tokens\":[{}],\"label\":\"{}\"}}\n",
                i % 7 + 1,
                if i % 2 == 0 { "a" } else { "b" }
            ));
        }
        let p = write(dir.path(), "r.jsonl", &body);
        let schema = IngestSchema {
            split_ratios: Some([0.6, 0.2, 0.2]),
            ..Default::default()
        };
        let s = ingest_jsonl(&p, &schema).unwrap();
        let t = s.task(0);
        assert_eq!((t.train.len(), t.val.len(), t.test.len()), (60, 20, 20));
        assert!(ingest_jsonl(&p, &IngestSchema::default()).is_err());
    }

    #[test]
    fn vocab_text_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = write(dir.path(), "vocab.txt", "good\nbad\nfilm\n");
        let body = "{\"task\":\"s\",\"split\":\"train\",\"text\":\"good film\",\"label\":\"pos\"}\n\
                    {\"task\":\"s\",\"split\":\"train\",\"text\":\"bad film\",\"label\":\"neg\"}\n";
        let p = write(dir.path(), "t.jsonl", body);
        let schema = IngestSchema {
            vocab: Some(vocab),
            ..Default::default()
        };
        let s = ingest_jsonl(&p, &schema).unwrap();
        assert_eq!(s.task(0).train[0].tokens, vec![0, 1, 3]);
        assert_eq!(s.task(0).classes, vec!["neg", "pos"]);

        let strict = IngestSchema {
            labels: Some(vec!["pos".into()]),
            ..schema.clone()
        };
        assert!(ingest_jsonl(&p, &strict).is_err());
        let strict_task = IngestSchema {
            tasks: Some(vec!["other".into()]),
            ..schema
        };
        assert!(ingest_jsonl(&p, &strict_task).is_err());
    }

    #[test]
    fn label_missing_from_train_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let body = "{\"task\":\"s\",\"split\":\"train\",\"tokens\":[1],\"label\":\"a\"}\n\
                    {\"task\":\"s\",\"split\":\"train\",\"tokens\":[2],\"label\":\"b\"}\n\
                    {\"task\":\"s\",\"split\":\"test\",\"tokens\":[2],\"label\":\"c\"}\n";
        let p = write(dir.path(), "u.jsonl", body);
        match ingest_jsonl(&p, &IngestSchema::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn long_inputs_are_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let body = "{\"task\":\"s\",\"split\":\"train\",\"tokens\":[1,2,3,4,5],\"label\":\"a\"}\n\
                    {\"task\":\"s\",\"split\":\"train\",\"tokens\":[1],\"label\":\"b\"}\n";
        let p = write(dir.path(), "l.jsonl", body);
        let schema = IngestSchema {
            max_seq_len: 3,
            ..Default::default()
        };
        assert_eq!(ingest_jsonl(&p, &schema).unwrap().task(0).train[0].tokens, vec![0, 1, 2]);
    }
}
