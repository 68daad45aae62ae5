//! Run configuration, loaded from TOML and identified by a content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::AdapterConfig;
use crate::backbone::BackboneConfig;
use crate::composer::CompositionKind;
use crate::data::{default_orders, generate_stream, ingest_jsonl, GeneratorSpec, IngestSchema, TaskStream};
use crate::error::{config, Error, Result};
use crate::memory::{validate_fraction, Regime};
use crate::router::{validate_temperature, Relaxation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 8,
            warmup_ratio: 0.1,
            weight_decay: 0.01,
            max_epochs: 30,
            patience: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    pub fraction: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self { fraction: 0.10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterConfig {
    pub relaxation: Relaxation,
    pub temperature: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            relaxation: Relaxation::GumbelSigmoid,
            temperature: 1.0,
            lr: 3e-4,
            epochs: 5,
            batch_size: 8,
            warmup_ratio: 0.1,
            weight_decay: 0.01,
        }
    }
}

/// External JSONL corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    pub path: PathBuf,
    #[serde(default)]
    pub schema: IngestSchema,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Synthetic stream; ignored when `ingest` is set.
    pub generator: GeneratorSpec,
    pub ingest: Option<IngestConfig>,
    /// Named task orders; empty means identity, reversed and interleaved.
    pub orders: Vec<Vec<usize>>,
    /// Index into the order list used by this run.
    pub order: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Parent of the run directory. Not part of the run hash.
    pub output_root: PathBuf,
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub training: TrainingConfig,
    pub memory: MemoryConfig,
    pub router: RouterConfig,
    pub composition: CompositionKind,
    pub regime: Regime,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_root: PathBuf::from("runs"),
            backbone: BackboneConfig::default(),
            adapter: AdapterConfig::default(),
            training: TrainingConfig::default(),
            memory: MemoryConfig::default(),
            router: RouterConfig::default(),
            composition: CompositionKind::Wavg,
            regime: Regime::Cil,
            data: DataConfig::default(),
        }
    }
}

fn positive(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(config(field, "must be positive"))
    } else {
        Ok(())
    }
}

fn rate(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(config(field, format!("{v} must be a positive finite number")))
    }
}

fn ratio(field: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(config(field, format!("{v} must lie in [0, 1]")))
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e.message().split('`').nth(1).unwrap_or("config").to_string();
            Error::Config {
                field,
                reason: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.adapter.validate(self.backbone.hidden_dim)?;
        let t = &self.training;
        rate("training.lr", t.lr)?;
        positive("training.batch_size", t.batch_size)?;
        positive("training.max_epochs", t.max_epochs)?;
        positive("training.patience", t.patience)?;
        ratio("training.warmup_ratio", t.warmup_ratio)?;
        ratio("training.weight_decay", t.weight_decay)?;
        validate_fraction(self.memory.fraction)?;
        let r = &self.router;
        validate_temperature(r.temperature)?;
        rate("router.lr", r.lr)?;
        positive("router.batch_size", r.batch_size)?;
        ratio("router.warmup_ratio", r.warmup_ratio)?;
        ratio("router.weight_decay", r.weight_decay)?;
        if self.data.ingest.is_none() {
            self.data.generator.validate()?;
            if self.data.generator.vocab_size > self.backbone.vocab_size {
                return Err(config(
                    "data.generator.vocab_size",
                    "exceeds backbone.vocab_size",
                ));
            }
            if self.data.generator.seq_len + 1 > self.backbone.max_seq_len {
                return Err(config(
                    "data.generator.seq_len",
                    "sequences plus [CLS] exceed backbone.max_seq_len",
                ));
            }
        }
        Ok(())
    }

    /// Canonical JSON of everything that determines the run's results.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_root");
        }
        v.to_string()
    }

    /// First 16 hex digits of the SHA-256 of [`Self::canonical_json`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_root.join(self.hash())
    }

    /// The task stream in the configured order.
    pub fn stream(&self) -> Result<TaskStream> {
        let base = match &self.data.ingest {
            Some(ingest) => {
                let mut schema = ingest.schema.clone();
                schema.max_seq_len = schema.max_seq_len.min(self.backbone.max_seq_len);
                ingest_jsonl(&ingest.path, &schema)?
            }
            None => generate_stream(&self.data.generator)?,
        };
        let orders = if self.data.orders.is_empty() {
            default_orders(base.num_tasks())
        } else {
            self.data.orders.clone()
        };
        let order = orders.get(self.data.order).ok_or_else(|| {
            config(
                "data.order",
                format!("order {} not among {} orders", self.data.order, orders.len()),
            )
        })?;
        base.reordered(order)
    }
}
