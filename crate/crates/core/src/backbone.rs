//! Frozen pre-norm transformer encoder.
//!
//! Each layer computes `x + Attn(LN1(x))` then `x + FFN(LN2(x))`, with a
//! final layer norm before pooling. The pooled representation is the raw
//! position-0 ([CLS]) row; there is no tanh pooler. The feed-forward block
//! uses the tanh approximation of GELU. Dropout is never applied inside the
//! backbone.
//!
//! Query and value projections accept additive deltas from a
//! [`ProjectionOverlay`], which is how adapters and routers are injected.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::io::{self, Manifest};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

/// Token id reserved for the [CLS] position.
pub const CLS_TOKEN: u32 = 0;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            vocab_size: 512,
            max_seq_len: 32,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(config("backbone.num_layers", "must be at least 1"));
        }
        if self.hidden_dim == 0 || self.num_heads == 0 {
            return Err(config("backbone.hidden_dim", "dimensions must be positive"));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(config(
                "backbone.num_heads",
                format!(
                    "hidden_dim {} is not divisible by num_heads {}",
                    self.hidden_dim, self.num_heads
                ),
            ));
        }
        if self.ffn_dim == 0 {
            return Err(config("backbone.ffn_dim", "must be positive"));
        }
        if self.vocab_size < 2 {
            return Err(config("backbone.vocab_size", "must leave room beyond [CLS]"));
        }
        if self.max_seq_len == 0 {
            return Err(config("backbone.max_seq_len", "must be positive"));
        }
        Ok(())
    }

    /// Parameter count from the architecture alone.
    pub fn parameter_count(&self) -> usize {
        let d = self.hidden_dim;
        let f = self.ffn_dim;
        let embeddings = self.vocab_size * d + self.max_seq_len * d;
        let attention = 4 * (d * d + d);
        let norms = 2 * 2 * d;
        let ffn = d * f + f + f * d + d;
        embeddings + self.num_layers * (attention + norms + ffn) + 2 * d
    }
}

/// Which attention projection an overlay delta targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Projection {
    Query,
    Value,
}

impl Projection {
    pub const ALL: [Projection; 2] = [Projection::Query, Projection::Value];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Query => "wq",
            Projection::Value => "wv",
        }
    }
}

/// Hook into the query/value projections of every layer.
pub trait ProjectionOverlay {
    /// Called before each layer with the [CLS] row entering it, shape `[1, d]`.
    fn enter_layer(&mut self, _tape: &mut Tape, _layer: usize, _cls: Var) -> Result<()> {
        Ok(())
    }

    /// Delta added to `x·W + b` for `target`; `x` is the normalized layer
    /// input of shape `[seq, d]`.
    fn delta(&mut self, tape: &mut Tape, layer: usize, target: Projection, x: Var) -> Result<Option<Var>>;
}

/// The plain encoder.
pub struct NoOverlay;

impl ProjectionOverlay for NoOverlay {
    fn delta(&mut self, _: &mut Tape, _: usize, _: Projection, _: Var) -> Result<Option<Var>> {
        Ok(None)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl LayerParams {
    fn named(&self) -> [(&'static str, &Tensor); 16] {
        [
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
            ("w_in", &self.w_in),
            ("b_in", &self.b_in),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
        ]
    }

    fn from_tensors(mut it: impl Iterator<Item = Tensor>) -> Result<Self> {
        let mut next = || it.next().ok_or_else(|| contract("manifest is missing layer tensors"));
        Ok(Self {
            ln1_gamma: next()?,
            ln1_beta: next()?,
            wq: next()?,
            bq: next()?,
            wk: next()?,
            bk: next()?,
            wv: next()?,
            bv: next()?,
            wo: next()?,
            bo: next()?,
            ln2_gamma: next()?,
            ln2_beta: next()?,
            w_in: next()?,
            b_in: next()?,
            w_out: next()?,
            b_out: next()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    token_embedding: Tensor,
    position_embedding: Tensor,
    layers: Vec<LayerParams>,
    final_gamma: Tensor,
    final_beta: Tensor,
}

/// Backbone weights placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundBackbone {
    token_embedding: Var,
    position_embedding: Var,
    layers: Vec<[Var; 16]>,
    final_gamma: Var,
    final_beta: Var,
}

/// Hidden states of one forward pass.
#[derive(Clone, Debug)]
pub struct EncoderState {
    /// Embedding output followed by each layer's output, `L + 1` entries.
    pub hidden: Vec<Var>,
    /// Position-0 row of each entry of `hidden`, shape `[1, d]`.
    pub cls: Vec<Var>,
    /// Final-norm [CLS] row fed to classifier heads.
    pub pooled: Var,
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let f = config.ffn_dim;
        let mut rng = rng::stream(config.seed, "backbone");
        let token_embedding = normal_matrix(&mut rng, config.vocab_size, d, 1.0);
        let position_embedding = normal_matrix(&mut rng, config.max_seq_len, d, 0.1);
        let proj_std = 1.0 / (d as f64).sqrt();
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                ln1_gamma: Tensor::new(vec![d], vec![1.0; d]).expect("shape"),
                ln1_beta: Tensor::zeros(&[d]),
                wq: normal_matrix(&mut rng, d, d, proj_std),
                bq: Tensor::zeros(&[d]),
                wk: normal_matrix(&mut rng, d, d, proj_std),
                bk: Tensor::zeros(&[d]),
                wv: normal_matrix(&mut rng, d, d, proj_std),
                bv: Tensor::zeros(&[d]),
                wo: normal_matrix(&mut rng, d, d, proj_std),
                bo: Tensor::zeros(&[d]),
                ln2_gamma: Tensor::new(vec![d], vec![1.0; d]).expect("shape"),
                ln2_beta: Tensor::zeros(&[d]),
                w_in: normal_matrix(&mut rng, d, f, proj_std),
                b_in: Tensor::zeros(&[f]),
                w_out: normal_matrix(&mut rng, f, d, 1.0 / (f as f64).sqrt()),
                b_out: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            layers,
            final_gamma: Tensor::new(vec![d], vec![1.0; d]).expect("shape"),
            final_beta: Tensor::zeros(&[d]),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    /// All parameters in manifest order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.named() {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        out.push(("final_gamma".to_string(), &self.final_gamma));
        out.push(("final_beta".to_string(), &self.final_beta));
        out
    }

    /// Parameter count by enumerating tensors.
    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors: Vec<&Tensor> = self.named_tensors().into_iter().map(|(_, t)| t).collect();
        io::blob_bytes(&tensors)
    }

    pub fn manifest(&self) -> Result<Manifest> {
        Ok(Manifest::new(
            "backbone",
            serde_json::to_value(&self.config)?,
            &self.named_tensors(),
        ))
    }

    /// Writes `backbone.bin` (blob) and `backbone.json` (manifest) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let named = self.named_tensors();
        let tensors: Vec<&Tensor> = named.iter().map(|(_, t)| *t).collect();
        io::write_split(
            &dir.join("backbone.bin"),
            &dir.join("backbone.json"),
            &self.manifest()?,
            &tensors,
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, tensors) = io::read_split(&dir.join("backbone.bin"), &dir.join("backbone.json"))?;
        let config: BackboneConfig = serde_json::from_value(manifest.meta.clone())?;
        let template = Self::new(config.clone())?;
        let expected = template.manifest()?;
        if expected.tensors != manifest.tensors {
            return Err(contract("backbone manifest does not match its config"));
        }
        let mut it = tensors.into_iter();
        let mut take = || it.next().ok_or_else(|| contract("missing tensor"));
        let token_embedding = take()?;
        let position_embedding = take()?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            let chunk: Vec<Tensor> = (0..16).map(|_| take()).collect::<Result<_>>()?;
            layers.push(LayerParams::from_tensors(chunk.into_iter())?);
        }
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            layers,
            final_gamma: take()?,
            final_beta: take()?,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundBackbone {
        BoundBackbone {
            token_embedding: tape.leaf(&self.token_embedding),
            position_embedding: tape.leaf(&self.position_embedding),
            layers: self
                .layers
                .iter()
                .map(|layer| layer.named().map(|(_, t)| tape.leaf(t)))
                .collect(),
            final_gamma: tape.leaf(&self.final_gamma),
            final_beta: tape.leaf(&self.final_beta),
        }
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(contract("empty token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(contract(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(contract(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Forward pass over one sequence (position 0 is the [CLS] token).
    pub fn encode(
        &self,
        tape: &mut Tape,
        bound: &BoundBackbone,
        tokens: &[u32],
        overlay: &mut dyn ProjectionOverlay,
    ) -> Result<EncoderState> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let d = self.config.hidden_dim;
        let heads = self.config.num_heads;
        let head_dim = d / heads;
        let attn_scale = 1.0 / (head_dim as f64).sqrt();

        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..n).collect();
        let tok = tape.gather(bound.token_embedding, &ids)?;
        let pos = tape.gather(bound.position_embedding, &positions)?;
        let mut x = tape.add(tok, pos)?;

        let mut hidden = vec![x];
        let mut cls = vec![tape.row(x, 0)?];

        for (l, p) in bound.layers.iter().enumerate() {
            let [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w_in, b_in, w_out, b_out] = *p;
            overlay.enter_layer(tape, l, cls[l])?;

            let xn = tape.layer_norm(x, ln1_g, ln1_b, LN_EPS)?;
            let q = self.projection(tape, overlay, l, Projection::Query, xn, wq, bq)?;
            let k = {
                let m = tape.matmul(xn, wk)?;
                tape.add(m, bk)?
            };
            let v = self.projection(tape, overlay, l, Projection::Value, xn, wv, bv)?;

            let mut head_outputs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
                let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
                let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, attn_scale);
                let attn = tape.softmax(scores);
                head_outputs.push(tape.matmul(attn, vh)?);
            }
            let merged = tape.concat_cols(&head_outputs)?;
            let o = tape.matmul(merged, wo)?;
            let o = tape.add(o, bo)?;
            x = tape.add(x, o)?;

            let xn2 = tape.layer_norm(x, ln2_g, ln2_b, LN_EPS)?;
            let f = tape.matmul(xn2, w_in)?;
            let f = tape.add(f, b_in)?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, w_out)?;
            let f = tape.add(f, b_out)?;
            x = tape.add(x, f)?;

            hidden.push(x);
            cls.push(tape.row(x, 0)?);
        }

        let last = tape.layer_norm(x, bound.final_gamma, bound.final_beta, LN_EPS)?;
        let pooled = tape.row(last, 0)?;
        debug_assert_eq!(tape.shape(pooled), &[1, d]);
        Ok(EncoderState { hidden, cls, pooled })
    }

    #[allow(clippy::too_many_arguments)]
    fn projection(
        &self,
        tape: &mut Tape,
        overlay: &mut dyn ProjectionOverlay,
        layer: usize,
        target: Projection,
        xn: Var,
        w: Var,
        b: Var,
    ) -> Result<Var> {
        let m = tape.matmul(xn, w)?;
        let base = tape.add(m, b)?;
        match overlay.delta(tape, layer, target, xn)? {
            None => Ok(base),
            Some(delta) => {
                if tape.shape(delta) != tape.shape(base) {
                    return Err(contract(format!(
                        "overlay delta for layer {layer} {} has shape {:?}, expected {:?}",
                        target.name(),
                        tape.shape(delta),
                        tape.shape(base)
                    )));
                }
                tape.add(base, delta)
            }
        }
    }

    /// Pooled representation of the unadapted encoder.
    pub fn pooled_base(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let state = self.encode(&mut tape, &bound, tokens, &mut NoOverlay)?;
        Ok(tape.value(state.pooled).to_vec())
    }
}
