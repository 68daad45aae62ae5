//! Closed-form forward FLOPs for batch size 1.
//!
//! A fused multiply-add counts as two FLOPs and only matrix products,
//! adapter paths and router linears are counted.

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{contract, Result};

/// Sequence length used for the FLOPs table.
pub const FLOPS_SEQ_LEN: u64 = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlopsMethod {
    Base,
    Wavg,
    Merge,
    Centroid,
}

impl FlopsMethod {
    pub const ALL: [FlopsMethod; 4] = [FlopsMethod::Base, FlopsMethod::Wavg, FlopsMethod::Merge, FlopsMethod::Centroid];

    pub fn name(self) -> &'static str {
        match self {
            FlopsMethod::Base => "base",
            FlopsMethod::Wavg => "wavg",
            FlopsMethod::Merge => "merge",
            FlopsMethod::Centroid => "centroid",
        }
    }
}

impl std::str::FromStr for FlopsMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown FLOPs method `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsEstimate {
    pub method: FlopsMethod,
    pub num_tasks: u64,
    pub seq_len: u64,
    pub flops: u64,
}

/// Dimensions the estimate depends on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopsShape {
    pub layers: u64,
    pub dim: u64,
    pub ffn: u64,
    pub rank: u64,
    pub tasks: u64,
    pub seq_len: u64,
}

impl FlopsShape {
    pub fn new(backbone: &BackboneConfig, rank: usize, tasks: usize) -> Self {
        Self {
            layers: backbone.num_layers as u64,
            dim: backbone.hidden_dim as u64,
            ffn: backbone.ffn_dim as u64,
            rank: rank as u64,
            tasks: tasks as u64,
            seq_len: FLOPS_SEQ_LEN,
        }
    }

    /// Encoder forward: four `d×d` projections, attention scores and mixing,
    /// and the two feed-forward products, per layer.
    pub fn base(&self) -> u64 {
        let (n, d, f) = (self.seq_len, self.dim, self.ffn);
        let per_layer = 4 * 2 * n * d * d + 2 * 2 * n * n * d + 2 * 2 * n * d * f;
        self.layers * per_layer
    }

    /// One low-rank path on one projection: `x·Aᵀ`, then `·Bᵀ`, then the
    /// weighting and the addition into the projection output.
    pub fn adapter_path(&self) -> u64 {
        let (n, d, r) = (self.seq_len, self.dim, self.rank);
        2 * n * d * r + 2 * n * r * d + 2 * n * d
    }

    /// One router linear: `T×d` weights plus bias.
    pub fn router_linear(&self) -> u64 {
        2 * self.dim * self.tasks + self.tasks
    }

    pub fn estimate(&self, method: FlopsMethod) -> u64 {
        let paths_per_set = 2 * self.layers * self.adapter_path();
        match method {
            FlopsMethod::Base => self.base(),
            FlopsMethod::Wavg => self.base() + self.tasks * paths_per_set + self.layers * self.router_linear(),
            FlopsMethod::Merge | FlopsMethod::Centroid => self.base() + paths_per_set,
        }
    }
}

pub fn estimate_flops(backbone: &BackboneConfig, rank: usize, tasks: usize, method: FlopsMethod) -> Result<FlopsEstimate> {
    if tasks == 0 {
        return Err(contract("FLOPs estimate needs at least one task"));
    }
    let shape = FlopsShape::new(backbone, rank, tasks);
    Ok(FlopsEstimate {
        method,
        num_tasks: shape.tasks,
        seq_len: shape.seq_len,
        flops: shape.estimate(method),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(tasks: u64) -> FlopsShape {
        FlopsShape::new(&BackboneConfig::default(), 8, tasks as usize)
    }

    #[test]
    fn merge_equals_centroid() {
        let s = shape(5);
        assert_eq!(s.estimate(FlopsMethod::Merge), s.estimate(FlopsMethod::Centroid));
    }

    #[test]
    fn ordering_for_several_tasks() {
        for t in 2..10 {
            let s = shape(t);
            assert!(s.estimate(FlopsMethod::Base) < s.estimate(FlopsMethod::Merge));
            assert!(s.estimate(FlopsMethod::Merge) < s.estimate(FlopsMethod::Wavg));
        }
    }

    #[test]
    fn single_task_wavg_adds_router_cost() {
        let s = shape(1);
        assert_eq!(
            s.estimate(FlopsMethod::Wavg),
            s.estimate(FlopsMethod::Merge) + s.layers * s.router_linear()
        );
    }

    #[test]
    fn hand_counted_base() {
        let cfg = BackboneConfig {
            num_layers: 1,
            hidden_dim: 2,
            num_heads: 1,
            ffn_dim: 4,
            ..BackboneConfig::default()
        };
        let s = FlopsShape { seq_len: 3, ..FlopsShape::new(&cfg, 1, 1) };
        // 4·2·3·2·2 + 2·2·3·3·2 + 2·2·3·2·4
        assert_eq!(s.base(), 96 + 72 + 96);
    }
}
