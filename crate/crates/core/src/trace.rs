//! Captured attention weights.

use std::sync::Arc;

use crate::tensor::Tensor;

/// What a query or key position stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRole {
    /// Learned fusion token (SA) or per-timestep query token (T-SA) at `time`.
    FusionToken { time: usize },
    /// Feature of modality `index` at `time`.
    Modality { index: usize, time: usize },
    /// A fused or anticipated feature at `time`.
    Timestep(usize),
}

impl TokenRole {
    pub fn time(self) -> usize {
        match self {
            TokenRole::FusionToken { time } | TokenRole::Modality { time, .. } => time,
            TokenRole::Timestep(t) => t,
        }
    }
}

pub type Roles = Arc<[TokenRole]>;

/// Post-softmax weights of one attention call, one `rows × cols` matrix per head.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention {
    pub name: String,
    pub heads: Vec<Tensor<f64>>,
    pub rows: Roles,
    pub cols: Roles,
}

impl LayerAttention {
    pub fn head_mean(&self) -> Tensor<f64> {
        let mut out = Tensor::<f64>::zeros(self.heads[0].shape());
        for h in &self.heads {
            for (o, &v) in out.data_mut().iter_mut().zip(h.data()) {
                *o += v;
            }
        }
        let k = self.heads.len() as f64;
        out.map(|v| v / k)
    }
}

/// Attention matrices in execution order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionTrace {
    pub layers: Vec<LayerAttention>,
}

impl AttentionTrace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Layers whose name starts with `prefix`.
    pub fn filter(&self, prefix: &str) -> AttentionTrace {
        AttentionTrace {
            layers: self
                .layers
                .iter()
                .filter(|l| l.name.starts_with(prefix))
                .cloned()
                .collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}
