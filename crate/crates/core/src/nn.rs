//! Transformer building blocks on top of [`Graph`].
//!
//! Modules only hold [`ParamId`]s; values live in a [`ParamStore`] so the
//! same module description works for `f32` training and `f64` checks.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{truncated_normal, ParamId, ParamStore, INIT_STD};
use crate::tensor::{Float, Tensor};
use crate::trace::{AttentionTrace, LayerAttention, Roles};

pub const LN_EPS: f64 = 1e-5;

/// Forward-pass context: graph, parameters, training randomness and an optional attention sink.
pub struct Ctx<'a, F: Float> {
    pub g: &'a mut Graph<F>,
    pub params: &'a ParamStore<F>,
    rng: Option<&'a mut ChaCha8Rng>,
    trace: Option<&'a mut AttentionTrace>,
}

impl<'a, F: Float> Ctx<'a, F> {
    /// Evaluation mode: dropout and stochastic depth disabled.
    pub fn eval(g: &'a mut Graph<F>, params: &'a ParamStore<F>) -> Self {
        Self {
            g,
            params,
            rng: None,
            trace: None,
        }
    }

    pub fn train(g: &'a mut Graph<F>, params: &'a ParamStore<F>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            g,
            params,
            rng: Some(rng),
            trace: None,
        }
    }

    pub fn with_trace(mut self, trace: &'a mut AttentionTrace) -> Self {
        self.trace = Some(trace);
        self
    }

    pub fn training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.g.param(self.params, id)
    }

    pub fn capturing(&self) -> bool {
        self.trace.is_some()
    }

    fn record(&mut self, layer: LayerAttention) {
        if let Some(t) = self.trace.as_deref_mut() {
            t.layers.push(layer);
        }
    }

    /// Inverted dropout; identity in eval mode or when `rate` is 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let n = self.g.value(x).numel();
        let keep = F::from_f64(1.0 / (1.0 - rate));
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < rate { F::ZERO } else { keep })
            .collect();
        self.g.mask_mul(x, mask)
    }

    /// `x + branch(x)` where, in training, the whole branch is dropped with
    /// probability `drop_rate` and rescaled by `1/(1-drop_rate)` when kept.
    pub fn residual(
        &mut self,
        x: Var,
        drop_rate: f64,
        branch: impl FnOnce(&mut Self, Var) -> Result<Var>,
    ) -> Result<Var> {
        let active = drop_rate > 0.0 && self.training();
        if active {
            let rng = self.rng.as_deref_mut().expect("training");
            if rng.random::<f64>() < drop_rate {
                return Ok(x);
            }
        }
        let mut y = branch(self, x)?;
        if active {
            y = self.g.scale(y, 1.0 / (1.0 - drop_rate))?;
        }
        self.g.add(x, y)
    }
}

/// `y = x·W + b` with `W: [in × out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), truncated_normal(&[in_dim, out_dim], INIT_STD, rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<F: Float>(&self, cx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let w = cx.p(self.weight);
        let b = cx.p(self.bias);
        let y = cx.g.matmul(x, w)?;
        cx.g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], F::ONE))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<F: Float>(&self, cx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let g = cx.p(self.gamma);
        let b = cx.p(self.beta);
        cx.g.layer_norm(x, g, b, LN_EPS)
    }
}

/// Boolean attention mask, `true` = query row may attend to key column.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMask {
    pub rows: usize,
    pub cols: usize,
    keep: Arc<Vec<bool>>,
}

impl AttnMask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let keep = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self {
            rows,
            cols,
            keep: Arc::new(keep),
        }
    }

    /// Lower-triangular-plus-diagonal mask.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| c <= r)
    }

    pub fn allows(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.keep
    }
}

/// Multi-head scaled dot-product attention with separate q/k/v/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
    pub name: String,
}

impl MultiHeadAttention {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::IndivisibleHeads { dim, heads });
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.wq"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{name}.wk"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.wv"), dim, dim, rng)?,
            out: Linear::new(store, &format!("{name}.wo"), dim, dim, rng)?,
            heads,
            dim,
            name: name.to_string(),
        })
    }

    /// `q_in: [Tq × d]`, `kv_in: [Tk × d]`, `mask: Tq × Tk`. When the context
    /// captures, per-head weights are recorded with the given token roles.
    pub fn forward<F: Float>(
        &self,
        cx: &mut Ctx<'_, F>,
        q_in: Var,
        kv_in: Var,
        mask: Option<&AttnMask>,
        roles: Option<(&Roles, &Roles)>,
    ) -> Result<Var> {
        let tq = cx.g.value(q_in).rows();
        let tk = cx.g.value(kv_in).rows();
        if let Some(m) = mask {
            if m.rows != tq || m.cols != tk {
                return Err(Error::ShapeMismatch {
                    op: "attention mask",
                    lhs: vec![tq, tk],
                    rhs: vec![m.rows, m.cols],
                });
            }
        }
        let q = self.q.forward(cx, q_in)?;
        let k = self.k.forward(cx, kv_in)?;
        let v = self.v.forward(cx, kv_in)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let capture = cx.capturing();
        let mut outs = Vec::with_capacity(self.heads);
        let mut captured = Vec::new();
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    cx.g.slice_cols(q, h * dh, dh)?,
                    cx.g.slice_cols(k, h * dh, dh)?,
                    cx.g.slice_cols(v, h * dh, dh)?,
                )
            };
            let kt = cx.g.transpose(kh)?;
            let scores = cx.g.matmul(qh, kt)?;
            let scores = cx.g.scale(scores, scale)?;
            let weights = cx.g.softmax(scores, 1, mask.map(AttnMask::as_slice))?;
            if capture {
                captured.push(cx.g.value(weights).cast::<f64>());
            }
            outs.push(cx.g.matmul(weights, vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { cx.g.concat_cols(&outs)? };
        if capture {
            let (rows, cols) = match roles {
                Some((r, c)) => (r.clone(), c.clone()),
                None => (Roles::from(vec![]), Roles::from(vec![])),
            };
            cx.record(LayerAttention {
                name: self.name.clone(),
                heads: captured,
                rows,
                cols,
            });
        }
        self.out.forward(cx, merged)
    }
}

/// Two-layer GELU MLP with dropout after each layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
}

impl Mlp {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        hidden: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng)?,
            dropout,
        })
    }

    pub fn forward<F: Float>(&self, cx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(cx, x)?;
        let h = cx.g.gelu(h)?;
        let h = cx.dropout(h, self.dropout)?;
        let y = self.fc2.forward(cx, h)?;
        cx.dropout(y, self.dropout)
    }
}

/// Shared block hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockSpec {
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
}

/// Pre-norm transformer encoder block:
/// `x += attn(ln1(x))`, `x += mlp(ln2(x))`, each branch under stochastic depth.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub dropout: f64,
    pub drop_path: f64,
}

impl EncoderBlock {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        spec: BlockSpec,
        drop_path: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), spec.dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), spec.dim, spec.heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), spec.dim)?,
            mlp: Mlp::new(
                store,
                &format!("{name}.mlp"),
                spec.dim,
                spec.dim * spec.mlp_ratio,
                spec.dropout,
                rng,
            )?,
            dropout: spec.dropout,
            drop_path,
        })
    }

    pub fn forward<F: Float>(
        &self,
        cx: &mut Ctx<'_, F>,
        x: Var,
        mask: Option<&AttnMask>,
        roles: Option<&Roles>,
    ) -> Result<Var> {
        let x = cx.residual(x, self.drop_path, |cx, x| {
            let h = self.ln1.forward(cx, x)?;
            let h = self.attn.forward(cx, h, h, mask, roles.map(|r| (r, r)))?;
            cx.dropout(h, self.dropout)
        })?;
        cx.residual(x, self.drop_path, |cx, x| {
            let h = self.ln2.forward(cx, x)?;
            self.mlp.forward(cx, h)
        })
    }
}

/// Pre-norm transformer decoder block: causal self-attention over the
/// stream, cross-attention into a memory sequence, then an MLP.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ln_mem: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub mlp: Mlp,
    pub dropout: f64,
    pub drop_path: f64,
}

impl DecoderBlock {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        spec: BlockSpec,
        drop_path: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), spec.dim)?,
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), spec.dim, spec.heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), spec.dim)?,
            ln_mem: LayerNorm::new(store, &format!("{name}.ln_mem"), spec.dim)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), spec.dim, spec.heads, rng)?,
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), spec.dim)?,
            mlp: Mlp::new(
                store,
                &format!("{name}.mlp"),
                spec.dim,
                spec.dim * spec.mlp_ratio,
                spec.dropout,
                rng,
            )?,
            dropout: spec.dropout,
            drop_path,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<F: Float>(
        &self,
        cx: &mut Ctx<'_, F>,
        x: Var,
        memory: Var,
        self_mask: Option<&AttnMask>,
        cross_mask: Option<&AttnMask>,
        stream_roles: Option<&Roles>,
        memory_roles: Option<&Roles>,
    ) -> Result<Var> {
        let x = cx.residual(x, self.drop_path, |cx, x| {
            let h = self.ln1.forward(cx, x)?;
            let h = self
                .self_attn
                .forward(cx, h, h, self_mask, stream_roles.map(|r| (r, r)))?;
            cx.dropout(h, self.dropout)
        })?;
        let x = cx.residual(x, self.drop_path, |cx, x| {
            let q = self.ln2.forward(cx, x)?;
            let kv = self.ln_mem.forward(cx, memory)?;
            let roles = stream_roles.zip(memory_roles);
            let h = self.cross_attn.forward(cx, q, kv, cross_mask, roles)?;
            cx.dropout(h, self.dropout)
        })?;
        cx.residual(x, self.drop_path, |cx, x| {
            let h = self.ln3.forward(cx, x)?;
            self.mlp.forward(cx, h)
        })
    }
}

/// Stochastic-depth rate of block `index` (0-based) out of `count`: linear ramp up to `max_rate`.
pub fn drop_path_rate(max_rate: f64, index: usize, count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        max_rate * (index + 1) as f64 / count as f64
    }
}
