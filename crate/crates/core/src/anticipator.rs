//! Causal next-feature predictor, shared classification head and the
//! three-term anticipation loss.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Target, Var};
use crate::nn::{drop_path_rate, AttnMask, BlockSpec, Ctx, EncoderBlock, LayerNorm, Linear};
use crate::param::{truncated_normal, ParamId, ParamStore, INIT_STD};
use crate::tensor::{Float, Tensor};
use crate::trace::{Roles, TokenRole};

#[derive(Debug, Clone, PartialEq)]
pub struct AnticipatorConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub drop_path: f64,
}

impl Default for AnticipatorConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            heads: 4,
            dim: 1024,
            max_len: 16,
            dropout: 0.1,
            drop_path: 0.1,
        }
    }
}

impl AnticipatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::IndivisibleHeads {
                dim: self.dim,
                heads: self.heads,
            });
        }
        if self.layers == 0 || self.max_len == 0 {
            return Err(Error::Config("anticipator needs layers ≥ 1 and max_len ≥ 1".into()));
        }
        for (k, v) in [("dropout", self.dropout), ("drop_path", self.drop_path)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("anticipator {k} must be in [0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

/// Graph handles of one anticipator pass over `T` fused features.
#[derive(Debug, Clone, Copy)]
pub struct AnticipationOutput {
    /// `T × dim`; slot `i` is the prediction of the feature following input `i`.
    pub z_hat: Var,
    /// `T × classes`; slot `T−1` scores the action to anticipate.
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct Anticipator {
    pub config: AnticipatorConfig,
    pub num_classes: usize,
    pos: ParamId,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
    head: Linear,
}

impl Anticipator {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        config: &AnticipatorConfig,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        if num_classes == 0 {
            return Err(Error::Config("anticipator needs at least one class".into()));
        }
        let d = config.dim;
        let pos = store.add("anticipator.pos", truncated_normal(&[config.max_len, d], INIT_STD, rng))?;
        let spec = BlockSpec {
            dim: d,
            heads: config.heads,
            mlp_ratio: 4,
            dropout: config.dropout,
        };
        let blocks = (0..config.layers)
            .map(|l| {
                let rate = drop_path_rate(config.drop_path, l, config.layers);
                EncoderBlock::new(store, &format!("anticipator.block{l}"), spec, rate, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            num_classes,
            pos,
            blocks,
            norm: LayerNorm::new(store, "anticipator.norm", d)?,
            head: Linear::new(store, "anticipator.head", d, num_classes, rng)?,
        })
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn forward<F: Float>(&self, cx: &mut Ctx<'_, F>, z: Var) -> Result<AnticipationOutput> {
        let shape = cx.g.value(z).shape().to_vec();
        let t = match shape[..] {
            [t, d] if d == self.config.dim && t > 0 => t,
            _ => {
                return Err(Error::InvalidShape {
                    op: "anticipator",
                    msg: format!("expected [T × {}], got {shape:?}", self.config.dim),
                })
            }
        };
        if t > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: t,
                max: self.config.max_len,
            });
        }
        let pos = cx.p(self.pos);
        let p = cx.g.slice_rows(pos, 0, t)?;
        let mut h = cx.g.add(z, p)?;
        let mask = AttnMask::causal(t);
        let roles: Roles = Arc::from((0..t).map(TokenRole::Timestep).collect::<Vec<_>>());
        for b in &self.blocks {
            h = b.forward(cx, h, Some(&mask), Some(&roles))?;
        }
        let z_hat = self.norm.forward(cx, h)?;
        let logits = self.head.forward(cx, z_hat)?;
        Ok(AnticipationOutput { z_hat, logits })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub next: f64,
    pub cls: f64,
    pub feat: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            next: 1.0,
            cls: 1.0,
            feat: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub next: Var,
    pub cls: Var,
    pub feat: Var,
    pub total: Var,
}

/// `L_next + L_cls + L_feat` (each scaled by its weight).
///
/// `frame_targets[i]` labels observed frame `i`; `next_target` labels the
/// action to anticipate. Slot `s < T−1` predicts frame `s+1`, so the
/// per-frame terms pair slots `0..T−1` with frames `1..T`.
pub fn total_loss<F: Float>(
    cx: &mut Ctx<'_, F>,
    out: &AnticipationOutput,
    z: Var,
    frame_targets: Option<&[Target<F>]>,
    next_target: &Target<F>,
    weights: &LossWeights,
) -> Result<LossTerms> {
    let t = cx.g.value(out.logits).rows();
    if matches!(next_target, Target::Ignore) {
        return Err(Error::Invalid("the anticipated action must be labelled".into()));
    }
    let last = cx.g.slice_rows(out.logits, t - 1, 1)?;
    let next = cx.g.cross_entropy(last, std::slice::from_ref(next_target))?;
    let (cls, feat) = if t < 2 {
        let zero = cx.g.constant(Tensor::scalar(F::ZERO));
        (zero, zero)
    } else {
        let cls = match frame_targets {
            Some(ft) => {
                if ft.len() != t {
                    return Err(Error::InvalidShape {
                        op: "total_loss",
                        msg: format!("{} frame targets for {t} frames", ft.len()),
                    });
                }
                let early = cx.g.slice_rows(out.logits, 0, t - 1)?;
                cx.g.cross_entropy(early, &ft[1..])?
            }
            None => cx.g.constant(Tensor::scalar(F::ZERO)),
        };
        let pred = cx.g.slice_rows(out.z_hat, 0, t - 1)?;
        let target = cx.g.slice_rows(z, 1, t - 1)?;
        (cls, cx.g.mse(pred, target)?)
    };
    let mut total = cx.g.scale(next, weights.next)?;
    let c = cx.g.scale(cls, weights.cls)?;
    total = cx.g.add(total, c)?;
    let f = cx.g.scale(feat, weights.feat)?;
    total = cx.g.add(total, f)?;
    Ok(LossTerms { next, cls, feat, total })
}
