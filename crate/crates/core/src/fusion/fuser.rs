use std::str::FromStr;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::data::ModalitySpec;
use crate::error::{Error, Result};
use crate::fusion::projection::{Projection, ProjectionPolicy};
use crate::graph::Var;
use crate::nn::{drop_path_rate, AttnMask, BlockSpec, Ctx, DecoderBlock, EncoderBlock, LayerNorm, Linear};
use crate::param::{truncated_normal, ParamId, ParamStore, INIT_STD};
use crate::tensor::Float;
use crate::trace::{Roles, TokenRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FuserKind {
    /// Per-timestep self-attention with a learned fusion token.
    #[default]
    Sa,
    /// Per-timestep self-attention, output is the mean of modality outputs.
    SaNoToken,
    /// Temporal self-attention over all timesteps with per-timestep query tokens.
    Tsa,
    /// Cross-attention decoder driven by a main modality.
    Ca,
}

impl FromStr for FuserKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "sa" => Self::Sa,
            "sa_no_token" | "sa-no-token" => Self::SaNoToken,
            "tsa" | "t-sa" => Self::Tsa,
            "ca" => Self::Ca,
            _ => return Err(Error::Config(format!("unknown fuser kind {s:?}"))),
        })
    }
}

impl FuserKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sa => "sa",
            Self::SaNoToken => "sa_no_token",
            Self::Tsa => "tsa",
            Self::Ca => "ca",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuserConfig {
    pub kind: FuserKind,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub drop_path: f64,
    pub projection: ProjectionPolicy,
    /// Size of the temporal position tables (T-SA, CA).
    pub max_len: usize,
    /// LayerNorm on the fused output (SA variants and T-SA).
    pub final_norm: bool,
    /// CA: main modality name; the first modality when unset.
    pub main_modality: Option<String>,
    /// CA: order in which the other modalities get a decoder block; config
    /// order when empty.
    pub modality_order: Vec<String>,
    /// CA: one positional table per memory modality instead of a shared one.
    pub per_modality_pos: bool,
}

impl Default for FuserConfig {
    fn default() -> Self {
        Self {
            kind: FuserKind::Sa,
            dim: 1024,
            layers: 6,
            heads: 4,
            dropout: 0.1,
            drop_path: 0.1,
            projection: ProjectionPolicy::SparseLinear,
            max_len: 16,
            final_norm: true,
            main_modality: None,
            modality_order: Vec::new(),
            per_modality_pos: false,
        }
    }
}

impl FuserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::IndivisibleHeads {
                dim: self.dim,
                heads: self.heads,
            });
        }
        if self.layers == 0 && self.kind != FuserKind::Ca {
            return Err(Error::Config("fuser needs at least one block".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("fuser max_len must be positive".into()));
        }
        for (k, v) in [("dropout", self.dropout), ("drop_path", self.drop_path)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("fuser {k} must be in [0, 1), got {v}")));
            }
        }
        Ok(())
    }

    fn block_spec(&self) -> BlockSpec {
        BlockSpec {
            dim: self.dim,
            heads: self.heads,
            mlp_ratio: 4,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone)]
enum Body {
    Sa {
        token: Option<ParamId>,
        blocks: Vec<EncoderBlock>,
    },
    Tsa {
        tokens: ParamId,
        pos: ParamId,
        blocks: Vec<EncoderBlock>,
    },
    Ca {
        main: usize,
        others: Vec<usize>,
        pos: ParamId,
        mem_pos: Option<Vec<ParamId>>,
        blocks: Vec<DecoderBlock>,
    },
}

/// Mid-level fuser: per-modality projections, fusion blocks and an optional
/// projection to the downstream width. Parameters are registered under `fuser.`.
#[derive(Debug, Clone)]
pub struct Fuser {
    pub config: FuserConfig,
    pub modalities: Vec<ModalitySpec>,
    pub out_dim: usize,
    proj: Vec<Projection>,
    body: Body,
    final_norm: Option<LayerNorm>,
    out_proj: Option<Linear>,
    bypass_blocks: bool,
}

impl Fuser {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        config: &FuserConfig,
        modalities: &[ModalitySpec],
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        if modalities.is_empty() {
            return Err(Error::Config("fusion needs at least one modality".into()));
        }
        let d = config.dim;
        let proj = modalities
            .iter()
            .map(|m| Projection::new(store, &format!("fuser.proj.{}", m.name), config.projection, m.dim, d, rng))
            .collect::<Result<Vec<_>>>()?;
        let spec = config.block_spec();
        let encoder_blocks = |store: &mut ParamStore<F>, rng: &mut ChaCha8Rng| {
            (0..config.layers)
                .map(|l| {
                    let rate = drop_path_rate(config.drop_path, l, config.layers);
                    EncoderBlock::new(store, &format!("fuser.block{l}"), spec, rate, rng)
                })
                .collect::<Result<Vec<_>>>()
        };
        let body = match config.kind {
            FuserKind::Sa | FuserKind::SaNoToken => {
                let token = if config.kind == FuserKind::Sa {
                    Some(store.add("fuser.token", truncated_normal(&[1, d], INIT_STD, rng))?)
                } else {
                    None
                };
                Body::Sa {
                    token,
                    blocks: encoder_blocks(store, rng)?,
                }
            }
            FuserKind::Tsa => Body::Tsa {
                tokens: store.add("fuser.tokens", truncated_normal(&[config.max_len, d], INIT_STD, rng))?,
                pos: store.add("fuser.pos", truncated_normal(&[config.max_len, d], INIT_STD, rng))?,
                blocks: encoder_blocks(store, rng)?,
            },
            FuserKind::Ca => {
                let (main, others) = ca_order(config, modalities)?;
                let pos = store.add("fuser.pos", truncated_normal(&[config.max_len, d], INIT_STD, rng))?;
                let mem_pos = if config.per_modality_pos {
                    Some(
                        others
                            .iter()
                            .map(|&m| {
                                store.add(
                                    format!("fuser.pos.{}", modalities[m].name),
                                    truncated_normal(&[config.max_len, d], INIT_STD, rng),
                                )
                            })
                            .collect::<Result<Vec<_>>>()?,
                    )
                } else {
                    None
                };
                let n = others.len();
                let blocks = (0..n)
                    .map(|j| {
                        let rate = drop_path_rate(config.drop_path, j, n);
                        DecoderBlock::new(store, &format!("fuser.block{j}"), spec, rate, rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Body::Ca {
                    main,
                    others,
                    pos,
                    mem_pos,
                    blocks,
                }
            }
        };
        let final_norm = if config.final_norm && config.kind != FuserKind::Ca {
            Some(LayerNorm::new(store, "fuser.norm", d)?)
        } else {
            None
        };
        let out_proj = if out_dim != d {
            Some(Linear::new(store, "fuser.out", d, out_dim, rng)?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            modalities: modalities.to_vec(),
            out_dim,
            proj,
            body,
            final_norm,
            out_proj,
            bypass_blocks: false,
        })
    }

    /// Test hook: treat every fusion block as the identity.
    #[doc(hidden)]
    pub fn set_bypass_blocks(&mut self, on: bool) {
        self.bypass_blocks = on;
    }

    /// CA: main modality index and memory modalities in block order.
    pub fn ca_modalities(&self) -> Option<(usize, &[usize])> {
        match &self.body {
            Body::Ca { main, others, .. } => Some((*main, others)),
            _ => None,
        }
    }

    /// Projects every modality to the common width.
    pub fn project<F: Float>(&self, cx: &mut Ctx<'_, F>, inputs: &[Var]) -> Result<Vec<Var>> {
        self.check_inputs(cx, inputs)?;
        inputs
            .iter()
            .zip(&self.proj)
            .map(|(&x, p)| p.forward(cx, x))
            .collect()
    }

    fn check_inputs<F: Float>(&self, cx: &Ctx<'_, F>, inputs: &[Var]) -> Result<usize> {
        if inputs.len() != self.modalities.len() {
            return Err(Error::Invalid(format!(
                "fuser expects {} modalities, got {}",
                self.modalities.len(),
                inputs.len()
            )));
        }
        let t = cx.g.value(inputs[0]).rows();
        for (x, m) in inputs.iter().zip(&self.modalities) {
            let shape = cx.g.value(*x).shape();
            if shape != [t, m.dim] {
                return Err(Error::ShapeMismatch {
                    op: "fuser input",
                    lhs: shape.to_vec(),
                    rhs: vec![t, m.dim],
                });
            }
        }
        if t == 0 {
            return Err(Error::Empty("fuser input sequence"));
        }
        Ok(t)
    }

    /// Fuses per-modality `T × dim(m)` inputs into `T × out_dim`.
    pub fn forward<F: Float>(&self, cx: &mut Ctx<'_, F>, inputs: &[Var]) -> Result<Var> {
        let t = self.check_inputs(cx, inputs)?;
        let xs = self.project(cx, inputs)?;
        let m = xs.len();
        let z = match &self.body {
            Body::Sa { token, blocks } => {
                let mut parts = Vec::with_capacity(m + 1);
                let mut roles = Vec::with_capacity(t * (m + 1));
                if let Some(tok) = token {
                    let tok = cx.p(*tok);
                    parts.push(cx.g.gather_rows(tok, &vec![0; t])?);
                    roles.extend((0..t).map(|time| TokenRole::FusionToken { time }));
                }
                parts.extend(&xs);
                for index in 0..m {
                    roles.extend((0..t).map(|time| TokenRole::Modality { index, time }));
                }
                let x = cx.g.concat_rows(&parts)?;
                let n = roles.len();
                let mask = AttnMask::from_fn(n, n, |r, c| r % t == c % t);
                let h = self.run_encoder(cx, blocks, x, &mask, roles)?;
                if token.is_some() {
                    cx.g.slice_rows(h, 0, t)?
                } else {
                    let mut acc = cx.g.slice_rows(h, 0, t)?;
                    for j in 1..m {
                        let part = cx.g.slice_rows(h, j * t, t)?;
                        acc = cx.g.add(acc, part)?;
                    }
                    cx.g.scale(acc, 1.0 / m as f64)?
                }
            }
            Body::Tsa { tokens, pos, blocks } => {
                self.check_len(t)?;
                let tokens = cx.p(*tokens);
                let pos = cx.p(*pos);
                let p = cx.g.slice_rows(pos, 0, t)?;
                let q = cx.g.slice_rows(tokens, 0, t)?;
                let mut parts = vec![cx.g.add(q, p)?];
                let mut roles: Vec<TokenRole> = (0..t).map(|time| TokenRole::FusionToken { time }).collect();
                for (index, &x) in xs.iter().enumerate() {
                    parts.push(cx.g.add(x, p)?);
                    roles.extend((0..t).map(|time| TokenRole::Modality { index, time }));
                }
                let x = cx.g.concat_rows(&parts)?;
                let n = roles.len();
                let mask = AttnMask::from_fn(n, n, |r, c| c % t <= r % t);
                let h = self.run_encoder(cx, blocks, x, &mask, roles)?;
                cx.g.slice_rows(h, 0, t)?
            }
            Body::Ca {
                main,
                others,
                pos,
                mem_pos,
                blocks,
            } => {
                self.check_len(t)?;
                let pos_v = cx.p(*pos);
                let p = cx.g.slice_rows(pos_v, 0, t)?;
                let mut stream = cx.g.add(xs[*main], p)?;
                let mask = AttnMask::causal(t);
                let stream_roles: Roles = (0..t).map(TokenRole::Timestep).collect::<Vec<_>>().into();
                for (j, (&other, block)) in others.iter().zip(blocks).enumerate() {
                    let mp = match mem_pos {
                        Some(tables) => {
                            let v = cx.p(tables[j]);
                            cx.g.slice_rows(v, 0, t)?
                        }
                        None => p,
                    };
                    let memory = cx.g.add(xs[other], mp)?;
                    if self.bypass_blocks {
                        continue;
                    }
                    let mem_roles: Roles = (0..t)
                        .map(|time| TokenRole::Modality { index: other, time })
                        .collect::<Vec<_>>()
                        .into();
                    stream = block.forward(
                        cx,
                        stream,
                        memory,
                        Some(&mask),
                        Some(&mask),
                        Some(&stream_roles),
                        Some(&mem_roles),
                    )?;
                }
                stream
            }
        };
        let z = match &self.final_norm {
            Some(ln) => ln.forward(cx, z)?,
            None => z,
        };
        match &self.out_proj {
            Some(l) => l.forward(cx, z),
            None => Ok(z),
        }
    }

    fn run_encoder<F: Float>(
        &self,
        cx: &mut Ctx<'_, F>,
        blocks: &[EncoderBlock],
        mut x: Var,
        mask: &AttnMask,
        roles: Vec<TokenRole>,
    ) -> Result<Var> {
        if self.bypass_blocks {
            return Ok(x);
        }
        let roles: Roles = Arc::from(roles);
        for b in blocks {
            x = b.forward(cx, x, Some(mask), Some(&roles))?;
        }
        Ok(x)
    }

    fn check_len(&self, t: usize) -> Result<()> {
        if t > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: t,
                max: self.config.max_len,
            });
        }
        Ok(())
    }
}

fn ca_order(config: &FuserConfig, modalities: &[ModalitySpec]) -> Result<(usize, Vec<usize>)> {
    let find = |name: &str| {
        modalities
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| Error::Config(format!("modality {name:?} missing")))
    };
    let main = match &config.main_modality {
        Some(name) => find(name)?,
        None => 0,
    };
    let others: Vec<usize> = if config.modality_order.is_empty() {
        (0..modalities.len()).filter(|&i| i != main).collect()
    } else {
        let order = config
            .modality_order
            .iter()
            .map(|n| find(n))
            .collect::<Result<Vec<_>>>()?;
        let mut sorted = order.clone();
        sorted.sort_unstable();
        let expected: Vec<usize> = (0..modalities.len()).filter(|&i| i != main).collect();
        if sorted != expected {
            return Err(Error::Config(
                "CA modality order must list every non-main modality exactly once".into(),
            ));
        }
        order
    };
    Ok((main, others))
}
