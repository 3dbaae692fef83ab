use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Ctx, Linear};
use crate::param::ParamStore;
use crate::tensor::Float;

/// How each modality is mapped to the common fusion width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProjectionPolicy {
    /// Identity when the modality already has the common width, linear otherwise.
    #[default]
    SparseLinear,
    Linear,
    LinearRelu,
    /// `σ(W_g x + b_g) ⊙ (W_v x + b_v)`.
    Glu,
}

impl FromStr for ProjectionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sparse_linear" => Self::SparseLinear,
            "linear" => Self::Linear,
            "linear_relu" => Self::LinearRelu,
            "glu" => Self::Glu,
            _ => return Err(Error::Config(format!("unknown projection policy {s:?}"))),
        })
    }
}

impl ProjectionPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::SparseLinear => "sparse_linear",
            Self::Linear => "linear",
            Self::LinearRelu => "linear_relu",
            Self::Glu => "glu",
        }
    }
}

#[derive(Debug, Clone)]
pub enum Projection {
    Identity,
    Linear(Linear),
    LinearRelu(Linear),
    Glu { gate: Linear, value: Linear },
}

impl Projection {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        policy: ProjectionPolicy,
        in_dim: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(match policy {
            ProjectionPolicy::SparseLinear if in_dim == dim => Self::Identity,
            ProjectionPolicy::SparseLinear | ProjectionPolicy::Linear => Self::Linear(Linear::new(store, name, in_dim, dim, rng)?),
            ProjectionPolicy::LinearRelu => Self::LinearRelu(Linear::new(store, name, in_dim, dim, rng)?),
            ProjectionPolicy::Glu => Self::Glu {
                gate: Linear::new(store, &format!("{name}.gate"), in_dim, dim, rng)?,
                value: Linear::new(store, &format!("{name}.value"), in_dim, dim, rng)?,
            },
        })
    }

    pub fn forward<F: Float>(&self, cx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        match self {
            Self::Identity => Ok(x),
            Self::Linear(l) => l.forward(cx, x),
            Self::LinearRelu(l) => {
                let y = l.forward(cx, x)?;
                cx.g.relu(y)
            }
            Self::Glu { gate, value } => {
                let g = gate.forward(cx, x)?;
                let g = cx.g.sigmoid(g)?;
                let v = value.forward(cx, x)?;
                cx.g.mul(g, v)
            }
        }
    }
}
