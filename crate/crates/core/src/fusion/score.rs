//! Late (score-level) fusion of per-modality class distributions.

use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Ctx, Linear};
use crate::param::ParamStore;
use crate::tensor::Float;

pub const MATT_HIDDEN: usize = 256;
const SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreStrategy {
    Average,
    Weighted,
    Matt,
}

impl FromStr for ScoreStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "average" | "avg" => Self::Average,
            "weighted" => Self::Weighted,
            "matt" => Self::Matt,
            _ => return Err(Error::Config(format!("unknown score fusion {s:?}"))),
        })
    }
}

impl ScoreStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Average => "average",
            Self::Weighted => "weighted",
            Self::Matt => "matt",
        }
    }
}

fn check_weights(w: &[f64], m: usize) -> Result<()> {
    if w.len() != m {
        return Err(Error::Invalid(format!("{} weights for {m} modalities", w.len())));
    }
    if w.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::Invalid("fusion weights must be non-negative".into()));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::Invalid(format!("fusion weights sum to {s}, expected 1")));
    }
    Ok(())
}

/// `Σ w_m p_m` over per-modality distributions. Each input and the weights
/// must sum to 1.
pub fn weighted_fuse(probs: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    let Some(first) = probs.first() else {
        return Err(Error::Empty("score fusion inputs"));
    };
    check_weights(weights, probs.len())?;
    let c = first.len();
    let mut out = vec![0.0; c];
    for (p, &w) in probs.iter().zip(weights) {
        if p.len() != c {
            return Err(Error::ShapeMismatch {
                op: "score fusion",
                lhs: vec![c],
                rhs: vec![p.len()],
            });
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > SUM_TOL || p.iter().any(|&x| x < 0.0) {
            return Err(Error::Invalid(format!("score fusion input is not a distribution (sum {s})")));
        }
        for (o, &x) in out.iter_mut().zip(p) {
            *o += w * x;
        }
    }
    Ok(out)
}

pub fn average_fuse(probs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let m = probs.len().max(1);
    weighted_fuse(probs, &vec![1.0 / m as f64; probs.len()])
}

/// All weight vectors on the simplex with coordinates in multiples of `step`.
pub fn simplex_grid(m: usize, step: f64) -> Vec<Vec<f64>> {
    let n = (1.0 / step).round() as usize;
    let mut out = Vec::new();
    let mut cur = vec![0usize; m];
    fn rec(i: usize, left: usize, cur: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<f64>>) {
        if i + 1 == cur.len() {
            cur[i] = left;
            out.push(cur.iter().map(|&k| k as f64 / n as f64).collect());
            return;
        }
        for k in 0..=left {
            cur[i] = k;
            rec(i + 1, left - k, cur, n, out);
        }
    }
    if m > 0 {
        rec(0, n, &mut cur, n, &mut out);
    }
    out
}

/// Grid search over simplex weights maximizing `score`. `probs[m][s]` is
/// modality `m`'s distribution for sample `s`. Ties keep the first grid point.
pub fn grid_search_weights(
    probs: &[Vec<Vec<f64>>],
    step: f64,
    score: impl Fn(&[Vec<f64>]) -> f64,
) -> Result<(Vec<f64>, f64)> {
    let m = probs.len();
    if m == 0 {
        return Err(Error::Empty("grid search modalities"));
    }
    let samples = probs[0].len();
    let mut best: Option<(Vec<f64>, f64)> = None;
    for w in simplex_grid(m, step) {
        let fused = (0..samples)
            .map(|s| {
                let per: Vec<Vec<f64>> = probs.iter().map(|p| p[s].clone()).collect();
                weighted_fuse(&per, &w)
            })
            .collect::<Result<Vec<_>>>()?;
        let v = score(&fused);
        if best.as_ref().is_none_or(|(_, b)| v > *b) {
            best = Some((w, v));
        }
    }
    Ok(best.expect("grid is non-empty"))
}

/// Attention-weighted score fusion head: a two-layer ReLU MLP over the
/// concatenated sequence-mean features of all modalities, softmax over modalities.
#[derive(Debug, Clone)]
pub struct MattHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub modalities: usize,
}

impl MattHead {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        modalities: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, MATT_HIDDEN, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), MATT_HIDDEN, modalities, rng)?,
            modalities,
        })
    }

    /// `features: [1 × in_dim]` → modality weights `[1 × M]`.
    pub fn weights<F: Float>(&self, cx: &mut Ctx<'_, F>, features: Var) -> Result<Var> {
        let h = self.fc1.forward(cx, features)?;
        let h = cx.g.relu(h)?;
        let s = self.fc2.forward(cx, h)?;
        cx.g.softmax(s, 1, None)
    }

    /// `Σ α_m p_m` for `[1 × C]` distributions `probs`.
    pub fn mix<F: Float>(&self, cx: &mut Ctx<'_, F>, alpha: Var, probs: &[Var]) -> Result<Var> {
        if probs.len() != self.modalities {
            return Err(Error::Invalid(format!(
                "MATT expects {} modalities, got {}",
                self.modalities,
                probs.len()
            )));
        }
        let mut acc = None;
        for (m, &p) in probs.iter().enumerate() {
            let a = cx.g.slice_cols(alpha, m, 1)?;
            let a = cx.g.sum(a)?;
            let term = cx.g.scale_by(a, p)?;
            acc = Some(match acc {
                None => term,
                Some(s) => cx.g.add(s, term)?,
            });
        }
        Ok(acc.expect("at least one modality"))
    }
}
