//! Modality attribution by attention rollout and temporal attention maps.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trace::{AttentionTrace, TokenRole};

/// Modality attribution of the fused token at each timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// `T` distributions over the `M` modalities.
    pub per_timestep: Vec<Vec<f64>>,
    /// Timesteps whose token kept all rolled-out mass on itself; their
    /// distribution is reported as uniform.
    pub degenerate: Vec<bool>,
}

impl Rollout {
    /// Mean distribution over timesteps.
    pub fn mean(&self) -> Vec<f64> {
        let t = self.per_timestep.len().max(1) as f64;
        let m = self.per_timestep.first().map_or(0, Vec::len);
        (0..m)
            .map(|j| self.per_timestep.iter().map(|d| d[j]).sum::<f64>() / t)
            .collect()
    }
}

fn head_mean(heads: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    let first = heads.first().ok_or(Error::Empty("attention heads"))?;
    let mut out = Tensor::<f64>::zeros(first.shape());
    for h in heads {
        if h.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "head mean",
                lhs: first.shape().to_vec(),
                rhs: h.shape().to_vec(),
            });
        }
        for (o, &v) in out.data_mut().iter_mut().zip(h.data()) {
            *o += v;
        }
    }
    let k = heads.len() as f64;
    Ok(out.map(|v| v / k))
}

/// Rollout over square per-layer, per-head attention matrices whose row and
/// column 0 is the fusion token. Returns the distribution over the remaining
/// columns and whether the case was degenerate.
pub fn rollout_from_heads(layers: &[Vec<Tensor<f64>>]) -> Result<(Vec<f64>, bool)> {
    let mut acc: Option<Tensor<f64>> = None;
    for heads in layers {
        let mut a = head_mean(heads)?;
        let (n, c) = a.dims2()?;
        if n != c || n < 2 {
            return Err(Error::InvalidShape {
                op: "attention rollout",
                msg: format!("expected a square matrix over token + modalities, got {n}×{c}"),
            });
        }
        for i in 0..n {
            a.data_mut()[i * n + i] += 1.0;
            let s: f64 = a.row(i).iter().sum();
            for v in &mut a.data_mut()[i * n..(i + 1) * n] {
                *v /= s;
            }
        }
        acc = Some(match acc {
            None => a,
            Some(prev) => a.matmul(&prev)?,
        });
    }
    let r = acc.ok_or(Error::Empty("attention layers"))?;
    let row = &r.row(0)[1..];
    let rest: f64 = row.iter().sum();
    if rest <= 1e-15 {
        log::warn!("attention rollout is degenerate: the token keeps all mass; reporting uniform");
        return Ok((vec![1.0 / row.len() as f64; row.len()], true));
    }
    Ok((row.iter().map(|v| v / rest).collect(), false))
}

/// Rollout of a token-variant SA fuser trace, one distribution per timestep.
/// The stacked per-timestep attention is split into `(M+1)×(M+1)` blocks.
pub fn attention_rollout(trace: &AttentionTrace) -> Result<Rollout> {
    let layers: Vec<_> = trace.layers.iter().filter(|l| l.name.starts_with("fuser.")).collect();
    let first = layers.first().ok_or(Error::NotTokenTrace)?;
    let roles = first.rows.clone();
    if !matches!(roles.first(), Some(TokenRole::FusionToken { .. })) || first.cols != roles {
        return Err(Error::NotTokenTrace);
    }
    let t = roles
        .iter()
        .filter(|r| matches!(r, TokenRole::FusionToken { .. }))
        .count();
    let mut blocks: Vec<Vec<usize>> = vec![Vec::new(); t];
    for (i, r) in roles.iter().enumerate() {
        if let TokenRole::FusionToken { time } = r {
            blocks[*time].insert(0, i);
        }
    }
    let mut by_time: Vec<Vec<(usize, usize)>> = vec![Vec::new(); t];
    for (i, r) in roles.iter().enumerate() {
        if let TokenRole::Modality { index, time } = r {
            by_time[*time].push((*index, i));
        }
    }
    for (time, mods) in by_time.iter_mut().enumerate() {
        mods.sort_unstable();
        blocks[time].extend(mods.iter().map(|&(_, i)| i));
    }
    for l in &layers {
        if l.rows != roles || l.cols != roles {
            return Err(Error::NotTokenTrace);
        }
        // per-timestep fusion requires zero attention across timesteps
        for h in &l.heads {
            for (r, rr) in roles.iter().enumerate() {
                for (c, cr) in roles.iter().enumerate() {
                    if rr.time() != cr.time() && h.get2(r, c) != 0.0 {
                        return Err(Error::NotTokenTrace);
                    }
                }
            }
        }
    }
    let mut per_timestep = Vec::with_capacity(t);
    let mut degenerate = Vec::with_capacity(t);
    for idx in &blocks {
        let sub: Vec<Vec<Tensor<f64>>> = layers
            .iter()
            .map(|l| l.heads.iter().map(|h| submatrix(h, idx)).collect())
            .collect();
        let (d, deg) = rollout_from_heads(&sub)?;
        per_timestep.push(d);
        degenerate.push(deg);
    }
    Ok(Rollout {
        per_timestep,
        degenerate,
    })
}

fn submatrix(a: &Tensor<f64>, idx: &[usize]) -> Tensor<f64> {
    let n = idx.len();
    let mut data = Vec::with_capacity(n * n);
    for &r in idx {
        for &c in idx {
            data.push(a.get2(r, c));
        }
    }
    Tensor::new(vec![n, n], data).expect("square")
}

/// Head-averaged attention of the last anticipator layer (`T × T`).
pub fn temporal_attention(trace: &AttentionTrace) -> Result<Tensor<f64>> {
    let last = trace
        .layers
        .iter()
        .rev()
        .find(|l| l.name.starts_with("anticipator."))
        .ok_or(Error::Empty("anticipator attention trace"))?;
    head_mean(&last.heads)
}
