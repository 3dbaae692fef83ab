//! Full pipelines: mid-level fusion followed by anticipation, or one
//! uni-modal pipeline per modality combined at score level.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::anticipator::{total_loss, AnticipationOutput, Anticipator, AnticipatorConfig, LossWeights};
use crate::data::{FeatureSequence, ModalitySpec, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::fusion::{Fuser, FuserConfig, MattHead, ProjectionPolicy, ScoreStrategy};
use crate::graph::{Graph, Target, Var};
use crate::nn::Ctx;
use crate::param::ParamStore;
use crate::tensor::{Float, Tensor};
use crate::trace::AttentionTrace;

const INIT_STREAM: u64 = 0xA1;
/// Keeps `log` finite when a mixture assigns zero probability in low precision.
const MIX_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelConfig {
    pub fuser: FuserConfig,
    pub anticipator: AnticipatorConfig,
    pub loss: LossWeights,
    /// `None`: mid-level fusion. `Some(s)`: uni-modal branches fused at score level.
    pub score_fusion: Option<ScoreStrategy>,
    /// Fixed weights for [`ScoreStrategy::Weighted`]; uniform when empty.
    pub score_weights: Vec<f64>,
}

/// Graph handles of one fused forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    pub z: Var,
    pub anticipation: AnticipationOutput,
}

/// Fuser followed by the anticipator.
#[derive(Debug, Clone)]
pub struct AfftModel {
    pub fuser: Fuser,
    pub anticipator: Anticipator,
    pub loss_weights: LossWeights,
}

impl AfftModel {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        config: &ModelConfig,
        modalities: &[ModalitySpec],
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fuser = Fuser::new(store, &config.fuser, modalities, config.anticipator.dim, rng)?;
        let anticipator = Anticipator::new(store, &config.anticipator, num_classes, rng)?;
        Ok(Self {
            fuser,
            anticipator,
            loss_weights: config.loss,
        })
    }

    pub fn forward<F: Float>(&self, cx: &mut Ctx<'_, F>, inputs: &[Var]) -> Result<ModelOutput> {
        let z = self.fuser.forward(cx, inputs)?;
        let anticipation = self.anticipator.forward(cx, z)?;
        Ok(ModelOutput { z, anticipation })
    }

    /// `[1 × C]` next-action logits of a forward pass.
    pub fn next_logits<F: Float>(&self, cx: &mut Ctx<'_, F>, out: &ModelOutput) -> Result<Var> {
        let t = cx.g.value(out.anticipation.logits).rows();
        cx.g.slice_rows(out.anticipation.logits, t - 1, 1)
    }
}

/// Uni-modal pipelines combined at score level.
#[derive(Debug, Clone)]
pub struct LateFusion {
    pub branches: Vec<AfftModel>,
    pub strategy: ScoreStrategy,
    pub weights: Vec<f64>,
    pub matt: Option<MattHead>,
}

#[derive(Debug, Clone)]
pub enum Pipeline {
    Fused(AfftModel),
    Late(LateFusion),
}

impl Pipeline {
    /// Builds the pipeline and registers its parameters, initialized from `seed`.
    pub fn build<F: Float>(
        store: &mut ParamStore<F>,
        config: &ModelConfig,
        modalities: &[ModalitySpec],
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let Some(strategy) = config.score_fusion else {
            return Ok(Self::Fused(AfftModel::new(store, config, modalities, num_classes, &mut rng)?));
        };
        let mut branch_cfg = config.clone();
        branch_cfg.fuser.projection = ProjectionPolicy::SparseLinear;
        let mut branches = Vec::with_capacity(modalities.len());
        for m in modalities {
            let b = store.scoped(&format!("branch.{}.", m.name), |s| {
                AfftModel::new(s, &branch_cfg, std::slice::from_ref(m), num_classes, &mut rng)
            })?;
            branches.push(b);
        }
        let weights = if config.score_weights.is_empty() {
            vec![1.0 / modalities.len() as f64; modalities.len()]
        } else {
            config.score_weights.clone()
        };
        if weights.len() != modalities.len() || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Config("score weights need one entry per modality and must sum to 1".into()));
        }
        let matt = if strategy == ScoreStrategy::Matt {
            let in_dim = modalities.iter().map(|m| m.dim).sum();
            Some(MattHead::new(store, "matt", in_dim, modalities.len(), &mut rng)?)
        } else {
            None
        };
        Ok(Self::Late(LateFusion {
            branches,
            strategy,
            weights,
            matt,
        }))
    }

    pub fn modalities(&self) -> usize {
        match self {
            Self::Fused(m) => m.fuser.modalities.len(),
            Self::Late(l) => l.branches.len(),
        }
    }

    /// Training objective for one sample.
    pub fn loss<F: Float>(
        &self,
        cx: &mut Ctx<'_, F>,
        inputs: &[Var],
        frame_targets: Option<&[Target<F>]>,
        next_target: &Target<F>,
    ) -> Result<Var> {
        match self {
            Self::Fused(m) => {
                let out = m.forward(cx, inputs)?;
                Ok(total_loss(cx, &out.anticipation, out.z, frame_targets, next_target, &m.loss_weights)?.total)
            }
            Self::Late(l) => {
                check_arity(inputs.len(), l.branches.len())?;
                let mut total = None;
                let mut probs = Vec::with_capacity(inputs.len());
                for (b, &x) in l.branches.iter().zip(inputs) {
                    let out = b.forward(cx, &[x])?;
                    let terms = total_loss(cx, &out.anticipation, out.z, frame_targets, next_target, &b.loss_weights)?;
                    total = Some(match total {
                        None => terms.total,
                        Some(s) => cx.g.add(s, terms.total)?,
                    });
                    if l.matt.is_some() {
                        let logits = b.next_logits(cx, &out)?;
                        probs.push(cx.g.softmax(logits, 1, None)?);
                    }
                }
                let mut total = total.expect("at least one branch");
                if let Some(head) = &l.matt {
                    let mixed = matt_mixture(cx, head, inputs, &probs)?;
                    let c = cx.g.value(mixed).cols();
                    let eps = cx.g.constant(Tensor::full(&[1, c], F::from_f64(MIX_EPS)));
                    let mixed = cx.g.add(mixed, eps)?;
                    let logp = cx.g.log(mixed)?;
                    let target = dense_target(next_target, c)?;
                    let target = cx.g.constant(target);
                    let picked = cx.g.mul(logp, target)?;
                    let picked = cx.g.sum(picked)?;
                    let nll = cx.g.scale(picked, -1.0)?;
                    total = cx.g.add(total, nll)?;
                }
                Ok(total)
            }
        }
    }

    /// Next-action distribution as a `[1 × C]` graph value.
    pub fn predict<F: Float>(&self, cx: &mut Ctx<'_, F>, inputs: &[Var]) -> Result<Var> {
        match self {
            Self::Fused(m) => {
                let out = m.forward(cx, inputs)?;
                let logits = m.next_logits(cx, &out)?;
                cx.g.softmax(logits, 1, None)
            }
            Self::Late(l) => {
                check_arity(inputs.len(), l.branches.len())?;
                let mut probs = Vec::with_capacity(inputs.len());
                for (b, &x) in l.branches.iter().zip(inputs) {
                    let out = b.forward(cx, &[x])?;
                    let logits = b.next_logits(cx, &out)?;
                    probs.push(cx.g.softmax(logits, 1, None)?);
                }
                match &l.matt {
                    Some(head) => matt_mixture(cx, head, inputs, &probs),
                    None => {
                        let mut acc = cx.g.scale(probs[0], l.weights[0])?;
                        for (&p, &w) in probs.iter().zip(&l.weights).skip(1) {
                            let term = cx.g.scale(p, w)?;
                            acc = cx.g.add(acc, term)?;
                        }
                        Ok(acc)
                    }
                }
            }
        }
    }

    /// Per-branch next-action distributions (late fusion) or the single fused one.
    pub fn branch_probabilities(&self, params: &ParamStore<f32>, sample: &FeatureSequence) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let inputs = sample_inputs(&mut g, sample);
        let mut cx = Ctx::eval(&mut g, params);
        match self {
            Self::Fused(_) => {
                let p = self.predict(&mut cx, &inputs)?;
                Ok(vec![cx.g.value(p).to_f64_vec()])
            }
            Self::Late(l) => {
                let mut out = Vec::with_capacity(l.branches.len());
                for (b, &x) in l.branches.iter().zip(&inputs) {
                    let o = b.forward(&mut cx, &[x])?;
                    let logits = b.next_logits(&mut cx, &o)?;
                    out.push(softmax_f64(cx.g.value(logits)));
                }
                Ok(out)
            }
        }
    }

    /// Eval-mode next-action distribution for one sample, normalized in f64.
    pub fn predict_sample(&self, params: &ParamStore<f32>, sample: &FeatureSequence) -> Result<Vec<f64>> {
        self.predict_traced(params, sample, None)
    }

    pub fn predict_traced(
        &self,
        params: &ParamStore<f32>,
        sample: &FeatureSequence,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let inputs = sample_inputs(&mut g, sample);
        let mut cx = Ctx::eval(&mut g, params);
        if let Some(t) = trace {
            cx = cx.with_trace(t);
        }
        if let Self::Fused(m) = self {
            // normalize the logits in f64 so the distribution sums to 1 tightly
            let out = m.forward(&mut cx, &inputs)?;
            let logits = m.next_logits(&mut cx, &out)?;
            return Ok(softmax_f64(cx.g.value(logits)));
        }
        let p = self.predict(&mut cx, &inputs)?;
        let mut v = cx.g.value(p).to_f64_vec();
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        Ok(v)
    }
}

fn check_arity(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Invalid(format!("pipeline expects {want} modalities, got {got}")));
    }
    Ok(())
}

fn matt_mixture<F: Float>(cx: &mut Ctx<'_, F>, head: &MattHead, inputs: &[Var], probs: &[Var]) -> Result<Var> {
    let means = inputs
        .iter()
        .map(|&x| cx.g.mean_rows(x))
        .collect::<Result<Vec<_>>>()?;
    let feats = if means.len() == 1 { means[0] } else { cx.g.concat_cols(&means)? };
    let alpha = head.weights(cx, feats)?;
    head.mix(cx, alpha, probs)
}

fn dense_target<F: Float>(t: &Target<F>, c: usize) -> Result<Tensor<F>> {
    match t {
        Target::Class(i) if *i < c => {
            let mut v = Tensor::zeros(&[1, c]);
            v.data_mut()[*i] = F::ONE;
            Ok(v)
        }
        Target::Class(i) => Err(Error::IndexOutOfRange { index: *i, len: c }),
        Target::Soft(p) if p.len() == c => Tensor::new(vec![1, c], p.clone()),
        Target::Soft(p) => Err(Error::InvalidShape {
            op: "matt loss",
            msg: format!("soft target of length {} for {c} classes", p.len()),
        }),
        Target::Ignore => Err(Error::Invalid("the anticipated action must be labelled".into())),
    }
}

fn softmax_f64<F: Float>(logits: &Tensor<F>) -> Vec<f64> {
    let v = logits.to_f64_vec();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Loads a sample's features as untracked graph leaves.
pub fn sample_inputs<F: Float>(g: &mut Graph<F>, sample: &FeatureSequence) -> Vec<Var> {
    sample.features.iter().map(|f| g.constant(f.cast())).collect()
}

/// Hard targets of a sample: frame labels (ignore sentinel kept) and next action.
pub fn sample_targets<F: Float>(sample: &FeatureSequence) -> (Option<Vec<Target<F>>>, Target<F>) {
    let frames = sample.frame_labels.as_ref().map(|l| {
        l.iter()
            .map(|&x| if x == IGNORE_LABEL { Target::Ignore } else { Target::Class(x as usize) })
            .collect()
    });
    (frames, Target::Class(sample.next_label as usize))
}
