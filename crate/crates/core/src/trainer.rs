//! SGD training loop with warmup + cosine schedule, feature-space mixup and
//! a deterministic, resumable epoch structure.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::Serialize;

pub use crate::checkpoint::{BestSnapshot, TrainState};
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::data::{Dataset, FeatureSequence, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::eval::{class_mean_topk_recall, Prediction};
use crate::graph::{Graph, Target};
use crate::model::{sample_targets, Pipeline};
use crate::nn::Ctx;
use crate::optim::{sgd_momentum_step, SgdConfig, SgdState};
use crate::param::ParamStore;
use crate::tensor::Tensor;

const EPOCH_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub decay_epochs: usize,
    pub lr_max: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Beta(α, α) mixing; 0 disables mixup.
    pub mixup_alpha: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            warmup_epochs: 20,
            decay_epochs: 30,
            lr_max: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-6,
            mixup_alpha: 0.1,
            batch_size: 32,
            seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs + self.decay_epochs != self.epochs {
            return Err(Error::Config(format!(
                "warmup ({}) + decay ({}) epochs must equal epochs ({})",
                self.warmup_epochs, self.decay_epochs, self.epochs
            )));
        }
        if !(self.mixup_alpha >= 0.0 && self.mixup_alpha.is_finite()) {
            return Err(Error::Config("mixup alpha must be finite and ≥ 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr_max >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr_max ≥ 0, 0 ≤ momentum < 1 and weight_decay ≥ 0 required".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Linear warmup to `lr_max` over `warmup_epochs`, then cosine decay to 0.
pub fn lr_at_epoch(e: usize, cfg: &TrainConfig) -> Result<f64> {
    if e > cfg.epochs {
        return Err(Error::Invalid(format!("epoch {e} outside 0..={}", cfg.epochs)));
    }
    if e < cfg.warmup_epochs {
        return Ok(cfg.lr_max * ((e + 1) as f64 / cfg.warmup_epochs as f64));
    }
    if cfg.decay_epochs == 0 {
        return Ok(0.0);
    }
    let progress = (e - cfg.warmup_epochs) as f64 / cfg.decay_epochs as f64;
    Ok(cfg.lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// One (possibly mixed) training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub features: Vec<Tensor<f32>>,
    pub frame_targets: Option<Vec<Target<f32>>>,
    pub next_target: Target<f32>,
}

impl TrainExample {
    pub fn from_sample(s: &FeatureSequence) -> Self {
        let (frame_targets, next_target) = sample_targets(s);
        Self {
            features: s.features.clone(),
            frame_targets,
            next_target,
        }
    }
}

fn mix_label(a: u32, b: u32, lambda: f64, classes: usize) -> Target<f32> {
    if a == IGNORE_LABEL || b == IGNORE_LABEL {
        return Target::Ignore;
    }
    if a == b || lambda == 1.0 {
        return Target::Class(a as usize);
    }
    if lambda == 0.0 {
        return Target::Class(b as usize);
    }
    let mut v = vec![0f32; classes];
    v[a as usize] += lambda as f32;
    v[b as usize] += (1.0 - lambda) as f32;
    Target::Soft(v)
}

/// `λ·a + (1−λ)·b` on every modality and timestep, with soft labels mixed
/// alike. A frame ignored in either sample stays ignored.
pub fn mix_pair(a: &FeatureSequence, b: &FeatureSequence, lambda: f64, classes: usize) -> Result<TrainExample> {
    if a.features.len() != b.features.len() {
        return Err(Error::Invalid("mixup partners differ in modalities".into()));
    }
    let l = lambda as f32;
    let features = a
        .features
        .iter()
        .zip(&b.features)
        .map(|(x, y)| {
            if x.shape() != y.shape() {
                return Err(Error::ShapeMismatch {
                    op: "mixup",
                    lhs: x.shape().to_vec(),
                    rhs: y.shape().to_vec(),
                });
            }
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| l * p + (1.0 - l) * q).collect();
            Tensor::new(x.shape().to_vec(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    let frame_targets = match (&a.frame_labels, &b.frame_labels) {
        (Some(la), Some(lb)) => Some(la.iter().zip(lb).map(|(&x, &y)| mix_label(x, y, lambda, classes)).collect()),
        _ => None,
    };
    Ok(TrainExample {
        features,
        frame_targets,
        next_target: mix_label(a.next_label, b.next_label, lambda, classes),
    })
}

/// Mixes a batch with one `λ ~ Beta(α, α)` and a seeded partner permutation.
/// Batches smaller than two or `α = 0` pass through unchanged.
pub fn mixup_batch(
    batch: &[&FeatureSequence],
    classes: usize,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<TrainExample>, Option<f64>)> {
    if alpha <= 0.0 || batch.len() < 2 {
        return Ok((batch.iter().map(|s| TrainExample::from_sample(s)).collect(), None));
    }
    let lambda = Beta::new(alpha, alpha)
        .map_err(|e| Error::Config(format!("mixup alpha: {e}")))?
        .sample(rng);
    let mut partner: Vec<usize> = (0..batch.len()).collect();
    partner.shuffle(rng);
    let mixed = batch
        .iter()
        .zip(&partner)
        .map(|(a, &j)| mix_pair(a, batch[j], lambda, classes))
        .collect::<Result<Vec<_>>>()?;
    Ok((mixed, Some(lambda)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_metric: Option<f64>,
    pub wall_ms: u64,
}

/// Where to write per-epoch checkpoints.
#[derive(Debug, Clone)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    /// `key=value` run description stored in every file.
    pub config: String,
}

#[derive(Default)]
pub struct FitOptions<'a> {
    pub val: Option<&'a Dataset>,
    pub resume: Option<TrainState<f32>>,
    /// Stop after this many completed epochs (used to interrupt and resume).
    pub stop_after: Option<usize>,
    pub log: Option<&'a mut dyn Write>,
    pub checkpoints: Option<CheckpointSink>,
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub state: TrainState<f32>,
    pub log: Vec<EpochLog>,
}

fn sample_rng(seed: u64, epoch: usize, batch: usize, index: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (i, v) in [seed, epoch as u64, batch as u64, index as u64].iter().enumerate() {
        key[i * 8..(i + 1) * 8].copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Runs `f` on a pool sized by `AFFT_NUM_THREADS` when set.
pub fn with_thread_pool<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    let n = std::env::var("AFFT_NUM_THREADS").ok().and_then(|v| v.parse::<usize>().ok());
    match n.and_then(|n| rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()) {
        Some(pool) => pool.install(f),
        None => f(),
    }
}

fn first_non_finite(store: &ParamStore<f32>, grads: Option<&[Vec<f32>]>) -> String {
    for (id, p) in store.iter() {
        let bad_grad = grads.is_some_and(|g| g[id.index()].iter().any(|v| !v.is_finite()));
        if bad_grad || !p.tensor.all_finite() {
            return p.name.clone();
        }
    }
    "<none: non-finite activation>".into()
}

/// Eval-mode next-action predictions for every sample, in dataset order.
pub fn predict_dataset(pipeline: &Pipeline, params: &ParamStore<f32>, data: &Dataset) -> Result<Vec<Prediction>> {
    data.samples
        .par_iter()
        .map(|s| {
            let probs = pipeline.predict_sample(params, s)?;
            Prediction::new(probs, s.next_label as usize)
        })
        .collect()
}

/// Class-mean top-5 recall of `pipeline` on `data`.
pub fn validation_metric(pipeline: &Pipeline, params: &ParamStore<f32>, data: &Dataset) -> Result<f64> {
    class_mean_topk_recall(&predict_dataset(pipeline, params, data)?, 5)
}

/// Trains `params` in place. Every source of randomness is derived from
/// `(seed, epoch, batch, position)`, so a run resumed from a saved
/// [`TrainState`] matches the uninterrupted one bitwise.
pub fn fit(
    pipeline: &Pipeline,
    params: &mut ParamStore<f32>,
    train: &Dataset,
    num_classes: usize,
    cfg: &TrainConfig,
    mut opts: FitOptions<'_>,
) -> Result<FitOutput> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut state = match opts.resume.take() {
        Some(s) => {
            if s.seed != cfg.seed {
                return Err(Error::Config(format!("resume state has seed {}, config has {}", s.seed, cfg.seed)));
            }
            if s.velocity.len() != params.len() {
                return Err(Error::Malformed("resume state does not match the model".into()));
            }
            s
        }
        None => TrainState {
            epoch: 0,
            seed: cfg.seed,
            velocity: params.zeros_like(),
            best: None,
        },
    };
    let mut sgd = SgdState {
        velocity: std::mem::take(&mut state.velocity),
    };
    let sgd_cfg = SgdConfig {
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let end = opts.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    let mut log = Vec::new();
    for epoch in state.epoch..end {
        let started = Instant::now();
        let lr = lr_at_epoch(epoch, cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(EPOCH_STREAM + epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&FeatureSequence> = chunk.iter().map(|&i| &train.samples[i]).collect();
            let (examples, _) = mixup_batch(&batch, num_classes, cfg.mixup_alpha, &mut rng)?;
            let store: &ParamStore<f32> = params;
            let results: Vec<Result<(f64, Vec<Vec<f32>>)>> = examples
                .par_iter()
                .enumerate()
                .map(|(i, ex)| {
                    let mut srng = sample_rng(cfg.seed, epoch, b, i);
                    let mut g = Graph::new();
                    let inputs: Vec<_> = ex.features.iter().map(|f| g.constant(f.clone())).collect();
                    let loss = {
                        let mut cx = Ctx::train(&mut g, store, &mut srng);
                        pipeline.loss(&mut cx, &inputs, ex.frame_targets.as_deref(), &ex.next_target)?
                    };
                    let value = g.value(loss).item() as f64;
                    g.backward(loss)?;
                    let mut grads = store.zeros_like();
                    g.accumulate_param_grads(&mut grads);
                    Ok((value, grads))
                })
                .collect();
            let mut grads = params.zeros_like();
            let mut batch_loss = 0.0;
            for r in results {
                let (v, g) = r.map_err(|e| match e {
                    Error::NonFinite { op } => Error::NonFiniteLoss {
                        epoch,
                        param: format!("{} (first non-finite value in {op})", first_non_finite(params, None)),
                    },
                    other => other,
                })?;
                batch_loss += v;
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    for (a, x) in acc.iter_mut().zip(gi) {
                        *a += *x;
                    }
                }
            }
            let n = chunk.len() as f32;
            grads.iter_mut().flatten().for_each(|x| *x /= n);
            if !batch_loss.is_finite() || grads.iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    param: first_non_finite(params, Some(&grads)),
                });
            }
            if let Some(c) = cfg.grad_clip {
                let norm = grads.iter().flatten().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
                if norm > c {
                    let s = (c / norm) as f32;
                    grads.iter_mut().flatten().for_each(|x| *x *= s);
                }
            }
            sgd_momentum_step(params, &grads, lr, sgd_cfg, &mut sgd)?;
            loss_sum += batch_loss;
        }
        let val_metric = match opts.val {
            Some(v) if !v.is_empty() => Some(validation_metric(pipeline, params, v)?),
            _ => None,
        };
        let mut improved = false;
        if let Some(m) = val_metric {
            if state.best.as_ref().is_none_or(|b| m > b.metric) {
                state.best = Some(BestSnapshot {
                    metric: m,
                    epoch,
                    params: params.iter().map(|(_, p)| p.tensor.data().to_vec()).collect(),
                });
                improved = true;
            }
        }
        state.epoch = epoch + 1;
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            val_metric,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.3e} loss {:.5} val {:?}",
            entry.train_loss,
            entry.val_metric
        );
        if let Some(w) = opts.log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &entry)?;
            writeln!(w)?;
        }
        log.push(entry);
        if let Some(sink) = &opts.checkpoints {
            std::fs::create_dir_all(&sink.dir)?;
            state.velocity = sgd.velocity.clone();
            save_checkpoint(
                &sink.dir.join("last.ckpt"),
                &Checkpoint {
                    config: sink.config.clone(),
                    params: params.clone(),
                    state: Some(state.clone()),
                },
            )?;
            state.velocity.clear();
            if improved {
                save_checkpoint(
                    &sink.dir.join("best.ckpt"),
                    &Checkpoint {
                        config: sink.config.clone(),
                        params: params.clone(),
                        state: None,
                    },
                )?;
            }
        }
    }
    state.velocity = sgd.velocity;
    Ok(FitOutput { state, log })
}

/// Copies the best snapshot's values into `params`.
pub fn restore_best(params: &mut ParamStore<f32>, best: &BestSnapshot<f32>) -> Result<()> {
    if best.params.len() != params.len() {
        return Err(Error::Malformed("best snapshot does not match the model".into()));
    }
    let ids: Vec<_> = params.ids().collect();
    for (id, v) in ids.into_iter().zip(&best.params) {
        let t = params.get_mut(id);
        if t.numel() != v.len() {
            return Err(Error::Malformed("best snapshot does not match the model".into()));
        }
        t.data_mut().copy_from_slice(v);
    }
    Ok(())
}
