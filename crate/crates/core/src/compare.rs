//! Trains uni-modal baselines, score-fusion baselines and every mid-level
//! fuser on the same data and tabulates their test metrics.

use crate::data::{Dataset, ModalitySpec};
use crate::error::{Error, Result};
use crate::eval::{class_mean_top1, class_mean_topk_recall, topk_accuracy, Prediction};
use crate::fusion::{grid_search_weights, weighted_fuse, FuserKind, ProjectionPolicy, ScoreStrategy};
use crate::model::{ModelConfig, Pipeline};
use crate::param::ParamStore;
use crate::trainer::{fit, predict_dataset, restore_best, FitOptions, TrainConfig};

pub const GRID_STEP: f64 = 0.05;

/// Metrics of one strategy on the test split, in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyResult {
    pub name: String,
    pub top1: f64,
    pub top5: f64,
    pub cm_top1: f64,
    pub cm_top5: f64,
}

impl StrategyResult {
    fn from_predictions(name: impl Into<String>, preds: &[Prediction]) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            top1: topk_accuracy(preds, 1)?,
            top5: topk_accuracy(preds, 5)?,
            cm_top1: class_mean_top1(preds)?,
            cm_top5: class_mean_topk_recall(preds, 5)?,
        })
    }
}

pub struct Splits<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub test: &'a Dataset,
}

fn select(data: &Dataset, m: usize) -> Result<Dataset> {
    let modality: Vec<ModalitySpec> = vec![data.modalities[m].clone()];
    let samples = data
        .samples
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.features = vec![s.features[m].clone()];
            s
        })
        .collect();
    Dataset::new(modality, samples)
}

/// Trains one pipeline, restores its best-validation parameters and returns them.
pub fn train_pipeline(
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    splits: &Splits<'_>,
    num_classes: usize,
) -> Result<(Pipeline, ParamStore<f32>)> {
    let mut params = ParamStore::new();
    let pipeline = Pipeline::build(&mut params, model, &splits.train.modalities, num_classes, train_cfg.seed)?;
    let out = fit(
        &pipeline,
        &mut params,
        splits.train,
        num_classes,
        train_cfg,
        FitOptions {
            val: Some(splits.val),
            ..Default::default()
        },
    )?;
    if let Some(best) = &out.state.best {
        restore_best(&mut params, best)?;
    }
    Ok((pipeline, params))
}

/// Row names in table order for modalities `names`.
pub fn strategy_names(names: &[String]) -> Vec<String> {
    let mut rows: Vec<String> = names.iter().map(|n| format!("uni:{n}")).collect();
    rows.extend(
        ["score:average", "score:weighted", "score:matt", "mid:sa", "mid:sa_no_token", "mid:tsa", "mid:ca"]
            .map(String::from),
    );
    rows
}

/// One seed of the full comparison. `base` supplies block sizes and the
/// mid-level fuser settings; each row overrides only what defines it.
pub fn compare_fusion(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    splits: &Splits<'_>,
    num_classes: usize,
) -> Result<Vec<StrategyResult>> {
    let m = splits.train.modalities.len();
    if m == 0 {
        return Err(Error::Config("comparison needs at least one modality".into()));
    }
    let mut rows = Vec::new();

    // uni-modal pipelines, also the members of the fixed-weight ensembles
    let mut uni_val = Vec::with_capacity(m);
    let mut uni_test = Vec::with_capacity(m);
    let mut uni_cfg = base.clone();
    uni_cfg.score_fusion = None;
    uni_cfg.fuser.projection = ProjectionPolicy::SparseLinear;
    uni_cfg.fuser.kind = FuserKind::Sa;
    for j in 0..m {
        let (train, val, test) = (select(splits.train, j)?, select(splits.val, j)?, select(splits.test, j)?);
        let s = Splits {
            train: &train,
            val: &val,
            test: &test,
        };
        let (p, params) = train_pipeline(&uni_cfg, train_cfg, &s, num_classes)?;
        let tp = predict_dataset(&p, &params, &test)?;
        rows.push(StrategyResult::from_predictions(
            format!("uni:{}", splits.train.modalities[j].name),
            &tp,
        )?);
        uni_val.push(predict_dataset(&p, &params, &val)?);
        uni_test.push(tp);
    }

    let fuse = |per: &[Vec<Prediction>], w: &[f64]| -> Result<Vec<Prediction>> {
        (0..per[0].len())
            .map(|s| {
                let probs: Vec<Vec<f64>> = per.iter().map(|p| p[s].probs.clone()).collect();
                Prediction::new(weighted_fuse(&probs, w)?, per[0][s].truth)
            })
            .collect()
    };
    let uniform = vec![1.0 / m as f64; m];
    rows.push(StrategyResult::from_predictions("score:average", &fuse(&uni_test, &uniform)?)?);

    let val_probs: Vec<Vec<Vec<f64>>> = uni_val
        .iter()
        .map(|p| p.iter().map(|x| x.probs.clone()).collect())
        .collect();
    let truths: Vec<usize> = uni_val[0].iter().map(|p| p.truth).collect();
    let (w, _) = grid_search_weights(&val_probs, GRID_STEP, |fused| {
        let preds: Vec<Prediction> = fused
            .iter()
            .zip(&truths)
            .map(|(p, &t)| Prediction {
                probs: p.clone(),
                truth: t,
            })
            .collect();
        class_mean_topk_recall(&preds, 5).unwrap_or(0.0)
    })?;
    log::info!("validated score weights {w:?}");
    rows.push(StrategyResult::from_predictions("score:weighted", &fuse(&uni_test, &w)?)?);

    let mut matt_cfg = base.clone();
    matt_cfg.score_fusion = Some(ScoreStrategy::Matt);
    let (p, params) = train_pipeline(&matt_cfg, train_cfg, splits, num_classes)?;
    rows.push(StrategyResult::from_predictions(
        "score:matt",
        &predict_dataset(&p, &params, splits.test)?,
    )?);

    for kind in [FuserKind::Sa, FuserKind::SaNoToken, FuserKind::Tsa, FuserKind::Ca] {
        let mut cfg = base.clone();
        cfg.score_fusion = None;
        cfg.fuser.kind = kind;
        let (p, params) = train_pipeline(&cfg, train_cfg, splits, num_classes)?;
        rows.push(StrategyResult::from_predictions(
            format!("mid:{}", kind.as_str()),
            &predict_dataset(&p, &params, splits.test)?,
        )?);
    }
    Ok(rows)
}

/// Element-wise mean of per-seed tables with identical row order.
pub fn average_tables(tables: &[Vec<StrategyResult>]) -> Result<Vec<StrategyResult>> {
    let first = tables.first().ok_or(Error::Empty("comparison tables"))?;
    let n = tables.len() as f64;
    first
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let col = |f: fn(&StrategyResult) -> f64| -> Result<f64> {
                let mut s = 0.0;
                for t in tables {
                    let row = t.get(i).filter(|x| x.name == r.name).ok_or_else(|| {
                        Error::Invalid("comparison tables have different rows".into())
                    })?;
                    s += f(row);
                }
                Ok(s / n)
            };
            Ok(StrategyResult {
                name: r.name.clone(),
                top1: col(|r| r.top1)?,
                top5: col(|r| r.top5)?,
                cm_top1: col(|r| r.cm_top1)?,
                cm_top5: col(|r| r.cm_top5)?,
            })
        })
        .collect()
}

/// Plain-text table, one row per strategy.
pub fn format_table(rows: &[StrategyResult]) -> String {
    let mut s = format!(
        "{:<18} {:>8} {:>8} {:>8} {:>8}\n",
        "strategy", "top1", "top5", "cm_top1", "cm_top5"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<18} {:>8.2} {:>8.2} {:>8.2} {:>8.2}\n",
            r.name, r.top1, r.top5, r.cm_top1, r.cm_top5
        ));
    }
    s
}
