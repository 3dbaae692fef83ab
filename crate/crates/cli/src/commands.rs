use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use afft_core::checkpoint::{load_checkpoint, Checkpoint};
use afft_core::compare::{average_tables, compare_fusion, format_table, strategy_names, Splits, StrategyResult};
use afft_core::data::{
    generate_split, read_feature_file, read_vocabulary_file, write_feature_file, write_manifest,
    write_vocabulary_file, ActionVocabulary, Dataset, ManifestEntry,
};
use afft_core::eval::{
    attention_rollout, class_mean_top1, class_mean_topk_recall, format_sig9, marginal_predictions, per_class_hits,
    temporal_attention, topk_accuracy, write_modality_attention_csv, write_per_class_csv,
    write_temporal_quantiles_csv, ModalityAttentionRow, PerClassRow, Prediction,
};
use afft_core::fusion::FuserKind;
use afft_core::model::Pipeline;
use afft_core::trace::AttentionTrace;
use afft_core::trainer::{fit, predict_dataset, CheckpointSink, FitOptions};
use afft_core::ParamStore;

use crate::config::RunConfig;
use crate::failure::Failure;

const SPLITS: [&str; 3] = ["train", "val", "test"];

fn split_index(split: &str) -> Result<u64, Failure> {
    SPLITS
        .iter()
        .position(|s| *s == split)
        .map(|i| i as u64)
        .ok_or_else(|| Failure::usage(format!("unknown split {split:?}; expected train, val or test")))
}

/// Where samples come from and how many classes the model predicts.
struct Source {
    num_classes: usize,
    vocab: Option<ActionVocabulary>,
}

fn source(cfg: &RunConfig) -> Result<Source, Failure> {
    if !cfg.uses_files() {
        let syn = cfg.synthetic(cfg.get("synthetic.seed")?)?;
        syn.validate()?;
        return Ok(Source {
            num_classes: syn.num_actions,
            vocab: Some(syn.vocabulary()),
        });
    }
    let vocab = cfg.vocabulary_path().map(|p| read_vocabulary_file(&p)).transpose()?;
    let explicit: usize = cfg.get("data.num_actions")?;
    let num_classes = match (&vocab, explicit) {
        (_, n) if n > 0 => n,
        (Some(v), _) => v.len(),
        (None, _) => {
            return Err(Failure::usage(
                "file data needs data.vocabulary or data.num_actions to fix the class count",
            ))
        }
    };
    if let Some(v) = &vocab {
        if v.len() != num_classes {
            return Err(Failure::usage(format!(
                "data.num_actions={num_classes} but the vocabulary has {} actions",
                v.len()
            )));
        }
    }
    Ok(Source { num_classes, vocab })
}

/// Loads `split`; synthetic splits use data seed `synthetic.seed + offset`.
fn load_split(cfg: &RunConfig, split: &str, offset: u64, num_classes: usize) -> Result<Dataset, Failure> {
    let index = split_index(split)?;
    let data = if cfg.uses_files() {
        let path = cfg
            .data_path(split)
            .ok_or_else(|| Failure::usage(format!("data.{split} is not set")))?;
        read_feature_file(&path).map_err(|e| Failure {
            kind: e.kind(),
            message: format!("{}: {e}", path.display()),
        })?
    } else {
        let seed = cfg.get::<u64>("synthetic.seed")? + offset;
        generate_split(&cfg.synthetic(seed)?, index, cfg.synthetic_count(split)?)?.dataset
    };
    for s in &data.samples {
        s.validate(&data.modalities, Some(num_classes))?;
    }
    Ok(data)
}

fn optional_split(cfg: &RunConfig, split: &str, offset: u64, num_classes: usize) -> Result<Option<Dataset>, Failure> {
    if cfg.uses_files() && cfg.data_path(split).is_none() {
        return Ok(None);
    }
    load_split(cfg, split, offset, num_classes).map(Some)
}

pub fn synth_gen(cfg: &RunConfig) -> Result<(), Failure> {
    if cfg.uses_files() {
        return Err(Failure::usage("synth-gen writes synthetic data; unset the data.* paths"));
    }
    let out = cfg.out_dir();
    fs::create_dir_all(&out)?;
    let seed: u64 = cfg.get("synthetic.seed")?;
    let syn = cfg.synthetic(seed)?;
    let mut manifest = Vec::new();
    for split in SPLITS {
        let data = generate_split(&syn, split_index(split)?, cfg.synthetic_count(split)?)?.dataset;
        let path = out.join(format!("{split}.afft"));
        let offsets = write_feature_file(&path, &data)?;
        manifest.extend(data.samples.iter().zip(offsets).map(|(s, offset)| ManifestEntry {
            id: s.sample_id.clone(),
            path: path.clone(),
            offset,
        }));
        println!("data.{split}={}", path.display());
    }
    let vocab = out.join("vocabulary.csv");
    write_vocabulary_file(&vocab, &syn.vocabulary())?;
    write_manifest(&out.join("manifest.tsv"), &manifest)?;
    println!("data.vocabulary={}", vocab.display());
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<(), Failure> {
    let model_cfg = cfg.model()?;
    let train_cfg = cfg.train()?;
    let src = source(cfg)?;
    let train = load_split(cfg, "train", 0, src.num_classes)?;
    let val = optional_split(cfg, "val", 0, src.num_classes)?;
    let out = cfg.out_dir();
    fs::create_dir_all(&out)?;

    let mut params = ParamStore::new();
    let pipeline = Pipeline::build(&mut params, &model_cfg, &train.modalities, src.num_classes, train_cfg.seed)?;
    let resume = if cfg.get("train.resume")? {
        let ck: Checkpoint<f32> = load_checkpoint(&out.join("last.ckpt"))?;
        if ck.config != cfg.echo() {
            return Err(Failure::usage("last.ckpt was written by a different configuration"));
        }
        params.load_from(&ck.params)?;
        ck.state
    } else {
        None
    };
    let log_path = out.join("train_log.jsonl");
    let mut log = BufWriter::new(if resume.is_some() {
        File::options().append(true).create(true).open(&log_path)?
    } else {
        File::create(&log_path)?
    });
    log::info!(
        "training {} parameters on {} samples, {} classes",
        params.numel(),
        train.len(),
        src.num_classes
    );
    let result = fit(
        &pipeline,
        &mut params,
        &train,
        src.num_classes,
        &train_cfg,
        FitOptions {
            val: val.as_ref(),
            resume,
            log: Some(&mut log),
            checkpoints: Some(CheckpointSink {
                dir: out.clone(),
                config: cfg.echo(),
            }),
            ..Default::default()
        },
    )?;
    log.flush()?;
    let last = result.log.last();
    println!(
        "epochs={} train_loss={} best_val_cm_top5={} best_epoch={}",
        result.state.epoch,
        last.map_or("-".into(), |l| format_sig9(l.train_loss)),
        result.state.best.as_ref().map_or("-".into(), |b| format!("{:.2}", b.metric)),
        result.state.best.as_ref().map_or("-".into(), |b| b.epoch.to_string()),
    );
    Ok(())
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.eval_checkpoint().unwrap_or_else(|| {
        let best = cfg.out_dir().join("best.ckpt");
        if best.exists() {
            best
        } else {
            cfg.out_dir().join("last.ckpt")
        }
    })
}

/// Rebuilds the model described by a checkpoint's config echo.
fn restore(cfg: &RunConfig, data: &Dataset, num_classes: usize) -> Result<(Pipeline, ParamStore<f32>), Failure> {
    let path = checkpoint_path(cfg);
    let ck: Checkpoint<f32> = load_checkpoint(&path).map_err(|e| Failure {
        kind: e.kind(),
        message: format!("{}: {e}", path.display()),
    })?;
    let mut trained = RunConfig::default();
    trained.apply_text(&ck.config, &path.display().to_string())?;
    let mut params = ParamStore::new();
    let pipeline = Pipeline::build(&mut params, &trained.model()?, &data.modalities, num_classes, 0)?;
    params.load_from(&ck.params).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    Ok((pipeline, params))
}

struct Metrics {
    top1: f64,
    top5: f64,
    cm_top1: f64,
    cm_top5: f64,
}

fn metrics(p: &[Prediction]) -> Result<Metrics, Failure> {
    Ok(Metrics {
        top1: topk_accuracy(p, 1)?,
        top5: topk_accuracy(p, 5)?,
        cm_top1: class_mean_top1(p)?,
        cm_top5: class_mean_topk_recall(p, 5)?,
    })
}

pub fn eval(cfg: &RunConfig) -> Result<(), Failure> {
    let split = cfg.raw("eval.split").to_string();
    let src = source(cfg)?;
    let data = load_split(cfg, &split, 0, src.num_classes)?;
    let (pipeline, params) = restore(cfg, &data, src.num_classes)?;
    let preds = predict_dataset(&pipeline, &params, &data)?;

    let mut report = vec![("action", metrics(&preds)?)];
    if let Some(vocab) = &src.vocab {
        let (verbs, nouns) = marginal_predictions(&preds, vocab)?;
        report.push(("verb", metrics(&verbs)?));
        report.push(("noun", metrics(&nouns)?));
    }
    println!("split={split} samples={}", data.len());
    for (level, m) in &report {
        println!(
            "{level} top1={:.2} top5={:.2} cm_top1={:.2} cm_top5={:.2}",
            m.top1, m.top5, m.cm_top1, m.cm_top5
        );
    }

    let out = cfg.out_dir();
    fs::create_dir_all(&out)?;
    let top1 = per_class_hits(&preds, 1)?;
    let top5 = per_class_hits(&preds, 5)?;
    let rows: Vec<PerClassRow> = top5
        .iter()
        .map(|(&class, &(support, hits5))| {
            let (verb, noun) = src.vocab.as_ref().map_or((class as u32, 0), |v| v.pair(class));
            let hits1 = top1.get(&class).map_or(0, |h| h.1);
            PerClassRow {
                class,
                verb,
                noun,
                support,
                top1: 100.0 * hits1 as f64 / support as f64,
                top5: 100.0 * hits5 as f64 / support as f64,
            }
        })
        .collect();
    let path = out.join(format!("per_class_{split}.csv"));
    write_per_class_csv(&path, &rows)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn write_comparison(path: &Path, per_seed: &[(u64, Vec<StrategyResult>)], mean: &[StrategyResult]) -> Result<(), Failure> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "seed,strategy,top1,top5,cm_top1,cm_top5")?;
    let all = per_seed
        .iter()
        .map(|(s, rows)| (s.to_string(), rows.as_slice()))
        .chain(std::iter::once(("mean".to_string(), mean)));
    for (seed, rows) in all {
        for r in rows {
            writeln!(
                w,
                "{seed},{},{},{},{},{}",
                r.name,
                format_sig9(r.top1),
                format_sig9(r.top5),
                format_sig9(r.cm_top1),
                format_sig9(r.cm_top5)
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn compare(cfg: &RunConfig) -> Result<(), Failure> {
    let base = cfg.model()?;
    let mut train_cfg = cfg.train()?;
    let seeds: u64 = cfg.get("compare.seeds")?;
    if seeds == 0 {
        return Err(Failure::usage("compare.seeds must be at least 1"));
    }
    let src = source(cfg)?;
    let first = cfg.seed()?;
    let mut per_seed = Vec::new();
    for i in 0..seeds {
        let train = load_split(cfg, "train", i, src.num_classes)?;
        let val = load_split(cfg, "val", i, src.num_classes)?;
        let test = load_split(cfg, "test", i, src.num_classes)?;
        train_cfg.seed = first + i;
        let splits = Splits {
            train: &train,
            val: &val,
            test: &test,
        };
        let rows = compare_fusion(&base, &train_cfg, &splits, src.num_classes)?;
        let names: Vec<String> = train.modalities.iter().map(|m| m.name.clone()).collect();
        debug_assert_eq!(rows.iter().map(|r| r.name.clone()).collect::<Vec<_>>(), strategy_names(&names));
        log::info!("seed {}\n{}", first + i, format_table(&rows));
        per_seed.push((first + i, rows));
    }
    let tables: Vec<Vec<StrategyResult>> = per_seed.iter().map(|(_, r)| r.clone()).collect();
    let mean = average_tables(&tables)?;
    print!("{}", format_table(&mean));
    let out = cfg.out_dir();
    fs::create_dir_all(&out)?;
    write_comparison(&out.join("compare.csv"), &per_seed, &mean)?;
    Ok(())
}

pub fn attn_export(cfg: &RunConfig) -> Result<(), Failure> {
    let split = cfg.raw("attn.split").to_string();
    let src = source(cfg)?;
    let data = load_split(cfg, &split, 0, src.num_classes)?;
    let (pipeline, params) = restore(cfg, &data, src.num_classes)?;
    let Pipeline::Fused(model) = &pipeline else {
        return Err(Failure::usage("attention export needs a mid-level fusion model (score.fusion=none)"));
    };
    let rollout = model.fuser.config.kind == FuserKind::Sa;
    if !rollout {
        log::warn!(
            "modality rollout needs the token SA fuser; exporting temporal attention only for {}",
            model.fuser.config.kind.as_str()
        );
    }
    let limit: usize = cfg.get("attn.max_samples")?;
    let take = if limit == 0 { data.len() } else { limit.min(data.len()) };

    let mut rows = Vec::new();
    let mut maps = Vec::with_capacity(take);
    for s in &data.samples[..take] {
        let mut trace = AttentionTrace::new();
        pipeline.predict_traced(&params, s, Some(&mut trace))?;
        if rollout {
            let r = attention_rollout(&trace)?;
            for (t, (w, &degenerate)) in r.per_timestep.into_iter().zip(&r.degenerate).enumerate() {
                rows.push(ModalityAttentionRow {
                    sample_id: s.sample_id.clone(),
                    timestep: t,
                    weights: w,
                    degenerate,
                });
            }
        }
        maps.push(temporal_attention(&trace)?);
    }

    let out = cfg.out_dir();
    fs::create_dir_all(&out)?;
    if rollout {
        let names: Vec<String> = data.modalities.iter().map(|m| m.name.clone()).collect();
        let path = out.join("modality_attention.csv");
        write_modality_attention_csv(&path, &names, &rows)?;
        let n = rows.len().max(1) as f64;
        for (j, name) in names.iter().enumerate() {
            println!("{name} {:.4}", rows.iter().map(|r| r.weights[j]).sum::<f64>() / n);
        }
        println!("wrote {}", path.display());
    }
    let path = out.join("temporal_attention.csv");
    write_temporal_quantiles_csv(&path, &maps)?;
    println!("wrote {}", path.display());
    Ok(())
}
