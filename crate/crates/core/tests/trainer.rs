use afft_core::anticipator::AnticipatorConfig;
use afft_core::checkpoint::load_checkpoint;
use afft_core::data::{generate_synthetic, Dataset, FeatureSequence, ModalitySpec, SyntheticConfig};
use afft_core::fusion::FuserConfig;
use afft_core::model::{ModelConfig, Pipeline};
use afft_core::trainer::{
    fit, lr_at_epoch, mix_pair, mixup_batch, predict_dataset, CheckpointSink, FitOptions, TrainConfig,
};
use afft_core::{Error, ParamStore, Target, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn default_schedule() -> TrainConfig {
    TrainConfig::default()
}

#[test]
fn schedule_anchor_values() {
    let c = default_schedule();
    assert_eq!(lr_at_epoch(19, &c).unwrap(), 1e-3);
    assert_eq!(lr_at_epoch(35, &c).unwrap(), 0.5e-3);
    assert_eq!(lr_at_epoch(50, &c).unwrap(), 0.0);
    assert_eq!(lr_at_epoch(0, &c).unwrap(), 1e-3 / 20.0);
    assert!(lr_at_epoch(51, &c).is_err());
}

#[test]
fn schedule_is_continuous_at_the_boundary_and_decreasing_after() {
    let c = default_schedule();
    let end_warm = lr_at_epoch(c.warmup_epochs - 1, &c).unwrap();
    let start_decay = lr_at_epoch(c.warmup_epochs, &c).unwrap();
    assert_eq!(end_warm, start_decay);
    for e in 0..c.warmup_epochs - 1 {
        assert!(lr_at_epoch(e, &c).unwrap() < lr_at_epoch(e + 1, &c).unwrap());
    }
    for e in c.warmup_epochs..c.epochs {
        assert!(lr_at_epoch(e, &c).unwrap() > lr_at_epoch(e + 1, &c).unwrap());
    }
}

#[test]
fn inconsistent_schedule_is_rejected() {
    let c = TrainConfig {
        epochs: 10,
        ..Default::default()
    };
    assert!(matches!(c.validate(), Err(Error::Config(_))));
}

fn seq(values: &[f32], frames: Vec<u32>, next: u32) -> FeatureSequence {
    let t = frames.len();
    let d = values.len() / t;
    FeatureSequence {
        sample_id: format!("s{next}"),
        features: vec![Tensor::new(vec![t, d], values.to_vec()).unwrap()],
        frame_labels: Some(frames),
        next_label: next,
        tau_s: 3.0,
        tau_a: 1.0,
        tau_o: 2.0,
    }
}

#[test]
fn mixing_with_lambda_one_keeps_the_first_sample() {
    let a = seq(&[1.0, 2.0, 3.0, 4.0], vec![0, 1], 2);
    let b = seq(&[9.0, 8.0, 7.0, 6.0], vec![2, 0], 1);
    let m = mix_pair(&a, &b, 1.0, 3).unwrap();
    assert_eq!(m.features, a.features);
    assert_eq!(m.next_target, Target::Class(2));
    assert_eq!(m.frame_targets, Some(vec![Target::Class(0), Target::Class(1)]));
}

#[test]
fn mixing_halves_features_and_labels() {
    let a = seq(&[1.0, 2.0, 3.0, 4.0], vec![0, 1], 0);
    let b = seq(&[3.0, 0.0, -1.0, 4.0], vec![0, u32::MAX], 1);
    let m = mix_pair(&a, &b, 0.5, 2).unwrap();
    assert_eq!(m.features[0].data(), &[2.0, 1.0, 1.0, 4.0]);
    assert_eq!(m.next_target, Target::Soft(vec![0.5, 0.5]));
    assert_eq!(m.frame_targets, Some(vec![Target::Class(0), Target::Ignore]));
}

#[test]
fn mixup_disabled_or_singleton_batches_pass_through() {
    let a = seq(&[1.0, 2.0], vec![0, 1], 0);
    let b = seq(&[3.0, 4.0], vec![1, 1], 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (out, lambda) = mixup_batch(&[&a, &b], 2, 0.0, &mut rng).unwrap();
    assert_eq!(lambda, None);
    assert_eq!(out[1].features, b.features);
    let (out, lambda) = mixup_batch(&[&a], 2, 0.1, &mut rng).unwrap();
    assert_eq!(lambda, None);
    assert_eq!(out[0].features, a.features);
}

#[test]
fn mixup_lambda_mean_is_one_half() {
    // Beta(α, α) has mean 1/2 and variance 1 / (4(2α + 1))
    let alpha = 0.1;
    let a = seq(&[1.0, 2.0], vec![0, 1], 0);
    let b = seq(&[3.0, 4.0], vec![1, 1], 1);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let n = 100_000;
    let mut sum = 0.0;
    for _ in 0..n {
        let (_, l) = mixup_batch(&[&a, &b], 2, alpha, &mut rng).unwrap();
        let l = l.unwrap();
        assert!((0.0..=1.0).contains(&l));
        sum += l;
    }
    let mean = sum / n as f64;
    let sigma = (1.0 / (4.0 * (2.0 * alpha + 1.0)) / n as f64).sqrt();
    assert!((mean - 0.5).abs() < 3.0 * sigma, "mean {mean}, 3σ {}", 3.0 * sigma);
}

fn small_model(dim: usize, dropout: f64) -> ModelConfig {
    ModelConfig {
        fuser: FuserConfig {
            dim,
            layers: 1,
            heads: 2,
            dropout,
            drop_path: dropout,
            ..Default::default()
        },
        anticipator: AnticipatorConfig {
            layers: 1,
            heads: 2,
            dim,
            max_len: 8,
            dropout,
            drop_path: dropout,
        },
        ..Default::default()
    }
}

fn data(count: usize, noise: f64, seed: u64) -> (Dataset, usize) {
    let cfg = SyntheticConfig::full_coverage(&[8, 6], 6, noise, 4, count, seed);
    (generate_synthetic(&cfg).unwrap().dataset, 6)
}

fn train_cfg(epochs: usize, warmup: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        warmup_epochs: warmup,
        decay_epochs: epochs - warmup,
        lr_max: 0.05,
        batch_size: 4,
        mixup_alpha: 0.1,
        seed,
        ..Default::default()
    }
}

fn setup(model: &ModelConfig, d: &Dataset, classes: usize, seed: u64) -> (Pipeline, ParamStore<f32>) {
    let mut params = ParamStore::new();
    let p = Pipeline::build(&mut params, model, &d.modalities, classes, seed).unwrap();
    (p, params)
}

fn bits(p: &ParamStore<f32>) -> Vec<u32> {
    p.iter().flat_map(|(_, x)| x.tensor.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
}

#[test]
fn zero_epochs_leave_the_model_untouched() {
    let (d, c) = data(8, 0.1, 1);
    let (p, mut params) = setup(&small_model(8, 0.1), &d, c, 1);
    let before = bits(&params);
    let out = fit(&p, &mut params, &d, c, &train_cfg(0, 0, 1), FitOptions::default()).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(bits(&params), before);
    assert_eq!(out.state.epoch, 0);
}

#[test]
fn single_sample_is_memorized() {
    let (d, c) = data(1, 0.0, 2);
    let (p, mut params) = setup(&small_model(8, 0.0), &d, c, 2);
    let mut cfg = train_cfg(200, 10, 2);
    cfg.mixup_alpha = 0.0;
    fit(&p, &mut params, &d, c, &cfg, FitOptions::default()).unwrap();
    let preds = predict_dataset(&p, &params, &d).unwrap();
    assert_eq!(preds[0].rank(), 0);
}

#[test]
fn identical_seeds_give_identical_parameters() {
    let (d, c) = data(12, 0.2, 3);
    let run = || {
        let (p, mut params) = setup(&small_model(8, 0.1), &d, c, 3);
        fit(&p, &mut params, &d, c, &train_cfg(3, 1, 3), FitOptions::default()).unwrap();
        bits(&params)
    };
    assert_eq!(run(), run());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (d, c) = data(10, 0.2, 4);
    let (val, _) = data(6, 0.2, 5);
    let model = small_model(8, 0.1);
    let cfg = train_cfg(5, 2, 4);

    let (p, mut straight) = setup(&model, &d, c, 4);
    let full = fit(&p, &mut straight, &d, c, &cfg, FitOptions { val: Some(&val), ..Default::default() }).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let sink = CheckpointSink {
        dir: dir.path().to_path_buf(),
        config: "test".into(),
    };
    let (p2, mut first) = setup(&model, &d, c, 4);
    let opts = FitOptions {
        val: Some(&val),
        stop_after: Some(2),
        checkpoints: Some(sink),
        ..Default::default()
    };
    fit(&p2, &mut first, &d, c, &cfg, opts).unwrap();
    let ck = load_checkpoint::<f32>(&dir.path().join("last.ckpt")).unwrap();
    assert!(dir.path().join("best.ckpt").exists());
    let mut resumed = ck.params;
    let state = ck.state.unwrap();
    assert_eq!(state.epoch, 2);
    let rest = fit(&p2, &mut resumed, &d, c, &cfg, FitOptions { val: Some(&val), resume: Some(state), ..Default::default() }).unwrap();

    assert_eq!(bits(&resumed), bits(&straight));
    assert_eq!(rest.state, full.state);
    assert_eq!(rest.log.len(), 3);
}

#[test]
fn loss_keeps_falling_after_warmup_on_noiseless_data() {
    let (d, c) = data(32, 0.0, 6);
    let (p, mut params) = setup(&small_model(16, 0.0), &d, c, 6);
    let mut cfg = train_cfg(30, 5, 6);
    cfg.mixup_alpha = 0.0;
    cfg.batch_size = 16;
    let out = fit(&p, &mut params, &d, c, &cfg, FitOptions::default()).unwrap();
    let losses: Vec<f64> = out.log.iter().map(|l| l.train_loss).collect();
    for e in cfg.warmup_epochs + 1..losses.len() {
        assert!(
            losses[e] <= losses[e - 1] * 1.05,
            "epoch {e}: {} after {}",
            losses[e],
            losses[e - 1]
        );
    }
    assert!(losses.last().unwrap() < &losses[cfg.warmup_epochs]);
}

#[test]
fn log_lines_are_json_records() {
    let (d, c) = data(4, 0.1, 7);
    let (p, mut params) = setup(&small_model(8, 0.0), &d, c, 7);
    let mut buf = Vec::new();
    fit(&p, &mut params, &d, c, &train_cfg(2, 1, 7), FitOptions { val: Some(&d), log: Some(&mut buf), ..Default::default() }).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    for (i, l) in lines.iter().enumerate() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["epoch"], i);
        for key in ["lr", "train_loss", "val_metric", "wall_ms"] {
            assert!(v.get(key).is_some(), "{key} missing");
        }
    }
}

#[test]
fn non_finite_parameters_abort_with_their_name() {
    let (d, c) = data(4, 0.1, 8);
    let (p, mut params) = setup(&small_model(8, 0.0), &d, c, 8);
    params.by_name_mut("anticipator.block0.mlp.fc1.weight").unwrap().data_mut()[3] = f32::NAN;
    let err = fit(&p, &mut params, &d, c, &train_cfg(1, 1, 8), FitOptions::default()).unwrap_err();
    match err {
        Error::NonFiniteLoss { epoch, param } => {
            assert_eq!(epoch, 0);
            assert!(param.contains("anticipator.block0.mlp.fc1.weight"), "{param}");
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn empty_training_set_is_an_error() {
    let (d, c) = data(2, 0.1, 9);
    let (p, mut params) = setup(&small_model(8, 0.0), &d, c, 9);
    let empty = Dataset::new(vec![ModalitySpec::new("m0", 8), ModalitySpec::new("m1", 6)], vec![]).unwrap();
    assert!(fit(&p, &mut params, &empty, c, &train_cfg(1, 1, 9), FitOptions::default()).is_err());
}
