use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use afft_core::checkpoint::{load_checkpoint, Checkpoint};
use afft_core::data::read_feature_file;

const TINY: &str = "\
synthetic.modalities = a:8,b:6
synthetic.actions = 5
synthetic.seq_len = 3
synthetic.train = 16
synthetic.val = 8
synthetic.test = 8
fuser.dim = 8
fuser.layers = 1
fuser.heads = 2
anticipator.dim = 8
anticipator.layers = 1
anticipator.heads = 2
train.epochs = 2
train.warmup_epochs = 1
train.decay_epochs = 1
train.batch_size = 4
train.lr = 0.01
";

fn afft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afft"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn afft")
}

fn setup() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.display().to_string();
    (dir, cfg)
}

fn out(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\n{}", o.status.code(), stderr(&o));
    o
}

/// The last stderr line must be the machine-readable failure record.
fn failure(o: &Output, code: i32, kind: &str) -> String {
    assert_eq!(o.status.code(), Some(code), "{}", stderr(o));
    let err = stderr(o);
    let line = err.lines().last().unwrap_or_default().to_string();
    assert!(line.starts_with(&format!("error kind={kind} code={code} msg=\"")), "{line}");
    line
}

#[test]
fn missing_config_is_a_usage_error_naming_the_path() {
    let o = afft(&["train", "--config", "/nonexistent/run.cfg"]);
    let line = failure(&o, 1, "usage");
    assert!(line.contains("/nonexistent/run.cfg"), "{line}");
}

#[test]
fn bad_arguments_are_usage_errors() {
    let (_d, cfg) = setup();
    failure(&afft(&["train", "--config", &cfg, "--fuser.bogus", "1"]), 1, "usage");
    failure(&afft(&["train", "--config", &cfg, "--fuser.heads"]), 1, "usage");
    failure(&afft(&["train", "--config", &cfg, "--fuser.heads", "3"]), 1, "usage");
    failure(&afft(&["train", "--config", &cfg, "--train.epochs", "7"]), 1, "usage");
    failure(&afft(&["frobnicate"]), 1, "usage");
    failure(&afft(&["train", "--seed", "minus-one"]), 1, "usage");
    assert!(afft(&["--help"]).status.success());
}

#[test]
fn config_command_prints_resolved_values() {
    let o = ok(afft(&["config", "--seed", "9", "--fuser.kind=ca"]));
    let text = stdout(&o);
    for line in ["seed=9", "fuser.kind=ca", "fuser.dim=1024", "train.epochs=50", "train.lr=0.001"] {
        assert!(text.lines().any(|l| l == line), "missing {line}");
    }
}

#[test]
fn eval_prints_full_recall_when_top5_covers_every_class() {
    // five actions: every class is inside any top-5 list
    let (d, cfg) = setup();
    let run = out(d.path(), "run");
    ok(afft(&["train", "--config", &cfg, "--out", &run]));
    let o = ok(afft(&["eval", "--config", &cfg, "--out", &run]));
    let text = stdout(&o);
    let action = text.lines().find(|l| l.starts_with("action ")).expect("action line");
    assert!(action.contains("cm_top5=100.0"), "{action}");
    assert!(action.contains("top5=100.0"), "{action}");
    let csv = fs::read_to_string(d.path().join("run/per_class_test.csv")).unwrap();
    assert!(csv.starts_with("class,verb,noun,support,top1_recall,top5_recall\n"));
}

#[test]
fn identically_seeded_runs_write_identical_checkpoints() {
    let (d, cfg) = setup();
    let (a, b, c) = (out(d.path(), "a"), out(d.path(), "b"), out(d.path(), "c"));
    ok(afft(&["train", "--config", &cfg, "--out", &a]));
    ok(afft(&["train", "--config", &cfg, "--out", &b]));
    ok(afft(&["train", "--config", &cfg, "--out", &c, "--seed", "1"]));
    for f in ["last.ckpt", "best.ckpt", "train_log.jsonl"] {
        let x = fs::read(Path::new(&a).join(f)).unwrap();
        let y = fs::read(Path::new(&b).join(f)).unwrap();
        if f.ends_with(".ckpt") {
            assert_eq!(x, y, "{f}");
        } else {
            // wall-clock fields differ; epochs and losses must not
            let strip = |s: &[u8]| -> Vec<String> {
                String::from_utf8_lossy(s)
                    .lines()
                    .map(|l| l.split(",\"wall_ms\"").next().unwrap().to_string())
                    .collect()
            };
            assert_eq!(strip(&x), strip(&y));
        }
    }
    assert_ne!(
        fs::read(Path::new(&a).join("last.ckpt")).unwrap(),
        fs::read(Path::new(&c).join("last.ckpt")).unwrap()
    );
}

#[test]
fn generated_files_train_like_the_in_memory_generator() {
    let (d, cfg) = setup();
    let data = out(d.path(), "data");
    let o = ok(afft(&["synth-gen", "--config", &cfg, "--out", &data]));
    let keys: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(keys.len(), 4);
    let train = read_feature_file(&PathBuf::from(&data).join("train.afft")).unwrap();
    assert_eq!(train.len(), 16);
    let manifest = fs::read_to_string(PathBuf::from(&data).join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 32);

    let (mem, files) = (out(d.path(), "mem"), out(d.path(), "files"));
    ok(afft(&["train", "--config", &cfg, "--out", &mem]));
    let mut args = vec!["train", "--config", &cfg, "--out", &files];
    let overrides: Vec<String> = keys.iter().map(|k| format!("--{k}")).collect();
    args.extend(overrides.iter().map(String::as_str));
    ok(afft(&args));
    let p = |dir: &str| -> Checkpoint<f32> { load_checkpoint(&Path::new(dir).join("last.ckpt")).unwrap() };
    let (x, y) = (p(&mem), p(&files));
    assert_eq!(x.params, y.params);
    assert_eq!(x.state, y.state);

    // a test split was not given: eval on it is a usage error
    let o = afft(&["eval", "--config", &cfg, "--out", &files, &overrides[0]]);
    failure(&o, 1, "usage");
}

#[test]
fn unreadable_data_is_a_data_error() {
    let (d, cfg) = setup();
    let bad = d.path().join("bad.afft");
    fs::write(&bad, b"NOPE0000").unwrap();
    let bad = bad.display().to_string();
    let o = afft(&["train", "--config", &cfg, "--data.train", &bad, "--data.num_actions", "5"]);
    let line = failure(&o, 2, "data");
    assert!(line.contains("bad.afft"), "{line}");
    let o = afft(&["train", "--config", &cfg, "--data.train", "/nonexistent.afft", "--data.num_actions", "5"]);
    failure(&o, 2, "data");
    let o = afft(&["eval", "--config", &cfg, "--out", &out(d.path(), "empty")]);
    failure(&o, 2, "data");
}

#[test]
fn diverging_training_is_a_numeric_failure() {
    let (d, cfg) = setup();
    let o = afft(&["train", "--config", &cfg, "--out", &out(d.path(), "r"), "--train.lr", "1e30"]);
    let line = failure(&o, 3, "numeric");
    assert!(line.contains("non-finite"), "{line}");
}

#[test]
fn resume_requires_the_same_configuration() {
    let (d, cfg) = setup();
    let run = out(d.path(), "run");
    ok(afft(&["train", "--config", &cfg, "--out", &run]));
    let before = fs::read(Path::new(&run).join("last.ckpt")).unwrap();
    // the finished run resumes to a no-op
    ok(afft(&["train", "--config", &cfg, "--out", &run, "--train.resume", "true"]));
    assert_eq!(before, fs::read(Path::new(&run).join("last.ckpt")).unwrap());
    let o = afft(&["train", "--config", &cfg, "--out", &run, "--train.resume", "true", "--seed", "4"]);
    failure(&o, 1, "usage");
}

#[test]
fn attention_export_writes_both_tables() {
    let (d, cfg) = setup();
    let run = out(d.path(), "run");
    ok(afft(&["train", "--config", &cfg, "--out", &run]));
    ok(afft(&["attn-export", "--config", &cfg, "--out", &run, "--attn.max_samples", "3"]));
    let modal = fs::read_to_string(Path::new(&run).join("modality_attention.csv")).unwrap();
    let mut lines = modal.lines();
    assert_eq!(lines.next(), Some("sample_id,timestep,a,b,degenerate"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3 * 3);
    for r in rows {
        let f: Vec<&str> = r.split(',').collect();
        let s: f64 = f[2].parse::<f64>().unwrap() + f[3].parse::<f64>().unwrap();
        assert!((s - 1.0).abs() < 1e-8, "{r}");
    }
    let temporal = fs::read_to_string(Path::new(&run).join("temporal_attention.csv")).unwrap();
    // causal cells of a 3×3 map
    assert_eq!(temporal.lines().count(), 1 + 6);

    let ca = out(d.path(), "ca");
    ok(afft(&["train", "--config", &cfg, "--out", &ca, "--fuser.kind", "ca"]));
    ok(afft(&["attn-export", "--config", &cfg, "--out", &ca]));
    assert!(!Path::new(&ca).join("modality_attention.csv").exists());
    assert!(Path::new(&ca).join("temporal_attention.csv").exists());

    let late = out(d.path(), "late");
    ok(afft(&["train", "--config", &cfg, "--out", &late, "--score.fusion", "average"]));
    failure(&afft(&["attn-export", "--config", &cfg, "--out", &late]), 1, "usage");
    ok(afft(&["eval", "--config", &cfg, "--out", &late]));
}

#[test]
fn compare_fusion_emits_every_strategy_row() {
    let (d, cfg) = setup();
    let run = out(d.path(), "cmp");
    let o = ok(afft(&["compare-fusion", "--config", &cfg, "--out", &run, "--compare.seeds", "2"]));
    let text = stdout(&o);
    let names: Vec<&str> = text.lines().skip(1).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(
        names,
        ["uni:a", "uni:b", "score:average", "score:weighted", "score:matt", "mid:sa", "mid:sa_no_token", "mid:tsa", "mid:ca"]
    );
    let csv = fs::read_to_string(Path::new(&run).join("compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 9);
    assert!(csv.lines().any(|l| l.starts_with("mean,mid:sa,")));
}
