//! Flat `key=value` run configuration with dotted section names.
//!
//! Every key has a default; a config file and `--key value` overrides only
//! replace values. Keys not in the table are rejected.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use afft_core::anticipator::{AnticipatorConfig, LossWeights};
use afft_core::data::{ModalitySpec, SyntheticConfig};
use afft_core::fusion::{FuserConfig, FuserKind, ProjectionPolicy, ScoreStrategy};
use afft_core::model::ModelConfig;
use afft_core::trainer::TrainConfig;

use crate::failure::Failure;

/// Keys excluded from the echo stored in checkpoints: they say where a run
/// writes or how it was started, not what it computes.
const NOT_ECHOED: [&str; 2] = ["out", "train.resume"];

fn defaults() -> Vec<(&'static str, String)> {
    let f = FuserConfig::default();
    let a = AnticipatorConfig::default();
    let l = LossWeights::default();
    let t = TrainConfig::default();
    let s = |v: &dyn Display| v.to_string();
    vec![
        ("seed", s(&t.seed)),
        ("out", "runs/afft".into()),
        ("data.train", String::new()),
        ("data.val", String::new()),
        ("data.test", String::new()),
        ("data.vocabulary", String::new()),
        ("data.num_actions", "0".into()),
        ("synthetic.modalities", "rgb:1024,obj:352,audio:1024".into()),
        ("synthetic.actions", "24".into()),
        ("synthetic.noise", "0.5".into()),
        ("synthetic.successors", "8".into()),
        ("synthetic.seq_len", "10".into()),
        ("synthetic.train", "512".into()),
        ("synthetic.val", "128".into()),
        ("synthetic.test", "256".into()),
        ("synthetic.seed", "0".into()),
        ("fuser.kind", f.kind.as_str().into()),
        ("fuser.dim", s(&f.dim)),
        ("fuser.layers", s(&f.layers)),
        ("fuser.heads", s(&f.heads)),
        ("fuser.dropout", s(&f.dropout)),
        ("fuser.drop_path", s(&f.drop_path)),
        ("fuser.projection", f.projection.as_str().into()),
        ("fuser.max_len", s(&f.max_len)),
        ("fuser.final_norm", s(&f.final_norm)),
        ("fuser.main_modality", String::new()),
        ("fuser.modality_order", String::new()),
        ("fuser.per_modality_pos", s(&f.per_modality_pos)),
        ("anticipator.layers", s(&a.layers)),
        ("anticipator.heads", s(&a.heads)),
        ("anticipator.dim", s(&a.dim)),
        ("anticipator.max_len", s(&a.max_len)),
        ("anticipator.dropout", s(&a.dropout)),
        ("anticipator.drop_path", s(&a.drop_path)),
        ("loss.next", s(&l.next)),
        ("loss.cls", s(&l.cls)),
        ("loss.feat", s(&l.feat)),
        ("score.fusion", "none".into()),
        ("score.weights", String::new()),
        ("train.epochs", s(&t.epochs)),
        ("train.warmup_epochs", s(&t.warmup_epochs)),
        ("train.decay_epochs", s(&t.decay_epochs)),
        ("train.lr", s(&t.lr_max)),
        ("train.momentum", s(&t.momentum)),
        ("train.weight_decay", s(&t.weight_decay)),
        ("train.mixup_alpha", s(&t.mixup_alpha)),
        ("train.batch_size", s(&t.batch_size)),
        ("train.grad_clip", t.grad_clip.map_or("none".into(), |c| c.to_string())),
        ("train.resume", "false".into()),
        ("compare.seeds", "3".into()),
        ("eval.split", "test".into()),
        ("eval.checkpoint", String::new()),
        ("attn.split", "test".into()),
        ("attn.max_samples", "0".into()),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: defaults().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with the file at `path`.
    pub fn from_file(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config file {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), Failure> {
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Failure::usage(format!("{origin}:{}: expected key=value, got {line:?}", n + 1)));
            };
            let k = k.trim();
            if let Some(prev) = seen.insert(k.to_string(), n + 1) {
                return Err(Failure::usage(format!("{origin}:{}: key {k} already set on line {prev}", n + 1)));
            }
            self.set(k, v.trim()).map_err(|e| Failure::usage(format!("{origin}:{}: {}", n + 1, e.message)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Failure> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Failure::usage(format!("unknown config key {key:?}"))),
        }
    }

    /// Applies `--key value` / `--key=value` pairs.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<(), Failure> {
        let mut it = args.iter();
        while let Some(a) = it.next() {
            let Some(flag) = a.strip_prefix("--") else {
                return Err(Failure::usage(format!("expected --key value, got {a:?}")));
            };
            let (k, v) = match flag.split_once('=') {
                Some((k, v)) => (k, v.to_string()),
                None => {
                    let v = it.next().ok_or_else(|| Failure::usage(format!("--{flag} needs a value")))?;
                    (flag, v.clone())
                }
            };
            self.set(k, &v)?;
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("no config key {key}"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, Failure>
    where
        T::Err: Display,
    {
        let v = self.raw(key);
        v.parse().map_err(|e| Failure::usage(format!("{key}={v:?}: {e}")))
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    fn list(&self, key: &str) -> Vec<String> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect()
    }

    /// Every key in sorted order, one `key=value` per line.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// The run description stored in checkpoints.
    pub fn echo(&self) -> String {
        self.values
            .iter()
            .filter(|(k, _)| !NOT_ECHOED.contains(&k.as_str()))
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn seed(&self) -> Result<u64, Failure> {
        self.get("seed")
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out"))
    }

    pub fn data_path(&self, split: &str) -> Option<PathBuf> {
        self.path(&format!("data.{split}"))
    }

    pub fn vocabulary_path(&self) -> Option<PathBuf> {
        self.path("data.vocabulary")
    }

    pub fn eval_checkpoint(&self) -> Option<PathBuf> {
        self.path("eval.checkpoint")
    }

    pub fn uses_files(&self) -> bool {
        self.data_path("train").is_some() || self.data_path("val").is_some() || self.data_path("test").is_some()
    }

    /// Complementary-coverage generator settings for data seed `seed`.
    pub fn synthetic(&self, seed: u64) -> Result<SyntheticConfig, Failure> {
        let mut modalities = Vec::new();
        for item in self.list("synthetic.modalities") {
            let parsed = item
                .split_once(':')
                .and_then(|(n, d)| Some((n.trim(), d.trim().parse::<usize>().ok()?)))
                .filter(|(n, d)| !n.is_empty() && *d > 0);
            match parsed {
                Some((n, d)) => modalities.push(ModalitySpec::new(n, d)),
                None => {
                    return Err(Failure::usage(format!(
                        "synthetic.modalities entry {item:?} is not name:dim"
                    )))
                }
            }
        }
        let dims: Vec<usize> = modalities.iter().map(|m| m.dim).collect();
        let mut cfg = SyntheticConfig::complementary(
            &dims,
            self.get("synthetic.actions")?,
            self.get("synthetic.noise")?,
            self.get("synthetic.successors")?,
            self.get("synthetic.seq_len")?,
            self.get("synthetic.train")?,
            seed,
        );
        cfg.modalities = modalities;
        Ok(cfg)
    }

    pub fn synthetic_count(&self, split: &str) -> Result<usize, Failure> {
        self.get(&format!("synthetic.{split}"))
    }

    pub fn model(&self) -> Result<ModelConfig, Failure> {
        let main = self.raw("fuser.main_modality");
        let fuser = FuserConfig {
            kind: self.get::<FuserKind>("fuser.kind")?,
            dim: self.get("fuser.dim")?,
            layers: self.get("fuser.layers")?,
            heads: self.get("fuser.heads")?,
            dropout: self.get("fuser.dropout")?,
            drop_path: self.get("fuser.drop_path")?,
            projection: self.get::<ProjectionPolicy>("fuser.projection")?,
            max_len: self.get("fuser.max_len")?,
            final_norm: self.get("fuser.final_norm")?,
            main_modality: (!main.is_empty()).then(|| main.to_string()),
            modality_order: self.list("fuser.modality_order"),
            per_modality_pos: self.get("fuser.per_modality_pos")?,
        };
        let anticipator = AnticipatorConfig {
            layers: self.get("anticipator.layers")?,
            heads: self.get("anticipator.heads")?,
            dim: self.get("anticipator.dim")?,
            max_len: self.get("anticipator.max_len")?,
            dropout: self.get("anticipator.dropout")?,
            drop_path: self.get("anticipator.drop_path")?,
        };
        let score_fusion = match self.raw("score.fusion") {
            "none" | "" => None,
            _ => Some(self.get::<ScoreStrategy>("score.fusion")?),
        };
        let score_weights = self
            .list("score.weights")
            .iter()
            .map(|w| w.parse::<f64>().map_err(|e| Failure::usage(format!("score.weights entry {w:?}: {e}"))))
            .collect::<Result<_, _>>()?;
        Ok(ModelConfig {
            fuser,
            anticipator,
            loss: LossWeights {
                next: self.get("loss.next")?,
                cls: self.get("loss.cls")?,
                feat: self.get("loss.feat")?,
            },
            score_fusion,
            score_weights,
        })
    }

    pub fn train(&self) -> Result<TrainConfig, Failure> {
        let clip = match self.raw("train.grad_clip") {
            "none" | "" => None,
            _ => Some(self.get::<f64>("train.grad_clip")?),
        };
        let cfg = TrainConfig {
            epochs: self.get("train.epochs")?,
            warmup_epochs: self.get("train.warmup_epochs")?,
            decay_epochs: self.get("train.decay_epochs")?,
            lr_max: self.get("train.lr")?,
            momentum: self.get("train.momentum")?,
            weight_decay: self.get("train.weight_decay")?,
            mixup_alpha: self.get("train.mixup_alpha")?,
            batch_size: self.get("train.batch_size")?,
            seed: self.seed()?,
            grad_clip: clip,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
