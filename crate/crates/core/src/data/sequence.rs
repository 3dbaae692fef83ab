use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frame label meaning "unlabelled"; excluded from the per-frame loss.
pub const IGNORE_LABEL: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModalitySpec {
    pub name: String,
    pub dim: usize,
}

impl ModalitySpec {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim }
    }
}

/// One anticipation sample: `T` observed frames per modality, optional frame
/// labels and the label of the action to anticipate.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub sample_id: String,
    /// Per modality, `T × dim` in row-major order.
    pub features: Vec<Tensor<f32>>,
    pub frame_labels: Option<Vec<u32>>,
    pub next_label: u32,
    pub tau_s: f64,
    pub tau_a: f64,
    pub tau_o: f64,
}

impl FeatureSequence {
    /// Number of observed timesteps.
    pub fn len(&self) -> usize {
        self.features.first().map_or(0, |f| f.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Label of frame `i`, `None` when unlabelled.
    pub fn frame_label(&self, i: usize) -> Option<u32> {
        self.frame_labels
            .as_ref()
            .and_then(|l| l.get(i).copied())
            .filter(|&l| l != IGNORE_LABEL)
    }

    pub fn validate(&self, modalities: &[ModalitySpec], num_actions: Option<usize>) -> Result<()> {
        let bad = |msg: String| Err(Error::Malformed(format!("sample {}: {msg}", self.sample_id)));
        if self.features.len() != modalities.len() {
            return bad(format!("{} modalities, expected {}", self.features.len(), modalities.len()));
        }
        let t = self.len();
        for (f, m) in self.features.iter().zip(modalities) {
            if f.rank() != 2 || f.rows() != t || f.cols() != m.dim {
                return bad(format!("modality {} has shape {:?}, expected [{t}, {}]", m.name, f.shape(), m.dim));
            }
        }
        if let Some(l) = &self.frame_labels {
            if l.len() != t {
                return bad(format!("{} frame labels for {t} frames", l.len()));
            }
        }
        if (self.tau_o.round() as i64) != t as i64 {
            return bad(format!("T = {t} but tau_o = {}", self.tau_o));
        }
        if let Some(n) = num_actions {
            if self.next_label as usize >= n {
                return bad(format!("next label {} out of {n} actions", self.next_label));
            }
            if let Some(l) = &self.frame_labels {
                if l.iter().any(|&x| x != IGNORE_LABEL && x as usize >= n) {
                    return bad("frame label out of range".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub modalities: Vec<ModalitySpec>,
    pub samples: Vec<FeatureSequence>,
}

impl Dataset {
    pub fn new(modalities: Vec<ModalitySpec>, samples: Vec<FeatureSequence>) -> Result<Self> {
        let mut names: Vec<&str> = modalities.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Invalid("modality names must be unique".into()));
        }
        if modalities.iter().any(|m| m.dim == 0) {
            return Err(Error::Invalid("modality dims must be positive".into()));
        }
        for s in &samples {
            s.validate(&modalities, None)?;
        }
        Ok(Self { modalities, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.modalities.iter().position(|m| m.name == name)
    }
}
