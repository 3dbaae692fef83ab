//! Markov-chain driven multi-modal feature generator.
//!
//! Each modality sees the latent action through a class prototype when the
//! action is in its coverage set and through a shared "uninformative"
//! prototype otherwise, plus isotropic Gaussian noise. Disjoint coverage sets
//! make the modalities complementary: only their combination identifies every
//! action.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::data::sequence::{Dataset, FeatureSequence, ModalitySpec};
use crate::data::vocab::{build_vocabulary, ActionVocabulary};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub modalities: Vec<ModalitySpec>,
    pub num_actions: usize,
    /// Row-stochastic `num_actions × num_actions` matrix.
    pub transition: Vec<Vec<f64>>,
    /// Per-modality noise standard deviation.
    pub noise_std: Vec<f64>,
    /// Per-modality set of actions the modality can discriminate.
    pub coverage: Vec<Vec<usize>>,
    pub sequence_count: usize,
    /// Observed frames per sequence (`T`).
    pub seq_len: usize,
    pub seed: u64,
}

/// Generated samples plus the frozen class geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    /// Per modality, `(num_actions + 1) × dim`; the last row is the uninformative prototype.
    pub prototypes: Vec<Tensor<f32>>,
}

const PROTOTYPE_STREAM: u64 = 0;
const TRANSITION_STREAM: u64 = 0x7a;

impl SyntheticConfig {
    /// Complementary-coverage config: modality `m` discriminates exactly the
    /// actions `a` with `a % M == m`; every action moves to one of
    /// `successors` distinct random actions with equal probability.
    #[allow(clippy::too_many_arguments)]
    pub fn complementary(
        dims: &[usize],
        num_actions: usize,
        noise_std: f64,
        successors: usize,
        seq_len: usize,
        sequence_count: usize,
        seed: u64,
    ) -> Self {
        let m = dims.len();
        let modalities = dims
            .iter()
            .enumerate()
            .map(|(i, &d)| ModalitySpec::new(format!("m{i}"), d))
            .collect();
        let coverage = (0..m)
            .map(|j| (0..num_actions).filter(|a| a % m == j).collect())
            .collect();
        Self {
            modalities,
            num_actions,
            transition: random_sparse_transition(num_actions, successors, seed),
            noise_std: vec![noise_std; m],
            coverage,
            sequence_count,
            seq_len,
            seed,
        }
    }

    /// Every modality covers every action.
    pub fn full_coverage(dims: &[usize], num_actions: usize, noise_std: f64, seq_len: usize, sequence_count: usize, seed: u64) -> Self {
        let mut cfg = Self::complementary(dims, num_actions, noise_std, 2.min(num_actions).max(1), seq_len, sequence_count, seed);
        cfg.coverage = vec![(0..num_actions).collect(); dims.len()];
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_actions;
        let m = self.modalities.len();
        if n == 0 || m == 0 {
            return Err(Error::Config("synthetic config needs actions and modalities".into()));
        }
        if self.seq_len == 0 {
            return Err(Error::Config("synthetic seq_len must be positive".into()));
        }
        if self.transition.len() != n || self.transition.iter().any(|r| r.len() != n) {
            return Err(Error::Config(format!("transition matrix must be {n}×{n}")));
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
                return Err(Error::Config(format!("transition row {i} has negative or non-finite entries")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("transition row {i} sums to {s}")));
            }
        }
        if self.noise_std.len() != m || self.coverage.len() != m {
            return Err(Error::Config("noise_std and coverage need one entry per modality".into()));
        }
        if self.noise_std.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return Err(Error::Config("noise_std must be finite and non-negative".into()));
        }
        let mut covered = vec![false; n];
        for set in &self.coverage {
            for &a in set {
                if a >= n {
                    return Err(Error::Config(format!("coverage action {a} out of range")));
                }
                covered[a] = true;
            }
        }
        if covered.iter().any(|c| !c) {
            return Err(Error::Config("coverage sets must jointly cover every action".into()));
        }
        Ok(())
    }

    /// `verb = a / 3`, `noun = a % 3`.
    pub fn vocabulary(&self) -> ActionVocabulary {
        let pairs: Vec<(i64, i64)> = (0..self.num_actions as i64).map(|a| (a / 3, a % 3)).collect();
        build_vocabulary(&pairs).expect("non-negative ids")
    }

    pub fn prototypes(&self) -> Vec<Tensor<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(PROTOTYPE_STREAM);
        self.modalities
            .iter()
            .map(|m| {
                let data = (0..(self.num_actions + 1) * m.dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z as f32
                    })
                    .collect();
                Tensor::new(vec![self.num_actions + 1, m.dim], data).expect("numel")
            })
            .collect()
    }
}

fn random_sparse_transition(n: usize, successors: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TRANSITION_STREAM);
    let k = successors.clamp(1, n.max(1));
    let mut ids: Vec<usize> = (0..n).collect();
    (0..n)
        .map(|_| {
            ids.shuffle(&mut rng);
            let mut row = vec![0.0; n];
            for &j in &ids[..k] {
                row[j] = 1.0 / k as f64;
            }
            row
        })
        .collect()
}

/// Draws `steps` successive states after `start`.
pub fn sample_chain<R: Rng + ?Sized>(transition: &[Vec<f64>], start: usize, steps: usize, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::with_capacity(steps);
    let mut cur = start;
    for _ in 0..steps {
        cur = sample_row(&transition[cur], rng);
        out.push(cur);
    }
    out
}

fn sample_row<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (j, &p) in row.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = j;
            if u < acc {
                return j;
            }
        }
    }
    last
}

/// Generates `cfg.sequence_count` sequences (split 0).
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    generate_split(cfg, 0, cfg.sequence_count)
}

/// Generates `count` sequences for split `split`. All splits of one config
/// share prototypes and transition structure but draw independent paths.
pub fn generate_split(cfg: &SyntheticConfig, split: u64, count: usize) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let prototypes = cfg.prototypes();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(split + 1);
    let covered: Vec<Vec<bool>> = cfg
        .coverage
        .iter()
        .map(|set| {
            let mut c = vec![false; cfg.num_actions];
            for &a in set {
                c[a] = true;
            }
            c
        })
        .collect();
    let t = cfg.seq_len;
    let mut samples = Vec::with_capacity(count);
    for s in 0..count {
        let start = rng.random_range(0..cfg.num_actions);
        let mut path = vec![start];
        path.extend(sample_chain(&cfg.transition, start, t, &mut rng));
        let mut features = Vec::with_capacity(cfg.modalities.len());
        for (m, spec) in cfg.modalities.iter().enumerate() {
            let proto = &prototypes[m];
            let noise = Normal::new(0.0, cfg.noise_std[m]).map_err(|e| Error::Config(e.to_string()))?;
            let mut data = Vec::with_capacity(t * spec.dim);
            for &a in &path[..t] {
                let row = if covered[m][a] { a } else { cfg.num_actions };
                for &p in proto.row(row) {
                    let eps: f64 = noise.sample(&mut rng);
                    data.push(p + eps as f32);
                }
            }
            features.push(Tensor::new(vec![t, spec.dim], data)?);
        }
        samples.push(FeatureSequence {
            sample_id: format!("syn-{split}-{s:06}"),
            features,
            frame_labels: Some(path[..t].iter().map(|&a| a as u32).collect()),
            next_label: path[t] as u32,
            tau_s: t as f64 + 1.0,
            tau_a: 1.0,
            tau_o: t as f64,
        });
    }
    Ok(SyntheticDataset {
        dataset: Dataset::new(cfg.modalities.clone(), samples)?,
        prototypes,
    })
}
