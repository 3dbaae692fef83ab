//! Ranking metrics and verb/noun marginalization. Percentages are in `[0, 100]`.

use std::collections::BTreeMap;

use crate::data::ActionVocabulary;
use crate::error::{Error, Result};

const SUM_TOL: f64 = 1e-6;

/// Next-action distribution of one sample plus its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub truth: usize,
}

impl Prediction {
    pub fn new(probs: Vec<f64>, truth: usize) -> Result<Self> {
        if truth >= probs.len() {
            return Err(Error::IndexOutOfRange {
                index: truth,
                len: probs.len(),
            });
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > SUM_TOL || probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Invalid(format!("prediction is not a distribution (sum {s})")));
        }
        Ok(Self { probs, truth })
    }

    /// 0-based rank of the true class. A class outranks the truth if it has a
    /// higher probability, or an equal one and a lower id.
    pub fn rank(&self) -> usize {
        let t = self.truth;
        let pt = self.probs[t];
        self.probs
            .iter()
            .enumerate()
            .filter(|&(c, &p)| p > pt || (p == pt && c < t))
            .count()
    }

    pub fn hit(&self, k: usize) -> bool {
        self.rank() < k
    }
}

fn check(preds: &[Prediction], k: usize) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    Ok(())
}

/// Sample-mean top-k hit rate.
pub fn topk_accuracy(preds: &[Prediction], k: usize) -> Result<f64> {
    check(preds, k)?;
    let hits = preds.iter().filter(|p| p.hit(k)).count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

/// Per-class `(samples, top-k hits)` for every class present in ground truth.
pub fn per_class_hits(preds: &[Prediction], k: usize) -> Result<BTreeMap<usize, (usize, usize)>> {
    check(preds, k)?;
    let mut out = BTreeMap::new();
    for p in preds {
        let e = out.entry(p.truth).or_insert((0, 0));
        e.0 += 1;
        e.1 += p.hit(k) as usize;
    }
    Ok(out)
}

/// Top-k recall averaged uniformly over classes present in ground truth.
pub fn class_mean_topk_recall(preds: &[Prediction], k: usize) -> Result<f64> {
    let per = per_class_hits(preds, k)?;
    let sum: f64 = per.values().map(|&(n, h)| h as f64 / n as f64).sum();
    Ok(100.0 * sum / per.len() as f64)
}

pub fn class_mean_top1(preds: &[Prediction]) -> Result<f64> {
    class_mean_topk_recall(preds, 1)
}

/// Sums action probabilities into verb and noun distributions.
pub fn marginalize(action_probs: &[f64], vocab: &ActionVocabulary) -> Result<(Vec<f64>, Vec<f64>)> {
    if action_probs.len() != vocab.len() {
        return Err(Error::ShapeMismatch {
            op: "marginalize",
            lhs: vec![action_probs.len()],
            rhs: vec![vocab.len()],
        });
    }
    let mut verbs = vec![0.0; vocab.verb_count()];
    let mut nouns = vec![0.0; vocab.noun_count()];
    for (&p, &(v, n)) in action_probs.iter().zip(vocab.pairs()) {
        verbs[v as usize] += p;
        nouns[n as usize] += p;
    }
    Ok((verbs, nouns))
}

/// Verb- and noun-level predictions derived from action-level ones.
pub fn marginal_predictions(preds: &[Prediction], vocab: &ActionVocabulary) -> Result<(Vec<Prediction>, Vec<Prediction>)> {
    let mut verbs = Vec::with_capacity(preds.len());
    let mut nouns = Vec::with_capacity(preds.len());
    for p in preds {
        let (v, n) = marginalize(&p.probs, vocab)?;
        let (tv, tn) = vocab.pair(p.truth);
        verbs.push(Prediction {
            probs: v,
            truth: tv as usize,
        });
        nouns.push(Prediction {
            probs: n,
            truth: tn as usize,
        });
    }
    Ok((verbs, nouns))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_favor_lower_class_ids() {
        let p = Prediction::new(vec![0.25; 4], 2).unwrap();
        assert_eq!(p.rank(), 2);
        assert!(!p.hit(2));
        assert!(p.hit(3));
    }

    #[test]
    fn k_zero_and_empty_input_are_errors() {
        let p = vec![Prediction::new(vec![1.0], 0).unwrap()];
        assert!(topk_accuracy(&p, 0).is_err());
        assert!(matches!(class_mean_topk_recall(&[], 5), Err(Error::Empty(_))));
    }
}
