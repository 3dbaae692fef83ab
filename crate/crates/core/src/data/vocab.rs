use std::collections::HashMap;

use crate::error::{Error, Result};

/// Action ids are positions in `actions`; each action is a `(verb, noun)` pair.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ActionVocabulary {
    actions: Vec<(u32, u32)>,
    index: HashMap<(u32, u32), usize>,
    verb_count: usize,
    noun_count: usize,
}

/// De-duplicates pairs in first-seen order. Counts are `max id + 1`.
pub fn build_vocabulary(pairs: &[(i64, i64)]) -> Result<ActionVocabulary> {
    let mut vocab = ActionVocabulary::default();
    for &(v, n) in pairs {
        if v < 0 || n < 0 || v > u32::MAX as i64 || n > u32::MAX as i64 {
            return Err(Error::Invalid(format!("vocabulary ids must be non-negative u32, got ({v}, {n})")));
        }
        let key = (v as u32, n as u32);
        if vocab.index.contains_key(&key) {
            continue;
        }
        vocab.index.insert(key, vocab.actions.len());
        vocab.actions.push(key);
        vocab.verb_count = vocab.verb_count.max(v as usize + 1);
        vocab.noun_count = vocab.noun_count.max(n as usize + 1);
    }
    Ok(vocab)
}

impl ActionVocabulary {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn verb_count(&self) -> usize {
        self.verb_count
    }

    pub fn noun_count(&self) -> usize {
        self.noun_count
    }

    pub fn pair(&self, action: usize) -> (u32, u32) {
        self.actions[action]
    }

    pub fn pairs(&self) -> &[(u32, u32)] {
        &self.actions
    }

    pub fn action_of(&self, verb: u32, noun: u32) -> Option<usize> {
        self.index.get(&(verb, noun)).copied()
    }

    /// Action ids grouped by verb (`by_noun = false`) or noun.
    pub fn preimages(&self, by_noun: bool) -> Vec<Vec<usize>> {
        let n = if by_noun { self.noun_count } else { self.verb_count };
        let mut out = vec![Vec::new(); n];
        for (a, &(v, no)) in self.actions.iter().enumerate() {
            out[if by_noun { no } else { v } as usize].push(a);
        }
        out
    }
}
