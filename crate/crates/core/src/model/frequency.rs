//! Empirical predicate prior conditioned on subject and object classes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{ClassId, PredicateId, PredicateVocabulary, SceneGraph};

/// Log-probabilities are floored here so that empty cells stay finite.
const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrequencyOptions {
    /// Additive smoothing per cell entry.
    pub smoothing: f64,
    /// Count every unannotated ordered pair as a null-class observation.
    pub count_null: bool,
}

impl Default for FrequencyOptions {
    fn default() -> Self {
        Self {
            smoothing: 1.0,
            count_null: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    n_entity_classes: usize,
    n_predicates: usize,
    null_index: PredicateId,
    smoothing: f64,
    counts: Vec<u64>,
}

impl FrequencyTable {
    pub fn empty(n_entity_classes: usize, vocab: &PredicateVocabulary, smoothing: f64) -> Self {
        Self {
            n_entity_classes,
            n_predicates: vocab.len(),
            null_index: vocab.null_index(),
            smoothing,
            counts: vec![0; n_entity_classes * n_entity_classes * vocab.len()],
        }
    }

    pub fn build(
        scenes: &[SceneGraph],
        n_entity_classes: usize,
        vocab: &PredicateVocabulary,
        opts: FrequencyOptions,
    ) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::InvalidConfig("frequency table needs at least one scene".into()));
        }
        if !(opts.smoothing >= 0.0 && opts.smoothing.is_finite()) {
            return Err(Error::InvalidConfig("smoothing must be nonnegative".into()));
        }
        let mut t = Self::empty(n_entity_classes, vocab, opts.smoothing);
        for scene in scenes {
            scene.validate_vocab(n_entity_classes, vocab)?;
            let index = scene.id_index();
            let mut related = std::collections::HashSet::new();
            for r in &scene.pairs {
                let s = scene.entities[index[&r.subject]].class;
                let o = scene.entities[index[&r.object]].class;
                t.add(s, o, r.predicate, 1);
                related.insert((r.subject, r.object));
            }
            if opts.count_null {
                for a in &scene.entities {
                    for b in &scene.entities {
                        if a.id != b.id && !related.contains(&(a.id, b.id)) {
                            t.add(a.class, b.class, t.null_index, 1);
                        }
                    }
                }
            }
        }
        Ok(t)
    }

    fn cell(&self, s: ClassId, o: ClassId) -> std::ops::Range<usize> {
        let start = (s * self.n_entity_classes + o) * self.n_predicates;
        start..start + self.n_predicates
    }

    pub fn add(&mut self, s: ClassId, o: ClassId, p: PredicateId, n: u64) {
        let r = self.cell(s, o);
        self.counts[r.start + p] += n;
    }

    pub fn count(&self, s: ClassId, o: ClassId, p: PredicateId) -> u64 {
        self.counts[self.cell(s, o).start + p]
    }

    pub fn n_entity_classes(&self) -> usize {
        self.n_entity_classes
    }

    pub fn n_predicates(&self) -> usize {
        self.n_predicates
    }

    pub fn null_index(&self) -> PredicateId {
        self.null_index
    }

    /// Smoothed `p(pred | s, o)`; uniform for a cell with no mass.
    pub fn probs(&self, s: ClassId, o: ClassId) -> Vec<f64> {
        let counts = &self.counts[self.cell(s, o)];
        let total: f64 = counts.iter().map(|&c| c as f64 + self.smoothing).sum();
        if total <= 0.0 {
            return vec![1.0 / self.n_predicates as f64; self.n_predicates];
        }
        counts.iter().map(|&c| (c as f64 + self.smoothing) / total).collect()
    }

    /// Log of [`Self::probs`], so that its softmax recovers the prior.
    pub fn semantic_logits(&self, s: ClassId, o: ClassId) -> Vec<f64> {
        self.probs(s, o).into_iter().map(|p| p.max(LOG_FLOOR).ln()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.n_entity_classes * self.n_entity_classes * self.n_predicates;
        if self.counts.len() != expected || self.null_index >= self.n_predicates {
            return Err(Error::DimensionMismatch(format!(
                "frequency table holds {} counts, expected {expected}",
                self.counts.len()
            )));
        }
        Ok(())
    }
}
