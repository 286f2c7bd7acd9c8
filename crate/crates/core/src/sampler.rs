//! Affinity, positive/negative contrast sets, and per-image batch sampling.
//!
//! Every entity pair in an image is either related (it carries one or more
//! ground-truth predicates), unrelated, or ignored (both members resolve to the
//! same ground-truth entity through detection matching). Contrast sets are built
//! per anchor entity, in the subject role or the object role.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{match_entities, ClassId, EntityId, EntityInstance, PredicateId, PredicateVocabulary, SceneGraph};

pub type PairKey = (EntityId, EntityId);

/// Probability vector over predicate classes, null class included.
#[derive(Debug, Clone, PartialEq)]
pub struct PredicateDistribution {
    probs: Vec<f64>,
}

impl PredicateDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidConfig("probabilities must be finite and nonnegative".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self { probs })
    }

    /// Numerically stable softmax.
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= sum);
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> PredicateId {
        argmax(&self.probs)
    }

    /// Most likely predicate other than the null class.
    pub fn argmax_non_null(&self, null_index: PredicateId) -> PredicateId {
        let mut best = usize::MAX;
        for (i, &p) in self.probs.iter().enumerate() {
            if i != null_index && (best == usize::MAX || p > self.probs[best]) {
                best = i;
            }
        }
        best
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Probability that the pair is related at all: `1 - p(null)`.
pub fn affinity(d: &PredicateDistribution, vocab: &PredicateVocabulary) -> f64 {
    affinity_with_null(d.probs(), vocab.null_index())
}

pub fn affinity_with_null(probs: &[f64], null_index: PredicateId) -> f64 {
    1.0 - probs[null_index]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorRole {
    Subject,
    Object,
}

impl AnchorRole {
    /// Ordered `(subject, object)` key for an anchor and one of its partners.
    pub fn pair(self, anchor: EntityId, partner: EntityId) -> PairKey {
        match self {
            AnchorRole::Subject => (anchor, partner),
            AnchorRole::Object => (partner, anchor),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "by", content = "key")]
pub enum Grouping {
    None,
    EntityClass(ClassId),
    Predicate(PredicateId),
}

/// Positive and negative partners of one anchor entity.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastSets {
    pub anchor: EntityId,
    pub role: AnchorRole,
    pub positives: Vec<EntityId>,
    pub negatives: Vec<EntityId>,
    pub grouping: Grouping,
}

impl ContrastSets {
    pub fn positive_pairs(&self) -> impl Iterator<Item = PairKey> + '_ {
        self.positives.iter().map(|&p| self.role.pair(self.anchor, p))
    }

    pub fn negative_pairs(&self) -> impl Iterator<Item = PairKey> + '_ {
        self.negatives.iter().map(|&p| self.role.pair(self.anchor, p))
    }
}

/// Class- or predicate-grouped contrast sets of one anchor.
///
/// Only groups with at least one positive and one negative are kept.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGroups {
    pub anchor: EntityId,
    pub role: AnchorRole,
    pub groups: Vec<ContrastSets>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairLabel<'a> {
    Related(&'a [PredicateId]),
    Unrelated,
    Ignored,
}

/// Ground-truth predicate lookup for every ordered pair of the sampling universe:
/// ground-truth entities plus detections matched to them.
#[derive(Debug, Clone)]
pub struct PairLabels {
    entities: Vec<EntityInstance>,
    index: HashMap<EntityId, usize>,
    canonical: Vec<usize>,
    members: Vec<Vec<usize>>,
    labels: HashMap<(usize, usize), Vec<PredicateId>>,
    out_partners: Vec<Vec<usize>>,
    in_partners: Vec<Vec<usize>>,
    null_index: PredicateId,
}

impl PairLabels {
    pub fn from_scene(scene: &SceneGraph, null_index: PredicateId) -> Self {
        Self::build(scene, &[], 0.5, null_index)
    }

    /// Detections matched to a ground-truth entity (same class, IoU ≥ `iou_thresh`)
    /// join the universe and inherit that entity's relationships; unmatched
    /// detections are dropped.
    pub fn build(scene: &SceneGraph, detections: &[EntityInstance], iou_thresh: f64, null_index: PredicateId) -> Self {
        let n_gt = scene.entities.len();
        let mut entities = scene.entities.clone();
        let mut canonical: Vec<usize> = (0..n_gt).collect();
        let mut members: Vec<Vec<usize>> = (0..n_gt).map(|i| vec![i]).collect();
        let gt_index = scene.id_index();
        let taken: HashSet<EntityId> = gt_index.keys().copied().collect();
        for (det_id, gt_id) in match_entities(detections, &scene.entities, iou_thresh) {
            if taken.contains(&det_id) {
                continue;
            }
            let det = detections.iter().find(|d| d.id == det_id).expect("matched detection exists");
            let g = gt_index[&gt_id];
            members[g].push(entities.len());
            canonical.push(g);
            entities.push(det.clone());
        }
        let index = entities.iter().enumerate().map(|(i, e)| (e.id, i)).collect();

        let mut labels: HashMap<(usize, usize), Vec<PredicateId>> = HashMap::new();
        let mut out_partners = vec![Vec::new(); n_gt];
        let mut in_partners = vec![Vec::new(); n_gt];
        for r in &scene.pairs {
            let (s, o) = (gt_index[&r.subject], gt_index[&r.object]);
            let preds = labels.entry((s, o)).or_default();
            if preds.is_empty() {
                out_partners[s].push(o);
                in_partners[o].push(s);
            }
            preds.push(r.predicate);
        }
        for preds in labels.values_mut() {
            preds.sort_unstable();
        }
        for v in out_partners.iter_mut().chain(in_partners.iter_mut()) {
            v.sort_unstable();
        }
        Self {
            entities,
            index,
            canonical,
            members,
            labels,
            out_partners,
            in_partners,
            null_index,
        }
    }

    pub fn entities(&self) -> &[EntityInstance] {
        &self.entities
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn null_index(&self) -> PredicateId {
        self.null_index
    }

    pub fn entity(&self, id: EntityId) -> Option<&EntityInstance> {
        self.index.get(&id).map(|&i| &self.entities[i])
    }

    pub fn label(&self, subject: EntityId, object: EntityId) -> PairLabel<'_> {
        match (self.index.get(&subject), self.index.get(&object)) {
            (Some(&s), Some(&o)) => self.label_idx(s, o),
            _ => PairLabel::Ignored,
        }
    }

    /// Single-label view: the first ground-truth predicate, the null class, or `None` if ignored.
    pub fn predicate(&self, subject: EntityId, object: EntityId) -> Option<PredicateId> {
        match self.label(subject, object) {
            PairLabel::Related(p) => Some(p[0]),
            PairLabel::Unrelated => Some(self.null_index),
            PairLabel::Ignored => None,
        }
    }

    fn label_idx(&self, s: usize, o: usize) -> PairLabel<'_> {
        let (cs, co) = (self.canonical[s], self.canonical[o]);
        if cs == co {
            return PairLabel::Ignored;
        }
        match self.labels.get(&(cs, co)) {
            Some(p) => PairLabel::Related(p),
            None => PairLabel::Unrelated,
        }
    }

    fn label_role(&self, anchor: usize, partner: usize, role: AnchorRole) -> PairLabel<'_> {
        match role {
            AnchorRole::Subject => self.label_idx(anchor, partner),
            AnchorRole::Object => self.label_idx(partner, anchor),
        }
    }

    /// Universe indices of the related partners of `anchor`.
    fn positive_partners(&self, anchor: usize, role: AnchorRole) -> Vec<usize> {
        let g = self.canonical[anchor];
        let partners = match role {
            AnchorRole::Subject => &self.out_partners[g],
            AnchorRole::Object => &self.in_partners[g],
        };
        let mut out: Vec<usize> = partners.iter().flat_map(|&p| self.members[p].iter().copied()).collect();
        out.sort_unstable();
        out
    }

    fn is_positive_anchor(&self, anchor: usize, role: AnchorRole) -> bool {
        let g = self.canonical[anchor];
        match role {
            AnchorRole::Subject => !self.out_partners[g].is_empty(),
            AnchorRole::Object => !self.in_partners[g].is_empty(),
        }
    }

    fn id(&self, i: usize) -> EntityId {
        self.entities[i].id
    }

    fn ids(&self, v: &[usize]) -> Vec<EntityId> {
        let mut out: Vec<EntityId> = v.iter().map(|&i| self.id(i)).collect();
        out.sort_unstable();
        out
    }

    fn anchor_index(&self, anchor: EntityId) -> Result<usize> {
        self.index
            .get(&anchor)
            .copied()
            .ok_or_else(|| Error::InvalidScene(format!("unknown anchor {anchor}")))
    }

    /// All ordered related `(subject, object, predicate)` triples in the universe.
    pub fn positive_triples(&self) -> Vec<(EntityId, EntityId, PredicateId)> {
        let mut keys: Vec<_> = self.labels.keys().copied().collect();
        keys.sort_unstable();
        let mut out = Vec::new();
        for (gs, go) in keys {
            for &s in &self.members[gs] {
                for &o in &self.members[go] {
                    for &p in &self.labels[&(gs, go)] {
                        out.push((self.id(s), self.id(o), p));
                    }
                }
            }
        }
        out
    }

    fn related_pair_count(&self) -> usize {
        self.labels
            .keys()
            .map(|&(s, o)| self.members[s].len() * self.members[o].len())
            .sum()
    }

    fn ignored_pair_count(&self) -> usize {
        self.members.iter().map(|m| m.len() * (m.len() - 1)).sum()
    }
}

/// Class-agnostic sets: every related partner against every unrelated one.
pub fn build_contrast_sets_agnostic(labels: &PairLabels, anchor: EntityId, role: AnchorRole) -> Result<ContrastSets> {
    let a = labels.anchor_index(anchor)?;
    let pos = labels.positive_partners(a, role);
    if pos.is_empty() {
        return Err(Error::NoPositives);
    }
    let neg: Vec<usize> = (0..labels.len())
        .filter(|&p| p != a && matches!(labels.label_role(a, p, role), PairLabel::Unrelated))
        .collect();
    Ok(ContrastSets {
        anchor,
        role,
        positives: labels.ids(&pos),
        negatives: labels.ids(&neg),
        grouping: Grouping::None,
    })
}

/// Agnostic sets restricted to partners of entity class `class`.
pub fn build_contrast_sets_entity_class(
    labels: &PairLabels,
    anchor: EntityId,
    role: AnchorRole,
    class: ClassId,
) -> Result<ContrastSets> {
    let mut sets = build_contrast_sets_agnostic(labels, anchor, role)?;
    let keep = |id: &EntityId| labels.entity(*id).map(|e| e.class) == Some(class);
    sets.positives.retain(keep);
    sets.negatives.retain(keep);
    sets.grouping = Grouping::EntityClass(class);
    if sets.positives.is_empty() {
        return Err(Error::NoPositives);
    }
    if sets.negatives.is_empty() {
        return Err(Error::EmptyNegatives);
    }
    Ok(sets)
}

/// Positives carry ground-truth predicate `predicate` with the anchor; negatives are
/// unrelated partners that the model currently assigns `predicate` by argmax.
pub fn build_contrast_sets_predicate_class(
    labels: &PairLabels,
    anchor: EntityId,
    role: AnchorRole,
    predicate: PredicateId,
    model_argmax: &dyn Fn(EntityId, EntityId) -> PredicateId,
) -> Result<ContrastSets> {
    let mut sets = build_contrast_sets_agnostic(labels, anchor, role)?;
    sets.positives.retain(|&p| {
        let (s, o) = role.pair(anchor, p);
        matches!(labels.label(s, o), PairLabel::Related(preds) if preds.contains(&predicate))
    });
    sets.negatives.retain(|&p| {
        let (s, o) = role.pair(anchor, p);
        model_argmax(s, o) == predicate
    });
    sets.grouping = Grouping::Predicate(predicate);
    if sets.positives.is_empty() {
        return Err(Error::NoPositives);
    }
    if sets.negatives.is_empty() {
        return Err(Error::EmptyNegatives);
    }
    Ok(sets)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Pairs per image for the cross-entropy term.
    pub n_pairs_l0: usize,
    /// Maximum positives among those pairs.
    pub n_pos_l0: usize,
    /// Positive anchors sampled per role for the margin losses.
    pub n_pos_anchors: usize,
    /// Negatives kept per anchor before min/max extraction.
    pub k_neg: usize,
    pub rng_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_pairs_l0: 512,
            n_pos_l0: 128,
            n_pos_anchors: 128,
            k_neg: 64,
            rng_seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs_l0 == 0 || self.n_pos_l0 == 0 || self.n_pos_anchors == 0 || self.k_neg == 0 {
            return Err(Error::InvalidConfig("sampler counts must be positive".into()));
        }
        if self.n_pos_l0 > self.n_pairs_l0 {
            return Err(Error::InvalidConfig("n_pos_l0 exceeds n_pairs_l0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct L0Sample {
    pub subject: EntityId,
    pub object: EntityId,
    pub target: PredicateId,
}

/// Everything the four loss terms need for one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub l0: Vec<L0Sample>,
    pub agnostic: Vec<ContrastSets>,
    pub entity_class: Vec<AnchorGroups>,
    pub predicate_class: Vec<AnchorGroups>,
}

impl Batch {
    /// Every ordered pair whose model output the losses read.
    pub fn pairs(&self) -> BTreeSet<PairKey> {
        let mut out: BTreeSet<PairKey> = self.l0.iter().map(|s| (s.subject, s.object)).collect();
        let sets = self
            .agnostic
            .iter()
            .chain(self.entity_class.iter().flat_map(|g| g.groups.iter()))
            .chain(self.predicate_class.iter().flat_map(|g| g.groups.iter()));
        for c in sets {
            out.extend(c.positive_pairs());
            out.extend(c.negative_pairs());
        }
        out
    }
}

/// Draws the per-image batch.
///
/// Cross-entropy: up to `n_pos_l0` positive triples, the rest of `n_pairs_l0` filled
/// with unrelated pairs. Margin losses: up to `n_pos_anchors` positive anchors per role,
/// each with all related partners and at most `k_neg` uniformly drawn unrelated ones;
/// the class and predicate groupings filter that same negative draw.
pub fn sample_batch<R: Rng + ?Sized>(
    labels: &PairLabels,
    cfg: &SamplerConfig,
    model_argmax: &dyn Fn(EntityId, EntityId) -> PredicateId,
    rng: &mut R,
) -> Result<Batch> {
    cfg.validate()?;
    let triples = labels.positive_triples();
    if triples.is_empty() {
        return Err(Error::NoPositives);
    }
    let mut batch = Batch::default();

    // cross-entropy pairs
    let n_pos = triples.len().min(cfg.n_pos_l0);
    let mut pos_pick: Vec<usize> = index::sample(rng, triples.len(), n_pos).into_vec();
    pos_pick.sort_unstable();
    for i in pos_pick {
        let (s, o, p) = triples[i];
        batch.l0.push(L0Sample {
            subject: s,
            object: o,
            target: p,
        });
    }
    let n_neg = cfg.n_pairs_l0 - n_pos;
    for (s, o) in sample_unrelated_pairs(labels, n_neg, rng) {
        batch.l0.push(L0Sample {
            subject: labels.id(s),
            object: labels.id(o),
            target: labels.null_index,
        });
    }

    // margin-loss anchors
    for role in [AnchorRole::Subject, AnchorRole::Object] {
        let anchors: Vec<usize> = (0..labels.len()).filter(|&a| labels.is_positive_anchor(a, role)).collect();
        let k = anchors.len().min(cfg.n_pos_anchors);
        let mut picked: Vec<usize> = index::sample(rng, anchors.len(), k).into_iter().map(|i| anchors[i]).collect();
        picked.sort_unstable_by_key(|&a| labels.id(a));
        for a in picked {
            let pos = labels.positive_partners(a, role);
            let neg = sample_negative_partners(labels, a, role, &pos, cfg.k_neg, rng);
            let anchor = labels.id(a);

            let mut classes: Vec<ClassId> = pos.iter().map(|&p| labels.entities[p].class).collect();
            classes.sort_unstable();
            classes.dedup();
            let class_groups = classes
                .into_iter()
                .filter_map(|c| {
                    let of_class = |v: &[usize]| -> Vec<usize> {
                        v.iter().copied().filter(|&p| labels.entities[p].class == c).collect()
                    };
                    let negatives = of_class(&neg);
                    (!negatives.is_empty()).then(|| ContrastSets {
                        anchor,
                        role,
                        positives: labels.ids(&of_class(&pos)),
                        negatives: labels.ids(&negatives),
                        grouping: Grouping::EntityClass(c),
                    })
                })
                .collect::<Vec<_>>();

            let mut preds: Vec<PredicateId> = pos
                .iter()
                .flat_map(|&p| match labels.label_role(a, p, role) {
                    PairLabel::Related(ps) => ps.to_vec(),
                    _ => Vec::new(),
                })
                .collect();
            preds.sort_unstable();
            preds.dedup();
            let neg_argmax: Vec<PredicateId> = neg
                .iter()
                .map(|&p| {
                    let (s, o) = role.pair(anchor, labels.id(p));
                    model_argmax(s, o)
                })
                .collect();
            let pred_groups = preds
                .into_iter()
                .filter_map(|e| {
                    let negatives: Vec<usize> = neg
                        .iter()
                        .zip(&neg_argmax)
                        .filter(|(_, &am)| am == e)
                        .map(|(&p, _)| p)
                        .collect();
                    if negatives.is_empty() {
                        return None;
                    }
                    let positives: Vec<usize> = pos
                        .iter()
                        .copied()
                        .filter(|&p| matches!(labels.label_role(a, p, role), PairLabel::Related(ps) if ps.contains(&e)))
                        .collect();
                    Some(ContrastSets {
                        anchor,
                        role,
                        positives: labels.ids(&positives),
                        negatives: labels.ids(&negatives),
                        grouping: Grouping::Predicate(e),
                    })
                })
                .collect::<Vec<_>>();

            batch.agnostic.push(ContrastSets {
                anchor,
                role,
                positives: labels.ids(&pos),
                negatives: labels.ids(&neg),
                grouping: Grouping::None,
            });
            if !class_groups.is_empty() {
                batch.entity_class.push(AnchorGroups {
                    anchor,
                    role,
                    groups: class_groups,
                });
            }
            if !pred_groups.is_empty() {
                batch.predicate_class.push(AnchorGroups {
                    anchor,
                    role,
                    groups: pred_groups,
                });
            }
        }
    }
    Ok(batch)
}

/// Up to `k` unrelated partners of `anchor`, drawn uniformly without replacement.
///
/// Expected cost is O(k) when unrelated partners are the majority of the universe.
fn sample_negative_partners<R: Rng + ?Sized>(
    labels: &PairLabels,
    anchor: usize,
    role: AnchorRole,
    positives: &[usize],
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    let n = labels.len();
    let anchor_group = labels.members[labels.canonical[anchor]].len();
    let available = n - anchor_group - positives.len();
    let is_negative = |p: usize| p != anchor && matches!(labels.label_role(anchor, p, role), PairLabel::Unrelated);
    if available <= k || 2 * available < n {
        let all: Vec<usize> = (0..n).filter(|&p| is_negative(p)).collect();
        if all.len() <= k {
            return all;
        }
        let mut pick: Vec<usize> = index::sample(rng, all.len(), k).into_iter().map(|i| all[i]).collect();
        pick.sort_unstable();
        return pick;
    }
    // rejection sampling: at least half of the universe is a valid negative
    let mut chosen = BTreeSet::new();
    while chosen.len() < k {
        let p = rng.random_range(0..n);
        if is_negative(p) {
            chosen.insert(p);
        }
    }
    chosen.into_iter().collect()
}

/// Up to `k` unrelated ordered pairs, uniformly without replacement, as universe indices.
fn sample_unrelated_pairs<R: Rng + ?Sized>(labels: &PairLabels, k: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let n = labels.len();
    if k == 0 || n < 2 {
        return Vec::new();
    }
    let total = n * (n - 1);
    let available = total - labels.related_pair_count() - labels.ignored_pair_count();
    let unrelated = |s: usize, o: usize| s != o && matches!(labels.label_idx(s, o), PairLabel::Unrelated);
    if available <= k || 2 * available < total {
        let all: Vec<(usize, usize)> = (0..n)
            .flat_map(|s| (0..n).map(move |o| (s, o)))
            .filter(|&(s, o)| unrelated(s, o))
            .collect();
        if all.len() <= k {
            return all;
        }
        let mut pick: Vec<(usize, usize)> = index::sample(rng, all.len(), k).into_iter().map(|i| all[i]).collect();
        pick.sort_unstable();
        return pick;
    }
    let mut chosen = BTreeSet::new();
    while chosen.len() < k {
        let s = rng.random_range(0..n);
        let o = rng.random_range(0..n);
        if unrelated(s, o) {
            chosen.insert((s, o));
        }
    }
    chosen.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, ImageSize};
    use crate::scene::Relation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const NULL: PredicateId = 3;

    fn ent(id: EntityId, class: ClassId) -> EntityInstance {
        let x = id as f64 * 20.0;
        EntityInstance::new(id, BBox::new(x, 0.0, 10.0, 10.0).unwrap(), class, 1.0)
    }

    fn scene(ents: Vec<EntityInstance>, pairs: &[(EntityId, EntityId, PredicateId)]) -> SceneGraph {
        let rels: Vec<Relation> = pairs.iter().map(|&p| p.into()).collect();
        SceneGraph::new(ImageSize::new(1000.0, 1000.0).unwrap(), ents, rels).unwrap()
    }

    fn no_argmax(_: EntityId, _: EntityId) -> PredicateId {
        NULL
    }

    #[test]
    fn affinity_examples() {
        let vocab = PredicateVocabulary::with_null_last(2);
        let d = PredicateDistribution::new(vec![0.0, 0.0, 1.0]).unwrap();
        assert_eq!(affinity(&d, &vocab), 0.0);
        let u = PredicateDistribution::new(vec![1.0 / 3.0; 3]).unwrap();
        assert!((affinity(&u, &vocab) - 2.0 / 3.0).abs() < 1e-15);
        let d = PredicateDistribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        assert!((affinity(&d, &vocab) - 0.8).abs() < 1e-15);
        assert!(PredicateDistribution::new(vec![0.5, 0.4]).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let d = PredicateDistribution::from_logits(&[0.0, 0.0, 0.0]);
        assert_eq!(d.argmax(), 0);
        assert_eq!(d.argmax_non_null(0), 1);
    }

    #[test]
    fn pair_labels_and_inheritance() {
        let s = scene(vec![ent(1, 0), ent(2, 1), ent(3, 1)], &[(1, 2, 0)]);
        let labels = PairLabels::from_scene(&s, NULL);
        assert_eq!(labels.predicate(1, 2), Some(0));
        assert_eq!(labels.predicate(1, 3), Some(NULL));
        assert_eq!(labels.predicate(2, 1), Some(NULL));

        let det = EntityInstance::new(10, BBox::new(21.0, 0.0, 10.0, 10.0).unwrap(), 0, 0.9);
        let det_far = EntityInstance::new(11, BBox::new(500.0, 500.0, 10.0, 10.0).unwrap(), 0, 0.9);
        let labels = PairLabels::build(&s, &[det, det_far], 0.5, NULL);
        assert_eq!(labels.len(), 4);
        assert_eq!(labels.predicate(10, 2), Some(0));
        assert_eq!(labels.predicate(10, 1), None);
        assert!(labels.entity(11).is_none());
        assert_eq!(labels.positive_triples(), vec![(1, 2, 0), (10, 2, 0)]);
    }

    #[test]
    fn agnostic_sets() {
        let s = scene(vec![ent(1, 0), ent(2, 1), ent(3, 1)], &[(1, 2, 0)]);
        let labels = PairLabels::from_scene(&s, NULL);
        let c = build_contrast_sets_agnostic(&labels, 1, AnchorRole::Subject).unwrap();
        assert_eq!((c.positives.clone(), c.negatives.clone()), (vec![2], vec![3]));
        let c = build_contrast_sets_agnostic(&labels, 2, AnchorRole::Object).unwrap();
        assert_eq!((c.positives.clone(), c.negatives.clone()), (vec![1], vec![3]));
        assert!(matches!(
            build_contrast_sets_agnostic(&labels, 3, AnchorRole::Subject),
            Err(Error::NoPositives)
        ));

        let s = scene(vec![ent(1, 0), ent(2, 1), ent(3, 1), ent(4, 2)], &[(1, 2, 0), (1, 4, 1)]);
        let labels = PairLabels::from_scene(&s, NULL);
        let c = build_contrast_sets_agnostic(&labels, 1, AnchorRole::Subject).unwrap();
        assert_eq!((c.positives.len(), c.negatives.len()), (2, 1));
    }

    #[test]
    fn entity_class_sets() {
        // man(1) related to cup(2), unrelated to cup(3) and table(4)
        let s = scene(vec![ent(1, 0), ent(2, 1), ent(3, 1), ent(4, 2)], &[(1, 2, 0)]);
        let labels = PairLabels::from_scene(&s, NULL);
        let c = build_contrast_sets_entity_class(&labels, 1, AnchorRole::Subject, 1).unwrap();
        assert_eq!((c.positives, c.negatives), (vec![2], vec![3]));
        let s2 = scene(vec![ent(1, 0), ent(2, 1), ent(4, 2)], &[(1, 2, 0)]);
        let labels2 = PairLabels::from_scene(&s2, NULL);
        assert!(matches!(
            build_contrast_sets_entity_class(&labels2, 1, AnchorRole::Subject, 1),
            Err(Error::EmptyNegatives)
        ));
        assert!(matches!(
            build_contrast_sets_entity_class(&labels, 1, AnchorRole::Subject, 2),
            Err(Error::NoPositives)
        ));
    }

    #[test]
    fn predicate_class_sets() {
        // man(1) plays guitar(2); model thinks man plays drum(3)
        let plays = 0;
        let s = scene(vec![ent(1, 0), ent(2, 1), ent(3, 2)], &[(1, 2, plays)]);
        let labels = PairLabels::from_scene(&s, NULL);
        let argmax = |s: EntityId, o: EntityId| if (s, o) == (1, 3) || (s, o) == (1, 2) { plays } else { NULL };
        let c = build_contrast_sets_predicate_class(&labels, 1, AnchorRole::Subject, plays, &argmax).unwrap();
        assert_eq!((c.positives, c.negatives), (vec![2], vec![3]));
        assert!(matches!(
            build_contrast_sets_predicate_class(&labels, 1, AnchorRole::Subject, plays, &no_argmax),
            Err(Error::EmptyNegatives)
        ));
        assert!(matches!(
            build_contrast_sets_predicate_class(&labels, 1, AnchorRole::Subject, 1, &argmax),
            Err(Error::NoPositives)
        ));
    }

    fn big_scene(n_pos: usize, n_ent: usize) -> SceneGraph {
        let ents: Vec<_> = (0..n_ent as u64).map(|i| ent(i, (i % 3) as usize)).collect();
        let n = n_ent as u64;
        let pairs: Vec<_> = (0..n_pos as u64).map(|i| (i % n, (i % n + 1 + i / n) % n, 0)).collect();
        scene(ents, &pairs)
    }

    #[test]
    fn l0_quota_with_many_positives() {
        // 200 positive pairs, 102*101 - 200 = 10102 negatives
        let s = big_scene(200, 102);
        let labels = PairLabels::from_scene(&s, NULL);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_batch(&labels, &SamplerConfig::default(), &no_argmax, &mut rng).unwrap();
        let pos = b.l0.iter().filter(|x| x.target != NULL).count();
        assert_eq!((pos, b.l0.len() - pos), (128, 384));
        let keys: HashSet<_> = b.l0.iter().map(|x| (x.subject, x.object)).collect();
        assert_eq!(keys.len(), 512);
    }

    #[test]
    fn l0_keeps_all_positives_below_quota() {
        let s = big_scene(50, 60);
        let labels = PairLabels::from_scene(&s, NULL);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = sample_batch(&labels, &SamplerConfig::default(), &no_argmax, &mut rng).unwrap();
        let pos = b.l0.iter().filter(|x| x.target != NULL).count();
        assert_eq!((pos, b.l0.len() - pos), (50, 462));
        for x in &b.l0 {
            if x.target == NULL {
                assert_eq!(labels.label(x.subject, x.object), PairLabel::Unrelated);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let s = big_scene(300, 400);
        let labels = PairLabels::from_scene(&s, NULL);
        let cfg = SamplerConfig::default();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_batch(&labels, &cfg, &no_argmax, &mut rng).unwrap()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
        let b = run(7);
        assert_eq!(b.agnostic.len(), 2 * 128);
        for c in &b.agnostic {
            assert!(c.negatives.len() <= 64);
            let pos: HashSet<_> = c.positives.iter().collect();
            assert!(c.negatives.iter().all(|n| !pos.contains(n) && *n != c.anchor));
        }
    }

    #[test]
    fn no_positive_scene_is_rejected() {
        let s = scene(vec![ent(1, 0), ent(2, 1)], &[]);
        let labels = PairLabels::from_scene(&s, NULL);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_batch(&labels, &SamplerConfig::default(), &no_argmax, &mut rng),
            Err(Error::NoPositives)
        ));
    }

    #[test]
    fn small_scene_keeps_all_negatives() {
        let s = scene(vec![ent(1, 0), ent(2, 1), ent(3, 1), ent(4, 2)], &[(1, 2, 0)]);
        let labels = PairLabels::from_scene(&s, NULL);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_batch(&labels, &SamplerConfig::default(), &no_argmax, &mut rng).unwrap();
        for c in &b.agnostic {
            let full = build_contrast_sets_agnostic(&labels, c.anchor, c.role).unwrap();
            assert_eq!(c, &full);
        }
        assert_eq!(b.l0.len(), 12);
    }
}
