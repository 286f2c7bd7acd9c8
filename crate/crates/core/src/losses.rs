//! Cross-entropy plus the three margin losses over pair affinities, with analytic
//! gradients with respect to the predicate logits of every pair involved.
//!
//! Margin terms select the least-affine positive and the most-affine negative of a
//! contrast set (ties toward the lower entity id). Selections are treated as fixed
//! when differentiating, and a hinge sitting exactly at its margin has zero gradient.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{affinity_with_null, AnchorGroups, AnchorRole, Batch, ContrastSets, PairKey, PredicateDistribution};
use crate::scene::{EntityId, PredicateId};

/// Floor applied to the target probability before taking its log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha1: 0.2,
            alpha2: 0.2,
            alpha3: 0.2,
            lambda1: 1.0,
            lambda2: 0.5,
            lambda3: 0.1,
        }
    }
}

impl LossConfig {
    pub fn with_margin(mut self, m: f64) -> Self {
        self.alpha1 = m;
        self.alpha2 = m;
        self.alpha3 = m;
        self
    }

    pub fn with_lambdas(mut self, l1: f64, l2: f64, l3: f64) -> Self {
        self.lambda1 = l1;
        self.lambda2 = l2;
        self.lambda3 = l3;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for a in [self.alpha1, self.alpha2, self.alpha3] {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::InvalidConfig(format!("margin {a} outside (0, 1]")));
            }
        }
        for l in [self.lambda1, self.lambda2, self.lambda3] {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::InvalidConfig(format!("loss weight {l} must be nonnegative")));
            }
        }
        Ok(())
    }
}

pub fn cross_entropy(d: &PredicateDistribution, target: PredicateId) -> f64 {
    -d.probs()[target].max(PROB_FLOOR).ln()
}

pub fn hinge_margin(min_pos: f64, max_neg: f64, alpha: f64) -> f64 {
    (alpha - (min_pos - max_neg)).max(0.0)
}

/// One evaluated margin term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HingeTerm {
    pub anchor: EntityId,
    pub role: AnchorRole,
    pub positive: PairKey,
    pub negative: PairKey,
    pub min_pos: f64,
    pub max_neg: f64,
    pub value: f64,
    /// Averaging weight of this term within its loss.
    pub weight: f64,
}

impl HingeTerm {
    pub fn is_active(&self) -> bool {
        self.value > 0.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MarginLoss {
    pub value: f64,
    pub terms: Vec<HingeTerm>,
    /// dL/dΦ for every pair selected by an active term.
    pub affinity_grad: BTreeMap<PairKey, f64>,
}

impl MarginLoss {
    pub fn active_terms(&self) -> usize {
        self.terms.iter().filter(|t| t.is_active()).count()
    }
}

fn select_extreme(candidates: impl Iterator<Item = (EntityId, PairKey)>, affinity: &dyn Fn(PairKey) -> f64, min: bool) -> Option<(PairKey, f64)> {
    let mut best: Option<(EntityId, PairKey, f64)> = None;
    for (id, pair) in candidates {
        let a = affinity(pair);
        let better = match best {
            None => true,
            Some((bid, _, ba)) => {
                if min {
                    a < ba || (a == ba && id < bid)
                } else {
                    a > ba || (a == ba && id < bid)
                }
            }
        };
        if better {
            best = Some((id, pair, a));
        }
    }
    best.map(|(_, p, a)| (p, a))
}

fn evaluate_term(sets: &ContrastSets, affinity: &dyn Fn(PairKey) -> f64, alpha: f64) -> Option<HingeTerm> {
    let (positive, min_pos) = select_extreme(
        sets.positives.iter().map(|&p| (p, sets.role.pair(sets.anchor, p))),
        affinity,
        true,
    )?;
    let (negative, max_neg) = select_extreme(
        sets.negatives.iter().map(|&p| (p, sets.role.pair(sets.anchor, p))),
        affinity,
        false,
    )?;
    Some(HingeTerm {
        anchor: sets.anchor,
        role: sets.role,
        positive,
        negative,
        min_pos,
        max_neg,
        value: hinge_margin(min_pos, max_neg, alpha),
        weight: 0.0,
    })
}

/// Averages per-anchor group means, separately for each role, then sums the two roles.
fn grouped_loss<'a>(
    anchors: impl Iterator<Item = (EntityId, AnchorRole, &'a [ContrastSets])>,
    affinity: &dyn Fn(PairKey) -> f64,
    alpha: f64,
) -> MarginLoss {
    let mut per_role: BTreeMap<AnchorRole, Vec<Vec<HingeTerm>>> = BTreeMap::new();
    for (_, role, groups) in anchors {
        let terms: Vec<HingeTerm> = groups.iter().filter_map(|g| evaluate_term(g, affinity, alpha)).collect();
        if !terms.is_empty() {
            per_role.entry(role).or_default().push(terms);
        }
    }
    let mut out = MarginLoss::default();
    for anchors in per_role.into_values() {
        let n = anchors.len() as f64;
        for terms in anchors {
            let g = terms.len() as f64;
            for mut t in terms {
                t.weight = 1.0 / (n * g);
                out.value += t.weight * t.value;
                if t.is_active() {
                    *out.affinity_grad.entry(t.positive).or_default() -= t.weight;
                    *out.affinity_grad.entry(t.negative).or_default() += t.weight;
                }
                out.terms.push(t);
            }
        }
    }
    out
}

pub fn l1_class_agnostic(sets: &[ContrastSets], affinity: &dyn Fn(PairKey) -> f64, alpha: f64) -> MarginLoss {
    grouped_loss(
        sets.iter().map(|s| (s.anchor, s.role, std::slice::from_ref(s))),
        affinity,
        alpha,
    )
}

pub fn l2_entity_class_aware(groups: &[AnchorGroups], affinity: &dyn Fn(PairKey) -> f64, alpha: f64) -> MarginLoss {
    grouped_loss(
        groups.iter().map(|g| (g.anchor, g.role, g.groups.as_slice())),
        affinity,
        alpha,
    )
}

pub fn l3_predicate_class_aware(groups: &[AnchorGroups], affinity: &dyn Fn(PairKey) -> f64, alpha: f64) -> MarginLoss {
    grouped_loss(
        groups.iter().map(|g| (g.anchor, g.role, g.groups.as_slice())),
        affinity,
        alpha,
    )
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l0: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
    /// dL/dlogits per pair; empty when built from scalars alone.
    #[serde(skip)]
    pub grad: BTreeMap<PairKey, Vec<f64>>,
}

pub fn total_loss(l0: f64, l1: f64, l2: f64, l3: f64, cfg: &LossConfig) -> LossBreakdown {
    LossBreakdown {
        l0,
        l1,
        l2,
        l3,
        total: l0 + cfg.lambda1 * l1 + cfg.lambda2 * l2 + cfg.lambda3 * l3,
        grad: BTreeMap::new(),
    }
}

/// Full forward evaluation of one batch.
#[derive(Debug, Clone, Default)]
pub struct BatchLoss {
    pub breakdown: LossBreakdown,
    pub margins: [MarginLoss; 3],
}

impl BatchLoss {
    /// Which pairs every margin term selected and whether it was active; two
    /// evaluations with equal signatures lie on the same smooth piece of the loss.
    pub fn selection_signature(&self) -> Vec<(PairKey, PairKey, bool)> {
        self.margins
            .iter()
            .flat_map(|m| m.terms.iter().map(|t| (t.positive, t.negative, t.is_active())))
            .collect()
    }

    pub fn active_hinges(&self) -> usize {
        self.margins.iter().map(|m| m.active_terms()).sum()
    }
}

/// Weights of `[L0, L1, L2, L3]` in the objective being differentiated.
pub fn objective_weights(cfg: &LossConfig) -> [f64; 4] {
    [1.0, cfg.lambda1, cfg.lambda2, cfg.lambda3]
}

/// Evaluates all four terms on `batch` and the gradient of `Σ wᵢ Lᵢ` with respect to
/// the logits of every pair. `outputs` must hold a distribution for every pair in
/// `batch.pairs()`.
pub fn loss_gradient(
    batch: &Batch,
    outputs: &HashMap<PairKey, PredicateDistribution>,
    cfg: &LossConfig,
    null_index: PredicateId,
    weights: [f64; 4],
) -> BatchLoss {
    let probs = |pair: PairKey| -> &[f64] {
        outputs
            .get(&pair)
            .unwrap_or_else(|| panic!("no model output for pair {pair:?}"))
            .probs()
    };
    let affinity = |pair: PairKey| affinity_with_null(probs(pair), null_index);

    let mut grad: BTreeMap<PairKey, Vec<f64>> = BTreeMap::new();
    let mut l0 = 0.0;
    if !batch.l0.is_empty() {
        let n = batch.l0.len() as f64;
        for s in &batch.l0 {
            let key = (s.subject, s.object);
            let p = probs(key);
            l0 += -p[s.target].max(PROB_FLOOR).ln() / n;
            if weights[0] != 0.0 && p[s.target] > PROB_FLOOR {
                let g = grad.entry(key).or_insert_with(|| vec![0.0; p.len()]);
                for (k, (gk, pk)) in g.iter_mut().zip(p).enumerate() {
                    let onehot = if k == s.target { 1.0 } else { 0.0 };
                    *gk += weights[0] * (pk - onehot) / n;
                }
            }
        }
    }

    let m1 = l1_class_agnostic(&batch.agnostic, &affinity, cfg.alpha1);
    let m2 = l2_entity_class_aware(&batch.entity_class, &affinity, cfg.alpha2);
    let m3 = l3_predicate_class_aware(&batch.predicate_class, &affinity, cfg.alpha3);

    for (m, w) in [(&m1, weights[1]), (&m2, weights[2]), (&m3, weights[3])] {
        if w == 0.0 {
            continue;
        }
        for (&pair, &g_phi) in &m.affinity_grad {
            let p = probs(pair);
            let g = grad.entry(pair).or_insert_with(|| vec![0.0; p.len()]);
            // dΦ/dz_k = p_null p_k - p_null [k = null]
            let p_null = p[null_index];
            for (k, (gk, pk)) in g.iter_mut().zip(p).enumerate() {
                let mut d = p_null * pk;
                if k == null_index {
                    d -= p_null;
                }
                *gk += w * g_phi * d;
            }
        }
    }

    let total = weights[0] * l0 + weights[1] * m1.value + weights[2] * m2.value + weights[3] * m3.value;
    BatchLoss {
        breakdown: LossBreakdown {
            l0,
            l1: m1.value,
            l2: m2.value,
            l3: m3.value,
            total,
            grad,
        },
        margins: [m1, m2, m3],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{Grouping, L0Sample};
    use approx::assert_abs_diff_eq;

    fn sets(anchor: EntityId, role: AnchorRole, pos: &[EntityId], neg: &[EntityId]) -> ContrastSets {
        ContrastSets {
            anchor,
            role,
            positives: pos.to_vec(),
            negatives: neg.to_vec(),
            grouping: Grouping::None,
        }
    }

    fn table(entries: &[(PairKey, f64)]) -> impl Fn(PairKey) -> f64 + '_ {
        move |k| entries.iter().find(|e| e.0 == k).unwrap().1
    }

    #[test]
    fn cross_entropy_examples() {
        let d = PredicateDistribution::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(cross_entropy(&d, 0), 0.0);
        assert_abs_diff_eq!(cross_entropy(&d, 1), -(1e-12f64).ln());
        let u = PredicateDistribution::new(vec![1.0 / 3.0; 3]).unwrap();
        assert_abs_diff_eq!(cross_entropy(&u, 2), 3f64.ln(), epsilon = 1e-12);
        let h = PredicateDistribution::new(vec![0.5, 0.25, 0.25]).unwrap();
        assert_abs_diff_eq!(cross_entropy(&h, 0), 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(hinge_margin(0.9, 0.3, 0.2), 0.0);
        assert_abs_diff_eq!(hinge_margin(0.4, 0.35, 0.2), 0.15, epsilon = 1e-12);
        assert_abs_diff_eq!(hinge_margin(0.5, 0.5, 0.2), 0.2, epsilon = 1e-12);
    }

    #[test]
    fn l1_examples() {
        let aff = [((1, 2), 0.8), ((1, 3), 0.1), ((1, 4), 0.6)];
        let s = [sets(1, AnchorRole::Subject, &[2], &[3, 4])];
        let m = l1_class_agnostic(&s, &table(&aff), 0.2);
        assert_abs_diff_eq!(m.value, 0.0, epsilon = 1e-15);
        assert!(m.affinity_grad.is_empty());

        let aff = [((1, 2), 0.8), ((1, 3), 0.75)];
        let s = [sets(1, AnchorRole::Subject, &[2], &[3])];
        let m = l1_class_agnostic(&s, &table(&aff), 0.2);
        assert_abs_diff_eq!(m.value, 0.15, epsilon = 1e-12);
        assert_eq!(m.affinity_grad[&(1, 2)], -1.0);
        assert_eq!(m.affinity_grad[&(1, 3)], 1.0);
    }

    #[test]
    fn l1_averages_roles_separately() {
        // two subject anchors (hinges 0.15, 0.05) and one object anchor (hinge 0.2)
        let aff = [((1, 2), 0.8), ((1, 3), 0.75), ((4, 2), 0.5), ((4, 3), 0.35), ((5, 6), 0.5), ((7, 6), 0.5)];
        let s = [
            sets(1, AnchorRole::Subject, &[2], &[3]),
            sets(4, AnchorRole::Subject, &[2], &[3]),
            sets(6, AnchorRole::Object, &[5], &[7]),
        ];
        let m = l1_class_agnostic(&s, &table(&aff), 0.2);
        assert_abs_diff_eq!(m.value, (0.15 + 0.05) / 2.0 + 0.2, epsilon = 1e-12);
    }

    #[test]
    fn l2_inner_average_over_class_groups() {
        let groups = [AnchorGroups {
            anchor: 1,
            role: AnchorRole::Subject,
            groups: vec![sets(1, AnchorRole::Subject, &[2, 3], &[4]), sets(1, AnchorRole::Subject, &[5], &[6])],
        }];
        let aff = [((1, 2), 0.9), ((1, 3), 0.6), ((1, 4), 0.5), ((1, 5), 0.9), ((1, 6), 0.85)];
        let m = l2_entity_class_aware(&groups, &table(&aff), 0.2);
        // group 1: min pos 0.6 vs 0.5 -> 0.1; group 2: 0.9 vs 0.85 -> 0.15
        assert_abs_diff_eq!(m.value, (0.1 + 0.15) / 2.0, epsilon = 1e-12);
        assert_eq!(m.terms.len(), 2);
        assert!(m.terms.iter().all(|t| t.weight == 0.5));
        // the selection is the argmin positive only
        assert!(!m.affinity_grad.contains_key(&(1, 2)));
        assert_eq!(m.affinity_grad[&(1, 3)], -0.5);

        let single = [AnchorGroups {
            anchor: 1,
            role: AnchorRole::Subject,
            groups: vec![sets(1, AnchorRole::Subject, &[5], &[6])],
        }];
        assert_abs_diff_eq!(l2_entity_class_aware(&single, &table(&aff), 0.2).value, 0.15, epsilon = 1e-12);
        assert_eq!(l2_entity_class_aware(&[], &table(&aff), 0.2).value, 0.0);
    }

    #[test]
    fn l3_mistaken_pair_example() {
        let groups = [AnchorGroups {
            anchor: 1,
            role: AnchorRole::Subject,
            groups: vec![sets(1, AnchorRole::Subject, &[2], &[3])],
        }];
        let aff = [((1, 2), 0.6), ((1, 3), 0.7)];
        let m = l3_predicate_class_aware(&groups, &table(&aff), 0.2);
        assert_abs_diff_eq!(m.value, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn ties_select_lower_id() {
        let aff = [((1, 2), 0.5), ((1, 3), 0.5), ((1, 4), 0.4), ((1, 5), 0.4)];
        let s = [sets(1, AnchorRole::Subject, &[3, 2], &[5, 4])];
        let m = l1_class_agnostic(&s, &table(&aff), 0.2);
        assert_eq!(m.terms[0].positive, (1, 2));
        assert_eq!(m.terms[0].negative, (1, 4));
    }

    #[test]
    fn hinge_at_kink_has_zero_gradient() {
        let aff = [((1, 2), 0.75), ((1, 3), 0.5)];
        let s = [sets(1, AnchorRole::Subject, &[2], &[3])];
        let m = l1_class_agnostic(&s, &table(&aff), 0.25);
        assert_eq!(m.value, 0.0);
        assert!(m.affinity_grad.is_empty());
    }

    #[test]
    fn total_loss_examples() {
        let zero = LossConfig::default().with_lambdas(0.0, 0.0, 0.0);
        assert_eq!(total_loss(0.7, 0.3, 0.2, 0.1, &zero).total, 0.7);
        let b = total_loss(1.0, 0.2, 0.4, 0.6, &LossConfig::default());
        assert_abs_diff_eq!(b.total, 1.46, epsilon = 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, &LossConfig::default()).total, 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig::default().with_margin(0.0).validate().is_err());
        assert!(LossConfig::default().with_margin(1.5).validate().is_err());
        assert!(LossConfig::default().with_lambdas(-1.0, 0.0, 0.0).validate().is_err());
    }

    #[test]
    fn affinity_gradient_through_null_logit() {
        // one active l1 term, only positive pair gets dL/dΦ = -1
        let null = 2;
        let mut outputs = HashMap::new();
        let pos = PredicateDistribution::from_logits(&[0.3, -0.2, 0.9]);
        let neg = PredicateDistribution::from_logits(&[0.1, 0.0, -0.4]);
        outputs.insert((1, 2), pos.clone());
        outputs.insert((1, 3), neg);
        let batch = Batch {
            agnostic: vec![sets(1, AnchorRole::Subject, &[2], &[3])],
            ..Default::default()
        };
        let cfg = LossConfig::default().with_margin(1.0);
        let out = loss_gradient(&batch, &outputs, &cfg, null, [0.0, 1.0, 0.0, 0.0]);
        let g = &out.breakdown.grad[&(1, 2)];
        let p = pos.probs();
        // dL/dz_null = -dΦ/dz_null = -(-p_null (1 - p_null)) ... times dL/dΦ = -1
        let dphi_dnull = -p[null] * (1.0 - p[null]);
        assert_abs_diff_eq!(g[null], -dphi_dnull, epsilon = 1e-15);
        let dpnull_dz0 = -p[null] * p[0];
        assert_abs_diff_eq!(g[0], dpnull_dz0, epsilon = 1e-15);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut outputs = HashMap::new();
        let d = PredicateDistribution::from_logits(&[0.5, 0.1, -0.3]);
        outputs.insert((1, 2), d.clone());
        let batch = Batch {
            l0: vec![L0Sample {
                subject: 1,
                object: 2,
                target: 1,
            }],
            ..Default::default()
        };
        let out = loss_gradient(&batch, &outputs, &LossConfig::default(), 2, [1.0, 1.0, 0.5, 0.1]);
        let g = &out.breakdown.grad[&(1, 2)];
        assert_abs_diff_eq!(g[0], d.probs()[0], epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], d.probs()[1] - 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out.breakdown.l0, cross_entropy(&d, 1), epsilon = 1e-15);
    }
}
