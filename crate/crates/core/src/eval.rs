//! Triplet ranking, Recall@k, per-class AP for relationship and phrase matching,
//! weighted mAP and the combined challenge score.

use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{enclosing_box, iou, BBox};
use crate::model::{FrequencyTable, ModelParams, PairInputBuilder};
use crate::sampler::{PairKey, PredicateDistribution};
use crate::scene::{ClassId, EntityId, EntityInstance, PredicateId, PredicateVocabulary, SceneGraph};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub id: EntityId,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class: ClassId,
    pub conf: f64,
}

impl From<&EntityInstance> for Detection {
    fn from(e: &EntityInstance) -> Self {
        Self {
            id: e.id,
            bbox: e.bbox,
            class: e.class,
            conf: e.conf,
        }
    }
}

/// One scored `<subject, predicate, object>` output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub image: u64,
    pub subject: Detection,
    pub object: Detection,
    pub predicate: PredicateId,
    pub p_pred: f64,
    pub score: f64,
}

impl RankedPrediction {
    pub fn new(image: u64, subject: Detection, object: Detection, predicate: PredicateId, p_pred: f64) -> Self {
        Self {
            image,
            subject,
            object,
            predicate,
            p_pred,
            score: subject.conf * p_pred * object.conf,
        }
    }

    pub fn phrase_box(&self) -> BBox {
        enclosing_box(&self.subject.bbox, &self.object.bbox)
    }
}

/// Ground-truth triplet with the boxes and classes its matches are judged against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtTriplet {
    pub subject: BBox,
    pub subject_class: ClassId,
    pub object: BBox,
    pub object_class: ClassId,
    pub predicate: PredicateId,
}

impl GtTriplet {
    pub fn phrase_box(&self) -> BBox {
        enclosing_box(&self.subject, &self.object)
    }
}

pub fn gt_triplets(scene: &SceneGraph) -> Vec<GtTriplet> {
    let index = scene.id_index();
    scene
        .pairs
        .iter()
        .map(|r| {
            let s = &scene.entities[index[&r.subject]];
            let o = &scene.entities[index[&r.object]];
            GtTriplet {
                subject: s.bbox,
                subject_class: s.class,
                object: o.bbox,
                object_class: o.class,
                predicate: r.predicate,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Subject and object boxes each overlap their ground truth.
    Rel,
    /// The enclosing phrase boxes overlap.
    Phr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub k: usize,
    /// Per-predicate weights for wmAP indexed by predicate id; ground-truth
    /// frequencies of the evaluated set when absent.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            k: 50,
            class_weights: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_thresh > 0.0 && self.iou_thresh <= 1.0) {
            return Err(Error::InvalidConfig(format!("iou_thresh {} outside (0, 1]", self.iou_thresh)));
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(Error::InvalidConfig("class weights must be nonnegative".into()));
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidConfig(format!("class weights sum to {sum}, expected 1")));
            }
        }
        Ok(())
    }
}

/// Ranking order: score descending, then image, subject id, object id, predicate.
pub fn compare_predictions(a: &RankedPrediction, b: &RankedPrediction) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.image.cmp(&b.image))
        .then(a.subject.id.cmp(&b.subject.id))
        .then(a.object.id.cmp(&b.object.id))
        .then(a.predicate.cmp(&b.predicate))
}

/// All ordered entity pairs of `scene`, each with its most likely non-null predicate,
/// sorted by score. `limit` truncates the ranked list.
pub fn rank_triplets(
    scene: &SceneGraph,
    image: u64,
    outputs: &HashMap<PairKey, PredicateDistribution>,
    null_index: PredicateId,
    limit: Option<usize>,
) -> Vec<RankedPrediction> {
    let mut out = Vec::with_capacity(scene.entities.len() * scene.entities.len().saturating_sub(1));
    for s in &scene.entities {
        for o in &scene.entities {
            if s.id == o.id {
                continue;
            }
            let Some(d) = outputs.get(&(s.id, o.id)) else {
                continue;
            };
            let pred = d.argmax_non_null(null_index);
            out.push(RankedPrediction::new(image, s.into(), o.into(), pred, d.probs()[pred]));
        }
    }
    out.sort_by(compare_predictions);
    if let Some(l) = limit {
        out.truncate(l);
    }
    out
}

/// Model outputs for every ordered pair of `scene`.
pub fn predict_scene(
    params: &ModelParams,
    table: &FrequencyTable,
    scene: &SceneGraph,
) -> Result<HashMap<PairKey, PredicateDistribution>> {
    let builder = PairInputBuilder::new(scene, &params.config)?;
    let mut out = HashMap::with_capacity(scene.entities.len() * scene.entities.len());
    for s in &scene.entities {
        for o in &scene.entities {
            if s.id != o.id {
                let input = builder.build(s, o)?;
                out.insert((s.id, o.id), params.forward(table, &input).p_pred);
            }
        }
    }
    Ok(out)
}

/// Overlap of a prediction with a ground-truth triplet under `mode`, or `None` when
/// labels differ or the overlap is below threshold.
pub fn match_overlap(p: &RankedPrediction, g: &GtTriplet, mode: MatchMode, iou_thresh: f64) -> Option<f64> {
    if p.predicate != g.predicate || p.subject.class != g.subject_class || p.object.class != g.object_class {
        return None;
    }
    let ov = match mode {
        MatchMode::Rel => iou(&p.subject.bbox, &g.subject).min(iou(&p.object.bbox, &g.object)),
        MatchMode::Phr => iou(&p.phrase_box(), &g.phrase_box()),
    };
    (ov >= iou_thresh).then_some(ov)
}

/// Greedy one-to-one assignment in the given order; each prediction takes the
/// best-overlapping unmatched ground truth (lowest index on ties).
fn greedy_match(preds: &[&RankedPrediction], gts: &[GtTriplet], mode: MatchMode, iou_thresh: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    preds
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] {
                    continue;
                }
                if let Some(ov) = match_overlap(p, g, mode, iou_thresh) {
                    if best.is_none_or(|(_, b)| ov > b) {
                        best = Some((j, ov));
                    }
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Fraction of ground-truth triplets, pooled over images, matched by each image's
/// top-`k` predictions. Zero when there is no ground truth.
pub fn recall_at_k(preds: &[Vec<RankedPrediction>], gts: &[Vec<GtTriplet>], cfg: &EvalConfig) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        let mut sorted: Vec<&RankedPrediction> = p.iter().collect();
        sorted.sort_by(|a, b| compare_predictions(a, b));
        sorted.truncate(cfg.k);
        hit += greedy_match(&sorted, g, MatchMode::Rel, cfg.iou_thresh)
            .into_iter()
            .filter(|&m| m)
            .count();
        total += g.len();
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// All-point AP of the PR curve under the precision envelope.
pub fn ap_from_outcomes(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    tp.iter()
        .zip(&precision)
        .filter(|(&t, _)| t)
        .map(|(_, &p)| p / n_gt as f64)
        .sum()
}

/// AP of one predicate class over all images; `None` when the class has no ground truth.
pub fn average_precision(
    preds: &[Vec<RankedPrediction>],
    gts: &[Vec<GtTriplet>],
    predicate: PredicateId,
    mode: MatchMode,
    cfg: &EvalConfig,
) -> Option<f64> {
    let n_gt: usize = gts.iter().map(|g| g.iter().filter(|t| t.predicate == predicate).count()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, &RankedPrediction)> = preds
        .iter()
        .enumerate()
        .flat_map(|(i, p)| p.iter().filter(|r| r.predicate == predicate).map(move |r| (i, r)))
        .collect();
    ranked.sort_by(|(ia, a), (ib, b)| {
        b.score
            .total_cmp(&a.score)
            .then(ia.cmp(ib))
            .then(compare_predictions(a, b))
    });
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let tp: Vec<bool> = ranked
        .iter()
        .map(|&(img, p)| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts[img].iter().enumerate() {
                if used[img][j] {
                    continue;
                }
                if let Some(ov) = match_overlap(p, g, mode, cfg.iou_thresh) {
                    if best.is_none_or(|(_, b)| ov > b) {
                        best = Some((j, ov));
                    }
                }
            }
            best.map(|(j, _)| used[img][j] = true).is_some()
        })
        .collect();
    Some(ap_from_outcomes(&tp, n_gt))
}

/// `Σ w_c AP_c` over classes with defined AP, weights renormalized over those classes.
pub fn weighted_map(aps: &[Option<f64>], weights: &[f64]) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (ap, &w) in aps.iter().zip(weights) {
        if let Some(a) = ap {
            num += w * a;
            den += w;
        }
    }
    (den > 0.0).then(|| num / den)
}

pub fn mean_ap(aps: &[Option<f64>]) -> Option<f64> {
    weighted_map(aps, &vec![1.0; aps.len()])
}

pub fn challenge_score(r_at_k: f64, map_rel: f64, map_phr: f64) -> f64 {
    0.2 * r_at_k + 0.4 * map_rel + 0.4 * map_phr
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub iou_thresh: f64,
    pub n_images: usize,
    pub n_gt: usize,
    pub recall_at_k: f64,
    /// Indexed by predicate id; `None` for the null class and for classes without ground truth.
    pub ap_rel: Vec<Option<f64>>,
    pub ap_phr: Vec<Option<f64>>,
    pub class_weights: Vec<f64>,
    pub map_rel: f64,
    pub map_phr: f64,
    pub wmap_rel: f64,
    pub wmap_phr: f64,
    pub score: f64,
    pub score_wtd: f64,
}

/// Ground-truth share of every non-null predicate in `gts`.
pub fn frequency_weights(gts: &[Vec<GtTriplet>], n_predicates: usize, null_index: PredicateId) -> Vec<f64> {
    let mut w = vec![0.0; n_predicates];
    for t in gts.iter().flatten() {
        if t.predicate != null_index {
            w[t.predicate] += 1.0;
        }
    }
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter_mut().for_each(|v| *v /= total);
    }
    w
}

pub fn evaluate_predictions(
    preds: &[Vec<RankedPrediction>],
    gts: &[Vec<GtTriplet>],
    vocab: &PredicateVocabulary,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    if preds.len() != gts.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} prediction lists for {} images",
            preds.len(),
            gts.len()
        )));
    }
    let n = vocab.len();
    let null = vocab.null_index();
    let weights = match &cfg.class_weights {
        Some(w) if w.len() != n => {
            return Err(Error::DimensionMismatch(format!("{} class weights for {n} predicates", w.len())))
        }
        Some(w) => w.clone(),
        None => frequency_weights(gts, n, null),
    };
    let per_class = |mode| -> Vec<Option<f64>> {
        (0..n)
            .map(|p| if p == null { None } else { average_precision(preds, gts, p, mode, cfg) })
            .collect()
    };
    let ap_rel = per_class(MatchMode::Rel);
    let ap_phr = per_class(MatchMode::Phr);
    let recall = recall_at_k(preds, gts, cfg);
    let map_rel = mean_ap(&ap_rel).unwrap_or(0.0);
    let map_phr = mean_ap(&ap_phr).unwrap_or(0.0);
    let wmap_rel = weighted_map(&ap_rel, &weights).unwrap_or(0.0);
    let wmap_phr = weighted_map(&ap_phr, &weights).unwrap_or(0.0);
    Ok(EvalReport {
        k: cfg.k,
        iou_thresh: cfg.iou_thresh,
        n_images: gts.len(),
        n_gt: gts.iter().map(Vec::len).sum(),
        recall_at_k: recall,
        ap_rel,
        ap_phr,
        class_weights: weights,
        map_rel,
        map_phr,
        wmap_rel,
        wmap_phr,
        score: challenge_score(recall, map_rel, map_phr),
        score_wtd: challenge_score(recall, wmap_rel, wmap_phr),
    })
}

/// Ranks every scene with the model and evaluates against the scenes' own annotations.
/// Images are numbered by `image_id` when present and by position otherwise.
pub fn evaluate_model(
    params: &ModelParams,
    table: &FrequencyTable,
    vocab: &PredicateVocabulary,
    scenes: &[SceneGraph],
    cfg: &EvalConfig,
) -> Result<(EvalReport, Vec<Vec<RankedPrediction>>)> {
    let preds = scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| {
            let outputs = predict_scene(params, table, scene)?;
            let image = scene.image_id.unwrap_or(i as u64);
            Ok(rank_triplets(scene, image, &outputs, vocab.null_index(), None))
        })
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<Vec<GtTriplet>> = scenes.iter().map(gt_triplets).collect();
    let report = evaluate_predictions(&preds, &gts, vocab, cfg)?;
    Ok((report, preds))
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization is infallible")
    }

    /// Header and single row: `seed, config_hash, R@k, wmAP_rel, wmAP_phr, score_wtd,
    /// mAP_rel, mAP_phr, score`, then per-class AP columns (empty when undefined).
    pub fn to_csv(&self, vocab: &PredicateVocabulary, seed: u64, config_hash: &str) -> String {
        let mut header: Vec<String> = ["seed", "config_hash"].iter().map(|s| s.to_string()).collect();
        header.push(format!("R@{}", self.k));
        header.extend(
            ["wmAP_rel", "wmAP_phr", "score_wtd", "mAP_rel", "mAP_phr", "score"]
                .iter()
                .map(|s| s.to_string()),
        );
        let mut row = vec![seed.to_string(), config_hash.to_string()];
        row.extend(
            [
                self.recall_at_k,
                self.wmap_rel,
                self.wmap_phr,
                self.score_wtd,
                self.map_rel,
                self.map_phr,
                self.score,
            ]
            .iter()
            .map(|v| v.to_string()),
        );
        let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        for p in vocab.non_null() {
            header.push(format!("AP_rel_{}", vocab.name(p)));
            header.push(format!("AP_phr_{}", vocab.name(p)));
            row.push(fmt(self.ap_rel[p]));
            row.push(fmt(self.ap_phr[p]));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&header).expect("in-memory csv");
        w.write_record(&row).expect("in-memory csv");
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }
}
