//! Scene-graph data model, entity matching, and the JSON Lines scene format.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, ImageSize};

pub type EntityId = u64;
pub type ClassId = usize;
pub type PredicateId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityInstance {
    pub id: EntityId,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(rename = "class")]
    pub class: ClassId,
    pub conf: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub appearance: Option<Vec<f64>>,
}

impl EntityInstance {
    pub fn new(id: EntityId, bbox: BBox, class: ClassId, conf: f64) -> Self {
        Self {
            id,
            bbox,
            class,
            conf,
            appearance: None,
        }
    }

    pub fn with_appearance(mut self, appearance: Vec<f64>) -> Self {
        self.appearance = Some(appearance);
        self
    }
}

/// An annotated `<subject, predicate, object>` triplet, stored as `[sid, oid, pred]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(EntityId, EntityId, PredicateId)", into = "(EntityId, EntityId, PredicateId)")]
pub struct Relation {
    pub subject: EntityId,
    pub object: EntityId,
    pub predicate: PredicateId,
}

impl From<(EntityId, EntityId, PredicateId)> for Relation {
    fn from((subject, object, predicate): (EntityId, EntityId, PredicateId)) -> Self {
        Self {
            subject,
            object,
            predicate,
        }
    }
}

impl From<Relation> for (EntityId, EntityId, PredicateId) {
    fn from(r: Relation) -> Self {
        (r.subject, r.object, r.predicate)
    }
}

/// Predicate-region appearance for one ordered pair, stored as `[sid, oid, [..]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "(EntityId, EntityId, Vec<f64>)", into = "(EntityId, EntityId, Vec<f64>)")]
pub struct PairAppearance {
    pub subject: EntityId,
    pub object: EntityId,
    pub vector: Vec<f64>,
}

impl From<(EntityId, EntityId, Vec<f64>)> for PairAppearance {
    fn from((subject, object, vector): (EntityId, EntityId, Vec<f64>)) -> Self {
        Self {
            subject,
            object,
            vector,
        }
    }
}

impl From<PairAppearance> for (EntityId, EntityId, Vec<f64>) {
    fn from(p: PairAppearance) -> Self {
        (p.subject, p.object, p.vector)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    EntityConfusion,
    ProximalPairs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScene")]
pub struct SceneGraph {
    pub image_size: ImageSize,
    pub entities: Vec<EntityInstance>,
    pub pairs: Vec<Relation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<SceneKind>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pair_appearance: Vec<PairAppearance>,
}

#[derive(Deserialize)]
struct RawScene {
    image_size: ImageSize,
    entities: Vec<EntityInstance>,
    pairs: Vec<Relation>,
    #[serde(default)]
    image_id: Option<u64>,
    #[serde(default)]
    kind: Option<SceneKind>,
    #[serde(default)]
    pair_appearance: Vec<PairAppearance>,
}

impl TryFrom<RawScene> for SceneGraph {
    type Error = Error;

    fn try_from(r: RawScene) -> Result<Self> {
        let scene = SceneGraph {
            image_size: r.image_size,
            entities: r.entities,
            pairs: r.pairs,
            image_id: r.image_id,
            kind: r.kind,
            pair_appearance: r.pair_appearance,
        };
        scene.validate()?;
        Ok(scene)
    }
}

impl SceneGraph {
    pub fn new(image_size: ImageSize, entities: Vec<EntityInstance>, pairs: Vec<Relation>) -> Result<Self> {
        let scene = Self {
            image_size,
            entities,
            pairs,
            image_id: None,
            kind: None,
            pair_appearance: Vec::new(),
        };
        scene.validate()?;
        Ok(scene)
    }

    /// Structural invariants that do not depend on a vocabulary.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::with_capacity(self.entities.len());
        let mut app_len = None;
        for e in &self.entities {
            if !ids.insert(e.id) {
                return Err(Error::InvalidScene(format!("duplicate entity id {}", e.id)));
            }
            if !(0.0..=1.0).contains(&e.conf) {
                return Err(Error::InvalidScene(format!(
                    "entity {} confidence {} outside [0, 1]",
                    e.id, e.conf
                )));
            }
            if let Some(a) = &e.appearance {
                if a.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidScene(format!("entity {} appearance not finite", e.id)));
                }
                match app_len {
                    None => app_len = Some(a.len()),
                    Some(n) if n != a.len() => {
                        return Err(Error::InvalidScene("appearance vectors differ in length".into()))
                    }
                    _ => {}
                }
            }
        }
        let mut seen = HashSet::with_capacity(self.pairs.len());
        for r in &self.pairs {
            if !ids.contains(&r.subject) || !ids.contains(&r.object) {
                return Err(Error::InvalidScene(format!(
                    "relation ({}, {}, {}) references a missing entity",
                    r.subject, r.object, r.predicate
                )));
            }
            if r.subject == r.object {
                return Err(Error::InvalidScene(format!("self relation on entity {}", r.subject)));
            }
            if !seen.insert(*r) {
                return Err(Error::InvalidScene(format!(
                    "duplicate relation ({}, {}, {})",
                    r.subject, r.object, r.predicate
                )));
            }
        }
        for p in &self.pair_appearance {
            if !ids.contains(&p.subject) || !ids.contains(&p.object) || p.subject == p.object {
                return Err(Error::InvalidScene(format!(
                    "pair appearance ({}, {}) references an invalid pair",
                    p.subject, p.object
                )));
            }
            if p.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidScene("pair appearance not finite".into()));
            }
        }
        Ok(())
    }

    /// Checks entity classes and predicates against vocabulary sizes.
    pub fn validate_vocab(&self, n_entity_classes: usize, vocab: &PredicateVocabulary) -> Result<()> {
        if let Some(e) = self.entities.iter().find(|e| e.class >= n_entity_classes) {
            return Err(Error::InvalidScene(format!(
                "entity {} class {} outside vocabulary of {}",
                e.id, e.class, n_entity_classes
            )));
        }
        for r in &self.pairs {
            if r.predicate >= vocab.len() || r.predicate == vocab.null_index() {
                return Err(Error::InvalidScene(format!(
                    "relation predicate {} is not a valid non-null predicate",
                    r.predicate
                )));
            }
        }
        Ok(())
    }

    pub fn entity(&self, id: EntityId) -> Option<&EntityInstance> {
        self.entities.iter().find(|e| e.id == id)
    }

    pub fn id_index(&self) -> HashMap<EntityId, usize> {
        self.entities.iter().enumerate().map(|(i, e)| (e.id, i)).collect()
    }

    pub fn has_appearance(&self) -> bool {
        !self.entities.is_empty() && self.entities.iter().all(|e| e.appearance.is_some())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("scene serialization is infallible")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawVocab")]
pub struct PredicateVocabulary {
    names: Vec<String>,
    null_index: PredicateId,
}

#[derive(Deserialize)]
struct RawVocab {
    names: Vec<String>,
    null_index: PredicateId,
}

impl TryFrom<RawVocab> for PredicateVocabulary {
    type Error = Error;

    fn try_from(r: RawVocab) -> Result<Self> {
        PredicateVocabulary::new(r.names, r.null_index)
    }
}

impl PredicateVocabulary {
    pub fn new(names: Vec<String>, null_index: PredicateId) -> Result<Self> {
        if null_index >= names.len() {
            return Err(Error::InvalidConfig(format!(
                "null index {null_index} outside vocabulary of {}",
                names.len()
            )));
        }
        let unique: HashSet<_> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::InvalidConfig("predicate names must be unique".into()));
        }
        Ok(Self { names, null_index })
    }

    /// `n` generic predicates `pred0..` followed by the null class as the last index.
    pub fn with_null_last(n: usize) -> Self {
        let mut names: Vec<String> = (0..n).map(|i| format!("pred{i}")).collect();
        names.push("no_relationship".into());
        Self {
            null_index: n,
            names,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn null_index(&self) -> PredicateId {
        self.null_index
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, p: PredicateId) -> &str {
        &self.names[p]
    }

    /// All predicate indices except the null class.
    pub fn non_null(&self) -> impl Iterator<Item = PredicateId> + '_ {
        (0..self.names.len()).filter(move |&p| p != self.null_index)
    }
}

/// Greedy same-class matching of detections to ground truth by descending IoU.
///
/// Returns `(detection id, ground-truth id)` pairs; each side appears at most once.
/// Ties break toward the lower detection id, then the lower ground-truth id.
pub fn match_entities(
    detections: &[EntityInstance],
    ground_truth: &[EntityInstance],
    iou_thresh: f64,
) -> Vec<(EntityId, EntityId)> {
    let mut candidates = Vec::new();
    for d in detections {
        for g in ground_truth {
            if d.class != g.class {
                continue;
            }
            let ov = iou(&d.bbox, &g.bbox);
            if ov >= iou_thresh {
                candidates.push((ov, d.id, g.id));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_det = HashSet::new();
    let mut used_gt = HashSet::new();
    let mut out = Vec::new();
    for (_, d, g) in candidates {
        if used_det.contains(&d) || used_gt.contains(&g) {
            continue;
        }
        used_det.insert(d);
        used_gt.insert(g);
        out.push((d, g));
    }
    out.sort_unstable();
    out
}

pub fn read_scenes(path: &Path) -> Result<Vec<SceneGraph>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let scene = SceneGraph::from_json_line(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(scene);
    }
    Ok(out)
}

pub fn write_scenes(path: &Path, scenes: &[SceneGraph]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for s in scenes {
        writeln!(w, "{}", s.to_json_line())?;
    }
    w.flush()?;
    Ok(())
}
