//! Synthetic scenes with two controlled failure modes: several same-class instances
//! around one subject (only one is the partner), and interleaved subject-object pairs
//! sharing a predicate (the matching is hidden). Appearance carries the true pairing
//! only through a weak cue.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::hash_json;
use crate::error::{Error, Result};
use crate::geometry::{BBox, ImageSize};
use crate::rng::stream;
use crate::scene::{
    read_scenes, write_scenes, ClassId, EntityInstance, PairAppearance, PredicateId, PredicateVocabulary, Relation,
    SceneGraph, SceneKind,
};

const STREAM_PROTOTYPES: u64 = 1;
const STREAM_TABLE: u64 = 2;
const STREAM_SCENE: u64 = 3;

/// Appearance coordinate carrying the partner cue on entities.
pub const ENTITY_CUE_DIM: usize = 0;
/// Appearance coordinate carrying the pairing cue on phrase vectors.
pub const PAIR_CUE_DIM: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfusionMode {
    EntityInstance,
    ProximalPairs,
    /// Alternates by scene index, entity-instance scenes first.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_scenes: usize,
    pub n_entity_classes: usize,
    /// Non-null predicate classes.
    pub n_predicate_classes: usize,
    pub confusion_mode: ConfusionMode,
    pub n_duplicate_instances: usize,
    pub n_proximal_pairs: usize,
    /// Extra unrelated entities of other classes per scene.
    pub n_distractors: usize,
    /// Maximum per-axis offset in pixels applied to placed boxes.
    pub proximity_jitter: f64,
    pub cue_strength: f64,
    pub d_app: usize,
    pub prototype_scale: f64,
    /// Std of the appearance offset shared by every entity of a scene.
    pub scene_noise: f64,
    /// Std of independent per-entity appearance noise.
    pub instance_noise: f64,
    /// Std of independent noise on every phrase vector.
    pub pair_noise: f64,
    pub image_size: f64,
    pub box_min: f64,
    pub box_max: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_scenes: 100,
            n_entity_classes: 6,
            n_predicate_classes: 4,
            confusion_mode: ConfusionMode::Mixed,
            n_duplicate_instances: 3,
            n_proximal_pairs: 2,
            n_distractors: 1,
            proximity_jitter: 20.0,
            cue_strength: 0.3,
            d_app: 16,
            prototype_scale: 1.0,
            scene_noise: 1.0,
            instance_noise: 0.0,
            pair_noise: 0.1,
            image_size: 1000.0,
            box_min: 50.0,
            box_max: 200.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_scenes == 0 || self.n_entity_classes == 0 || self.n_predicate_classes == 0 {
            return bad("scene, entity class and predicate counts must be positive");
        }
        if self.n_duplicate_instances < 2 {
            return bad("n_duplicate_instances must be at least 2");
        }
        if self.n_proximal_pairs < 2 {
            return bad("n_proximal_pairs must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.cue_strength) {
            return bad("cue_strength must lie in [0, 1]");
        }
        if self.d_app <= PAIR_CUE_DIM {
            return bad("d_app must be at least 2");
        }
        for (name, v) in [
            ("proximity_jitter", self.proximity_jitter),
            ("prototype_scale", self.prototype_scale),
            ("scene_noise", self.scene_noise),
            ("instance_noise", self.instance_noise),
            ("pair_noise", self.pair_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be nonnegative")));
            }
        }
        if !(self.box_min > 0.0 && self.box_min <= self.box_max && 4.0 * self.box_max <= self.image_size) {
            return bad("need 0 < box_min <= box_max <= image_size / 4");
        }
        Ok(())
    }

    pub fn vocab(&self) -> PredicateVocabulary {
        PredicateVocabulary::with_null_last(self.n_predicate_classes)
    }

    pub fn kind_of(&self, index: usize) -> SceneKind {
        match self.confusion_mode {
            ConfusionMode::EntityInstance => SceneKind::EntityConfusion,
            ConfusionMode::ProximalPairs => SceneKind::ProximalPairs,
            ConfusionMode::Mixed if index.is_multiple_of(2) => SceneKind::EntityConfusion,
            ConfusionMode::Mixed => SceneKind::ProximalPairs,
        }
    }

    /// Contiguous train/val/test sizes: floor 70% and 15%, remainder to test.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let train = self.n_scenes * 70 / 100;
        let val = self.n_scenes * 15 / 100;
        (train, val, self.n_scenes - train - val)
    }
}

/// Dataset-wide state drawn once from the seed: class prototypes and the predicate
/// assigned to each ordered class pair.
#[derive(Debug, Clone)]
pub struct SceneGenerator {
    cfg: GenConfig,
    prototypes: Vec<Vec<f64>>,
    predicate_table: Vec<PredicateId>,
}

impl SceneGenerator {
    pub fn new(cfg: &GenConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(cfg.seed, &[STREAM_PROTOTYPES]);
        let prototypes = (0..cfg.n_entity_classes)
            .map(|_| {
                (0..cfg.d_app)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        cfg.prototype_scale * z
                    })
                    .collect::<Vec<f64>>()
            })
            .collect();
        let mut rng = stream(cfg.seed, &[STREAM_TABLE]);
        let predicate_table = (0..cfg.n_entity_classes * cfg.n_entity_classes)
            .map(|_| rng.random_range(0..cfg.n_predicate_classes))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            prototypes,
            predicate_table,
        })
    }

    pub fn predicate_for(&self, subject: ClassId, object: ClassId) -> PredicateId {
        self.predicate_table[subject * self.cfg.n_entity_classes + object]
    }

    pub fn prototype(&self, class: ClassId) -> &[f64] {
        &self.prototypes[class]
    }

    fn two_classes<R: Rng + ?Sized>(&self, rng: &mut R) -> (ClassId, ClassId) {
        let n = self.cfg.n_entity_classes;
        let s = rng.random_range(0..n);
        if n == 1 {
            return (s, s);
        }
        let o = (s + rng.random_range(1..n)) % n;
        (s, o)
    }

    fn box_size<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        (
            rng.random_range(self.cfg.box_min..=self.cfg.box_max),
            rng.random_range(self.cfg.box_min..=self.cfg.box_max),
        )
    }

    /// Box of size `(w, h)` centred near `(cx, cy)`, shifted to lie inside the image.
    fn place<R: Rng + ?Sized>(&self, rng: &mut R, cx: f64, cy: f64, (w, h): (f64, f64)) -> BBox {
        let j = self.cfg.proximity_jitter;
        let (dx, dy) = if j > 0.0 {
            (rng.random_range(-j..=j), rng.random_range(-j..=j))
        } else {
            (0.0, 0.0)
        };
        let size = self.cfg.image_size;
        let x = (cx + dx - 0.5 * w).clamp(0.0, size - w);
        let y = (cy + dy - 0.5 * h).clamp(0.0, size - h);
        BBox::new(x, y, w, h).expect("positive size")
    }

    fn centre<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let margin = 2.0 * self.cfg.box_max;
        let size = self.cfg.image_size;
        (rng.random_range(margin..=size - margin), rng.random_range(margin..=size - margin))
    }

    fn noise<R: Rng + ?Sized>(&self, rng: &mut R, std: f64) -> Vec<f64> {
        if std == 0.0 {
            return vec![0.0; self.cfg.d_app];
        }
        let n = Normal::new(0.0, std).expect("finite std");
        (0..self.cfg.d_app).map(|_| n.sample(rng)).collect()
    }

    fn appearance<R: Rng + ?Sized>(&self, rng: &mut R, class: ClassId, scene_offset: &[f64]) -> Vec<f64> {
        let inst = self.noise(rng, self.cfg.instance_noise);
        self.prototypes[class]
            .iter()
            .zip(scene_offset)
            .zip(inst)
            .map(|((p, s), i)| p + s + i)
            .collect()
    }

    fn conf<R: Rng + ?Sized>(rng: &mut R) -> f64 {
        rng.random_range(0.9..=1.0)
    }

    fn distractors<R: Rng + ?Sized>(&self, rng: &mut R, avoid: &[ClassId], first_id: u64, offset: &[f64]) -> Vec<EntityInstance> {
        let pool: Vec<ClassId> = (0..self.cfg.n_entity_classes).filter(|c| !avoid.contains(c)).collect();
        (0..self.cfg.n_distractors as u64)
            .map(|i| {
                let class = if pool.is_empty() {
                    rng.random_range(0..self.cfg.n_entity_classes)
                } else {
                    pool[rng.random_range(0..pool.len())]
                };
                let size = self.box_size(rng);
                let (cx, cy) = (
                    rng.random_range(0.0..self.cfg.image_size),
                    rng.random_range(0.0..self.cfg.image_size),
                );
                let bbox = self.place(rng, cx, cy, size);
                EntityInstance::new(first_id + i, bbox, class, Self::conf(rng))
                    .with_appearance(self.appearance(rng, class, offset))
            })
            .collect()
    }

    /// Phrase vectors for every ordered pair: mean of the two entity vectors plus noise,
    /// with the pairing cue added on related pairs.
    fn phrase_vectors<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        entities: &[EntityInstance],
        pairs: &[Relation],
    ) -> Vec<PairAppearance> {
        let mut out = Vec::with_capacity(entities.len() * entities.len());
        for s in entities {
            for o in entities {
                if s.id == o.id {
                    continue;
                }
                let (fs, fo) = (s.appearance.as_ref().expect("set above"), o.appearance.as_ref().expect("set above"));
                let noise = self.noise(rng, self.cfg.pair_noise);
                let mut v: Vec<f64> = fs.iter().zip(fo).zip(noise).map(|((a, b), n)| 0.5 * (a + b) + n).collect();
                if pairs.iter().any(|r| r.subject == s.id && r.object == o.id) {
                    v[PAIR_CUE_DIM] += self.cfg.cue_strength;
                }
                out.push((s.id, o.id, v).into());
            }
        }
        out
    }

    fn finish<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        entities: Vec<EntityInstance>,
        pairs: Vec<Relation>,
        kind: SceneKind,
    ) -> SceneGraph {
        let pair_appearance = self.phrase_vectors(rng, &entities, &pairs);
        let size = ImageSize::new(self.cfg.image_size, self.cfg.image_size).expect("validated size");
        let mut scene = SceneGraph::new(size, entities, pairs).expect("valid by construction");
        scene.kind = Some(kind);
        scene.pair_appearance = pair_appearance;
        scene
    }

    /// One subject surrounded by same-class instances, exactly one of which is its partner.
    pub fn entity_confusion_scene<R: Rng + ?Sized>(&self, rng: &mut R) -> SceneGraph {
        let cfg = &self.cfg;
        let (cs, co) = self.two_classes(rng);
        let offset = self.noise(rng, cfg.scene_noise);
        let (cx, cy) = self.centre(rng);
        let s_size = self.box_size(rng);
        let subject = EntityInstance::new(0, self.place(rng, cx, cy, s_size), cs, Self::conf(rng))
            .with_appearance(self.appearance(rng, cs, &offset));

        let n = cfg.n_duplicate_instances;
        let d_size = self.box_size(rng);
        let radius = 0.35 * (s_size.0 + s_size.1) + 0.15 * (d_size.0 + d_size.1);
        let theta0 = rng.random_range(0.0..std::f64::consts::TAU);
        let partner = rng.random_range(0..n);
        let template = self.appearance(rng, co, &offset);
        let mut entities = vec![subject];
        for j in 0..n {
            let a = theta0 + std::f64::consts::TAU * j as f64 / n as f64;
            let bbox = self.place(rng, cx + radius * a.cos(), cy + radius * a.sin(), d_size);
            let mut app = if cfg.instance_noise > 0.0 {
                self.appearance(rng, co, &offset)
            } else {
                template.clone()
            };
            if j == partner {
                app[ENTITY_CUE_DIM] += cfg.cue_strength;
            }
            entities.push(EntityInstance::new(1 + j as u64, bbox, co, Self::conf(rng)).with_appearance(app));
        }
        entities.extend(self.distractors(rng, &[cs, co], 1 + n as u64, &offset));
        let pairs = vec![(0, 1 + partner as u64, self.predicate_for(cs, co)).into()];
        self.finish(rng, entities, pairs, SceneKind::EntityConfusion)
    }

    /// `k` subjects and `k` objects on a ring, subjects halfway between objects, paired
    /// by a random permutation under one shared predicate.
    pub fn proximal_scene<R: Rng + ?Sized>(&self, rng: &mut R) -> SceneGraph {
        let cfg = &self.cfg;
        let k = cfg.n_proximal_pairs;
        let (cs, co) = self.two_classes(rng);
        let offset = self.noise(rng, cfg.scene_noise);
        let (cx, cy) = self.centre(rng);
        let s_size = self.box_size(rng);
        let o_size = self.box_size(rng);
        let radius = 0.5 * (s_size.0 + s_size.1 + o_size.0 + o_size.1) / 2.0;
        let theta0 = rng.random_range(0.0..std::f64::consts::TAU);
        let s_app = self.appearance(rng, cs, &offset);
        let o_app = self.appearance(rng, co, &offset);
        let step = std::f64::consts::TAU / k as f64;

        let mut entities = Vec::with_capacity(2 * k + cfg.n_distractors);
        for j in 0..k {
            let a = theta0 + step * (j as f64 + 0.5);
            let bbox = self.place(rng, cx + radius * a.cos(), cy + radius * a.sin(), s_size);
            let app = if cfg.instance_noise > 0.0 { self.appearance(rng, cs, &offset) } else { s_app.clone() };
            entities.push(EntityInstance::new(j as u64, bbox, cs, Self::conf(rng)).with_appearance(app));
        }
        for j in 0..k {
            let a = theta0 + step * j as f64;
            let bbox = self.place(rng, cx + radius * a.cos(), cy + radius * a.sin(), o_size);
            let app = if cfg.instance_noise > 0.0 { self.appearance(rng, co, &offset) } else { o_app.clone() };
            entities.push(EntityInstance::new((k + j) as u64, bbox, co, Self::conf(rng)).with_appearance(app));
        }
        let mut matching: Vec<usize> = (0..k).collect();
        matching.shuffle(rng);
        let pred = self.predicate_for(cs, co);
        let pairs = matching
            .iter()
            .enumerate()
            .map(|(s, &o)| (s as u64, (k + o) as u64, pred).into())
            .collect();
        entities.extend(self.distractors(rng, &[cs, co], 2 * k as u64, &offset));
        self.finish(rng, entities, pairs, SceneKind::ProximalPairs)
    }

    pub fn scene(&self, index: usize) -> SceneGraph {
        let mut rng = stream(self.cfg.seed, &[STREAM_SCENE, index as u64]);
        let mut scene = match self.cfg.kind_of(index) {
            SceneKind::EntityConfusion => self.entity_confusion_scene(&mut rng),
            SceneKind::ProximalPairs => self.proximal_scene(&mut rng),
        };
        scene.image_id = Some(index as u64);
        scene
    }
}

pub const DATASET_FORMAT: &str = "graphcl-synthetic";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub format: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: GenConfig,
    pub vocab: PredicateVocabulary,
    pub n_entity_classes: usize,
    pub splits: SplitCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub train: Vec<SceneGraph>,
    pub val: Vec<SceneGraph>,
    pub test: Vec<SceneGraph>,
    pub metadata: DatasetMetadata,
}

pub fn gen_dataset(cfg: &GenConfig) -> Result<LabeledDataset> {
    let generator = SceneGenerator::new(cfg)?;
    let mut scenes: Vec<SceneGraph> = (0..cfg.n_scenes).into_par_iter().map(|i| generator.scene(i)).collect();
    let (n_train, n_val, n_test) = cfg.split_sizes();
    let test = scenes.split_off(n_train + n_val);
    let val = scenes.split_off(n_train);
    Ok(LabeledDataset {
        train: scenes,
        val,
        test,
        metadata: DatasetMetadata {
            format: DATASET_FORMAT.into(),
            seed: cfg.seed,
            config_hash: hash_json(cfg),
            config: cfg.clone(),
            vocab: cfg.vocab(),
            n_entity_classes: cfg.n_entity_classes,
            splits: SplitCounts {
                train: n_train,
                val: n_val,
                test: n_test,
            },
        },
    })
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

impl LabeledDataset {
    pub fn split(&self, name: &str) -> Result<&[SceneGraph]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }

    /// Writes `train.jsonl`, `val.jsonl`, `test.jsonl` and `metadata.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for name in SPLIT_NAMES {
            write_scenes(&dir.join(format!("{name}.jsonl")), self.split(name)?)?;
        }
        let meta = serde_json::to_string_pretty(&self.metadata)?;
        std::fs::write(dir.join("metadata.json"), meta + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let metadata = read_metadata(dir)?;
        let mut splits = SPLIT_NAMES.iter().map(|n| read_scenes(&dir.join(format!("{n}.jsonl"))));
        let (train, val, test) = (
            splits.next().expect("three splits")?,
            splits.next().expect("three splits")?,
            splits.next().expect("three splits")?,
        );
        Ok(Self {
            train,
            val,
            test,
            metadata,
        })
    }
}

pub fn read_metadata(dir: &Path) -> Result<DatasetMetadata> {
    let meta: DatasetMetadata = serde_json::from_str(&std::fs::read_to_string(dir.join("metadata.json"))?)?;
    if meta.format != DATASET_FORMAT {
        return Err(Error::InvalidConfig(format!("unknown dataset format {:?}", meta.format)));
    }
    Ok(meta)
}
