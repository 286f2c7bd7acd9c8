//! Second-stage predicate classifier: semantic prior, spatial MLP and visual MLP
//! with subject/object skip projections, summed in logit space and softmaxed.
//!
//! All learnable weights live in one flat vector so optimizers and gradient checks
//! can treat them uniformly; [`ParamLayout`] names the slices.

mod frequency;

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use frequency::{FrequencyOptions, FrequencyTable};

use crate::error::{Error, Result};
use crate::geometry::{enclosing_box, spatial_feature, ImageSize, SPATIAL_DIM};
use crate::sampler::{PairKey, PredicateDistribution};
use crate::scene::{ClassId, EntityId, EntityInstance, PredicateVocabulary, SceneGraph};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_app: usize,
    pub hidden_spatial: usize,
    pub hidden_visual: usize,
    pub use_semantic: bool,
    pub use_spatial: bool,
    pub use_visual: bool,
    pub use_skip: bool,
    /// Weights start uniform in `[-init_range, init_range]`; biases at zero.
    pub init_range: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_app: 16,
            hidden_spatial: 64,
            hidden_visual: 64,
            use_semantic: true,
            use_spatial: true,
            use_visual: true,
            use_skip: true,
            init_range: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_app == 0 || self.hidden_spatial == 0 || self.hidden_visual == 0 {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        if !(self.init_range >= 0.0 && self.init_range.is_finite()) {
            return Err(Error::InvalidConfig("init_range must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Offsets of every parameter block inside the flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub spt_w1: Range<usize>,
    pub spt_b1: Range<usize>,
    pub spt_w2: Range<usize>,
    pub spt_b2: Range<usize>,
    pub vis_w1: Range<usize>,
    pub vis_b1: Range<usize>,
    pub vis_w2: Range<usize>,
    pub vis_b2: Range<usize>,
    pub skip_s: Range<usize>,
    pub skip_o: Range<usize>,
    pub len: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig, n_predicates: usize) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let (hs, hv, d, p) = (cfg.hidden_spatial, cfg.hidden_visual, cfg.d_app, n_predicates);
        let spt_w1 = take(hs * SPATIAL_DIM);
        let spt_b1 = take(hs);
        let spt_w2 = take(p * hs);
        let spt_b2 = take(p);
        let vis_w1 = take(hv * 3 * d);
        let vis_b1 = take(hv);
        let vis_w2 = take(p * hv);
        let vis_b2 = take(p);
        let skip_s = take(p * d);
        let skip_o = take(p * d);
        Self {
            spt_w1,
            spt_b1,
            spt_w2,
            spt_b2,
            vis_w1,
            vis_b1,
            vis_w2,
            vis_b2,
            skip_s,
            skip_o,
            len: at,
        }
    }

    fn blocks(&self) -> [(&'static str, &Range<usize>); 10] {
        [
            ("spatial.w1", &self.spt_w1),
            ("spatial.b1", &self.spt_b1),
            ("spatial.w2", &self.spt_w2),
            ("spatial.b2", &self.spt_b2),
            ("visual.w1", &self.vis_w1),
            ("visual.b1", &self.vis_b1),
            ("visual.w2", &self.vis_w2),
            ("visual.b2", &self.vis_b2),
            ("skip.subject", &self.skip_s),
            ("skip.object", &self.skip_o),
        ]
    }

    /// Block name and offset within the block of a flat index.
    pub fn name_of(&self, i: usize) -> (&'static str, usize) {
        self.blocks()
            .into_iter()
            .find(|(_, r)| r.contains(&i))
            .map(|(n, r)| (n, i - r.start))
            .unwrap_or(("?", i))
    }

    fn is_weight(&self, i: usize) -> bool {
        ![&self.spt_b1, &self.spt_b2, &self.vis_b1, &self.vis_b2]
            .iter()
            .any(|r| r.contains(&i))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub n_predicates: usize,
    pub seed: u64,
    pub values: Vec<f64>,
}

/// Appearance inputs of the visual module for one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualInput {
    pub subject: Vec<f64>,
    pub phrase: Vec<f64>,
    pub object: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairInput {
    pub subject_class: ClassId,
    pub object_class: ClassId,
    pub spatial: [f64; SPATIAL_DIM],
    pub visual: Option<VisualInput>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    pub f_sem: Vec<f64>,
    pub f_spt: Vec<f64>,
    pub f_vis: Vec<f64>,
    pub p_pred: PredicateDistribution,
}

impl FusionOutput {
    pub fn logits(&self) -> Vec<f64> {
        (0..self.f_sem.len())
            .map(|k| self.f_vis[k] + self.f_spt[k] + self.f_sem[k])
            .collect()
    }
}

/// Hidden pre-activations kept from the forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairCache {
    spatial_pre: Vec<f64>,
    visual_pre: Vec<f64>,
}

impl PairCache {
    /// Sign pattern of every hidden unit; constant on each smooth piece of the network.
    pub fn activation_pattern(&self) -> impl Iterator<Item = bool> + '_ {
        self.spatial_pre.iter().chain(&self.visual_pre).map(|&v| v > 0.0)
    }
}

fn dense(w: &[f64], b: Option<&[f64]>, x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (o, y) in out.iter_mut().enumerate() {
        let row = &w[o * n_in..(o + 1) * n_in];
        let mut acc = b.map_or(0.0, |b| b[o]);
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        *y += acc;
    }
}

fn dense_backward(w: &[f64], x: &[f64], dy: &[f64], dw: &mut [f64], db: Option<&mut [f64]>, dx: Option<&mut [f64]>) {
    let n_in = x.len();
    for (o, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &mut dw[o * n_in..(o + 1) * n_in];
        for (dwi, xi) in row.iter_mut().zip(x) {
            *dwi += g * xi;
        }
    }
    if let Some(db) = db {
        for (d, g) in db.iter_mut().zip(dy) {
            *d += g;
        }
    }
    if let Some(dx) = dx {
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &w[o * n_in..(o + 1) * n_in];
            for (d, wi) in dx.iter_mut().zip(row) {
                *d += g * wi;
            }
        }
    }
}

/// Two-layer ReLU perceptron applied to `x`, result added into `out`.
fn mlp_forward(w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64], x: &[f64], pre: &mut Vec<f64>, out: &mut [f64]) {
    pre.clear();
    pre.resize(b1.len(), 0.0);
    dense(w1, Some(b1), x, pre);
    let h: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
    dense(w2, Some(b2), &h, out);
}

impl ModelParams {
    pub fn init(config: ModelConfig, n_predicates: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config, n_predicates);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = config.init_range;
        let values = (0..layout.len)
            .map(|i| {
                if layout.is_weight(i) && r > 0.0 {
                    rng.random_range(-r..=r)
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Self {
            config,
            n_predicates,
            seed,
            values,
        })
    }

    pub fn zeros(config: ModelConfig, n_predicates: usize) -> Self {
        let layout = ParamLayout::new(&config, n_predicates);
        Self {
            config,
            n_predicates,
            seed: 0,
            values: vec![0.0; layout.len],
        }
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(&self.config, self.n_predicates)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = self.layout().len;
        if self.values.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "model holds {} parameters, layout needs {expected}",
                self.values.len()
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("model parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn spatial_logits(&self, feat: &[f64; SPATIAL_DIM]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_predicates];
        let mut pre = Vec::new();
        self.spatial_into(feat, &mut pre, &mut out);
        out
    }

    fn spatial_into(&self, feat: &[f64; SPATIAL_DIM], pre: &mut Vec<f64>, out: &mut [f64]) {
        let l = self.layout();
        let v = &self.values;
        mlp_forward(&v[l.spt_w1], &v[l.spt_b1], &v[l.spt_w2], &v[l.spt_b2], feat, pre, out);
    }

    /// `MLP([f_s; f_p; f_o]) + W_s f_s + W_o f_o`; the skip terms drop out when disabled.
    pub fn visual_logits(&self, f_s: &[f64], f_p: &[f64], f_o: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_predicates];
        let mut pre = Vec::new();
        let input = VisualInput {
            subject: f_s.to_vec(),
            phrase: f_p.to_vec(),
            object: f_o.to_vec(),
        };
        self.visual_into(&input, &mut pre, &mut out);
        out
    }

    fn visual_into(&self, input: &VisualInput, pre: &mut Vec<f64>, out: &mut [f64]) {
        let l = self.layout();
        let v = &self.values;
        let x: Vec<f64> = input.subject.iter().chain(&input.phrase).chain(&input.object).copied().collect();
        mlp_forward(&v[l.vis_w1], &v[l.vis_b1], &v[l.vis_w2], &v[l.vis_b2], &x, pre, out);
        if self.config.use_skip {
            dense(&v[l.skip_s], None, &input.subject, out);
            dense(&v[l.skip_o], None, &input.object, out);
        }
    }

    pub fn forward(&self, table: &FrequencyTable, input: &PairInput) -> FusionOutput {
        self.forward_cached(table, input).0
    }

    pub fn forward_cached(&self, table: &FrequencyTable, input: &PairInput) -> (FusionOutput, PairCache) {
        let p = self.n_predicates;
        let mut cache = PairCache::default();
        let f_sem = if self.config.use_semantic {
            table.semantic_logits(input.subject_class, input.object_class)
        } else {
            vec![0.0; p]
        };
        let mut f_spt = vec![0.0; p];
        if self.config.use_spatial {
            self.spatial_into(&input.spatial, &mut cache.spatial_pre, &mut f_spt);
        }
        let mut f_vis = vec![0.0; p];
        if let (true, Some(vis)) = (self.config.use_visual, &input.visual) {
            self.visual_into(vis, &mut cache.visual_pre, &mut f_vis);
        }
        let logits: Vec<f64> = (0..p).map(|k| f_vis[k] + f_spt[k] + f_sem[k]).collect();
        let out = FusionOutput {
            f_sem,
            f_spt,
            f_vis,
            p_pred: PredicateDistribution::from_logits(&logits),
        };
        (out, cache)
    }

    /// Accumulates dL/dθ into `grad` given dL/dlogits for one pair. The semantic
    /// prior is not learnable and receives nothing.
    pub fn backward(&self, input: &PairInput, cache: &PairCache, upstream: &[f64], grad: &mut [f64]) {
        let l = self.layout();
        let v = &self.values;
        if upstream.iter().all(|&g| g == 0.0) {
            return;
        }
        if self.config.use_spatial {
            mlp_backward(
                &v[l.spt_w1.clone()],
                &v[l.spt_w2.clone()],
                &input.spatial,
                &cache.spatial_pre,
                upstream,
                grad,
                [&l.spt_w1, &l.spt_b1, &l.spt_w2, &l.spt_b2],
            );
        }
        if let (true, Some(vis)) = (self.config.use_visual, &input.visual) {
            let x: Vec<f64> = vis.subject.iter().chain(&vis.phrase).chain(&vis.object).copied().collect();
            mlp_backward(
                &v[l.vis_w1.clone()],
                &v[l.vis_w2.clone()],
                &x,
                &cache.visual_pre,
                upstream,
                grad,
                [&l.vis_w1, &l.vis_b1, &l.vis_w2, &l.vis_b2],
            );
            if self.config.use_skip {
                dense_backward(&v[l.skip_s.clone()], &vis.subject, upstream, &mut grad[l.skip_s.clone()], None, None);
                dense_backward(&v[l.skip_o.clone()], &vis.object, upstream, &mut grad[l.skip_o.clone()], None, None);
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        p.validate()?;
        Ok(p)
    }
}

fn mlp_backward(
    w1: &[f64],
    w2: &[f64],
    x: &[f64],
    pre: &[f64],
    dy: &[f64],
    grad: &mut [f64],
    blocks: [&Range<usize>; 4],
) {
    let h: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
    let mut dh = vec![0.0; h.len()];
    {
        let (lo, hi) = grad.split_at_mut(blocks[3].start);
        dense_backward(w2, &h, dy, &mut lo[blocks[2].clone()], Some(&mut hi[..blocks[3].len()]), Some(&mut dh));
    }
    for (d, p) in dh.iter_mut().zip(pre) {
        if *p <= 0.0 {
            *d = 0.0;
        }
    }
    let (lo, hi) = grad.split_at_mut(blocks[1].start);
    dense_backward(w1, x, &dh, &mut lo[blocks[0].clone()], Some(&mut hi[..blocks[1].len()]), None);
}

/// Builds [`PairInput`]s for the pairs of one image.
///
/// The phrase vector comes from the scene's per-pair appearance when present and
/// otherwise is the mean of the subject and object vectors.
pub struct PairInputBuilder<'a> {
    image_size: ImageSize,
    pair_appearance: HashMap<PairKey, &'a [f64]>,
    need_visual: bool,
    d_app: usize,
    scene_name: String,
}

impl<'a> PairInputBuilder<'a> {
    pub fn new(scene: &'a SceneGraph, config: &ModelConfig) -> Result<Self> {
        let need_visual = config.use_visual;
        let scene_name = scene.image_id.map_or_else(|| "<unnamed>".to_string(), |i| i.to_string());
        if need_visual && !scene.has_appearance() {
            return Err(Error::MissingAppearance(scene_name));
        }
        let pair_appearance = scene
            .pair_appearance
            .iter()
            .map(|p| ((p.subject, p.object), p.vector.as_slice()))
            .collect();
        Ok(Self {
            image_size: scene.image_size,
            pair_appearance,
            need_visual,
            d_app: config.d_app,
            scene_name,
        })
    }

    pub fn build(&self, subject: &EntityInstance, object: &EntityInstance) -> Result<PairInput> {
        let visual = if self.need_visual {
            let (fs, fo) = match (&subject.appearance, &object.appearance) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(Error::MissingAppearance(self.scene_name.clone())),
            };
            let phrase = match self.pair_appearance.get(&(subject.id, object.id)) {
                Some(v) => v.to_vec(),
                None => fs.iter().zip(fo).map(|(a, b)| 0.5 * (a + b)).collect(),
            };
            for v in [fs, fo, &phrase] {
                if v.len() != self.d_app {
                    return Err(Error::DimensionMismatch(format!(
                        "appearance length {} but model expects {}",
                        v.len(),
                        self.d_app
                    )));
                }
            }
            Some(VisualInput {
                subject: fs.clone(),
                phrase,
                object: fo.clone(),
            })
        } else {
            None
        };
        Ok(PairInput {
            subject_class: subject.class,
            object_class: object.class,
            spatial: spatial_feature(&subject.bbox, &object.bbox, &self.image_size),
            visual,
        })
    }
}

/// Forward pass for one ordered pair of `scene`.
pub fn forward_pair(
    params: &ModelParams,
    table: &FrequencyTable,
    scene: &SceneGraph,
    subject: EntityId,
    object: EntityId,
) -> Result<FusionOutput> {
    let builder = PairInputBuilder::new(scene, &params.config)?;
    let find = |id| {
        scene
            .entity(id)
            .ok_or_else(|| Error::InvalidScene(format!("unknown entity {id}")))
    };
    let input = builder.build(find(subject)?, find(object)?)?;
    Ok(params.forward(table, &input))
}

/// Phrase box of a pair; exposed for generators that synthesize phrase features.
pub fn phrase_box(subject: &EntityInstance, object: &EntityInstance) -> crate::geometry::BBox {
    enclosing_box(&subject.bbox, &object.bbox)
}

/// Serialized model: parameters, frozen prior, and the vocabulary they were built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub vocab: PredicateVocabulary,
    pub n_entity_classes: usize,
    pub params: ModelParams,
    pub frequency: FrequencyTable,
}

pub const CHECKPOINT_FORMAT: &str = "graphcl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(
        params: ModelParams,
        frequency: FrequencyTable,
        vocab: PredicateVocabulary,
        n_entity_classes: usize,
        seed: u64,
        config_hash: String,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            seed,
            config_hash,
            vocab,
            n_entity_classes,
            params,
            frequency,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serialization is infallible")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        c.params.validate()?;
        c.frequency.validate()?;
        if c.params.n_predicates != c.vocab.len() || c.frequency.n_predicates() != c.vocab.len() {
            return Err(Error::VocabularyMismatch("checkpoint dimensions disagree with its vocabulary".into()));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
