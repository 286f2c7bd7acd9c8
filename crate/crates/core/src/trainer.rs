//! One-image-per-step optimization of the predicate model under the combined loss,
//! plus a finite-difference check of the analytic gradient.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalConfig, EvalReport};
use crate::geometry::{BBox, ImageSize};
use crate::losses::{loss_gradient, objective_weights, BatchLoss, LossConfig};
use crate::model::{FrequencyOptions, FrequencyTable, ModelConfig, ModelParams, PairCache, PairInput, PairInputBuilder};
use crate::rng::{derive_seed, stream};
use crate::sampler::{sample_batch, Batch, PairKey, PairLabels, PredicateDistribution, SamplerConfig};
use crate::scene::{EntityInstance, PredicateVocabulary, Relation, SceneGraph};

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_STEP: u64 = 3;
const STREAM_GRADCHECK: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub model: ModelConfig,
    pub frequency: FrequencyOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 3e-4,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            loss: LossConfig::default(),
            sampler: SamplerConfig::default(),
            model: ModelConfig::default(),
            frequency: FrequencyOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("momentum and betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("epsilon must be positive".into()));
        }
        self.loss.validate()?;
        self.sampler.validate()?;
        self.model.validate()
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, n_params: usize) -> Self {
        Self {
            kind: cfg.optimizer,
            lr: cfg.learning_rate,
            momentum: cfg.momentum,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, w: &mut [f64], g: &[f64]) {
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (w, g) in w.iter_mut().zip(g) {
                    *w -= self.lr * g;
                }
            }
            OptimizerKind::Momentum => {
                for ((w, g), m) in w.iter_mut().zip(g).zip(&mut self.m) {
                    *m = self.momentum * *m + g;
                    *w -= self.lr * *m;
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - self.beta1.powi(self.t);
                let c2 = 1.0 - self.beta2.powi(self.t);
                for (((w, g), m), v) in w.iter_mut().zip(g).zip(&mut self.m).zip(&mut self.v) {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
                }
            }
        }
    }
}

/// Cached forward pass over every ordered pair of one image.
pub struct ScenePass {
    inputs: HashMap<PairKey, (PairInput, PairCache)>,
    pub outputs: HashMap<PairKey, PredicateDistribution>,
}

impl ScenePass {
    pub fn new(params: &ModelParams, table: &FrequencyTable, scene: &SceneGraph) -> Result<Self> {
        let builder = PairInputBuilder::new(scene, &params.config)?;
        let n = scene.entities.len();
        let mut inputs = HashMap::with_capacity(n * n);
        let mut outputs = HashMap::with_capacity(n * n);
        for s in &scene.entities {
            for o in &scene.entities {
                if s.id == o.id {
                    continue;
                }
                let input = builder.build(s, o)?;
                let (out, cache) = params.forward_cached(table, &input);
                outputs.insert((s.id, o.id), out.p_pred);
                inputs.insert((s.id, o.id), (input, cache));
            }
        }
        Ok(Self { inputs, outputs })
    }

    /// Parameter gradient from per-pair logit gradients.
    pub fn backward(&self, params: &ModelParams, grad_logits: &BTreeMap<PairKey, Vec<f64>>) -> Vec<f64> {
        let mut grad = vec![0.0; params.values.len()];
        for (pair, g) in grad_logits {
            let (input, cache) = &self.inputs[pair];
            params.backward(input, cache, g, &mut grad);
        }
        grad
    }

    pub fn activation_pattern<'a>(&'a self, pairs: impl IntoIterator<Item = &'a PairKey>) -> Vec<bool> {
        pairs
            .into_iter()
            .flat_map(|p| self.inputs[p].1.activation_pattern())
            .collect()
    }
}

/// Samples one batch from `scene` against the current model and returns its loss and
/// parameter gradient; `None` when the scene has no positive pair.
pub fn scene_step<R: Rng + ?Sized>(
    params: &ModelParams,
    table: &FrequencyTable,
    scene: &SceneGraph,
    labels: &PairLabels,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Option<(BatchLoss, Vec<f64>)>> {
    let pass = ScenePass::new(params, table, scene)?;
    let null = labels.null_index();
    let argmax = |s, o| pass.outputs[&(s, o)].argmax_non_null(null);
    let batch = match sample_batch(labels, &cfg.sampler, &argmax, rng) {
        Ok(b) => b,
        Err(Error::NoPositives) => return Ok(None),
        Err(e) => return Err(e),
    };
    let loss = loss_gradient(&batch, &pass.outputs, &cfg.loss, null, objective_weights(&cfg.loss));
    let grad = pass.backward(params, &loss.breakdown.grad);
    Ok(Some((loss, grad)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub recall_at_k: f64,
    pub map_rel: f64,
    pub wmap_rel: f64,
    pub wmap_phr: f64,
    pub score_wtd: f64,
}

impl From<&EvalReport> for EvalSummary {
    fn from(r: &EvalReport) -> Self {
        Self {
            recall_at_k: r.recall_at_k,
            map_rel: r.map_rel,
            wmap_rel: r.wmap_rel,
            wmap_phr: r.wmap_phr,
            score_wtd: r.score_wtd,
        }
    }
}

/// Means over the steps of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub l0: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
    pub active_hinges: f64,
    pub val: Option<EvalSummary>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub config_hash: String,
    pub rows: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("log serialization is infallible")
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "seed",
            "config_hash",
            "epoch",
            "steps",
            "l0",
            "l1",
            "l2",
            "l3",
            "total",
            "active_hinges",
            "val_R@50",
            "val_wmAP_rel",
            "val_wmAP_phr",
            "val_score_wtd",
        ])
        .expect("in-memory csv");
        for r in &self.rows {
            let mut rec = vec![
                self.seed.to_string(),
                self.config_hash.clone(),
                r.epoch.to_string(),
                r.steps.to_string(),
            ];
            rec.extend([r.l0, r.l1, r.l2, r.l3, r.total, r.active_hinges].iter().map(f64::to_string));
            match &r.val {
                Some(v) => rec.extend([v.recall_at_k, v.wmap_rel, v.wmap_phr, v.score_wtd].iter().map(f64::to_string)),
                None => rec.extend(std::iter::repeat_n(String::new(), 4)),
            }
            w.write_record(&rec).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    eval_cfg: EvalConfig,
    vocab: PredicateVocabulary,
    train: &'a [SceneGraph],
    val: &'a [SceneGraph],
    labels: Vec<PairLabels>,
    params: ModelParams,
    table: FrequencyTable,
    optimizer: Optimizer,
    steps: usize,
    log: TrainLog,
}

impl<'a> Trainer<'a> {
    pub fn new(
        train: &'a [SceneGraph],
        val: &'a [SceneGraph],
        vocab: &PredicateVocabulary,
        n_entity_classes: usize,
        cfg: &TrainConfig,
        eval_cfg: &EvalConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        eval_cfg.validate()?;
        for s in train.iter().chain(val) {
            s.validate_vocab(n_entity_classes, vocab)?;
        }
        if !train.iter().any(|s| !s.pairs.is_empty()) {
            return Err(Error::InvalidConfig("training set has no scene with a positive pair".into()));
        }
        let table = FrequencyTable::build(train, n_entity_classes, vocab, cfg.frequency)?;
        let params = ModelParams::init(cfg.model, vocab.len(), derive_seed(cfg.seed, &[STREAM_INIT]))?;
        let labels = train.iter().map(|s| PairLabels::from_scene(s, vocab.null_index())).collect();
        Ok(Self {
            optimizer: Optimizer::new(cfg, params.values.len()),
            cfg: cfg.clone(),
            eval_cfg: eval_cfg.clone(),
            vocab: vocab.clone(),
            train,
            val,
            labels,
            params,
            table,
            steps: 0,
            log: TrainLog {
                seed: cfg.seed,
                config_hash: String::new(),
                rows: Vec::new(),
            },
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn table(&self) -> &FrequencyTable {
        &self.table
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn epochs_done(&self) -> usize {
        self.log.rows.len()
    }

    pub fn set_config_hash(&mut self, hash: &str) {
        self.log.config_hash = hash.to_string();
    }

    /// One pass over the training scenes in a seeded order.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let epoch = self.log.rows.len();
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut stream(self.cfg.seed, &[STREAM_SHUFFLE, epoch as u64]));

        let mut sums = [0.0f64; 6];
        let mut n = 0usize;
        for idx in order {
            let mut rng = stream(
                self.cfg.seed,
                &[STREAM_STEP, self.cfg.sampler.rng_seed, epoch as u64, idx as u64],
            );
            let step = scene_step(&self.params, &self.table, &self.train[idx], &self.labels[idx], &self.cfg, &mut rng)?;
            let Some((loss, grad)) = step else { continue };
            let b = &loss.breakdown;
            if !b.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::DivergenceDetected { epoch, step: self.steps });
            }
            self.optimizer.step(&mut self.params.values, &grad);
            if self.params.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::DivergenceDetected { epoch, step: self.steps });
            }
            self.steps += 1;
            n += 1;
            for (s, v) in sums.iter_mut().zip([b.l0, b.l1, b.l2, b.l3, b.total, loss.active_hinges() as f64]) {
                *s += v;
            }
        }
        let mean = |i: usize| if n == 0 { 0.0 } else { sums[i] / n as f64 };
        let val = if self.val.is_empty() {
            None
        } else {
            let (report, _) = evaluate_model(&self.params, &self.table, &self.vocab, self.val, &self.eval_cfg)?;
            Some(EvalSummary::from(&report))
        };
        self.log.rows.push(EpochRecord {
            epoch,
            steps: n,
            l0: mean(0),
            l1: mean(1),
            l2: mean(2),
            l3: mean(3),
            total: mean(4),
            active_hinges: mean(5),
            val,
        });
        Ok(self.log.rows.last().expect("row just pushed"))
    }

    pub fn run(mut self) -> Result<TrainOutcome> {
        while self.log.rows.len() < self.cfg.epochs {
            self.run_epoch()?;
        }
        Ok(TrainOutcome {
            params: self.params,
            frequency: self.table,
            log: self.log,
        })
    }

    /// Active hinge terms summed over the training scenes for the initial model.
    pub fn active_hinges_at_init(&self) -> Result<usize> {
        let mut total = 0;
        for (idx, (scene, labels)) in self.train.iter().zip(&self.labels).enumerate() {
            let mut rng = stream(self.cfg.seed, &[STREAM_STEP, self.cfg.sampler.rng_seed, 0, idx as u64]);
            if let Some((loss, _)) = scene_step(&self.params, &self.table, scene, labels, &self.cfg, &mut rng)? {
                total += loss.active_hinges();
            }
        }
        Ok(total)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub frequency: FrequencyTable,
    pub log: TrainLog,
}

pub fn train(
    train: &[SceneGraph],
    val: &[SceneGraph],
    vocab: &PredicateVocabulary,
    n_entity_classes: usize,
    cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
) -> Result<TrainOutcome> {
    Trainer::new(train, val, vocab, n_entity_classes, cfg, eval_cfg)?.run()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub trials: usize,
    pub step: f64,
    pub min_entities: usize,
    pub max_entities: usize,
    pub n_entity_classes: usize,
    /// Non-null predicate classes.
    pub n_predicates: usize,
    pub relation_prob: f64,
    pub seed: u64,
    /// Test hook: analytic gradients are scaled by `1 + corrupt_gradient`.
    pub corrupt_gradient: f64,
    pub loss: LossConfig,
    pub model: ModelConfig,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            step: 1e-5,
            min_entities: 4,
            max_entities: 5,
            n_entity_classes: 3,
            n_predicates: 2,
            relation_prob: 0.3,
            seed: 0,
            loss: LossConfig::default(),
            model: ModelConfig {
                d_app: 4,
                hidden_spatial: 8,
                hidden_visual: 8,
                init_range: 0.5,
                ..ModelConfig::default()
            },
            corrupt_gradient: 0.0,
        }
    }
}

impl GradCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be at least 1".into()));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidConfig("step must be positive".into()));
        }
        if self.min_entities < 2 || self.max_entities < self.min_entities {
            return Err(Error::InvalidConfig("entity range must satisfy 2 <= min <= max".into()));
        }
        if self.n_entity_classes == 0 || self.n_predicates == 0 {
            return Err(Error::InvalidConfig("class counts must be positive".into()));
        }
        self.loss.validate()?;
        self.model.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateError {
    pub trial: usize,
    pub index: usize,
    pub block: String,
    pub offset: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub component: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub worst: Option<CoordinateError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub trials: usize,
    pub step: f64,
    pub seed: u64,
    pub n_params: usize,
    /// Coordinates where a perturbation crossed a hinge, selection, or ReLU boundary.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub components: Vec<ComponentReport>,
}

impl GradCheckReport {
    pub fn passed(&self, threshold: f64) -> bool {
        self.max_rel_error < threshold
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization is infallible")
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

const COMPONENTS: [(&str, [f64; 4]); 5] = [
    ("total", [f64::NAN; 4]),
    ("l0", [1.0, 0.0, 0.0, 0.0]),
    ("l1", [0.0, 1.0, 0.0, 0.0]),
    ("l2", [0.0, 0.0, 1.0, 0.0]),
    ("l3", [0.0, 0.0, 0.0, 1.0]),
];

fn component_weights(i: usize, loss: &LossConfig) -> [f64; 4] {
    if i == 0 {
        objective_weights(loss)
    } else {
        COMPONENTS[i].1
    }
}

/// Random scene with appearance, at least one relation, and every entity distinct.
pub fn random_small_scene<R: Rng + ?Sized>(cfg: &GradCheckConfig, rng: &mut R) -> SceneGraph {
    let n = rng.random_range(cfg.min_entities..=cfg.max_entities);
    let entities: Vec<EntityInstance> = (0..n as u64)
        .map(|id| {
            let w = rng.random_range(10.0..40.0);
            let h = rng.random_range(10.0..40.0);
            let bbox = BBox::new(rng.random_range(0.0..60.0), rng.random_range(0.0..60.0), w, h).expect("positive size");
            let app = (0..cfg.model.d_app).map(|_| rng.random_range(-1.0..1.0)).collect();
            EntityInstance::new(id, bbox, rng.random_range(0..cfg.n_entity_classes), 1.0).with_appearance(app)
        })
        .collect();
    let mut pairs: Vec<Relation> = Vec::new();
    for s in 0..n as u64 {
        for o in 0..n as u64 {
            if s != o && rng.random_bool(cfg.relation_prob) {
                pairs.push((s, o, rng.random_range(0..cfg.n_predicates)).into());
            }
        }
    }
    if pairs.is_empty() {
        pairs.push((0, 1, rng.random_range(0..cfg.n_predicates)).into());
    }
    SceneGraph::new(ImageSize::new(100.0, 100.0).expect("positive size"), entities, pairs).expect("valid by construction")
}

struct TrialResult {
    skipped: usize,
    /// `(rel_error, coordinate)` per component, for every checked coordinate.
    errors: [Vec<(f64, CoordinateError)>; 5],
}

fn selection_state(pass: &ScenePass, loss: &BatchLoss, batch: &Batch) -> (Vec<(PairKey, PairKey, bool)>, Vec<bool>) {
    let pairs = batch.pairs();
    (loss.selection_signature(), pass.activation_pattern(pairs.iter()))
}

fn check_trial(cfg: &GradCheckConfig, trial: usize) -> Result<TrialResult> {
    let mut rng = stream(cfg.seed, &[STREAM_GRADCHECK, trial as u64]);
    let scene = random_small_scene(cfg, &mut rng);
    let vocab = PredicateVocabulary::with_null_last(cfg.n_predicates);
    let null = vocab.null_index();
    let table = FrequencyTable::build(
        std::slice::from_ref(&scene),
        cfg.n_entity_classes,
        &vocab,
        FrequencyOptions::default(),
    )?;
    let mut params = ModelParams::init(cfg.model, vocab.len(), rng.next_u64())?;
    let labels = PairLabels::from_scene(&scene, null);
    let sampler = SamplerConfig {
        k_neg: 1 << 20,
        ..SamplerConfig::default()
    };

    let pass = ScenePass::new(&params, &table, &scene)?;
    let argmax = |s, o| pass.outputs[&(s, o)].argmax_non_null(null);
    let batch = sample_batch(&labels, &sampler, &argmax, &mut rng)?;
    let base = loss_gradient(&batch, &pass.outputs, &cfg.loss, null, [0.0; 4]);
    let base_state = selection_state(&pass, &base, &batch);
    let analytic: Vec<Vec<f64>> = (0..COMPONENTS.len())
        .map(|c| {
            let w = component_weights(c, &cfg.loss);
            let g = loss_gradient(&batch, &pass.outputs, &cfg.loss, null, w);
            let mut grad = pass.backward(&params, &g.breakdown.grad);
            grad.iter_mut().for_each(|v| *v *= 1.0 + cfg.corrupt_gradient);
            grad
        })
        .collect();

    let layout = params.layout();
    let mut result = TrialResult {
        skipped: 0,
        errors: Default::default(),
    };
    let eval_at = |params: &ModelParams| -> Result<(BatchLoss, bool)> {
        let pass = ScenePass::new(params, &table, &scene)?;
        let loss = loss_gradient(&batch, &pass.outputs, &cfg.loss, null, [0.0; 4]);
        let same = selection_state(&pass, &loss, &batch) == base_state;
        Ok((loss, same))
    };
    for i in 0..params.values.len() {
        let theta = params.values[i];
        params.values[i] = theta + cfg.step;
        let (plus, same_plus) = eval_at(&params)?;
        params.values[i] = theta - cfg.step;
        let (minus, same_minus) = eval_at(&params)?;
        params.values[i] = theta;
        if !(same_plus && same_minus) {
            result.skipped += 1;
            continue;
        }
        let (block, offset) = layout.name_of(i);
        for (c, errs) in result.errors.iter_mut().enumerate() {
            let w = component_weights(c, &cfg.loss);
            let value = |l: &BatchLoss| {
                let b = &l.breakdown;
                w[0] * b.l0 + w[1] * b.l1 + w[2] * b.l2 + w[3] * b.l3
            };
            let numeric = (value(&plus) - value(&minus)) / (2.0 * cfg.step);
            let a = analytic[c][i];
            let e = relative_error(a, numeric);
            errs.push((
                e,
                CoordinateError {
                    trial,
                    index: i,
                    block: block.to_string(),
                    offset,
                    analytic: a,
                    numeric,
                    rel_error: e,
                },
            ));
        }
    }
    Ok(result)
}

/// Compares the analytic gradient of each loss component and of the weighted
/// objective against central differences on random small scenes.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    cfg.validate()?;
    let trials: Vec<TrialResult> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| check_trial(cfg, t))
        .collect::<Result<_>>()?;
    let skipped = trials.iter().map(|t| t.skipped).sum();
    let mut components = Vec::new();
    let mut all_sum = 0.0;
    let mut all_n = 0usize;
    for (c, (name, _)) in COMPONENTS.iter().enumerate() {
        let mut max = 0.0;
        let mut sum = 0.0;
        let mut n = 0usize;
        let mut worst: Option<&CoordinateError> = None;
        for t in &trials {
            for (e, coord) in &t.errors[c] {
                sum += e;
                n += 1;
                if worst.is_none() || *e > max {
                    max = *e;
                    worst = Some(coord);
                }
            }
        }
        all_sum += sum;
        all_n += n;
        components.push(ComponentReport {
            component: name.to_string(),
            checked: n,
            max_rel_error: max,
            mean_rel_error: if n == 0 { 0.0 } else { sum / n as f64 },
            worst: worst.cloned(),
        });
    }
    let n_params = crate::model::ParamLayout::new(&cfg.model, cfg.n_predicates + 1).len;
    Ok(GradCheckReport {
        trials: cfg.trials,
        step: cfg.step,
        seed: cfg.seed,
        n_params,
        skipped,
        max_rel_error: components.iter().map(|c| c.max_rel_error).fold(0.0, f64::max),
        mean_rel_error: if all_n == 0 { 0.0 } else { all_sum / all_n as f64 },
        components,
    })
}
