//! Brute-force references shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use graphcl::eval::{Detection, GtTriplet, RankedPrediction};
use graphcl::geometry::{BBox, ImageSize};
use graphcl::losses::{loss_gradient, objective_weights, LossConfig};
use graphcl::sampler::{sample_batch, PairKey, PairLabels, PredicateDistribution, SamplerConfig};
use graphcl::scene::{EntityId, EntityInstance, PredicateVocabulary, Relation, SceneGraph};

pub struct LossCase {
    pub scene: SceneGraph,
    pub vocab: PredicateVocabulary,
    pub outputs: HashMap<PairKey, PredicateDistribution>,
    pub cfg: LossConfig,
}

/// Small scene (2..=5 entities, 1..=3 predicates) with random multi-label relations,
/// random model outputs and random loss weights. At least one relation exists.
pub fn random_loss_case(seed: u64) -> LossCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let n = rng.random_range(2..=5usize);
        let n_pred = rng.random_range(1..=3usize);
        let n_class = rng.random_range(1..=3usize);
        let density = rng.random_range(0.1..0.6);
        let vocab = PredicateVocabulary::with_null_last(n_pred);
        let entities: Vec<EntityInstance> = (0..n)
            .map(|i| {
                let b = BBox::new(rng.random_range(0.0..80.0), rng.random_range(0.0..80.0), 10.0, 10.0).unwrap();
                EntityInstance::new(10 + 3 * i as EntityId, b, rng.random_range(0..n_class), 1.0)
            })
            .collect();
        let mut pairs = Vec::new();
        for s in &entities {
            for o in &entities {
                for p in 0..n_pred {
                    if s.id != o.id && rng.random_bool(density) {
                        pairs.push(Relation::from((s.id, o.id, p)));
                    }
                }
            }
        }
        if pairs.is_empty() {
            continue;
        }
        let scene = SceneGraph::new(ImageSize { w: 100.0, h: 100.0 }, entities, pairs).unwrap();
        let mut outputs = HashMap::new();
        for s in &scene.entities {
            for o in &scene.entities {
                if s.id != o.id {
                    let logits: Vec<f64> = (0..vocab.len()).map(|_| rng.random_range(-3.0..3.0)).collect();
                    outputs.insert((s.id, o.id), PredicateDistribution::from_logits(&logits));
                }
            }
        }
        let cfg = LossConfig {
            alpha1: rng.random_range(0.05..1.0),
            alpha2: rng.random_range(0.05..1.0),
            alpha3: rng.random_range(0.05..1.0),
            lambda1: rng.random_range(0.0..2.0),
            lambda2: rng.random_range(0.0..2.0),
            lambda3: rng.random_range(0.0..2.0),
        };
        return LossCase { scene, vocab, outputs, cfg };
    }
}

/// `[l0, l1, l2, l3, total]` as computed by the library with exhaustive sampling.
pub fn library_losses(case: &LossCase, seed: u64) -> [f64; 5] {
    let null = case.vocab.null_index();
    let labels = PairLabels::from_scene(&case.scene, null);
    let sampler = SamplerConfig {
        n_pairs_l0: 10_000,
        n_pos_l0: 5_000,
        n_pos_anchors: 1_000,
        k_neg: 1_000,
        rng_seed: seed,
    };
    let argmax = |s: EntityId, o: EntityId| case.outputs[&(s, o)].argmax_non_null(null);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = sample_batch(&labels, &sampler, &argmax, &mut rng).unwrap();
    let b = loss_gradient(&batch, &case.outputs, &case.cfg, null, objective_weights(&case.cfg)).breakdown;
    [b.l0, b.l1, b.l2, b.l3, b.total]
}

/// Direct enumeration of the four terms from the relation list.
pub fn oracle_losses(case: &LossCase) -> [f64; 5] {
    let null = case.vocab.null_index();
    let ids: Vec<EntityId> = case.scene.entities.iter().map(|e| e.id).collect();
    let class: HashMap<EntityId, usize> = case.scene.entities.iter().map(|e| (e.id, e.class)).collect();
    let mut rel: BTreeMap<(EntityId, EntityId), BTreeSet<usize>> = BTreeMap::new();
    for r in &case.scene.pairs {
        rel.entry((r.subject, r.object)).or_default().insert(r.predicate);
    }
    let p = |s: EntityId, o: EntityId| case.outputs[&(s, o)].probs().to_vec();
    let phi = |s: EntityId, o: EntityId| 1.0 - p(s, o)[null];
    let argmax_nn = |s: EntityId, o: EntityId| {
        let q = p(s, o);
        let mut best = usize::MAX;
        for k in 0..q.len() {
            if k != null && (best == usize::MAX || q[k] > q[best]) {
                best = k;
            }
        }
        best
    };

    // cross-entropy over every related triple and every unrelated ordered pair
    let mut ce = Vec::new();
    for &s in &ids {
        for &o in &ids {
            if s == o {
                continue;
            }
            match rel.get(&(s, o)) {
                Some(ps) => ce.extend(ps.iter().map(|&k| -p(s, o)[k].max(1e-12).ln())),
                None => ce.push(-p(s, o)[null].max(1e-12).ln()),
            }
        }
    }
    let l0 = ce.iter().sum::<f64>() / ce.len() as f64;

    let hinge = |pos: &[(EntityId, EntityId)], neg: &[(EntityId, EntityId)], alpha: f64| -> Option<f64> {
        if pos.is_empty() || neg.is_empty() {
            return None;
        }
        let min_pos = pos.iter().map(|&(s, o)| phi(s, o)).fold(f64::INFINITY, f64::min);
        let max_neg = neg.iter().map(|&(s, o)| phi(s, o)).fold(f64::NEG_INFINITY, f64::max);
        Some((alpha - (min_pos - max_neg)).max(0.0))
    };
    let mean = |v: &[f64]| if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) };

    let mut l = [0.0; 3];
    for subject_role in [true, false] {
        let key = |a: EntityId, b: EntityId| if subject_role { (a, b) } else { (b, a) };
        let mut per_loss: [Vec<f64>; 3] = Default::default();
        for &a in &ids {
            let partners: Vec<EntityId> = ids.iter().copied().filter(|&b| b != a).collect();
            let pos: Vec<EntityId> = partners.iter().copied().filter(|&b| rel.contains_key(&key(a, b))).collect();
            if pos.is_empty() {
                continue;
            }
            let neg: Vec<EntityId> = partners.iter().copied().filter(|&b| !rel.contains_key(&key(a, b))).collect();
            let pairs = |v: &[EntityId]| v.iter().map(|&b| key(a, b)).collect::<Vec<_>>();

            if let Some(h) = hinge(&pairs(&pos), &pairs(&neg), case.cfg.alpha1) {
                per_loss[0].push(h);
            }

            let classes: BTreeSet<usize> = pos.iter().map(|b| class[b]).collect();
            let groups: Vec<f64> = classes
                .iter()
                .filter_map(|&c| {
                    let pc: Vec<EntityId> = pos.iter().copied().filter(|b| class[b] == c).collect();
                    let nc: Vec<EntityId> = neg.iter().copied().filter(|b| class[b] == c).collect();
                    hinge(&pairs(&pc), &pairs(&nc), case.cfg.alpha2)
                })
                .collect();
            if let Some(m) = mean(&groups) {
                per_loss[1].push(m);
            }

            let preds: BTreeSet<usize> = pos.iter().flat_map(|&b| rel[&key(a, b)].iter().copied()).collect();
            let groups: Vec<f64> = preds
                .iter()
                .filter_map(|&e| {
                    let pe: Vec<EntityId> = pos.iter().copied().filter(|&b| rel[&key(a, b)].contains(&e)).collect();
                    let ne: Vec<EntityId> = neg
                        .iter()
                        .copied()
                        .filter(|&b| {
                            let (s, o) = key(a, b);
                            argmax_nn(s, o) == e
                        })
                        .collect();
                    hinge(&pairs(&pe), &pairs(&ne), case.cfg.alpha3)
                })
                .collect();
            if let Some(m) = mean(&groups) {
                per_loss[2].push(m);
            }
        }
        for (acc, v) in l.iter_mut().zip(&per_loss) {
            *acc += mean(v).unwrap_or(0.0);
        }
    }
    let c = &case.cfg;
    let total = l0 + c.lambda1 * l[0] + c.lambda2 * l[1] + c.lambda3 * l[2];
    [l0, l[0], l[1], l[2], total]
}

/// Largest absolute difference between library and oracle over `n` cases from `seed`.
pub fn loss_oracle_sweep(seed: u64, n: u64) -> f64 {
    (0..n)
        .map(|i| {
            let case = random_loss_case(seed.wrapping_mul(1_000_003).wrapping_add(i));
            let a = library_losses(&case, i);
            let b = oracle_losses(&case);
            a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

// evaluator reference

pub struct EvalCase {
    pub preds: Vec<Vec<RankedPrediction>>,
    pub gts: Vec<Vec<GtTriplet>>,
    pub n_predicates: usize,
    pub k: usize,
}

fn jitter(rng: &mut ChaCha8Rng, b: &BBox) -> BBox {
    let s = if rng.random_bool(0.3) { 12.0 } else { 2.0 };
    BBox::new(
        b.x() + rng.random_range(-s..s),
        b.y() + rng.random_range(-s..s),
        (b.w() + rng.random_range(-s..s)).max(1.0),
        (b.h() + rng.random_range(-s..s)).max(1.0),
    )
    .unwrap()
}

/// 1..=3 images with up to 10 predictions in total, near-duplicates and tied scores included.
pub fn random_eval_case(seed: u64) -> EvalCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_images = rng.random_range(1..=3usize);
    let n_predicates = 3;
    let mut gts = Vec::new();
    for _ in 0..n_images {
        let n = rng.random_range(0..=3usize);
        let g: Vec<GtTriplet> = (0..n)
            .map(|_| GtTriplet {
                subject: BBox::new(rng.random_range(0.0..40.0), rng.random_range(0.0..40.0), 20.0, 20.0).unwrap(),
                subject_class: rng.random_range(0..2),
                object: BBox::new(rng.random_range(0.0..40.0), rng.random_range(0.0..40.0), 20.0, 20.0).unwrap(),
                object_class: rng.random_range(0..2),
                predicate: rng.random_range(0..n_predicates),
            })
            .collect();
        gts.push(g);
    }
    let mut preds = vec![Vec::new(); n_images];
    let n_preds = rng.random_range(0..=10usize);
    for id in 0..n_preds as u64 {
        let img = rng.random_range(0..n_images);
        let (sb, sc, ob, oc, p) = match gts[img].get(rng.random_range(0..=gts[img].len())) {
            Some(g) if rng.random_bool(0.8) => (
                jitter(&mut rng, &g.subject),
                if rng.random_bool(0.9) { g.subject_class } else { 1 - g.subject_class },
                jitter(&mut rng, &g.object),
                g.object_class,
                if rng.random_bool(0.85) { g.predicate } else { rng.random_range(0..n_predicates) },
            ),
            _ => (
                BBox::new(rng.random_range(0.0..40.0), rng.random_range(0.0..40.0), 20.0, 20.0).unwrap(),
                rng.random_range(0..2),
                BBox::new(rng.random_range(0.0..40.0), rng.random_range(0.0..40.0), 20.0, 20.0).unwrap(),
                rng.random_range(0..2),
                rng.random_range(0..n_predicates),
            ),
        };
        let det = |id: u64, bbox: BBox, class: usize| Detection { id, bbox, class, conf: 1.0 };
        let p_pred = rng.random_range(1..=4) as f64 / 4.0;
        preds[img].push(RankedPrediction::new(img as u64, det(id, sb, sc), det(100 + id, ob, oc), p, p_pred));
    }
    EvalCase {
        preds,
        gts,
        // one extra slot for the null class, which carries no ground truth
        n_predicates: n_predicates + 1,
        k: rng.random_range(1..=10),
    }
}

fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x() + a.w()).min(b.x() + b.w()) - a.x().max(b.x());
    let iy = (a.y() + a.h()).min(b.y() + b.h()) - a.y().max(b.y());
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    inter / (a.w() * a.h() + b.w() * b.h() - inter)
}

fn ref_union(a: &BBox, b: &BBox) -> BBox {
    let x0 = a.x().min(b.x());
    let y0 = a.y().min(b.y());
    BBox::new(x0, y0, (a.x() + a.w()).max(b.x() + b.w()) - x0, (a.y() + a.h()).max(b.y() + b.h()) - y0).unwrap()
}

fn ref_overlap(p: &RankedPrediction, g: &GtTriplet, phrase: bool) -> Option<f64> {
    if p.predicate != g.predicate || p.subject.class != g.subject_class || p.object.class != g.object_class {
        return None;
    }
    let ov = if phrase {
        ref_iou(&ref_union(&p.subject.bbox, &p.object.bbox), &ref_union(&g.subject, &g.object))
    } else {
        ref_iou(&p.subject.bbox, &g.subject).min(ref_iou(&p.object.bbox, &g.object))
    };
    (ov >= 0.5).then_some(ov)
}

fn rank_key(p: &RankedPrediction) -> (std::cmp::Reverse<u64>, u64, u64, u64, usize) {
    (std::cmp::Reverse(p.score.to_bits()), p.image, p.subject.id, p.object.id, p.predicate)
}

/// True-positive flags of `ranked` (all from `images`) against `gts` by greedy assignment.
fn ref_outcomes(ranked: &[RankedPrediction], gts: &[Vec<GtTriplet>], phrase: bool) -> Vec<bool> {
    let mut used: BTreeSet<(usize, usize)> = BTreeSet::new();
    ranked
        .iter()
        .map(|p| {
            let img = p.image as usize;
            let best = (0..gts[img].len())
                .filter(|&j| !used.contains(&(img, j)))
                .filter_map(|j| ref_overlap(p, &gts[img][j], phrase).map(|ov| (j, ov)))
                .fold(None::<(usize, f64)>, |acc, (j, ov)| match acc {
                    Some((_, b)) if b >= ov => acc,
                    _ => Some((j, ov)),
                });
            best.map(|(j, _)| used.insert((img, j))).is_some()
        })
        .collect()
}

/// Area under the interpolated PR curve: Σ Δrecall · max precision at or beyond that recall.
fn ref_ap(tp: &[bool], n_gt: usize) -> f64 {
    let mut points = Vec::new();
    let mut hits = 0;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        points.push((hits as f64 / n_gt as f64, hits as f64 / (i + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for i in 0..points.len() {
        let r = points[i].0;
        if r > prev_r {
            let best_p = points[i..].iter().map(|q| q.1).fold(0.0, f64::max);
            ap += (r - prev_r) * best_p;
            prev_r = r;
        }
    }
    ap
}

pub struct RefReport {
    pub recall: f64,
    pub ap_rel: Vec<Option<f64>>,
    pub ap_phr: Vec<Option<f64>>,
    pub wmap_rel: f64,
    pub wmap_phr: f64,
    pub map_rel: f64,
    pub map_phr: f64,
    pub score: f64,
    pub score_wtd: f64,
}

pub fn reference_eval(case: &EvalCase) -> RefReport {
    let mut hit = 0;
    let total: usize = case.gts.iter().map(Vec::len).sum();
    for (img, p) in case.preds.iter().enumerate() {
        let mut top = p.clone();
        top.sort_by_key(rank_key);
        top.truncate(case.k);
        let one = vec![case.gts[img].clone()];
        let local: Vec<RankedPrediction> = top.into_iter().map(|q| RankedPrediction { image: 0, ..q }).collect();
        hit += ref_outcomes(&local, &one, false).into_iter().filter(|&t| t).count();
    }
    let recall = if total == 0 { 0.0 } else { hit as f64 / total as f64 };

    let all: Vec<RankedPrediction> = case.preds.iter().flatten().copied().collect();
    let mut counts = vec![0usize; case.n_predicates];
    for g in case.gts.iter().flatten() {
        counts[g.predicate] += 1;
    }
    let ap = |phrase: bool| -> Vec<Option<f64>> {
        (0..case.n_predicates)
            .map(|c| {
                if counts[c] == 0 {
                    return None;
                }
                let mut ranked: Vec<RankedPrediction> = all.iter().copied().filter(|p| p.predicate == c).collect();
                ranked.sort_by_key(rank_key);
                Some(ref_ap(&ref_outcomes(&ranked, &case.gts, phrase), counts[c]))
            })
            .collect()
    };
    let ap_rel = ap(false);
    let ap_phr = ap(true);
    let wmean = |aps: &[Option<f64>], w: &dyn Fn(usize) -> f64| -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (c, a) in aps.iter().enumerate() {
            if let Some(a) = a {
                num += w(c) * a;
                den += w(c);
            }
        }
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    };
    let freq = |c: usize| counts[c] as f64;
    let map_rel = wmean(&ap_rel, &|_| 1.0);
    let map_phr = wmean(&ap_phr, &|_| 1.0);
    let wmap_rel = wmean(&ap_rel, &freq);
    let wmap_phr = wmean(&ap_phr, &freq);
    RefReport {
        recall,
        score: 0.2 * recall + 0.4 * map_rel + 0.4 * map_phr,
        score_wtd: 0.2 * recall + 0.4 * wmap_rel + 0.4 * wmap_phr,
        ap_rel,
        ap_phr,
        wmap_rel,
        wmap_phr,
        map_rel,
        map_phr,
    }
}

/// Largest absolute discrepancy between the library report and the reference over `n` cases.
pub fn eval_oracle_sweep(seed: u64, n: u64) -> f64 {
    use graphcl::eval::{evaluate_predictions, EvalConfig};
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let case = random_eval_case(seed.wrapping_mul(7_919).wrapping_add(i));
        let vocab = PredicateVocabulary::with_null_last(case.n_predicates - 1);
        let cfg = EvalConfig {
            k: case.k,
            ..EvalConfig::default()
        };
        let lib = evaluate_predictions(&case.preds, &case.gts, &vocab, &cfg).unwrap();
        let r = reference_eval(&case);
        let mut diffs = vec![
            lib.recall_at_k - r.recall,
            lib.map_rel - r.map_rel,
            lib.map_phr - r.map_phr,
            lib.wmap_rel - r.wmap_rel,
            lib.wmap_phr - r.wmap_phr,
            lib.score - r.score,
            lib.score_wtd - r.score_wtd,
        ];
        for (a, b) in lib.ap_rel.iter().zip(&r.ap_rel).chain(lib.ap_phr.iter().zip(&r.ap_phr)) {
            match (a, b) {
                (Some(x), Some(y)) => diffs.push(x - y),
                (None, None) => {}
                _ => diffs.push(f64::INFINITY),
            }
        }
        worst = diffs.iter().map(|d| d.abs()).fold(worst, f64::max);
    }
    worst
}

// command-line helpers

pub const SMALL_CONFIG: &str = r#"seed = 5

[paths]
data = "data"
checkpoint = "train/checkpoint.json"

[gen]
n_scenes = 30

[train]
epochs = 2

[gradcheck]
trials = 5

[ablate]
seeds = [0, 1]
margins = [0.1, 1.0]
"#;

pub fn graphcl(dir: &std::path::Path, args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_graphcl"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

/// Runs every command in `dir` with `SMALL_CONFIG` and returns all output files by relative path.
pub fn full_pipeline(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::write(dir.join("run.toml"), SMALL_CONFIG).unwrap();
    for (cmd, out) in [
        ("gen", "data"),
        ("train", "train"),
        ("eval", "eval"),
        ("gradcheck", "gradcheck"),
        ("ablate", "ablate"),
    ] {
        let o = graphcl(dir, &["--config", "run.toml", "--out", out, cmd]);
        assert!(o.status.success(), "{cmd} failed: {}", String::from_utf8_lossy(&o.stderr));
    }
    let mut files = BTreeMap::new();
    for sub in ["data", "train", "eval", "gradcheck", "ablate"] {
        for entry in std::fs::read_dir(dir.join(sub)).unwrap() {
            let path = entry.unwrap().path();
            files.insert(format!("{sub}/{}", path.file_name().unwrap().to_string_lossy()), std::fs::read(&path).unwrap());
        }
    }
    files
}
