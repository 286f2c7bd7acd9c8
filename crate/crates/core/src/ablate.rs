//! Loss-combination grid and margin sweep over seeded synthetic datasets.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Result;
use crate::eval::{evaluate_model, evaluate_predictions, gt_triplets, EvalConfig, EvalReport, GtTriplet, RankedPrediction};
use crate::losses::LossConfig;
use crate::scene::{PredicateVocabulary, SceneGraph, SceneKind};
use crate::synth::{gen_dataset, GenConfig, LabeledDataset};
use crate::trainer::{TrainConfig, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Grid,
    Sweep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub section: Section,
    pub label: String,
    pub loss: LossConfig,
}

/// All subsets of the three margin losses on top of cross-entropy, with the
/// configured weights for the enabled ones.
pub fn grid_cells(base: &LossConfig) -> Vec<Cell> {
    (0..8u8)
        .map(|mask| {
            let on = |bit: u8| mask & (1 << bit) != 0;
            let mut label = String::from("L0");
            for (bit, name) in ["+L1", "+L2", "+L3"].iter().enumerate() {
                if on(bit as u8) {
                    label.push_str(name);
                }
            }
            let pick = |bit: u8, v: f64| if on(bit) { v } else { 0.0 };
            Cell {
                section: Section::Grid,
                label,
                loss: base.with_lambdas(pick(0, base.lambda1), pick(1, base.lambda2), pick(2, base.lambda3)),
            }
        })
        .collect()
}

pub fn sweep_cells(base: &LossConfig, margins: &[f64]) -> Vec<Cell> {
    margins
        .iter()
        .map(|&m| Cell {
            section: Section::Sweep,
            label: format!("m={m}"),
            loss: base.with_margin(m),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub section: Section,
    pub label: String,
    /// `None` on rows averaged over seeds.
    pub seed: Option<u64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub margin: f64,
    pub active_hinges_at_init: f64,
    pub recall_at_k: f64,
    pub wmap_rel: f64,
    pub wmap_phr: f64,
    pub score_wtd: f64,
    pub wmap_rel_entity_confusion: f64,
    pub wmap_rel_proximal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub config_hash: String,
    pub rows: Vec<AblationRow>,
    pub means: Vec<AblationRow>,
}

fn subset_report(
    preds: &[Vec<RankedPrediction>],
    scenes: &[SceneGraph],
    kind: SceneKind,
    vocab: &PredicateVocabulary,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let (p, g): (Vec<Vec<RankedPrediction>>, Vec<Vec<GtTriplet>>) = preds
        .iter()
        .zip(scenes)
        .filter(|(_, s)| s.kind == Some(kind))
        .map(|(p, s)| (p.clone(), gt_triplets(s)))
        .unzip();
    evaluate_predictions(&p, &g, vocab, cfg)
}

/// Trains one cell on `data` and evaluates it on the test split.
pub fn run_cell(
    data: &LabeledDataset,
    cell: &Cell,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    seed: u64,
) -> Result<AblationRow> {
    let vocab = &data.metadata.vocab;
    let cfg = TrainConfig {
        loss: cell.loss,
        seed,
        ..train_cfg.clone()
    };
    let trainer = Trainer::new(&data.train, &[], vocab, data.metadata.n_entity_classes, &cfg, eval_cfg)?;
    let hinges = trainer.active_hinges_at_init()?;
    let out = trainer.run()?;
    let (report, preds) = evaluate_model(&out.params, &out.frequency, vocab, &data.test, eval_cfg)?;
    let ent = subset_report(&preds, &data.test, SceneKind::EntityConfusion, vocab, eval_cfg)?;
    let prox = subset_report(&preds, &data.test, SceneKind::ProximalPairs, vocab, eval_cfg)?;
    Ok(AblationRow {
        section: cell.section,
        label: cell.label.clone(),
        seed: Some(seed),
        lambda1: cell.loss.lambda1,
        lambda2: cell.loss.lambda2,
        lambda3: cell.loss.lambda3,
        margin: cell.loss.alpha1,
        active_hinges_at_init: hinges as f64,
        recall_at_k: report.recall_at_k,
        wmap_rel: report.wmap_rel,
        wmap_phr: report.wmap_phr,
        score_wtd: report.score_wtd,
        wmap_rel_entity_confusion: ent.wmap_rel,
        wmap_rel_proximal: prox.wmap_rel,
    })
}

fn mean_rows(rows: &[AblationRow], cells: &[Cell]) -> Vec<AblationRow> {
    cells
        .iter()
        .map(|c| {
            let group: Vec<&AblationRow> = rows
                .iter()
                .filter(|r| r.section == c.section && r.label == c.label)
                .collect();
            let n = group.len() as f64;
            let mean = |f: fn(&AblationRow) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / n;
            AblationRow {
                seed: None,
                active_hinges_at_init: mean(|r| r.active_hinges_at_init),
                recall_at_k: mean(|r| r.recall_at_k),
                wmap_rel: mean(|r| r.wmap_rel),
                wmap_phr: mean(|r| r.wmap_phr),
                score_wtd: mean(|r| r.score_wtd),
                wmap_rel_entity_confusion: mean(|r| r.wmap_rel_entity_confusion),
                wmap_rel_proximal: mean(|r| r.wmap_rel_proximal),
                ..group[0].clone()
            }
        })
        .collect()
}

/// Runs every cell for every seed; each seed generates its own dataset from the
/// generator section with that seed. Cells run in parallel, rows keep cell order.
pub fn run_ablation(cfg: &RunConfig) -> Result<AblationReport> {
    let mut cells = Vec::new();
    if cfg.ablate.grid {
        cells.extend(grid_cells(&cfg.train.loss));
    }
    if cfg.ablate.sweep {
        cells.extend(sweep_cells(&cfg.train.loss, &cfg.ablate.margins));
    }
    let datasets: Vec<LabeledDataset> = cfg
        .ablate
        .seeds
        .par_iter()
        .map(|&s| gen_dataset(&GenConfig { seed: s, ..cfg.gen.clone() }))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, &Cell)> = (0..datasets.len()).flat_map(|d| cells.iter().map(move |c| (d, c))).collect();
    let rows: Vec<AblationRow> = jobs
        .par_iter()
        .map(|&(d, cell)| run_cell(&datasets[d], cell, &cfg.train, &cfg.eval, cfg.ablate.seeds[d]))
        .collect::<Result<_>>()?;
    Ok(AblationReport {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        means: mean_rows(&rows, &cells),
        rows,
    })
}

impl AblationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization is infallible")
    }

    /// Per-seed rows followed by the seed means (empty `seed` column).
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "run_seed",
            "config_hash",
            "section",
            "label",
            "seed",
            "lambda1",
            "lambda2",
            "lambda3",
            "margin",
            "active_hinges_at_init",
            "R@50",
            "wmAP_rel",
            "wmAP_phr",
            "score_wtd",
            "wmAP_rel_entity_confusion",
            "wmAP_rel_proximal",
        ])
        .expect("in-memory csv");
        for r in self.rows.iter().chain(&self.means) {
            let section = match r.section {
                Section::Grid => "grid",
                Section::Sweep => "sweep",
            };
            let mut rec = vec![
                self.seed.to_string(),
                self.config_hash.clone(),
                section.to_string(),
                r.label.clone(),
                r.seed.map_or_else(String::new, |s| s.to_string()),
            ];
            rec.extend(
                [
                    r.lambda1,
                    r.lambda2,
                    r.lambda3,
                    r.margin,
                    r.active_hinges_at_init,
                    r.recall_at_k,
                    r.wmap_rel,
                    r.wmap_phr,
                    r.score_wtd,
                    r.wmap_rel_entity_confusion,
                    r.wmap_rel_proximal,
                ]
                .iter()
                .map(f64::to_string),
            );
            w.write_record(&rec).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }

    pub fn mean(&self, section: Section, label: &str) -> Option<&AblationRow> {
        self.means.iter().find(|r| r.section == section && r.label == label)
    }
}
