use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use graphcl::ablate::run_ablation;
use graphcl::config::RunConfig;
use graphcl::eval::evaluate_model;
use graphcl::model::Checkpoint;
use graphcl::synth::{gen_dataset, LabeledDataset};
use graphcl::trainer::{grad_check, Trainer};

/// Exit code for numerical failures: divergence or a failed gradient check.
const EXIT_NUMERICAL: u8 = 2;
const GRADCHECK_THRESHOLD: f64 = 1e-3;

#[derive(Parser, Debug)]
#[command(name = "graphcl", version, about = "Contrastive relationship losses: data generation, training, evaluation")]
struct Cli {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Print the full default configuration and exit.
    #[arg(long)]
    print_defaults: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate a synthetic dataset (train/val/test JSON Lines plus metadata).
    Gen,
    /// Train on `paths.data`; writes a checkpoint and the training log.
    Train,
    /// Evaluate `paths.checkpoint` on split `paths.split` of `paths.data`.
    Eval,
    /// Compare analytic and finite-difference gradients on random scenes.
    Gradcheck,
    /// Run the loss-combination grid and the margin sweep.
    Ablate,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Gradcheck => "gradcheck",
            Command::Ablate => "ablate",
        }
    }
}

/// Error carrying an explicit exit code.
#[derive(Debug)]
struct Numerical(String);

impl std::fmt::Display for Numerical {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Numerical {}

struct Run {
    cfg: RunConfig,
    hash: String,
    out: PathBuf,
    files: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    seed: u64,
    config_hash: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    config_hash: &'a str,
    /// SHA-256 of every file written, by name.
    files: &'a BTreeMap<String, String>,
}

impl Run {
    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.out.join(name);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.files.insert(name.to_string(), hex::encode(Sha256::digest(contents.as_bytes())));
        Ok(())
    }

    fn record(&mut self, name: &str) -> Result<()> {
        let bytes = std::fs::read(self.out.join(name))?;
        self.files.insert(name.to_string(), hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }

    fn stamped<T: Serialize>(&self, body: &T) -> Result<String> {
        let s = Stamped {
            seed: self.cfg.seed,
            config_hash: &self.hash,
            body,
        };
        Ok(serde_json::to_string_pretty(&s)? + "\n")
    }

    fn finish(&mut self, command: Command) -> Result<()> {
        let toml = self.cfg.to_toml();
        self.write("run_config.toml", &toml)?;
        let manifest = Manifest {
            command: command.name(),
            seed: self.cfg.seed,
            config_hash: &self.hash,
            files: &self.files,
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        std::fs::write(self.out.join("manifest.json"), text)?;
        Ok(())
    }

    fn dataset_dir(&self) -> Result<&Path> {
        match &self.cfg.paths.data {
            Some(p) => Ok(p),
            None => bail!("paths.data must name a dataset directory"),
        }
    }
}

fn cmd_gen(run: &mut Run) -> Result<()> {
    let ds = gen_dataset(&run.cfg.gen)?;
    ds.write(&run.out)?;
    for name in ["train.jsonl", "val.jsonl", "test.jsonl", "metadata.json"] {
        run.record(name)?;
    }
    eprintln!(
        "wrote {} train / {} val / {} test scenes to {}",
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        run.out.display()
    );
    Ok(())
}

fn cmd_train(run: &mut Run) -> Result<()> {
    let dir = run.dataset_dir()?.to_path_buf();
    let ds = LabeledDataset::read(&dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    let meta = &ds.metadata;
    let mut trainer = Trainer::new(&ds.train, &ds.val, &meta.vocab, meta.n_entity_classes, &run.cfg.train, &run.cfg.eval)?;
    trainer.set_config_hash(&run.hash);
    let mut failure = None;
    for _ in 0..run.cfg.train.epochs {
        match trainer.run_epoch() {
            Ok(r) => eprintln!("epoch {} total {:.6}", r.epoch, r.total),
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    let log = trainer.log().clone();
    run.write("train_log.csv", &log.to_csv())?;
    run.write("train_log.json", &(log.to_json() + "\n"))?;
    if let Some(e) = failure {
        if matches!(e, graphcl::Error::DivergenceDetected { .. }) {
            return Err(Numerical(e.to_string()).into());
        }
        return Err(e.into());
    }
    let ckpt = Checkpoint::new(
        trainer.params().clone(),
        trainer.table().clone(),
        meta.vocab.clone(),
        meta.n_entity_classes,
        run.cfg.seed,
        run.hash.clone(),
    );
    run.write("checkpoint.json", &(ckpt.to_json() + "\n"))?;
    Ok(())
}

fn cmd_eval(run: &mut Run) -> Result<()> {
    let dir = run.dataset_dir()?.to_path_buf();
    let ckpt_path = match &run.cfg.paths.checkpoint {
        Some(p) => p.clone(),
        None => bail!("paths.checkpoint must name a checkpoint file"),
    };
    let ckpt = Checkpoint::load(&ckpt_path).with_context(|| format!("reading checkpoint {}", ckpt_path.display()))?;
    let ds = LabeledDataset::read(&dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    if ckpt.vocab != ds.metadata.vocab || ckpt.n_entity_classes != ds.metadata.n_entity_classes {
        return Err(graphcl::Error::VocabularyMismatch(format!(
            "checkpoint has {} predicates over {} entity classes, dataset has {} over {}",
            ckpt.vocab.len(),
            ckpt.n_entity_classes,
            ds.metadata.vocab.len(),
            ds.metadata.n_entity_classes
        ))
        .into());
    }
    let scenes = ds.split(&run.cfg.paths.split)?;
    let (report, preds) = evaluate_model(&ckpt.params, &ckpt.frequency, &ckpt.vocab, scenes, &run.cfg.eval)?;
    let mut lines = String::new();
    for p in preds.iter().flatten() {
        lines.push_str(&serde_json::to_string(p)?);
        lines.push('\n');
    }
    run.write("predictions.jsonl", &lines)?;
    let json = run.stamped(&report)?;
    run.write("eval_report.json", &json)?;
    let csv = report.to_csv(&ckpt.vocab, run.cfg.seed, &run.hash);
    run.write("eval_report.csv", &csv)?;
    eprintln!(
        "R@{} {:.4}  wmAP_rel {:.4}  wmAP_phr {:.4}  score_wtd {:.4}",
        report.k, report.recall_at_k, report.wmap_rel, report.wmap_phr, report.score_wtd
    );
    Ok(())
}

fn cmd_gradcheck(run: &mut Run) -> Result<()> {
    let report = grad_check(&run.cfg.gradcheck)?;
    let json = run.stamped(&report)?;
    run.write("gradcheck.json", &json)?;
    for c in &report.components {
        let worst = c
            .worst
            .as_ref()
            .map_or_else(String::new, |w| format!(" at {}[{}] (trial {})", w.block, w.offset, w.trial));
        eprintln!("{:<6} max rel err {:.3e}{worst}", c.component, c.max_rel_error);
    }
    eprintln!("skipped {} coordinates at non-smooth points", report.skipped);
    if !report.passed(GRADCHECK_THRESHOLD) {
        return Err(Numerical(format!(
            "gradient check failed: max relative error {:.3e} >= {GRADCHECK_THRESHOLD:e}",
            report.max_rel_error
        ))
        .into());
    }
    Ok(())
}

fn cmd_ablate(run: &mut Run) -> Result<()> {
    let report = run_ablation(&run.cfg)?;
    run.write("ablation.csv", &report.to_csv())?;
    run.write("ablation.json", &(report.to_json() + "\n"))?;
    for r in &report.means {
        eprintln!(
            "{:<12} wmAP_rel {:.4}  entity {:.4}  proximal {:.4}  hinges@init {:.1}",
            r.label, r.wmap_rel, r.wmap_rel_entity_confusion, r.wmap_rel_proximal, r.active_hinges_at_init
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if cli.print_defaults {
        std::io::stdout().write_all(RunConfig::default().to_toml().as_bytes())?;
        return Ok(());
    }
    let Some(command) = cli.command else {
        bail!("no command given; see --help");
    };
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    let cfg = cfg.resolved(cli.seed)?;
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let mut run = Run {
        hash: cfg.hash(),
        cfg,
        out: cli.out,
        files: BTreeMap::new(),
    };
    let result = match command {
        Command::Gen => cmd_gen(&mut run),
        Command::Train => cmd_train(&mut run),
        Command::Eval => cmd_eval(&mut run),
        Command::Gradcheck => cmd_gradcheck(&mut run),
        Command::Ablate => cmd_ablate(&mut run),
    };
    run.finish(command)?;
    result
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Numerical>().is_some() {
                ExitCode::from(EXIT_NUMERICAL)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
