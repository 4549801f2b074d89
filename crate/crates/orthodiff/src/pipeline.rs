//! The stages behind each subcommand. Every artifact lives under one run directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use orthodiff_core::conditioning::TemplateBank;
use orthodiff_core::evaluation::{evaluate, generate, random_spec, MetricsReport};
use orthodiff_core::rng;
use orthodiff_core::training::{pretrain, Ablation, Models, SampleSource, Trainer};
use serde::Serialize;

use crate::checkpoint::{Checkpoint, Stage};
use crate::config::RunConfig;
use crate::error::{config_err, Error, Result};
use crate::imageio::write_png;
use crate::report::write_reports;
use crate::store::{write_atomic, write_corpus, DiskCorpus, Manifest};
use crate::trainlog::TrainLog;

/// File layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn pretrained(&self) -> PathBuf {
        self.root.join("pretrained.ckpt")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("model.ckpt")
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.csv")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn ablation(&self, ablation: Ablation) -> RunDir {
        RunDir::new(self.root.join("ablation").join(ablation.name()))
    }

    pub fn create(&self) -> Result<()> {
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))
    }
}

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'a str,
    version: &'a str,
    config_hash: String,
    config: &'a RunConfig,
}

/// Record the resolved configuration and its hash as `provenance/<command>.json`.
pub fn write_provenance(out: &Path, command: &str, config: &RunConfig) -> Result<PathBuf> {
    let dir = out.join("provenance");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let p = Provenance { command, version: env!("CARGO_PKG_VERSION"), config_hash: config.hash(), config };
    let path = dir.join(format!("{command}.json"));
    write_atomic(&path, &serde_json::to_vec_pretty(&p).expect("provenance serialises"))?;
    Ok(path)
}

pub fn gen_corpus(config: &RunConfig, run: &RunDir) -> Result<Manifest> {
    write_corpus(&run.corpus(), &config.corpus_config(), config.seed)
}

/// Fresh models with every pretraining phase applied.
pub fn pretrained_models(config: &RunConfig, corpus: &DiskCorpus) -> Result<Models> {
    let mut models = Models::new(config.model_config()?, config.seed)?;
    let schedule = config.train_config()?.schedule()?;
    let t0 = Instant::now();
    let rep = pretrain(&mut models, corpus, &config.pretrain_config(), &schedule)?;
    let tail = |xs: &[f64]| xs.iter().rev().take(20).sum::<f64>() / xs.len().clamp(1, 20) as f64;
    log::info!(
        "pretraining done in {:.1}s: encoder {:.4}, backbone {:.4}, heads {:.4}",
        t0.elapsed().as_secs_f64(),
        tail(&rep.encoder),
        tail(&rep.backbone),
        tail(&rep.heads)
    );
    Ok(models)
}

/// Where training starts from.
#[derive(Debug, Clone)]
pub enum TrainStart {
    /// Pretrain from scratch and save `pretrained.ckpt`.
    Scratch,
    /// Load a pretrained checkpoint.
    Init(PathBuf),
    /// Continue a trained checkpoint until `train.steps` total steps.
    Resume(PathBuf),
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: u64,
    pub checkpoint: PathBuf,
    pub final_total: Option<f64>,
}

pub fn train(config: &RunConfig, run: &RunDir, corpus: &DiskCorpus, start: &TrainStart) -> Result<TrainSummary> {
    run.create()?;
    let (config, mut trainer) = match start {
        TrainStart::Scratch | TrainStart::Init(_) => {
            let models = match start {
                TrainStart::Init(p) => Checkpoint::load(p)?.models()?,
                _ => {
                    let m = pretrained_models(config, corpus)?;
                    Checkpoint::capture(config, Stage::Pretrained, &m, None).save(&run.pretrained())?;
                    m
                }
            };
            (config.clone(), Trainer::new(models, config.train_config()?)?)
        }
        TrainStart::Resume(p) => {
            let ckpt = Checkpoint::load(p)?;
            let mut cfg = ckpt.header.config.clone();
            cfg.train.steps = config.train.steps;
            let models = ckpt.models()?;
            let state = ckpt
                .trainer_state(&models)?
                .ok_or_else(|| config_err!("{} holds no optimiser state to resume from", p.display()))?;
            (cfg.clone(), Trainer::resume(models, cfg.train_config()?, state)?)
        }
    };
    let target = config.train.steps as u64;
    let mut log = TrainLog::open(&run.train_log())?;
    let t0 = Instant::now();
    let mut last = None;
    while trainer.step_count() < target {
        let mut rec = trainer.step(corpus)?;
        rec.wall_time = t0.elapsed().as_secs_f64();
        log.append(&rec)?;
        if rec.step % 50 == 0 || rec.step == target {
            log::info!("step {} total {:.5} ldm {:.5} l1 {:.5}", rec.step, rec.total, rec.l_ldm, rec.l1);
        }
        last = Some(rec.total);
    }
    let ckpt = Checkpoint::capture(&config, Stage::Trained, &trainer.models, Some(&trainer.state()));
    ckpt.save(&run.checkpoint())?;
    Ok(TrainSummary { steps: trainer.step_count(), checkpoint: run.checkpoint(), final_total: last })
}

/// Metrics of a trained checkpoint on the held-out identities of `corpus`.
pub fn eval(config: &RunConfig, checkpoint: &Path, corpus: &DiskCorpus) -> Result<MetricsReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let trained = &ckpt.header.config;
    let models = ckpt.models()?;
    let train = trained.train_config()?;
    let label = train.ablation.label();
    let mut report = evaluate(&models, corpus.plan(), &train.loss(), &train.schedule()?, &config.eval_config()?, label)?;
    report.config_hash = trained.hash();
    report.checkpoint_id = ckpt.id();
    Ok(report)
}

#[derive(Serialize)]
struct SampleMeta {
    index: usize,
    prompt: String,
    subject: String,
    reference: String,
    generated: String,
}

/// Generate `sample.count` images of held-out subjects into `samples/`.
pub fn sample(config: &RunConfig, checkpoint: &Path, corpus: &DiskCorpus, run: &RunDir) -> Result<Vec<PathBuf>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let models = ckpt.models()?;
    let train = ckpt.header.config.train_config()?;
    let eval = config.eval_config()?;
    let plan = corpus.plan();
    let held = &plan.heldout_identities;
    if held.is_empty() {
        return Err(config_err!("the corpus has no held-out identities to sample"));
    }
    let dir = run.samples();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let renderer = plan.config.renderer();
    let bank = TemplateBank::default();
    let mut r = rng::seeded(config.seed ^ 0x5a4d_504c);
    let (mut written, mut meta) = (Vec::new(), Vec::new());
    for index in 0..config.sample.count {
        let spec = random_spec(held[rng::below(&mut r, held.len())], &plan.config.vocab, &mut r);
        let template = bank.get(bank.sample_index(&mut r));
        let seed = rng::fork(&mut r);
        let reference = renderer.render(&spec, true)?;
        let image =
            generate(&reference, template, &models, &train.loss(), &train.schedule()?, eval.sampler, eval.sampling_steps, seed)?;
        let (rp, gp) = (format!("{index:03}_reference.png"), format!("{index:03}_generated.png"));
        write_png(&dir.join(&rp), &reference)?;
        write_png(&dir.join(&gp), &image)?;
        written.push(dir.join(&gp));
        meta.push(SampleMeta {
            index,
            prompt: template.text().to_string(),
            subject: spec.identity.shape.token().to_string(),
            reference: rp,
            generated: gp,
        });
    }
    write_atomic(&dir.join("samples.json"), &serde_json::to_vec_pretty(&meta).expect("metadata serialises"))?;
    Ok(written)
}

/// The four ablation variants, all starting from one shared pretraining.
pub fn ablate(config: &RunConfig, run: &RunDir, corpus: &DiskCorpus, init: Option<&Path>) -> Result<Vec<MetricsReport>> {
    run.create()?;
    let pretrained = match init {
        Some(p) => p.to_path_buf(),
        None => {
            let models = pretrained_models(config, corpus)?;
            Checkpoint::capture(config, Stage::Pretrained, &models, None).save(&run.pretrained())?;
            run.pretrained()
        }
    };
    let mut reports = Vec::new();
    for ablation in [Ablation::FULL, Ablation::NO_BACKGROUND, Ablation::NO_POSE, Ablation::NO_EXPERTS] {
        let mut cfg = config.clone();
        cfg.train.ablation = ablation.name().to_string();
        let sub = run.ablation(ablation);
        log::info!("ablation variant: {}", ablation.label());
        let summary = train(&cfg, &sub, corpus, &TrainStart::Init(pretrained.clone()))?;
        let report = eval(&cfg, &summary.checkpoint, corpus)?;
        write_reports(&sub.root, "metrics", std::slice::from_ref(&report))?;
        reports.push(report);
    }
    write_reports(&run.root, "ablation", &reports)?;
    Ok(reports)
}

/// Corpus source used by training: the disk corpus, or nothing if it is missing.
pub fn open_corpus(dir: &Path) -> Result<DiskCorpus> {
    let c = DiskCorpus::open(dir)?;
    if c.is_empty() {
        return Err(Error::Corrupt(format!("{} holds no samples", dir.display())));
    }
    Ok(c)
}
