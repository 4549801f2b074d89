//! Model bundle, pretraining phases, the joint objective and the optimiser loop.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Gradients, Mode, Var};
use crate::conditioning::{AlignmentConfig, AlignmentModel, Lexicon, TemplateBank, TextEncoderConfig, TextEncoderModel};
use crate::corpus::{caption, materialize, CorpusConfig, CorpusPlan, CorpusSample, Renderer, SampleRecord, ShapeFamily};
use crate::diffusion::{
    forward_diffuse, ldm_loss_var, DenoiserConfig, DenoiserModel, LatentCodec, NoiseSchedule, ScheduleKind,
};
use crate::disentangle::{
    alignment_term_var, decouple_var, ground_truth_features, DecoupleConfig, ExpertConfig, ExpertModel, Factor, Lift,
};
use crate::error::{config_err, input_err, Error, Result};
use crate::feature::{encode_image, EncoderConfig, ImageTensor, EncoderModel, MapperConfig, MapperModel, TAPS};
use crate::nn::{Linear, ParamId, ParamStore, Tag};
use crate::rng::{self, Rng, RngState};
use crate::tensor::Tensor;

/// Shapes of every network in the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub mapper: MapperConfig,
    pub expert: ExpertConfig,
    pub aligner: AlignmentConfig,
    pub text: TextEncoderConfig,
    pub denoiser: DenoiserConfig,
    pub codec: LatentCodec,
    /// Classes of the encoder's shape, colour and texture heads.
    pub attribute_classes: [usize; 3],
    /// Width of the joint image/text space of the evaluation heads.
    pub joint_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            mapper: MapperConfig::default(),
            expert: ExpertConfig::default(),
            aligner: AlignmentConfig::default(),
            text: TextEncoderConfig::default(),
            denoiser: DenoiserConfig::default(),
            codec: LatentCodec::Unshuffle,
            attribute_classes: [6, 8, 4],
            joint_dim: 32,
        }
    }
}

impl ModelConfig {
    /// A miniature pipeline (16×16 images, 8×8×12 latents, width 16) for gradient checks.
    pub fn tiny() -> Self {
        let d = 16;
        Self {
            encoder: EncoderConfig { image_size: 16, widths: [4, 4, 8, 8, 8], d_enc: d, ..Default::default() },
            mapper: MapperConfig { d_enc: d, hidden: d, d_main: d, ..Default::default() },
            expert: ExpertConfig { d_main: d, hidden: d, d_enc: d, ..Default::default() },
            aligner: AlignmentConfig { d_main: d, hidden: d, d_text: d, ..Default::default() },
            text: TextEncoderConfig { d_text: d, ffn_hidden: d },
            denoiser: DenoiserConfig {
                latent_channels: 12,
                latent_size: 8,
                base_channels: 4,
                mid_channels: 8,
                time_dim: 8,
                d_text: d,
                groups: 2,
            },
            codec: LatentCodec::Unshuffle,
            attribute_classes: [6, 8, 4],
            joint_dim: 8,
        }
    }

    /// Set `d_enc`, `d_main` and `d_text` consistently across networks.
    pub fn with_dims(mut self, d_enc: usize, d_main: usize, d_text: usize) -> Self {
        self.encoder.d_enc = d_enc;
        self.mapper.d_enc = d_enc;
        self.mapper.d_main = d_main;
        self.expert.d_main = d_main;
        self.expert.d_enc = d_enc;
        self.aligner.d_main = d_main;
        self.aligner.d_text = d_text;
        self.text.d_text = d_text;
        self.denoiser.d_text = d_text;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.encoder.d_enc;
        if self.mapper.d_enc != e || self.expert.d_enc != e {
            return Err(config_err!("encoder width {} disagrees with mapper/expert input", e));
        }
        if self.mapper.d_main != self.expert.d_main || self.mapper.d_main != self.aligner.d_main {
            return Err(config_err!("main feature width disagrees between mapper, experts and aligner"));
        }
        if self.aligner.d_text != self.text.d_text || self.text.d_text != self.denoiser.d_text {
            return Err(config_err!("text width disagrees between aligner, text encoder and denoiser"));
        }
        let [c, h, _] = self.codec.latent_shape(self.encoder.image_size, self.encoder.in_channels);
        if c != self.denoiser.latent_channels || h != self.denoiser.latent_size {
            return Err(config_err!(
                "codec {} gives latents [{c}, {h}, {h}] but the denoiser expects [{}, {2}, {2}]",
                self.codec.name(),
                self.denoiser.latent_channels,
                self.denoiser.latent_size
            ));
        }
        Ok(())
    }
}

/// Parameter groups by network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Encoder,
    EncoderHead,
    Mapper,
    PoseExpert,
    BackgroundExpert,
    Aligner,
    TextEncoder,
    Denoiser,
    EvalHeads,
}

impl Component {
    pub const ALL: [Component; 9] = [
        Component::Encoder,
        Component::EncoderHead,
        Component::Mapper,
        Component::PoseExpert,
        Component::BackgroundExpert,
        Component::Aligner,
        Component::TextEncoder,
        Component::Denoiser,
        Component::EvalHeads,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Component::Encoder => "encoder",
            Component::EncoderHead => "encoder_head",
            Component::Mapper => "mapper",
            Component::PoseExpert => "expert_pose",
            Component::BackgroundExpert => "expert_background",
            Component::Aligner => "aligner",
            Component::TextEncoder => "text_encoder",
            Component::Denoiser => "denoiser",
            Component::EvalHeads => "eval_head",
        }
    }
}

/// Every network of the pipeline over one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderModel,
    pub encoder_heads: [Linear; 3],
    pub mapper: MapperModel,
    pub pose_expert: ExpertModel,
    pub background_expert: ExpertModel,
    pub aligner: AlignmentModel,
    pub text: TextEncoderModel,
    pub denoiser: DenoiserModel,
    pub image_head: Linear,
    pub text_head: Linear,
}

impl Models {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(seed);
        let mut s = ParamStore::new();
        let c = &config;
        let encoder = EncoderModel::new(&mut s, c.encoder.clone(), &mut r)?;
        let mut head = |s: &mut ParamStore, name: &str, k: usize| {
            Linear::new(s, &alloc::format!("encoder_head.{name}"), TAPS * c.encoder.d_enc, k, true, Tag::Untagged, &mut r)
        };
        let encoder_heads = [
            head(&mut s, "shape", c.attribute_classes[0])?,
            head(&mut s, "color", c.attribute_classes[1])?,
            head(&mut s, "texture", c.attribute_classes[2])?,
        ];
        let mapper = MapperModel::new(&mut s, c.mapper.clone(), &mut r)?;
        let pose_expert = ExpertModel::new(&mut s, Factor::Pose, c.expert.clone(), &mut r)?;
        let background_expert = ExpertModel::new(&mut s, Factor::Background, c.expert.clone(), &mut r)?;
        let aligner = AlignmentModel::new(&mut s, c.aligner.clone(), &mut r)?;
        let text = TextEncoderModel::new(&mut s, Lexicon::default(), c.text.clone(), &mut r)?;
        let denoiser = DenoiserModel::new(&mut s, c.denoiser.clone(), &mut r)?;
        let image_head = Linear::new(&mut s, "eval_head.image", c.encoder.d_enc, c.joint_dim, false, Tag::Untagged, &mut r)?;
        let text_head = Linear::new(&mut s, "eval_head.text", c.text.d_text, c.joint_dim, false, Tag::Untagged, &mut r)?;
        Ok(Self {
            config,
            store: s,
            encoder,
            encoder_heads,
            mapper,
            pose_expert,
            background_expert,
            aligner,
            text,
            denoiser,
            image_head,
            text_head,
        })
    }

    pub fn component(&self, c: Component) -> Vec<ParamId> {
        self.store.ids_with_prefix(c.prefix())
    }

    pub fn expert(&self, f: Factor) -> &ExpertModel {
        match f {
            Factor::Pose => &self.pose_expert,
            Factor::Background => &self.background_expert,
        }
    }

    pub fn lift(&self) -> Lift {
        Lift { d_enc: self.config.encoder.d_enc, d_main: self.config.mapper.d_main }
    }
}

/// Which experts take part; removing one bypasses its projection and its alignment term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub pose: bool,
    pub background: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

impl Ablation {
    pub const FULL: Ablation = Ablation { pose: true, background: true };
    pub const NO_BACKGROUND: Ablation = Ablation { pose: true, background: false };
    pub const NO_POSE: Ablation = Ablation { pose: false, background: true };
    pub const NO_EXPERTS: Ablation = Ablation { pose: false, background: false };

    pub fn name(self) -> &'static str {
        match (self.pose, self.background) {
            (true, true) => "none",
            (true, false) => "bg",
            (false, true) => "pose",
            (false, false) => "both",
        }
    }

    pub fn label(self) -> &'static str {
        match (self.pose, self.background) {
            (true, true) => "full",
            (true, false) => "w/o background expert",
            (false, true) => "w/o pose expert",
            (false, false) => "w/o both",
        }
    }

    pub fn factors(self) -> Vec<Factor> {
        let mut v = Vec::new();
        if self.pose {
            v.push(Factor::Pose);
        }
        if self.background {
            v.push(Factor::Background);
        }
        v
    }
}

impl core::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::FULL),
            "bg" | "background" => Ok(Self::NO_BACKGROUND),
            "pose" => Ok(Self::NO_POSE),
            "both" => Ok(Self::NO_EXPERTS),
            other => Err(config_err!("unknown ablation {:?}", other)),
        }
    }
}

/// Denoiser cross-attention, mapper, active experts and aligner; nothing else.
pub fn trainable_parameters(models: &Models, ablation: Ablation) -> Result<Vec<ParamId>> {
    let s = &models.store;
    let mut ids = Vec::new();
    for id in models.component(Component::Denoiser) {
        match s.tag(id) {
            Tag::CrossAttention => ids.push(id),
            Tag::Backbone => {}
            Tag::Untagged => return Err(config_err!("denoiser parameter {} carries no group tag", s.name(id))),
        }
    }
    ids.extend(models.component(Component::Mapper));
    if ablation.pose {
        ids.extend(models.component(Component::PoseExpert));
    }
    if ablation.background {
        ids.extend(models.component(Component::BackgroundExpert));
    }
    ids.extend(models.component(Component::Aligner));
    ids.sort();
    Ok(ids)
}

/// Random access to corpus samples.
pub trait SampleSource {
    fn corpus_config(&self) -> &CorpusConfig;
    fn records(&self) -> &[SampleRecord];
    fn sample(&self, index: usize) -> Result<CorpusSample>;

    fn len(&self) -> usize {
        self.records().len()
    }

    fn is_empty(&self) -> bool {
        self.records().is_empty()
    }
}

/// Samples rendered on demand from a plan.
#[derive(Debug, Clone)]
pub struct RenderedSource {
    pub plan: CorpusPlan,
    pub renderer: Renderer,
}

impl RenderedSource {
    pub fn new(plan: CorpusPlan) -> Self {
        let renderer = plan.config.renderer();
        Self { plan, renderer }
    }

    /// Keep only the first `n` samples.
    pub fn truncated(mut self, n: usize) -> Self {
        self.plan.samples.truncate(n);
        self
    }
}

impl SampleSource for RenderedSource {
    fn corpus_config(&self) -> &CorpusConfig {
        &self.plan.config
    }

    fn records(&self) -> &[SampleRecord] {
        &self.plan.samples
    }

    fn sample(&self, index: usize) -> Result<CorpusSample> {
        let rec = self.plan.samples.get(index).ok_or_else(|| input_err!("sample index {} out of range", index))?;
        materialize(rec, &self.renderer)
    }
}

/// Frozen-encoder features and latent of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub raw: Tensor,
    pub pose_gt: Tensor,
    pub background_gt: Tensor,
    pub z0: Tensor,
}

pub fn prepare(models: &Models, sample: &CorpusSample) -> Result<Prepared> {
    let s = &models.store;
    let raw = encode_image(&sample.main_image, &models.encoder, s)?;
    let pose = ground_truth_features(Factor::Pose, &sample.pose_variants, &models.encoder, s)?;
    let bg = ground_truth_features(Factor::Background, core::slice::from_ref(&sample.background_image), &models.encoder, s)?;
    Ok(Prepared {
        raw: raw.to_matrix(),
        pose_gt: pose.features.to_matrix(),
        background_gt: bg.features.to_matrix(),
        z0: models.config.codec.encode(&sample.main_image)?,
    })
}

/// Random choices for one batch element.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub index: usize,
    pub template: usize,
    pub t: usize,
    pub eps: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub decouple: DecoupleConfig,
    pub ablation: Ablation,
}

/// Scalar nodes of the batch objective.
#[derive(Debug, Clone, Copy)]
pub struct BatchTerms {
    pub total: Var,
    pub l2: Var,
    pub ldm: Var,
    pub l1: Var,
    pub f_main_l1: Var,
}

/// Main features (mapped) and their decoupled form, `[TAPS, d_main]` each.
pub fn features_var(
    g: &mut Graph,
    models: &Models,
    raw: Var,
    loss: &LossConfig,
) -> Result<(Var, Var, Vec<(Factor, Var)>)> {
    let s = &models.store;
    let f = models.mapper.forward(g, s, raw)?;
    let lift = models.lift();
    let mut preds = Vec::new();
    let mut dirs: [Option<Var>; 2] = [None, None];
    for factor in loss.ablation.factors() {
        let pred = models.expert(factor).forward(g, s, f)?;
        dirs[factor as usize] = Some(lift.apply_var(g, pred)?);
        preds.push((factor, pred));
    }
    let dec = decouple_var(g, f, dirs[Factor::Pose as usize], dirs[Factor::Background as usize], &loss.decouple)?;
    Ok((f, dec, preds))
}

fn accumulate(g: &mut Graph, acc: Option<Var>, v: Var) -> Result<Var> {
    match acc {
        Some(a) => g.add(a, v),
        None => Ok(v),
    }
}

/// `L = L_ldm + λ₁‖F_main‖₁ + λ₂ L₁` over a batch, each term averaged over samples.
pub fn batch_objective(
    g: &mut Graph,
    models: &Models,
    bank: &TemplateBank,
    schedule: &NoiseSchedule,
    items: &[(&Prepared, &Draw)],
    loss: &LossConfig,
) -> Result<BatchTerms> {
    if items.is_empty() {
        return Err(input_err!("empty batch"));
    }
    let s = &models.store;
    let (mut ldm_sum, mut l1_sum, mut norm_sum) = (None, None, None);
    for (p, d) in items {
        let raw = g.constant(p.raw.clone());
        let (_, dec, preds) = features_var(g, models, raw, loss)?;
        for (factor, pred) in preds {
            let gt = match factor {
                Factor::Pose => &p.pose_gt,
                Factor::Background => &p.background_gt,
            };
            let gt = g.constant(gt.clone());
            let term = alignment_term_var(g, pred, gt)?;
            l1_sum = Some(accumulate(g, l1_sum, term)?);
        }
        let norm = g.sum_abs(dec);
        norm_sum = Some(accumulate(g, norm_sum, norm)?);

        let tokens = models.aligner.forward(g, s, dec)?;
        let template = bank.templates().get(d.template).ok_or_else(|| input_err!("template {} out of range", d.template))?;
        let cond = models.text.condition_var(g, s, template, tokens)?;
        let zt = forward_diffuse(&p.z0, d.t, &d.eps, schedule)?;
        let zt = g.constant(zt.z);
        let pred = models.denoiser.forward(g, s, zt, d.t, cond)?;
        let eps = g.constant(d.eps.clone());
        let ldm = ldm_loss_var(g, eps, pred)?;
        ldm_sum = Some(accumulate(g, ldm_sum, ldm)?);
    }
    let inv = 1.0 / items.len() as f64;
    let ldm = g.scale(ldm_sum.expect("non-empty batch"), inv);
    let f_main_l1 = g.scale(norm_sum.expect("non-empty batch"), inv);
    let l1 = match l1_sum {
        Some(v) => g.scale(v, inv),
        None => g.constant(Tensor::scalar(0.0)),
    };
    let weighted_norm = g.scale(f_main_l1, loss.lambda1);
    let l2 = g.add(ldm, weighted_norm)?;
    let weighted_l1 = g.scale(l1, loss.lambda2);
    let total = g.add(l2, weighted_l1)?;
    Ok(BatchTerms { total, l2, ldm, l1, f_main_l1 })
}

/// First and second moment estimates of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub moments: BTreeMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, moments: BTreeMap::new() }
    }

    /// Update `ids`; parameters the loss did not reach get a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, ids: &[ParamId]) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for &id in ids {
            let shape = store.get(id).shape().to_vec();
            let mom = self
                .moments
                .entry(id)
                .or_insert_with(|| Moments { m: Tensor::zeros(&shape), v: Tensor::zeros(&shape) });
            let g = grads.param(id);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                let m = &mut mom.m.data_mut()[i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                let v = &mut mom.v.data_mut()[i];
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                let (mh, vh) = (mom.m.data()[i] / bc1, mom.v.data()[i] / bc2);
                p[i] -= self.lr * self.weight_decay * p[i];
                p[i] -= self.lr * mh / (libm::sqrt(vh) + self.eps);
            }
        }
    }
}

/// Global L2 norm of the gradients of `ids`.
pub fn grad_norm(grads: &Gradients, ids: &[ParamId]) -> f64 {
    libm::sqrt(ids.iter().filter_map(|&id| grads.param(id)).map(Tensor::norm_sq).sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub steps: usize,
    pub seed: u64,
    pub decouple: DecoupleConfig,
    pub ablation: Ablation,
    pub weight_decay: f64,
    pub schedule_steps: usize,
    pub schedule_kind: ScheduleKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            base_lr: 1e-4,
            lambda1: 0.01,
            lambda2: 0.1,
            steps: 500,
            seed: 0,
            decouple: DecoupleConfig::default(),
            ablation: Ablation::FULL,
            weight_decay: 0.01,
            schedule_steps: 100,
            schedule_kind: ScheduleKind::LinearBeta,
        }
    }
}

impl TrainConfig {
    /// Effective learning rate: `batch_size × base_lr`.
    pub fn lr(&self) -> f64 {
        self.batch_size as f64 * self.base_lr
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { lambda1: self.lambda1, lambda2: self.lambda2, decouple: self.decouple, ablation: self.ablation }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err!("batch size must be at least 1"));
        }
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return Err(config_err!("loss weights must be non-negative"));
        }
        if !(self.base_lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(config_err!("learning rate must be positive and weight decay non-negative"));
        }
        if !(self.decouple.eps > 0.0) {
            return Err(config_err!("decouple eps must be positive"));
        }
        if self.schedule_steps < 2 {
            return Err(config_err!("schedule needs T >= 2"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.schedule_steps, self.schedule_kind)
    }
}

/// One optimiser step's bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    /// Alignment loss `L₁`.
    pub l1: f64,
    pub l_ldm: f64,
    /// Batch mean of `‖F_main‖₁`.
    pub f_main_l1: f64,
    pub l2: f64,
    pub total: f64,
    pub grad_norm: f64,
    /// Seconds since the run started; filled in by the caller.
    pub wall_time: f64,
}

/// Everything besides parameters needed to resume a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub step: u64,
    pub rng: RngState,
    pub optimizer: AdamW,
}

/// Main training phase over a fixed trainable subset.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub models: Models,
    pub config: TrainConfig,
    pub optimizer: AdamW,
    bank: TemplateBank,
    schedule: NoiseSchedule,
    rng: Rng,
    step: u64,
    trainable: Vec<ParamId>,
    mask: Vec<bool>,
    cache: BTreeMap<usize, Prepared>,
}

impl Trainer {
    pub fn new(models: Models, config: TrainConfig) -> Result<Self> {
        let rng = rng::seeded(config.seed);
        let optimizer = AdamW::new(config.lr(), config.weight_decay);
        Self::assemble(models, config, TrainerState { step: 0, rng: RngState::capture(&rng), optimizer })
    }

    pub fn resume(models: Models, config: TrainConfig, state: TrainerState) -> Result<Self> {
        Self::assemble(models, config, state)
    }

    fn assemble(models: Models, config: TrainConfig, state: TrainerState) -> Result<Self> {
        config.validate()?;
        let trainable = trainable_parameters(&models, config.ablation)?;
        let mask = models.store.mask(&trainable);
        Ok(Self {
            schedule: config.schedule()?,
            bank: TemplateBank::default(),
            rng: state.rng.restore(),
            step: state.step,
            optimizer: state.optimizer,
            trainable,
            mask,
            cache: BTreeMap::new(),
            models,
            config,
        })
    }

    pub fn state(&self) -> TrainerState {
        TrainerState { step: self.step, rng: RngState::capture(&self.rng), optimizer: self.optimizer.clone() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn trainable(&self) -> &[ParamId] {
        &self.trainable
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn into_models(self) -> Models {
        self.models
    }

    fn prepared<S: SampleSource + ?Sized>(&mut self, source: &S, index: usize) -> Result<()> {
        if !self.cache.contains_key(&index) {
            let p = prepare(&self.models, &source.sample(index)?)?;
            self.cache.insert(index, p);
        }
        Ok(())
    }

    /// Draw a batch, take one optimiser step on the total objective, and report its terms.
    pub fn step<S: SampleSource + ?Sized>(&mut self, source: &S) -> Result<TrainRecord> {
        if source.is_empty() {
            return Err(input_err!("training corpus is empty"));
        }
        let shape = self.models.denoiser.latent_shape();
        let n: usize = shape.iter().product();
        let mut draws = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let index = rng::below(&mut self.rng, source.len());
            let template = self.bank.sample_index(&mut self.rng);
            let t = 1 + rng::below(&mut self.rng, self.schedule.steps());
            let eps = Tensor::from_vec(&shape, (0..n).map(|_| rng::normal(&mut self.rng)).collect())?;
            draws.push(Draw { index, template, t, eps });
        }
        let dropout_seed = rng::fork(&mut self.rng);
        for d in &draws {
            self.prepared(source, d.index)?;
        }
        let items: Vec<(&Prepared, &Draw)> = draws.iter().map(|d| (&self.cache[&d.index], d)).collect();
        let mut g = Graph::new(self.mask.clone(), Mode::Train, dropout_seed);
        let terms = batch_objective(&mut g, &self.models, &self.bank, &self.schedule, &items, &self.config.loss())?;
        let value = |v: Var| g.value(v).item();
        let mut rec = TrainRecord {
            step: self.step + 1,
            l1: value(terms.l1),
            l_ldm: value(terms.ldm),
            f_main_l1: value(terms.f_main_l1),
            l2: value(terms.l2),
            total: value(terms.total),
            grad_norm: 0.0,
            wall_time: 0.0,
        };
        if !rec.total.is_finite() {
            return Err(Error::NonFinite(alloc::format!("loss at step {}: {:?}", rec.step, rec)));
        }
        let grads = g.backward(terms.total)?;
        rec.grad_norm = grad_norm(&grads, &self.trainable);
        if !rec.grad_norm.is_finite() {
            return Err(Error::NonFinite(alloc::format!("gradient at step {}: {:?}", rec.step, rec)));
        }
        self.optimizer.step(&mut self.models.store, &grads, &self.trainable);
        self.step += 1;
        Ok(rec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub encoder_steps: usize,
    pub encoder_lr: f64,
    pub backbone_steps: usize,
    pub backbone_lr: f64,
    pub head_steps: usize,
    pub head_lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 8,
            encoder_steps: 1500,
            encoder_lr: 2e-3,
            backbone_steps: 2500,
            backbone_lr: 1e-3,
            head_steps: 300,
            head_lr: 5e-3,
        }
    }
}

/// Per-step losses of each pretraining phase.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainReport {
    pub encoder: Vec<f64>,
    pub backbone: Vec<f64>,
    pub heads: Vec<f64>,
}

/// Shape, colour and texture class of a sample's identity.
fn attribute_labels(config: &CorpusConfig, rec: &SampleRecord) -> Result<[usize; 3]> {
    let id = rec.factors.identity;
    let v = &config.vocab;
    let shape = v.shapes.iter().position(|&x| x == id.shape);
    let texture = v.textures.iter().position(|&x| x == id.texture);
    match (shape, texture) {
        (Some(a), Some(c)) if id.color < v.colors.len() => Ok([a, id.color, c]),
        _ => Err(input_err!("identity {:?} missing from vocabulary", id)),
    }
}

fn unit_vector(g: &mut Graph, v: Var) -> Result<Var> {
    let n2 = g.dot(v, v)?;
    let n2 = g.add_const(n2, 1e-12);
    let n = g.sqrt(n2);
    g.div(v, n)
}

/// Pooled text embedding of `"a photo of a <word>"`.
pub fn class_prompt_var(g: &mut Graph, models: &Models, word: &str) -> Result<Var> {
    let template = crate::conditioning::PromptTemplate::parse("a photo of a S*")?;
    let enc = models.text.prompt_var(g, &models.store, &template, word)?;
    let rows = g.shape(enc)[0];
    let ones = g.constant(Tensor::full(&[1, rows], 1.0 / rows as f64));
    let pooled = g.matmul(ones, enc)?;
    g.reshape(pooled, &[models.config.text.d_text])
}

/// Unit image embedding in the joint space, from top-tap encoder features.
pub fn image_joint_var(g: &mut Graph, models: &Models, top_tap: Var) -> Result<Var> {
    let e = models.image_head.forward(g, &models.store, top_tap)?;
    unit_vector(g, e)
}

/// Unit text embedding in the joint space.
pub fn text_joint_var(g: &mut Graph, models: &Models, word: &str) -> Result<Var> {
    let t = class_prompt_var(g, models, word)?;
    let e = models.text_head.forward(g, &models.store, t)?;
    unit_vector(g, e)
}

/// Temperature of the contrastive head fit.
pub const JOINT_SCALE: f64 = 10.0;

/// Fit the frozen networks the main phase builds on:
/// the encoder (shape, colour and texture classification), the denoiser backbone
/// (text-conditioned denoising) and the evaluation heads (image↔token contrastive).
pub fn pretrain<S: SampleSource + ?Sized>(
    models: &mut Models,
    source: &S,
    cfg: &PretrainConfig,
    schedule: &NoiseSchedule,
) -> Result<PretrainReport> {
    if source.is_empty() {
        return Err(input_err!("pretraining corpus is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(config_err!("pretraining batch size must be at least 1"));
    }
    let v = &source.corpus_config().vocab;
    let classes = [v.shapes.len(), v.colors.len(), v.textures.len()];
    if classes != models.config.attribute_classes {
        return Err(config_err!(
            "vocabulary has {:?} shape/colour/texture classes but the encoder heads have {:?}",
            classes,
            models.config.attribute_classes
        ));
    }
    let mut r = rng::seeded(cfg.seed);
    let mut report = PretrainReport::default();
    let bank = TemplateBank::default();

    let ids: Vec<ParamId> =
        models.component(Component::Encoder).into_iter().chain(models.component(Component::EncoderHead)).collect();
    let mut opt = AdamW::new(cfg.encoder_lr, 0.0);
    for _ in 0..cfg.encoder_steps {
        let picks: Vec<usize> = (0..cfg.batch_size).map(|_| rng::below(&mut r, source.len())).collect();
        let mut g = Graph::new(models.store.mask(&ids), Mode::Train, rng::fork(&mut r));
        let mut sum = None;
        for &i in &picks {
            let sample = source.sample(i)?;
            let labels = attribute_labels(source.corpus_config(), &source.records()[i])?;
            let x = g.constant(sample.main_image.to_chw());
            let f = models.encoder.forward(&mut g, &models.store, x)?;
            let flat = g.reshape(f, &[1, TAPS * models.config.encoder.d_enc])?;
            for (head, label) in models.encoder_heads.iter().zip(labels) {
                let logits = head.forward(&mut g, &models.store, flat)?;
                let ce = g.cross_entropy_rows(logits, &[label])?;
                sum = Some(accumulate(&mut g, sum, ce)?);
            }
        }
        let loss = g.scale(sum.expect("non-empty batch"), 1.0 / picks.len() as f64);
        report.encoder.push(g.value(loss).item());
        let grads = g.backward(loss)?;
        opt.step(&mut models.store, &grads, &ids);
    }

    let ids = models.component(Component::Denoiser);
    let mut opt = AdamW::new(cfg.backbone_lr, 0.0);
    let shape = models.denoiser.latent_shape();
    let n: usize = shape.iter().product();
    for _ in 0..cfg.backbone_steps {
        let mut g = Graph::new(models.store.mask(&ids), Mode::Train, rng::fork(&mut r));
        let mut sum = None;
        for _ in 0..cfg.batch_size {
            let i = rng::below(&mut r, source.len());
            let template = bank.get(bank.sample_index(&mut r));
            let t = 1 + rng::below(&mut r, schedule.steps());
            let eps = Tensor::from_vec(&shape, (0..n).map(|_| rng::normal(&mut r)).collect())?;
            let sample = source.sample(i)?;
            let z0 = models.config.codec.encode(&sample.main_image)?;
            let words = caption(&sample.factors)?;
            let cond = models.text.tokens_var(&mut g, &models.store, &template.with_words(&words))?;
            let zt = g.constant(forward_diffuse(&z0, t, &eps, schedule)?.z);
            let pred = models.denoiser.forward(&mut g, &models.store, zt, t, cond)?;
            let ev = g.constant(eps);
            let l = ldm_loss_var(&mut g, ev, pred)?;
            sum = Some(accumulate(&mut g, sum, l)?);
        }
        let loss = g.scale(sum.expect("non-empty batch"), 1.0 / cfg.batch_size as f64);
        report.backbone.push(g.value(loss).item());
        let grads = g.backward(loss)?;
        opt.step(&mut models.store, &grads, &ids);
    }

    let ids = models.component(Component::EvalHeads);
    let mut opt = AdamW::new(cfg.head_lr, 0.0);
    let words: Vec<&str> = source.corpus_config().vocab.shapes.iter().map(|s| s.token()).collect();
    for _ in 0..cfg.head_steps {
        let mut g = Graph::new(models.store.mask(&ids), Mode::Train, 0);
        let texts = words.iter().map(|w| text_joint_var(&mut g, models, w)).collect::<Result<Vec<_>>>()?;
        let texts = texts.iter().map(|&t| g.reshape(t, &[1, models.config.joint_dim])).collect::<Result<Vec<_>>>()?;
        let text_mat = g.concat(&texts)?;
        let text_t = g.transpose(text_mat)?;
        let mut sum = None;
        for _ in 0..cfg.batch_size {
            let i = rng::below(&mut r, source.len());
            let sample = source.sample(i)?;
            let label = words
                .iter()
                .position(|w| *w == sample.subject_token)
                .ok_or_else(|| input_err!("subject token {:?} not in shape vocabulary", sample.subject_token))?;
            let feats = encode_image(&sample.main_image, &models.encoder, &models.store)?;
            let top = g.constant(Tensor::vector(feats.layer(TAPS - 1)));
            let img = image_joint_var(&mut g, models, top)?;
            let img = g.reshape(img, &[1, models.config.joint_dim])?;
            let logits = g.matmul(img, text_t)?;
            let logits = g.scale(logits, JOINT_SCALE);
            let ce = g.cross_entropy_rows(logits, &[label])?;
            sum = Some(accumulate(&mut g, sum, ce)?);
        }
        let loss = g.scale(sum.expect("non-empty batch"), 1.0 / cfg.batch_size as f64);
        report.heads.push(g.value(loss).item());
        let grads = g.backward(loss)?;
        opt.step(&mut models.store, &grads, &ids);
    }
    Ok(report)
}

/// Train every denoiser parameter on one image under a fixed condition.
///
/// Returns the per-step batch loss. Used to check that the denoiser and the
/// sampler can reproduce a memorised image.
#[allow(clippy::too_many_arguments)]
pub fn overfit_one(
    models: &mut Models,
    image: &ImageTensor,
    condition: &Tensor,
    schedule: &NoiseSchedule,
    steps: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if batch_size == 0 {
        return Err(config_err!("batch size must be at least 1"));
    }
    let ids = models.component(Component::Denoiser);
    let mask = models.store.mask(&ids);
    let z0 = models.config.codec.encode(image)?;
    let shape = models.denoiser.latent_shape();
    let n: usize = shape.iter().product();
    let mut r = rng::seeded(seed);
    let mut opt = AdamW::new(lr, 0.0);
    let mut losses = Vec::with_capacity(steps);
    for k in 0..steps {
        // cosine decay to zero
        opt.lr = 0.5 * lr * (1.0 + libm::cos(core::f64::consts::PI * k as f64 / steps as f64));
        let mut g = Graph::new(mask.clone(), Mode::Train, rng::fork(&mut r));
        let cond = g.constant(condition.clone());
        let mut sum = None;
        for _ in 0..batch_size {
            let t = 1 + rng::below(&mut r, schedule.steps());
            let eps = Tensor::from_vec(&shape, (0..n).map(|_| rng::normal(&mut r)).collect())?;
            let zt = g.constant(forward_diffuse(&z0, t, &eps, schedule)?.z);
            let pred = models.denoiser.forward(&mut g, &models.store, zt, t, cond)?;
            let ev = g.constant(eps);
            let l = ldm_loss_var(&mut g, ev, pred)?;
            sum = Some(accumulate(&mut g, sum, l)?);
        }
        let loss = g.scale(sum.expect("non-empty batch"), 1.0 / batch_size as f64);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(alloc::format!("overfit loss {value}")));
        }
        losses.push(value);
        let grads = g.backward(loss)?;
        opt.step(&mut models.store, &grads, &ids);
    }
    Ok(losses)
}

/// Subject token for a shape family, as used in prompts.
pub fn subject_word(shape: ShapeFamily) -> String {
    String::from(shape.token())
}
