//! Proxy similarity metrics, factor probes, invariance drift and the evaluation report.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::conditioning::TemplateBank;
use crate::corpus::{CorpusPlan, FactorSpec, Identity, Renderer, Vocabulary};
use crate::diffusion::{sample, NoiseSchedule, SamplerKind};
use crate::disentangle::{cosine, Factor};
use crate::error::{config_err, input_err, Result};
use crate::feature::{encode_image, ImageTensor, LayerFeatureSet, TAPS};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::training::{features_var, image_joint_var, text_joint_var, LossConfig, Models};

/// Pooled top-tap encoder embedding of an image.
pub fn embedding(image: &ImageTensor, models: &Models) -> Result<Vec<f64>> {
    let f = encode_image(image, &models.encoder, &models.store)?;
    Ok(f.layer(TAPS - 1).to_vec())
}

/// Cosine of the two images' embeddings under the frozen encoder.
pub fn embedding_similarity(a: &ImageTensor, b: &ImageTensor, models: &Models) -> Result<f64> {
    Ok(cosine(&embedding(a, models)?, &embedding(b, models)?))
}

/// Cosine between an image and the prompt "a photo of a `word`" in the joint head space.
pub fn text_image_similarity(image: &ImageTensor, word: &str, models: &Models) -> Result<f64> {
    models.text.lexicon.id(word)?;
    let top = embedding(image, models)?;
    let mut g = Graph::inference();
    let x = g.constant(Tensor::vector(&top));
    let i = image_joint_var(&mut g, models, x)?;
    let t = text_joint_var(&mut g, models, word)?;
    Ok(cosine(g.value(i).data(), g.value(t).data()))
}

/// Main features of one image before and after nuisance removal.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureView {
    pub raw: LayerFeatureSet,
    pub decoupled: LayerFeatureSet,
}

pub fn feature_view(image: &ImageTensor, models: &Models, loss: &LossConfig) -> Result<FeatureView> {
    let enc = encode_image(image, &models.encoder, &models.store)?;
    let mut g = Graph::inference();
    let x = g.constant(enc.to_matrix());
    let (f, dec, _) = features_var(&mut g, models, x, loss)?;
    Ok(FeatureView { raw: LayerFeatureSet::from_matrix(g.value(f))?, decoupled: LayerFeatureSet::from_matrix(g.value(dec))? })
}

/// Relative change `‖a−b‖ / mean(‖a‖, ‖b‖)` per layer, averaged over layers.
pub fn drift(a: &LayerFeatureSet, b: &LayerFeatureSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(input_err!("drift between widths {} and {}", a.dim(), b.dim()));
    }
    let norm = |v: &[f64]| libm::sqrt(v.iter().map(|x| x * x).sum());
    let mut total = 0.0;
    for l in 0..TAPS {
        let (x, y) = (a.layer(l), b.layer(l));
        let diff: Vec<f64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
        let scale = 0.5 * (norm(x) + norm(y));
        if scale > 0.0 {
            total += norm(&diff) / scale;
        }
    }
    Ok(total / TAPS as f64)
}

/// Two factor settings that differ in exactly one nuisance factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwapPair {
    pub factor: Factor,
    pub a: FactorSpec,
    pub b: FactorSpec,
}

impl SwapPair {
    pub fn new(factor: Factor, a: FactorSpec, b: FactorSpec) -> Result<Self> {
        if a.identity != b.identity {
            return Err(input_err!("swap pair changes the identity"));
        }
        let (same_pose, same_bg) = (a.pose == b.pose, a.background == b.background);
        let ok = match factor {
            Factor::Pose => !same_pose && same_bg,
            Factor::Background => same_pose && !same_bg,
        };
        if !ok {
            return Err(input_err!("pair does not differ in {} alone", factor.name()));
        }
        Ok(Self { factor, a, b })
    }
}

pub fn random_spec(identity: Identity, vocab: &Vocabulary, r: &mut Rng) -> FactorSpec {
    let poses = vocab.poses();
    let bgs = vocab.backgrounds();
    FactorSpec { identity, pose: poses[rng::below(r, poses.len())], background: bgs[rng::below(r, bgs.len())] }
}

/// `n` random pairs over `identities` that swap only `factor`.
pub fn swap_pairs(identities: &[Identity], vocab: &Vocabulary, factor: Factor, n: usize, seed: u64) -> Result<Vec<SwapPair>> {
    if identities.is_empty() {
        return Err(input_err!("no identities to pair"));
    }
    let (poses, bgs) = (vocab.poses(), vocab.backgrounds());
    if (factor == Factor::Pose && poses.len() < 2) || (factor == Factor::Background && bgs.len() < 2) {
        return Err(config_err!("vocabulary has a single {} value", factor.name()));
    }
    let mut r = rng::seeded(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let a = random_spec(identities[rng::below(&mut r, identities.len())], vocab, &mut r);
        let mut b = a;
        match factor {
            Factor::Pose => {
                while b.pose == a.pose {
                    b.pose = poses[rng::below(&mut r, poses.len())];
                }
            }
            Factor::Background => {
                while b.background == a.background {
                    b.background = bgs[rng::below(&mut r, bgs.len())];
                }
            }
        }
        out.push(SwapPair::new(factor, a, b)?);
    }
    Ok(out)
}

/// Mean drift of pre- and post-decoupling features over swap pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftScores {
    pub factor: Factor,
    pub pairs: usize,
    pub raw: f64,
    pub decoupled: f64,
}

impl DriftScores {
    /// `decoupled / raw`; 0 when the raw features do not move.
    pub fn ratio(&self) -> f64 {
        if self.raw > 0.0 {
            self.decoupled / self.raw
        } else {
            0.0
        }
    }
}

pub fn invariance_probe(models: &Models, renderer: &Renderer, pairs: &[SwapPair], loss: &LossConfig) -> Result<DriftScores> {
    let factor = pairs.first().ok_or_else(|| input_err!("no swap pairs"))?.factor;
    let (mut raw, mut dec) = (0.0, 0.0);
    for p in pairs {
        let p = SwapPair::new(factor, p.a, p.b)?;
        let fa = feature_view(&renderer.render(&p.a, true)?, models, loss)?;
        let fb = feature_view(&renderer.render(&p.b, true)?, models, loss)?;
        raw += drift(&fa.raw, &fb.raw)?;
        dec += drift(&fa.decoupled, &fb.decoupled)?;
    }
    let n = pairs.len() as f64;
    Ok(DriftScores { factor, pairs: pairs.len(), raw: raw / n, decoupled: dec / n })
}

/// Concatenation of per-layer unit vectors.
pub fn probe_vector(f: &LayerFeatureSet) -> Vec<f64> {
    let mut out = Vec::with_capacity(TAPS * f.dim());
    for l in 0..TAPS {
        let v = f.layer(l);
        let n = libm::sqrt(v.iter().map(|x| x * x).sum());
        out.extend(v.iter().map(|x| if n > 0.0 { x / n } else { 0.0 }));
    }
    out
}

/// Nearest-class-centroid classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub centroids: Vec<(usize, Vec<f64>)>,
}

impl ProbeModel {
    pub fn fit(features: &[Vec<f64>], labels: &[usize]) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(input_err!("probe needs matching non-empty features and labels"));
        }
        let dim = features[0].len();
        let mut classes: Vec<usize> = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        let mut centroids = Vec::with_capacity(classes.len());
        for c in classes {
            let mut sum = alloc::vec![0.0; dim];
            let mut count = 0usize;
            for (f, _) in features.iter().zip(labels).filter(|(_, &l)| l == c) {
                if f.len() != dim {
                    return Err(input_err!("probe features differ in width"));
                }
                sum.iter_mut().zip(f).for_each(|(s, x)| *s += x);
                count += 1;
            }
            sum.iter_mut().for_each(|s| *s /= count as f64);
            centroids.push((c, sum));
        }
        Ok(Self { centroids })
    }

    pub fn predict(&self, f: &[f64]) -> usize {
        let dist = |c: &[f64]| c.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let mut best = (f64::INFINITY, 0);
        for (label, c) in &self.centroids {
            let d = dist(c);
            if d < best.0 {
                best = (d, *label);
            }
        }
        best.1
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        if features.is_empty() {
            return 0.0;
        }
        let hits = features.iter().zip(labels).filter(|(f, &l)| self.predict(f) == l).count();
        hits as f64 / features.len() as f64
    }
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self { mean, std: libm::sqrt(var) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub seed: u64,
    /// Training-split images used to fit each probe.
    pub probe_train: usize,
    /// Held-out images each probe is scored on.
    pub probe_test: usize,
    pub drift_pairs: usize,
    /// Held-out subjects generated for the similarity metrics.
    pub generations: usize,
    pub sampler: SamplerKind,
    pub sampling_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            probe_train: 600,
            probe_test: 300,
            drift_pairs: 200,
            generations: 24,
            sampler: SamplerKind::Ddim,
            sampling_steps: 50,
        }
    }
}

/// Metrics of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub image_sim: Stat,
    pub text_sim: Stat,
    pub identity_probe: f64,
    pub background_probe: f64,
    pub pose_probe: f64,
    pub background_drift: DriftScores,
    pub pose_drift: DriftScores,
    pub config_hash: String,
    pub checkpoint_id: String,
}

impl MetricsReport {
    /// Range checks on every metric.
    pub fn validate(&self) -> Result<()> {
        let sims = [self.image_sim.mean, self.text_sim.mean];
        let accs = [self.identity_probe, self.background_probe, self.pose_probe];
        if sims.iter().any(|s| !(-1.0..=1.0).contains(s)) {
            return Err(input_err!("similarity outside [-1, 1]"));
        }
        if accs.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(input_err!("accuracy outside [0, 1]"));
        }
        if [self.background_drift, self.pose_drift].iter().any(|d| !(d.raw >= 0.0 && d.decoupled >= 0.0)) {
            return Err(input_err!("negative or non-finite drift"));
        }
        Ok(())
    }
}

/// Fails when a held-out identity also appears in training.
pub fn check_split(plan: &CorpusPlan) -> Result<()> {
    if let Some(i) = plan.heldout_identities.iter().find(|i| plan.train_identities.contains(i)) {
        return Err(input_err!("held-out identity {:?} leaks into the training split", i));
    }
    if let Some(s) = plan.samples.iter().find(|s| plan.heldout_identities.contains(&s.factors.identity)) {
        return Err(input_err!("training sample uses held-out identity {:?}", s.factors.identity));
    }
    Ok(())
}

struct ProbeSet {
    features: Vec<Vec<f64>>,
    identity: Vec<usize>,
    background: Vec<usize>,
    pose: Vec<usize>,
}

fn probe_set(specs: &[FactorSpec], models: &Models, renderer: &Renderer, loss: &LossConfig) -> Result<ProbeSet> {
    let vocab = &renderer.vocab;
    let mut set = ProbeSet { features: Vec::new(), identity: Vec::new(), background: Vec::new(), pose: Vec::new() };
    for s in specs {
        let view = feature_view(&renderer.render(s, true)?, models, loss)?;
        set.features.push(probe_vector(&view.decoupled));
        set.identity.push(vocab.shapes.iter().position(|&x| x == s.identity.shape).unwrap_or(usize::MAX));
        set.background.push(vocab.patterns.iter().position(|&x| x == s.background.pattern).unwrap_or(usize::MAX));
        set.pose.push(s.pose.rotation);
    }
    Ok(set)
}

/// Accuracy of a centroid probe fit on `train` and scored on `test`.
fn probe_accuracy(train: &ProbeSet, test: &ProbeSet, pick: impl Fn(&ProbeSet) -> &Vec<usize>) -> Result<f64> {
    let model = ProbeModel::fit(&train.features, pick(train))?;
    Ok(model.accuracy(&test.features, pick(test)))
}

/// Score a model on the held-out identities of `plan`.
pub fn evaluate(
    models: &Models,
    plan: &CorpusPlan,
    loss: &LossConfig,
    schedule: &NoiseSchedule,
    cfg: &EvalConfig,
    label: &str,
) -> Result<MetricsReport> {
    check_split(plan)?;
    if plan.samples.is_empty() || plan.heldout_identities.is_empty() {
        return Err(input_err!("evaluation needs training samples and held-out identities"));
    }
    let renderer = plan.config.renderer();
    let vocab = &plan.config.vocab;
    let mut r = rng::seeded(cfg.seed);

    let train_specs: Vec<FactorSpec> =
        (0..cfg.probe_train).map(|_| plan.samples[rng::below(&mut r, plan.samples.len())].factors).collect();
    let held = &plan.heldout_identities;
    let test_specs: Vec<FactorSpec> =
        (0..cfg.probe_test).map(|_| random_spec(held[rng::below(&mut r, held.len())], vocab, &mut r)).collect();
    let train = probe_set(&train_specs, models, &renderer, loss)?;
    let test = probe_set(&test_specs, models, &renderer, loss)?;
    let identity_probe = probe_accuracy(&train, &test, |s| &s.identity)?;
    let background_probe = probe_accuracy(&train, &test, |s| &s.background)?;
    let pose_probe = probe_accuracy(&train, &test, |s| &s.pose)?;

    let drift_seed = rng::fork(&mut r);
    let bg_pairs = swap_pairs(held, vocab, Factor::Background, cfg.drift_pairs, drift_seed)?;
    let pose_pairs = swap_pairs(held, vocab, Factor::Pose, cfg.drift_pairs, drift_seed ^ 1)?;
    let background_drift = invariance_probe(models, &renderer, &bg_pairs, loss)?;
    let pose_drift = invariance_probe(models, &renderer, &pose_pairs, loss)?;

    let bank = TemplateBank::default();
    let (mut image_sims, mut text_sims) = (Vec::new(), Vec::new());
    for _ in 0..cfg.generations {
        let spec = random_spec(held[rng::below(&mut r, held.len())], vocab, &mut r);
        let template = bank.get(bank.sample_index(&mut r));
        let seed = rng::fork(&mut r);
        let reference = renderer.render(&spec, true)?;
        let generated = generate(&reference, template, models, loss, schedule, cfg.sampler, cfg.sampling_steps, seed)?;
        image_sims.push(embedding_similarity(&generated, &reference, models)?);
        text_sims.push(text_image_similarity(&generated, spec.identity.shape.token(), models)?);
    }

    let report = MetricsReport {
        label: String::from(label),
        image_sim: Stat::of(&image_sims),
        text_sim: Stat::of(&text_sims),
        identity_probe,
        background_probe,
        pose_probe,
        background_drift,
        pose_drift,
        config_hash: String::new(),
        checkpoint_id: String::new(),
    };
    report.validate()?;
    Ok(report)
}

/// Generate an image of the subject in `reference` under `template`.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    reference: &ImageTensor,
    template: &crate::conditioning::PromptTemplate,
    models: &Models,
    loss: &LossConfig,
    schedule: &NoiseSchedule,
    sampler: SamplerKind,
    steps: usize,
    seed: u64,
) -> Result<ImageTensor> {
    let cond = condition_for(reference, template, models, loss)?;
    sample(&cond, &models.denoiser, &models.store, schedule, models.config.codec, sampler, steps, seed)
}

/// Eval-mode condition tokens for `reference` under `template`.
pub fn condition_for(
    reference: &ImageTensor,
    template: &crate::conditioning::PromptTemplate,
    models: &Models,
    loss: &LossConfig,
) -> Result<Tensor> {
    let enc = encode_image(reference, &models.encoder, &models.store)?;
    let mut g = Graph::inference();
    let x = g.constant(enc.to_matrix());
    let (_, dec, _) = features_var(&mut g, models, x, loss)?;
    let tokens = models.aligner.forward(&mut g, &models.store, dec)?;
    let c = models.text.condition_var(&mut g, &models.store, template, tokens)?;
    Ok(g.value(c).clone())
}
