//! Nuisance prediction and removal by orthogonal projection.
//!
//! `v ⊖ u = v − (⟨v,u⟩ / ‖u‖²) u` removes the component of `v` along `u`.
//! Everything here works independently per tap layer.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Activation, Graph, Var};
use crate::error::{config_err, input_err, Result};
use crate::feature::{encode_image, EncoderModel, ImageTensor, LayerFeatureSet, TAPS};
use crate::nn::{Mlp, MlpConfig, ParamId, ParamStore, Tag};
use crate::rng::Rng;
use crate::tensor::{dot, Tensor};

/// Norms squared below this are treated as zero in cosine similarity.
pub const ZERO_NORM_SQ: f64 = 1e-24;

/// The nuisance factors with a dedicated expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Factor {
    Pose,
    Background,
}

impl Factor {
    pub fn name(self) -> &'static str {
        match self {
            Factor::Pose => "pose",
            Factor::Background => "background",
        }
    }
}

/// How the two nuisance directions are removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoupleMode {
    /// `(F ⊖ pose) ⊖ background`, in that order.
    Sequential,
    /// Gram–Schmidt `{pose, background}` first, then remove both.
    Joint,
}

impl core::str::FromStr for DecoupleMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Self::Sequential),
            "joint" => Ok(Self::Joint),
            other => Err(config_err!("unknown decouple mode {:?}", other)),
        }
    }
}

impl DecoupleMode {
    pub fn name(self) -> &'static str {
        match self {
            DecoupleMode::Sequential => "sequential",
            DecoupleMode::Joint => "joint",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoupleConfig {
    pub mode: DecoupleMode,
    /// Per-dimension degeneracy scale; a direction `u` with
    /// `‖u‖² < eps × dim` is ignored.
    pub eps: f64,
}

impl Default for DecoupleConfig {
    fn default() -> Self {
        Self { mode: DecoupleMode::Sequential, eps: 1e-12 }
    }
}

impl DecoupleConfig {
    pub fn threshold(&self, dim: usize) -> f64 {
        self.eps * dim as f64
    }
}

fn check_pair(v: &[f64], u: &[f64]) -> Result<()> {
    if v.len() != u.len() {
        return Err(input_err!("projection dimension mismatch {} vs {}", v.len(), u.len()));
    }
    if v.iter().chain(u).any(|x| !x.is_finite()) {
        return Err(input_err!("non-finite entry in projection operand"));
    }
    Ok(())
}

/// `v ⊖ u`. Returns `v` unchanged when `‖u‖² < eps`.
pub fn project_out(v: &[f64], u: &[f64], eps: f64) -> Result<Vec<f64>> {
    check_pair(v, u)?;
    if !(eps > 0.0) {
        return Err(input_err!("projection eps must be positive, got {}", eps));
    }
    let uu = dot(u, u);
    if uu < eps {
        return Ok(v.to_vec());
    }
    let c = dot(v, u) / uu;
    Ok(v.iter().zip(u).map(|(a, b)| a - c * b).collect())
}

/// Cosine similarity; `0` (with a diagnostic) when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (aa, bb) = (dot(a, a), dot(b, b));
    if aa < ZERO_NORM_SQ || bb < ZERO_NORM_SQ {
        log::warn!("cosine similarity of a zero-norm vector treated as 0");
        return 0.0;
    }
    (dot(a, b) / libm::sqrt(aa * bb)).clamp(-1.0, 1.0)
}

/// Graph form of [`project_out`]; the degenerate branch is chosen from the
/// current value of `u`.
pub fn project_out_var(g: &mut Graph, v: Var, u: Var, eps: f64) -> Result<Var> {
    check_pair(g.value(v).data(), g.value(u).data())?;
    if g.value(u).norm_sq() < eps {
        return Ok(v);
    }
    let uu = g.dot(u, u)?;
    let vu = g.dot(v, u)?;
    let c = g.div(vu, uu)?;
    let cu = g.mul(u, c)?;
    g.sub(v, cu)
}

/// Graph form of [`cosine`].
pub fn cosine_var(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (aa_v, bb_v) = (g.value(a).norm_sq(), g.value(b).norm_sq());
    if g.value(a).len() != g.value(b).len() {
        return Err(input_err!("cosine of {:?} and {:?}", g.shape(a), g.shape(b)));
    }
    if aa_v < ZERO_NORM_SQ || bb_v < ZERO_NORM_SQ {
        log::warn!("cosine similarity of a zero-norm vector treated as 0");
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let ab = g.dot(a, b)?;
    let aa = g.dot(a, a)?;
    let bb = g.dot(b, b)?;
    let prod = g.mul(aa, bb)?;
    let denom = g.sqrt(prod);
    g.div(ab, denom)
}

fn decouple_vectors(
    f: &[f64],
    pose: Option<&[f64]>,
    background: Option<&[f64]>,
    cfg: &DecoupleConfig,
) -> Result<Vec<f64>> {
    let thr = cfg.threshold(f.len());
    match (cfg.mode, pose, background) {
        (_, None, None) => Ok(f.to_vec()),
        (_, Some(p), None) => project_out(f, p, thr),
        (_, None, Some(b)) => project_out(f, b, thr),
        (DecoupleMode::Sequential, Some(p), Some(b)) => project_out(&project_out(f, p, thr)?, b, thr),
        (DecoupleMode::Joint, Some(p), Some(b)) => {
            let b_perp = project_out(b, p, thr)?;
            project_out(&project_out(f, p, thr)?, &b_perp, thr)
        }
    }
}

/// Fixed linear map from nuisance space (`d_enc`) into main space (`d_main`):
/// the rectangular identity, so it is exactly the identity when square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lift {
    pub d_enc: usize,
    pub d_main: usize,
}

impl Lift {
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d_main];
        let n = self.d_enc.min(self.d_main);
        out[..n].copy_from_slice(&v[..n]);
        out
    }

    pub fn is_identity(&self) -> bool {
        self.d_enc == self.d_main
    }

    pub fn apply_var(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if self.is_identity() {
            return Ok(x);
        }
        let mut m = Tensor::zeros(&[self.d_enc, self.d_main]);
        for i in 0..self.d_enc.min(self.d_main) {
            m.data_mut()[i * self.d_main + i] = 1.0;
        }
        let m = g.constant(m);
        g.matmul(x, m)
    }
}

/// Remove pose and background directions from every layer of `main`.
///
/// Either factor may be absent, which bypasses its projection.
pub fn decouple(
    main: &LayerFeatureSet,
    pose: Option<&NuisanceFeatureSet>,
    background: Option<&NuisanceFeatureSet>,
    cfg: &DecoupleConfig,
) -> Result<LayerFeatureSet> {
    let d_main = main.dim();
    let lift_of = |n: &NuisanceFeatureSet| Lift { d_enc: n.features.dim(), d_main };
    let mut layers = Vec::with_capacity(TAPS);
    for l in 0..TAPS {
        let p = pose.map(|p| lift_of(p).apply(p.features.layer(l)));
        let b = background.map(|b| lift_of(b).apply(b.features.layer(l)));
        layers.push(Tensor::vector(&decouple_vectors(main.layer(l), p.as_deref(), b.as_deref(), cfg)?));
    }
    LayerFeatureSet::new(layers)
}

/// Graph form of [`decouple`] over `[TAPS, d]` matrices (already lifted).
pub fn decouple_var(
    g: &mut Graph,
    main: Var,
    pose: Option<Var>,
    background: Option<Var>,
    cfg: &DecoupleConfig,
) -> Result<Var> {
    let shape = g.shape(main).to_vec();
    if shape.len() != 2 || shape[0] != TAPS {
        return Err(input_err!("decouple expects [{}, d], got {:?}", TAPS, shape));
    }
    for n in pose.iter().chain(background.iter()) {
        if g.shape(*n) != shape.as_slice() {
            return Err(input_err!("nuisance layers {:?} do not match main {:?}", g.shape(*n), shape));
        }
    }
    if pose.is_none() && background.is_none() {
        return Ok(main);
    }
    let d = shape[1];
    let thr = cfg.threshold(d);
    let mut rows = Vec::with_capacity(TAPS);
    for l in 0..TAPS {
        let row = |g: &mut Graph, v: Var| -> Result<Var> {
            let s = g.slice(v, l, 1)?;
            g.reshape(s, &[d])
        };
        let f = row(g, main)?;
        let p = match pose {
            Some(p) => Some(row(g, p)?),
            None => None,
        };
        let b = match background {
            Some(b) => Some(row(g, b)?),
            None => None,
        };
        let out = match (cfg.mode, p, b) {
            (_, Some(p), None) => project_out_var(g, f, p, thr)?,
            (_, None, Some(b)) => project_out_var(g, f, b, thr)?,
            (DecoupleMode::Sequential, Some(p), Some(b)) => {
                let s = project_out_var(g, f, p, thr)?;
                project_out_var(g, s, b, thr)?
            }
            (DecoupleMode::Joint, Some(p), Some(b)) => {
                let b_perp = project_out_var(g, b, p, thr)?;
                let s = project_out_var(g, f, p, thr)?;
                project_out_var(g, s, b_perp, thr)?
            }
            (_, None, None) => unreachable!(),
        };
        rows.push(g.reshape(out, &[1, d])?);
    }
    g.concat(&rows)
}

/// Where a nuisance feature set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Predicted,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceFeatureSet {
    pub factor: Factor,
    pub origin: Origin,
    pub features: LayerFeatureSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertConfig {
    pub d_main: usize,
    pub hidden: usize,
    pub d_enc: usize,
    pub layers: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub bias: bool,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self { d_main: 64, hidden: 128, d_enc: 64, layers: 3, dropout: 0.1, activation: Activation::Silu, bias: true }
    }
}

/// Perceptron predicting one factor's encoder-space features from main features.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertModel {
    pub factor: Factor,
    pub config: ExpertConfig,
    pub mlp: Mlp,
}

impl ExpertModel {
    pub fn new(store: &mut ParamStore, factor: Factor, config: ExpertConfig, rng: &mut Rng) -> Result<Self> {
        if config.layers == 0 {
            return Err(config_err!("expert needs at least one layer"));
        }
        let mut dims = vec![config.d_main];
        dims.extend(core::iter::repeat_n(config.hidden, config.layers - 1));
        dims.push(config.d_enc);
        let mlp_cfg = MlpConfig { dims, activation: config.activation, dropout: config.dropout, bias: config.bias };
        let name = alloc::format!("expert_{}", factor.name());
        let mlp = Mlp::new(store, &name, &mlp_cfg, Tag::Untagged, rng)?;
        Ok(Self { factor, config, mlp })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }

    /// `[TAPS, d_main]` → `[TAPS, d_enc]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, main: Var) -> Result<Var> {
        let s = g.shape(main);
        if s != [TAPS, self.config.d_main] {
            return Err(config_err!("{} expert expects [{}, {}], got {:?}", self.factor.name(), TAPS, self.config.d_main, s));
        }
        self.mlp.forward(g, store, main)
    }
}

/// Predict the nuisance features of `main` in eval mode.
pub fn predict_nuisance(main: &LayerFeatureSet, expert: &ExpertModel, store: &ParamStore) -> Result<NuisanceFeatureSet> {
    let mut g = Graph::inference();
    let x = g.constant(main.to_matrix());
    let out = expert.forward(&mut g, store, x)?;
    Ok(NuisanceFeatureSet {
        factor: expert.factor,
        origin: Origin::Predicted,
        features: LayerFeatureSet::from_matrix(g.value(out))?,
    })
}

/// Encoder features of factor-isolating images.
///
/// Background: exactly one subject-free image. Pose: the per-layer mean over
/// one or more pose-matched variants.
pub fn ground_truth_features(
    factor: Factor,
    images: &[ImageTensor],
    encoder: &EncoderModel,
    store: &ParamStore,
) -> Result<NuisanceFeatureSet> {
    match factor {
        Factor::Background if images.len() != 1 => {
            return Err(input_err!("background ground truth takes exactly one image, got {}", images.len()))
        }
        Factor::Pose if images.is_empty() => return Err(input_err!("pose ground truth needs at least one variant")),
        _ => {}
    }
    let encoded = images.iter().map(|im| encode_image(im, encoder, store)).collect::<Result<Vec<_>>>()?;
    Ok(NuisanceFeatureSet { factor, origin: Origin::GroundTruth, features: mean_feature_set(&encoded)? })
}

/// Per-layer arithmetic mean.
pub fn mean_feature_set(sets: &[LayerFeatureSet]) -> Result<LayerFeatureSet> {
    let first = sets.first().ok_or_else(|| input_err!("mean of no feature sets"))?;
    let n = sets.len() as f64;
    let mut layers = Vec::with_capacity(TAPS);
    for l in 0..TAPS {
        let mut acc = vec![0.0; first.dim()];
        for s in sets {
            if s.dim() != first.dim() {
                return Err(input_err!("feature set dimensions differ"));
            }
            for (a, v) in acc.iter_mut().zip(s.layer(l)) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= n);
        layers.push(Tensor::vector(&acc));
    }
    LayerFeatureSet::new(layers)
}

/// `1 − mean over layers of cos(predicted, truth)`.
pub fn alignment_term(predicted: &LayerFeatureSet, truth: &LayerFeatureSet) -> Result<f64> {
    if predicted.dim() != truth.dim() {
        return Err(input_err!("alignment dimension mismatch {} vs {}", predicted.dim(), truth.dim()));
    }
    let mean_cos = (0..TAPS).map(|l| cosine(predicted.layer(l), truth.layer(l))).sum::<f64>() / TAPS as f64;
    Ok(1.0 - mean_cos)
}

/// Batch alignment loss: `(1/N) Σᵢ Σₖ (1 − cos(F'ₖ⁽ⁱ⁾, Fₖ⁽ⁱ⁾))`.
///
/// `predicted[i]` and `truth[i]` hold the factor sets of sample `i`; they are
/// paired by factor, and factors absent from `predicted[i]` contribute nothing.
pub fn alignment_loss(predicted: &[Vec<NuisanceFeatureSet>], truth: &[Vec<NuisanceFeatureSet>]) -> Result<f64> {
    if predicted.is_empty() {
        return Err(input_err!("alignment loss needs at least one sample"));
    }
    if predicted.len() != truth.len() {
        return Err(input_err!("{} predicted samples vs {} ground-truth samples", predicted.len(), truth.len()));
    }
    let mut total = 0.0;
    for (pred_i, truth_i) in predicted.iter().zip(truth) {
        for p in pred_i {
            let t = truth_i
                .iter()
                .find(|t| t.factor == p.factor)
                .ok_or_else(|| input_err!("no ground truth for factor {}", p.factor.name()))?;
            total += alignment_term(&p.features, &t.features)?;
        }
    }
    Ok(total / predicted.len() as f64)
}

/// Graph form of [`alignment_term`] on `[TAPS, d]` matrices.
pub fn alignment_term_var(g: &mut Graph, predicted: Var, truth: Var) -> Result<Var> {
    let shape = g.shape(predicted).to_vec();
    if g.shape(truth) != shape.as_slice() || shape.len() != 2 {
        return Err(input_err!("alignment shapes {:?} vs {:?}", shape, g.shape(truth)));
    }
    let d = shape[1];
    let mut total: Option<Var> = None;
    for l in 0..shape[0] {
        let a = g.slice(predicted, l, 1)?;
        let a = g.reshape(a, &[d])?;
        let b = g.slice(truth, l, 1)?;
        let b = g.reshape(b, &[d])?;
        let c = cosine_var(g, a, b)?;
        total = Some(match total {
            Some(t) => g.add(t, c)?,
            None => c,
        });
    }
    let total = total.ok_or_else(|| input_err!("alignment over zero layers"))?;
    let mean = g.scale(total, -1.0 / shape[0] as f64);
    Ok(g.add_const(mean, 1.0))
}
