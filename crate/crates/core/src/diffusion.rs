//! Noise schedule, latent codec, cross-attention U-Net denoiser, losses and samplers.

use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{softmax_in_place, Activation, Graph, Var};
use crate::error::{config_err, input_err, Result};
use crate::feature::{ImageTensor, LayerFeatureSet};
use crate::nn::{sinusoidal, Conv2d, Linear, Norm, ParamId, ParamStore, Tag};
use crate::rng::{self, Rng};
use crate::tensor::{dot, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Linear betas over `[1e-4, 0.02]·(1000/T)`.
    LinearBeta,
    /// Squared-cosine cumulative schedule.
    Cosine,
}

impl core::str::FromStr for ScheduleKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" | "linear-beta" => Ok(Self::LinearBeta),
            "cosine" => Ok(Self::Cosine),
            other => Err(config_err!("unknown schedule kind {:?}", other)),
        }
    }
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::LinearBeta => "linear",
            ScheduleKind::Cosine => "cosine",
        }
    }
}

const MAX_BETA: f64 = 0.999;

/// Cumulative signal coefficients `ᾱ_1 > … > ᾱ_T`, indexed from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps < 2 {
            return Err(config_err!("schedule needs T >= 2, got {}", steps));
        }
        let t_max = steps as f64;
        let betas: Vec<f64> = match kind {
            ScheduleKind::LinearBeta => {
                // The familiar 1000-step endpoints, rescaled so ᾱ_T ends near 0 for any T.
                let scale = 1000.0 / t_max;
                let (lo, hi) = (1e-4 * scale, 0.02 * scale);
                (0..steps).map(|i| (lo + (hi - lo) * i as f64 / (t_max - 1.0)).min(MAX_BETA)).collect()
            }
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    let c = libm::cos((t / t_max + 0.008) / 1.008 * core::f64::consts::FRAC_PI_2);
                    c * c
                };
                (1..=steps).map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(1e-8, MAX_BETA)).collect()
            }
        };
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { kind, betas, alpha_bar })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `ᾱ_t` for `1 ≤ t ≤ T`; `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(input_err!("timestep {} outside [1, {}]", t, self.steps()));
        }
        Ok(())
    }
}

/// A latent `[C, H, W]` at timestep `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Tensor,
    pub t: usize,
}

/// Exact, invertible map between images and latents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentCodec {
    /// `[H, W, 3]` in `[0,1]` ↦ `[3, H, W]` in `[-1,1]`.
    Identity,
    /// As `Identity`, followed by 2×2 space-to-depth: `[12, H/2, W/2]`.
    Unshuffle,
}

impl core::str::FromStr for LatentCodec {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "unshuffle" => Ok(Self::Unshuffle),
            other => Err(config_err!("unknown codec {:?}", other)),
        }
    }
}

impl LatentCodec {
    pub fn name(self) -> &'static str {
        match self {
            LatentCodec::Identity => "identity",
            LatentCodec::Unshuffle => "unshuffle",
        }
    }

    fn factor(self) -> usize {
        match self {
            LatentCodec::Identity => 1,
            LatentCodec::Unshuffle => 2,
        }
    }

    /// `[C, H, W]` of the latent for a square RGB-like image.
    pub fn latent_shape(self, image_size: usize, channels: usize) -> [usize; 3] {
        let r = self.factor();
        [channels * r * r, image_size / r, image_size / r]
    }

    pub fn encode(self, image: &ImageTensor) -> Result<Tensor> {
        let r = self.factor();
        let (h, w, c) = (image.height(), image.width(), image.channels());
        if h % r != 0 || w % r != 0 {
            return Err(config_err!("image {}x{} not divisible by codec factor {}", h, w, r));
        }
        let (ho, wo) = (h / r, w / r);
        let mut out = vec![0.0; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let lc = (ch * r + y % r) * r + x % r;
                    out[(lc * ho + y / r) * wo + x / r] = 2.0 * image.get(y, x, ch) - 1.0;
                }
            }
        }
        Tensor::from_vec(&[c * r * r, ho, wo], out)
    }

    /// Inverse of [`encode`](Self::encode), clamping into `[0,1]`.
    pub fn decode(self, z: &Tensor) -> Result<ImageTensor> {
        let r = self.factor();
        let s = z.shape();
        if s.len() != 3 || s[0] % (r * r) != 0 {
            return Err(config_err!("latent {:?} does not fit codec {}", s, self.name()));
        }
        let (c, ho, wo) = (s[0] / (r * r), s[1], s[2]);
        let (h, w) = (ho * r, wo * r);
        let mut chw = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let lc = (ch * r + y % r) * r + x % r;
                    chw[(ch * h + y) * w + x] = (z.data()[(lc * ho + y / r) * wo + x / r] + 1.0) / 2.0;
                }
            }
        }
        ImageTensor::from_chw_clamped(&Tensor::from_vec(&[c, h, w], chw)?)
    }
}

/// `z_t = √ᾱ_t z₀ + √(1−ᾱ_t) ε`.
pub fn forward_diffuse(z0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<LatentState> {
    schedule.check_t(t)?;
    if z0.shape() != eps.shape() {
        return Err(input_err!("noise {:?} does not match latent {:?}", eps.shape(), z0.shape()));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    let data = z0.data().iter().zip(eps.data()).map(|(z, e)| a * z + b * e).collect();
    Ok(LatentState { z: Tensor::from_vec(z0.shape(), data)?, t })
}

/// `softmax(Q Kᵀ / √d) V` with `Q = h W_Q`, `K = c W_K`, `V = c W_V`.
///
/// `h: [N, d]`, `c: [M, d_c]`, `W_Q: [d, d]`, `W_K, W_V: [d_c, d]`.
pub fn cross_attention(h: &Tensor, c: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Result<Tensor> {
    let (hs, cs) = (h.shape(), c.shape());
    if hs.len() != 2 || cs.len() != 2 {
        return Err(config_err!("cross-attention expects matrices, got {:?} and {:?}", hs, cs));
    }
    let (d, dc) = (hs[1], cs[1]);
    if wq.shape() != [d, d] || wk.shape() != [dc, d] || wv.shape() != [dc, d] {
        return Err(config_err!(
            "projection shapes {:?} {:?} {:?} do not fit d={} d_c={}",
            wq.shape(),
            wk.shape(),
            wv.shape(),
            d,
            dc
        ));
    }
    let mut g = Graph::inference();
    let (hv, cv) = (g.constant(h.clone()), g.constant(c.clone()));
    let (q, k, v) = (g.constant(wq.clone()), g.constant(wk.clone()), g.constant(wv.clone()));
    let out = attention_var(&mut g, hv, cv, q, k, v)?;
    Ok(g.value(out).clone())
}

/// Row-wise softmax attention weights `softmax(Q Kᵀ / √d)`.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (n, d) = (q.rows(), q.shape()[1]);
    let m = k.rows();
    if k.shape()[1] != d {
        return Err(config_err!("query dim {} vs key dim {}", d, k.shape()[1]));
    }
    let scale = 1.0 / libm::sqrt(d as f64);
    let mut w = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            w[i * m + j] = dot(q.row(i), k.row(j)) * scale;
        }
        softmax_in_place(&mut w[i * m..(i + 1) * m]);
    }
    Tensor::from_vec(&[n, m], w)
}

fn attention_var(g: &mut Graph, h: Var, c: Var, wq: Var, wk: Var, wv: Var) -> Result<Var> {
    let d = g.shape(h)[1];
    let q = g.matmul(h, wq)?;
    let k = g.matmul(c, wk)?;
    let v = g.matmul(c, wv)?;
    let kt = g.transpose(k)?;
    let s = g.matmul(q, kt)?;
    let s = g.scale(s, 1.0 / libm::sqrt(d as f64));
    let a = g.softmax_rows(s)?;
    g.matmul(a, v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub latent_size: usize,
    pub base_channels: usize,
    pub mid_channels: usize,
    pub time_dim: usize,
    pub d_text: usize,
    pub groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 12,
            latent_size: 16,
            base_channels: 32,
            mid_channels: 64,
            time_dim: 64,
            d_text: 64,
            groups: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv2d,
    time: Linear,
    norm2: Norm,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, ch: usize, cfg: &DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        let t = Tag::Backbone;
        Ok(Self {
            norm1: Norm::new(store, &alloc::format!("{name}.norm1"), ch, cfg.groups, t)?,
            conv1: Conv2d::new(store, &alloc::format!("{name}.conv1"), ch, ch, 3, 1, true, t, rng)?,
            time: Linear::new(store, &alloc::format!("{name}.time"), cfg.time_dim, ch, true, t, rng)?,
            norm2: Norm::new(store, &alloc::format!("{name}.norm2"), ch, cfg.groups, t)?,
            conv2: Conv2d::new(store, &alloc::format!("{name}.conv2"), ch, ch, 3, 1, true, t, rng)?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm1.group(g, store, x)?;
        let h = g.act(h, Activation::Silu);
        let h = self.conv1.forward(g, store, h)?;
        let tb = self.time.forward(g, store, temb)?;
        let h = g.add_channel(h, tb)?;
        let h = self.norm2.group(g, store, h)?;
        let h = g.act(h, Activation::Silu);
        let h = self.conv2.forward(g, store, h)?;
        g.add(x, h)
    }

    fn params(&self) -> Vec<ParamId> {
        let mut v = self.norm1.params();
        v.extend(self.conv1.params());
        v.extend(self.time.params());
        v.extend(self.norm2.params());
        v.extend(self.conv2.params());
        v
    }
}

/// Pre-normed residual cross-attention over the spatial positions of `[C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionLayer {
    norm: Norm,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl CrossAttentionLayer {
    fn new(store: &mut ParamStore, name: &str, ch: usize, cfg: &DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        let tag = Tag::CrossAttention;
        let mut w = |store: &mut ParamStore, suffix: &str, rows: usize| {
            let std = 1.0 / libm::sqrt(rows as f64);
            let t = Tensor::from_vec(&[rows, ch], (0..rows * ch).map(|_| std * rng::normal(rng)).collect())?;
            store.add(&alloc::format!("{name}.{suffix}"), t, tag)
        };
        let wq = w(store, "wq", ch)?;
        let wk = w(store, "wk", cfg.d_text)?;
        let wv = w(store, "wv", cfg.d_text)?;
        let norm = Norm::new(store, &alloc::format!("{name}.norm"), ch, cfg.groups, Tag::Backbone)?;
        Ok(Self { norm, wq, wk, wv })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, cond: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (c, hw) = (shape[0], shape[1] * shape[2]);
        let h = self.norm.group(g, store, x)?;
        let h = g.reshape(h, &[c, hw])?;
        let h = g.transpose(h)?;
        let wq = g.param(self.wq, store.get(self.wq));
        let wk = g.param(self.wk, store.get(self.wk));
        let wv = g.param(self.wv, store.get(self.wv));
        let a = attention_var(g, h, cond, wq, wk, wv)?;
        let a = g.transpose(a)?;
        let a = g.reshape(a, &shape)?;
        g.add(x, a)
    }

    fn params(&self) -> Vec<ParamId> {
        let mut v = self.norm.params();
        v.extend([self.wq, self.wk, self.wv]);
        v
    }
}

/// Two-resolution U-Net predicting the added noise.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    time1: Linear,
    time2: Linear,
    stem: Conv2d,
    enc: ResBlock,
    down: Conv2d,
    mid: ResBlock,
    mid_attn: CrossAttentionLayer,
    up: Conv2d,
    dec: ResBlock,
    dec_attn: CrossAttentionLayer,
    out_norm: Norm,
    out: Conv2d,
}

impl DenoiserModel {
    pub fn new(store: &mut ParamStore, config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        let c = &config;
        if c.latent_size < 2 || c.latent_size % 2 != 0 {
            return Err(config_err!("latent size {} must be even and >= 2", c.latent_size));
        }
        if c.groups == 0 || c.base_channels % c.groups != 0 || c.mid_channels % c.groups != 0 {
            return Err(config_err!("channels {} / {} not divisible by {} groups", c.base_channels, c.mid_channels, c.groups));
        }
        let b = Tag::Backbone;
        let (base, mid) = (c.base_channels, c.mid_channels);
        let time1 = Linear::new(store, "denoiser.time1", c.time_dim, c.time_dim, true, b, rng)?;
        let time2 = Linear::new(store, "denoiser.time2", c.time_dim, c.time_dim, true, b, rng)?;
        let stem = Conv2d::new(store, "denoiser.stem", c.latent_channels, base, 3, 1, true, b, rng)?;
        let enc = ResBlock::new(store, "denoiser.enc", base, c, rng)?;
        let down = Conv2d::new(store, "denoiser.down", base, mid, 3, 2, true, b, rng)?;
        let mid_block = ResBlock::new(store, "denoiser.mid", mid, c, rng)?;
        let mid_attn = CrossAttentionLayer::new(store, "denoiser.mid_attn", mid, c, rng)?;
        let up = Conv2d::new(store, "denoiser.up", mid + base, base, 3, 1, true, b, rng)?;
        let dec = ResBlock::new(store, "denoiser.dec", base, c, rng)?;
        let dec_attn = CrossAttentionLayer::new(store, "denoiser.dec_attn", base, c, rng)?;
        let out_norm = Norm::new(store, "denoiser.out_norm", base, c.groups, b)?;
        let out = Conv2d::new(store, "denoiser.out", base, c.latent_channels, 3, 1, true, b, rng)?;
        store.zero(&out.params());
        Ok(Self {
            config,
            time1,
            time2,
            stem,
            enc,
            down,
            mid: mid_block,
            mid_attn,
            up,
            dec,
            dec_attn,
            out_norm,
            out,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.time1.params();
        v.extend(self.time2.params());
        v.extend(self.stem.params());
        v.extend(self.enc.params());
        v.extend(self.down.params());
        v.extend(self.mid.params());
        v.extend(self.mid_attn.params());
        v.extend(self.up.params());
        v.extend(self.dec.params());
        v.extend(self.dec_attn.params());
        v.extend(self.out_norm.params());
        v.extend(self.out.params());
        v
    }

    /// The `W_Q`, `W_K`, `W_V` matrices of both attention layers.
    pub fn cross_attention_layers(&self) -> [&CrossAttentionLayer; 2] {
        [&self.mid_attn, &self.dec_attn]
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        let c = &self.config;
        [c.latent_channels, c.latent_size, c.latent_size]
    }

    /// `ε_θ(z_t, t, c)` with `z: [C,H,W]` and `cond: [M, d_text]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var, t: usize, cond: Var) -> Result<Var> {
        if g.shape(z) != self.latent_shape() {
            return Err(config_err!("denoiser expects latent {:?}, got {:?}", self.latent_shape(), g.shape(z)));
        }
        let cs = g.shape(cond);
        if cs.len() != 2 || cs[1] != self.config.d_text {
            return Err(config_err!("condition must be [M, {}], got {:?}", self.config.d_text, cs));
        }
        let temb = g.constant(Tensor::vector(&sinusoidal(t as f64, self.config.time_dim)));
        let temb = self.time1.forward(g, store, temb)?;
        let temb = g.act(temb, Activation::Silu);
        let temb = self.time2.forward(g, store, temb)?;

        let h = self.stem.forward(g, store, z)?;
        let skip = self.enc.forward(g, store, h, temb)?;
        let h = self.down.forward(g, store, skip)?;
        let h = self.mid.forward(g, store, h, temb)?;
        let h = self.mid_attn.forward(g, store, h, cond)?;
        let h = g.upsample2x(h)?;
        let h = g.concat(&[h, skip])?;
        let h = self.up.forward(g, store, h)?;
        let h = self.dec.forward(g, store, h, temb)?;
        let h = self.dec_attn.forward(g, store, h, cond)?;
        let h = self.out_norm.group(g, store, h)?;
        let h = g.act(h, Activation::Silu);
        self.out.forward(g, store, h)
    }
}

/// Eval-mode noise estimate.
pub fn predict_noise(state: &LatentState, condition: &Tensor, model: &DenoiserModel, store: &ParamStore) -> Result<Tensor> {
    if !state.z.is_finite() {
        return Err(input_err!("non-finite latent"));
    }
    let mut g = Graph::inference();
    let z = g.constant(state.z.clone());
    let c = g.constant(condition.clone());
    let out = model.forward(&mut g, store, z, state.t, c)?;
    Ok(g.value(out).clone())
}

/// Mean squared error between `eps` and the prediction.
pub fn mse(eps: &Tensor, pred: &Tensor) -> f64 {
    eps.data().iter().zip(pred.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / eps.len() as f64
}

/// `‖ε − ε_θ(z_t, t, c)‖²`, mean-reduced.
pub fn ldm_loss(
    z0: &Tensor,
    t: usize,
    eps: &Tensor,
    condition: &Tensor,
    model: &DenoiserModel,
    store: &ParamStore,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let state = forward_diffuse(z0, t, eps, schedule)?;
    Ok(mse(eps, &predict_noise(&state, condition, model, store)?))
}

/// Graph form of the mean squared noise error.
pub fn ldm_loss_var(g: &mut Graph, eps: Var, pred: Var) -> Result<Var> {
    let d = g.sub(eps, pred)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// `L₂ = L_ldm + λ₁ ‖F_main‖₁`.
pub fn l2_objective(ldm: f64, f_main: &LayerFeatureSet, lambda1: f64) -> Result<f64> {
    if !(lambda1 >= 0.0) {
        return Err(config_err!("lambda1 must be non-negative, got {}", lambda1));
    }
    Ok(ldm + lambda1 * f_main.l1_norm())
}

/// `L = L₂ + λ₂ L₁`.
pub fn total_objective(l2: f64, l1: f64, lambda2: f64) -> Result<f64> {
    if !(lambda2 >= 0.0) {
        return Err(config_err!("lambda2 must be non-negative, got {}", lambda2));
    }
    Ok(l2 + lambda2 * l1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

impl core::str::FromStr for SamplerKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(Self::Ddpm),
            "ddim" => Ok(Self::Ddim),
            other => Err(config_err!("unknown sampler {:?}", other)),
        }
    }
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::Ddim => "ddim",
        }
    }

    fn eta(self) -> f64 {
        match self {
            SamplerKind::Ddpm => 1.0,
            SamplerKind::Ddim => 0.0,
        }
    }
}

/// Evenly spaced timesteps `τ_1 < … < τ_steps = T`.
pub fn sampling_timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max {
        return Err(config_err!("sampler steps must be in [1, {}], got {}", t_max, steps));
    }
    Ok((1..=steps).map(|i| (i * t_max).div_ceil(steps)).collect())
}

/// Iteratively denoise from Gaussian noise and decode.
///
/// DDIM is deterministic given the initial draw; DDPM adds the posterior
/// noise at every step. Both are deterministic for a fixed `seed`.
#[allow(clippy::too_many_arguments)]
pub fn sample(
    condition: &Tensor,
    model: &DenoiserModel,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    codec: LatentCodec,
    kind: SamplerKind,
    steps: usize,
    seed: u64,
) -> Result<ImageTensor> {
    let taus = sampling_timesteps(schedule.steps(), steps)?;
    let mut r = rng::seeded(seed);
    let shape = model.latent_shape();
    let n = shape.iter().product();
    let mut z = Tensor::from_vec(&shape, (0..n).map(|_| rng::normal(&mut r)).collect())?;
    let eta = kind.eta();
    for i in (0..taus.len()).rev() {
        let t = taus[i];
        let t_prev = if i == 0 { 0 } else { taus[i - 1] };
        let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
        let eps = predict_noise(&LatentState { z: z.clone(), t }, condition, model, store)?;
        let (sa, sb) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
        let x0: Vec<f64> = z.data().iter().zip(eps.data()).map(|(zi, e)| ((zi - sb * e) / sa).clamp(-1.0, 1.0)).collect();
        let eps: Vec<f64> = z.data().iter().zip(&x0).map(|(zi, x)| (zi - sa * x) / sb).collect();
        let sigma = eta * libm::sqrt((1.0 - ab_prev) / (1.0 - ab)) * libm::sqrt((1.0 - ab / ab_prev).max(0.0));
        let dir = libm::sqrt((1.0 - ab_prev - sigma * sigma).max(0.0));
        let sp = libm::sqrt(ab_prev);
        let next: Vec<f64> = x0
            .iter()
            .zip(&eps)
            .map(|(x, e)| {
                let noise = if sigma > 0.0 { sigma * rng::normal(&mut r) } else { 0.0 };
                sp * x + dir * e + noise
            })
            .collect();
        z = Tensor::from_vec(&shape, next)?;
    }
    if !z.is_finite() {
        return Err(crate::Error::NonFinite("sampled latent".into()));
    }
    codec.decode(&z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;
    use crate::autograd::Mode;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: 3,
            latent_size: 8,
            base_channels: 4,
            mid_channels: 8,
            time_dim: 8,
            d_text: 16,
            groups: 2,
        }
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng::normal(&mut r)).collect()).unwrap()
    }

    #[test]
    fn schedules_are_monotone_with_sane_endpoints() {
        for kind in [ScheduleKind::LinearBeta, ScheduleKind::Cosine] {
            for t in [2, 10, 100, 1000] {
                let s = NoiseSchedule::build(t, kind).unwrap();
                assert_eq!(s.steps(), t);
                assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]), "{kind:?} {t}");
                assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a <= 1.0));
                if t >= 100 {
                    assert!(s.alpha_bar(1) > 0.99, "{kind:?} {t}");
                    assert!(s.alpha_bar(t) < 1e-3, "{kind:?} {t} {}", s.alpha_bar(t));
                }
            }
        }
        assert!(NoiseSchedule::build(1, ScheduleKind::LinearBeta).is_err());
        assert!("sigmoid".parse::<ScheduleKind>().is_err());
    }

    #[test]
    fn alpha_bar_is_cumulative_product() {
        let s = NoiseSchedule::build(50, ScheduleKind::LinearBeta).unwrap();
        for t in 1..=50 {
            let prod: f64 = s.betas()[..t].iter().map(|b| 1.0 - b).product();
            assert!((s.alpha_bar(t) - prod).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_diffusion_cases() {
        let s = NoiseSchedule::build(10, ScheduleKind::LinearBeta).unwrap();
        let z0 = Tensor::zeros(&[2, 2, 2]);
        let eps = randn(&[2, 2, 2], 1);
        let zt = forward_diffuse(&z0, 4, &eps, &s).unwrap();
        let b = libm::sqrt(1.0 - s.alpha_bar(4));
        for (a, e) in zt.z.data().iter().zip(eps.data()) {
            assert_eq!(*a, b * e);
        }
        assert!(forward_diffuse(&z0, 0, &eps, &s).is_err());
        assert!(forward_diffuse(&z0, 11, &eps, &s).is_err());
    }

    #[test]
    fn forward_diffusion_moments() {
        let s = NoiseSchedule::build(100, ScheduleKind::LinearBeta).unwrap();
        let z0 = Tensor::vector(&[0.7]);
        let t = 30;
        let mut r = rng::seeded(99);
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| forward_diffuse(&z0, t, &Tensor::vector(&[rng::normal(&mut r)]), &s).unwrap().z.data()[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let ab = s.alpha_bar(t);
        let sd_mean = libm::sqrt((1.0 - ab) / n as f64);
        assert!((mean - libm::sqrt(ab) * 0.7).abs() < 3.0 * sd_mean);
        // sd of the sample variance of a Gaussian: σ²·√(2/(n−1))
        assert!((var - (1.0 - ab)).abs() < 3.0 * (1.0 - ab) * libm::sqrt(2.0 / (n - 1) as f64));
    }

    #[test]
    fn codecs_round_trip() {
        let mut r = rng::seeded(4);
        let px: Vec<f64> = (0..8 * 8 * 3).map(|_| rng::uniform(&mut r)).collect();
        let img = ImageTensor::new(8, 8, 3, px).unwrap();
        for codec in [LatentCodec::Identity, LatentCodec::Unshuffle] {
            let z = codec.encode(&img).unwrap();
            assert_eq!(z.shape(), codec.latent_shape(8, 3));
            let back = codec.decode(&z).unwrap();
            assert!(img.mse(&back).unwrap() < 1e-30);
        }
    }

    #[test]
    fn single_token_attention_returns_value_row() {
        let h = randn(&[3, 4], 1);
        let c = randn(&[1, 5], 2);
        let (wq, wk, wv) = (randn(&[4, 4], 3), randn(&[5, 4], 4), randn(&[5, 4], 5));
        let out = cross_attention(&h, &c, &wq, &wk, &wv).unwrap();
        let mut v = vec![0.0; 4];
        for j in 0..4 {
            v[j] = (0..5).map(|i| c.data()[i] * wv.data()[i * 4 + j]).sum();
        }
        for i in 0..3 {
            for j in 0..4 {
                assert!((out.row(i)[j] - v[j]).abs() < 1e-12);
            }
        }
        let c2 = Tensor::from_vec(&[2, 5], [c.data(), c.data()].concat()).unwrap();
        let out2 = cross_attention(&h, &c2, &wq, &wk, &wv).unwrap();
        for (a, b) in out.data().iter().zip(out2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(cross_attention(&h, &c, &wq, &wv, &randn(&[4, 4], 6)).is_err());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        for seed in 0..20 {
            let w = attention_weights(&randn(&[6, 8], seed), &randn(&[7, 8], seed + 100)).unwrap();
            for i in 0..6 {
                assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn denoiser_tags_partition_parameters() {
        let mut s = ParamStore::new();
        let m = DenoiserModel::new(&mut s, tiny(), &mut rng::seeded(0)).unwrap();
        let ids = m.params();
        assert_eq!(ids.len(), s.len());
        assert!(ids.iter().all(|&id| s.tag(id) != Tag::Untagged));
        let ca: Vec<_> = ids.iter().filter(|&&id| s.tag(id) == Tag::CrossAttention).collect();
        assert_eq!(ca.len(), 6);
    }

    #[test]
    fn zero_output_layer_predicts_zero_and_condition_matters() {
        let mut s = ParamStore::new();
        let m = DenoiserModel::new(&mut s, tiny(), &mut rng::seeded(0)).unwrap();
        let state = LatentState { z: randn(&[3, 8, 8], 1), t: 5 };
        let c1 = randn(&[4, 16], 2);
        assert!(predict_noise(&state, &c1, &m, &s).unwrap().data().iter().all(|&x| x == 0.0));

        let mut r = rng::seeded(9);
        for id in m.out.params() {
            let t = s.get(id).map(|_| 0.1 * rng::normal(&mut r));
            s.set(id, t).unwrap();
        }
        let a = predict_noise(&state, &c1, &m, &s).unwrap();
        assert_eq!(a, predict_noise(&state, &c1, &m, &s).unwrap());
        let b = predict_noise(&state, &randn(&[4, 16], 3), &m, &s).unwrap();
        assert!(a.data().iter().zip(b.data()).any(|(x, y)| (x - y).abs() > 1e-9));
        let bad = LatentState { z: Tensor::full(&[3, 8, 8], f64::NAN), t: 5 };
        assert!(matches!(predict_noise(&bad, &c1, &m, &s), Err(crate::Error::Input(_))));
    }

    #[test]
    fn zero_model_loss_has_unit_expectation() {
        let mut s = ParamStore::new();
        let m = DenoiserModel::new(&mut s, tiny(), &mut rng::seeded(0)).unwrap();
        let sch = NoiseSchedule::build(10, ScheduleKind::LinearBeta).unwrap();
        let z0 = randn(&[3, 8, 8], 7);
        let c = randn(&[2, 16], 8);
        let mut total = 0.0;
        let n = 200;
        for i in 0..n {
            let eps = randn(&[3, 8, 8], 1000 + i);
            let l = ldm_loss(&z0, 1 + (i as usize % 10), &eps, &c, &m, &s, &sch).unwrap();
            assert!(l >= 0.0);
            total += l;
        }
        // mean of n·192 squared unit normals: sd = sqrt(2 / (n·192))
        let mean = total / n as f64;
        assert!((mean - 1.0).abs() < 3.0 * libm::sqrt(2.0 / (n as f64 * 192.0)), "{mean}");
    }

    #[test]
    fn objective_arithmetic() {
        let f = LayerFeatureSet::from_rows(&[vec![1.0, -2.0], vec![0.0, 3.0], vec![0.0; 2], vec![0.0; 2], vec![0.0; 2]])
            .unwrap();
        assert!((l2_objective(0.5, &f, 0.01).unwrap() - 0.56).abs() < 1e-15);
        assert_eq!(l2_objective(0.5, &f, 0.0).unwrap(), 0.5);
        assert!((total_objective(1.0, 0.5, 0.1).unwrap() - 1.05).abs() < 1e-15);
        assert!(total_objective(1.0, 0.5, -0.1).is_err());
    }

    #[test]
    fn sampler_contract() {
        let mut s = ParamStore::new();
        let m = DenoiserModel::new(&mut s, tiny(), &mut rng::seeded(0)).unwrap();
        let sch = NoiseSchedule::build(20, ScheduleKind::LinearBeta).unwrap();
        let c = randn(&[2, 16], 8);
        let run = |kind, steps| sample(&c, &m, &s, &sch, LatentCodec::Identity, kind, steps, 3);
        let a = run(SamplerKind::Ddim, 10).unwrap();
        assert_eq!(a, run(SamplerKind::Ddim, 10).unwrap());
        assert!(a.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        run(SamplerKind::Ddpm, 20).unwrap();
        assert!(run(SamplerKind::Ddim, 0).is_err());
        assert!(run(SamplerKind::Ddim, 21).is_err());
        assert_eq!(sampling_timesteps(10, 4).unwrap(), vec![3, 5, 8, 10]);
    }

    #[test]
    fn denoiser_gradients() {
        let mut s = ParamStore::new();
        let m = DenoiserModel::new(&mut s, tiny(), &mut rng::seeded(0)).unwrap();
        let mut r = rng::seeded(1);
        for id in m.out.params() {
            let t = s.get(id).map(|_| 0.3 * rng::normal(&mut r));
            s.set(id, t).unwrap();
        }
        let ids = m.params();
        let mask = s.mask(&ids);
        let z = randn(&[3, 8, 8], 2);
        let eps = randn(&[3, 8, 8], 3);
        let c = randn(&[3, 16], 4);
        let rep = check_params(
            &mut s,
            &ids,
            3,
            5,
            1e-5,
            || Graph::new(mask.clone(), Mode::Train, 0),
            |st, g| {
                let zv = g.constant(z.clone());
                let cv = g.constant(c.clone());
                let ev = g.constant(eps.clone());
                let p = m.forward(g, st, zv, 7, cv)?;
                ldm_loss_var(g, ev, p)
            },
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }
}
