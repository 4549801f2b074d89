//! Multi-layer image encoding and the shared per-tap mapper.
//!
//! The encoder is a small convolutional trunk with five tap points; each tap is
//! global-average-pooled and linearly projected to `d_enc`. The mapper is one
//! perceptron applied with shared weights to each of the five tap vectors.

use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Activation, Graph, Var};
use crate::error::{config_err, input_err, Result};
use crate::nn::{Conv2d, Linear, Mlp, MlpConfig, ParamId, ParamStore, Tag};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Number of encoder tap points, and so of vectors in every feature set.
pub const TAPS: usize = 5;

/// An `H×W×C` image with every entry finite and in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(input_err!("{}×{}×{} image given {} values", height, width, channels, pixels.len()));
        }
        if let Some(p) = pixels.iter().find(|p| !p.is_finite()) {
            return Err(input_err!("non-finite pixel value {}", p));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(input_err!("pixel value {} outside [0, 1]", p));
        }
        Ok(Self { height, width, channels, pixels })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, pixels: vec![0.0; height * width * channels] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Row-major `H×W×C` values.
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Channel-first copy, `[C, H, W]`.
    pub fn to_chw(&self) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = self.pixels[(y * w + x) * c + ch];
                }
            }
        }
        Tensor::from_vec(&[c, h, w], out).expect("chw shape")
    }

    /// Build from a `[C, H, W]` tensor, clamping into `[0, 1]`.
    pub fn from_chw_clamped(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(input_err!("expected [C,H,W], got {:?}", s));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut px = vec![0.0; h * w * c];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = t.data()[(ch * h + y) * w + x];
                    if !v.is_finite() {
                        return Err(input_err!("non-finite value in image tensor"));
                    }
                    px[(y * w + x) * c + ch] = v.clamp(0.0, 1.0);
                }
            }
        }
        Ok(Self { height: h, width: w, channels: c, pixels: px })
    }

    pub fn mse(&self, other: &ImageTensor) -> Result<f64> {
        if self.pixels.len() != other.pixels.len() {
            return Err(input_err!("image size mismatch"));
        }
        let n = self.pixels.len() as f64;
        Ok(self.pixels.iter().zip(&other.pixels).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
    }
}

/// Exactly [`TAPS`] finite feature vectors of a common dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFeatureSet {
    layers: Vec<Tensor>,
}

impl LayerFeatureSet {
    pub fn new(layers: Vec<Tensor>) -> Result<Self> {
        if layers.len() != TAPS {
            return Err(input_err!("feature set needs {} layers, got {}", TAPS, layers.len()));
        }
        let d = layers[0].len();
        for l in &layers {
            if l.shape().len() != 1 || l.len() != d {
                return Err(input_err!("feature layers must be vectors of one dimension"));
            }
            if !l.is_finite() {
                return Err(input_err!("non-finite feature vector"));
            }
        }
        Ok(Self { layers })
    }

    /// From a `[TAPS, d]` matrix.
    pub fn from_matrix(m: &Tensor) -> Result<Self> {
        if m.shape().len() != 2 || m.shape()[0] != TAPS {
            return Err(input_err!("expected [{}, d] feature matrix, got {:?}", TAPS, m.shape()));
        }
        Self::new((0..TAPS).map(|i| Tensor::vector(m.row(i))).collect())
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows.iter().map(|r| Tensor::vector(r)).collect())
    }

    /// Stacked `[TAPS, d]` matrix.
    pub fn to_matrix(&self) -> Tensor {
        let d = self.dim();
        let data = self.layers.iter().flat_map(|l| l.data().iter().copied()).collect();
        Tensor::from_vec(&[TAPS, d], data).expect("feature matrix")
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &[f64] {
        self.layers[i].data()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].len()
    }

    /// `Σ |entries|` across every layer.
    pub fn l1_norm(&self) -> f64 {
        self.layers.iter().flat_map(|l| l.data()).map(|v| v.abs()).sum()
    }

    /// Euclidean distance over the stacked vectors.
    pub fn distance(&self, other: &LayerFeatureSet) -> f64 {
        let s: f64 = self
            .layers
            .iter()
            .zip(&other.layers)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)))
            .sum();
        libm::sqrt(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Channel width at each of the five tap points.
    pub widths: [usize; TAPS],
    pub d_enc: usize,
    pub activation: Activation,
    pub bias: bool,
    /// Standardise each pooled tap across channels before its projection,
    /// which then carries no bias.
    pub normalize_taps: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            in_channels: 3,
            widths: [16, 32, 32, 64, 64],
            d_enc: 64,
            activation: Activation::Silu,
            bias: true,
            normalize_taps: true,
        }
    }
}

/// Convolutional trunk: a stride-1 stem plus four stride-2 blocks, one tap each.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    convs: Vec<Conv2d>,
    heads: Vec<Linear>,
}

impl EncoderModel {
    pub fn new(store: &mut ParamStore, config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        if config.image_size == 0 || config.in_channels == 0 || config.d_enc == 0 {
            return Err(config_err!("encoder dimensions must be positive"));
        }
        let mut convs = Vec::with_capacity(TAPS);
        let mut heads = Vec::with_capacity(TAPS);
        let mut prev = config.in_channels;
        for (i, &w) in config.widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            convs.push(Conv2d::new(
                store,
                &alloc::format!("encoder.conv{i}"),
                prev,
                w,
                3,
                stride,
                config.bias,
                Tag::Untagged,
                rng,
            )?);
            heads.push(Linear::new(
                store,
                &alloc::format!("encoder.tap{i}"),
                w,
                config.d_enc,
                config.bias && !config.normalize_taps,
                Tag::Untagged,
                rng,
            )?);
            prev = w;
        }
        Ok(Self { config, convs, heads })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.convs.iter().flat_map(Conv2d::params).chain(self.heads.iter().flat_map(Linear::params)).collect()
    }

    /// Check an image matches the configured input geometry.
    pub fn check_image(&self, image: &ImageTensor) -> Result<()> {
        let c = &self.config;
        if image.height() != c.image_size || image.width() != c.image_size || image.channels() != c.in_channels {
            return Err(config_err!(
                "encoder expects {}×{}×{}, got {}×{}×{}",
                c.image_size,
                c.image_size,
                c.in_channels,
                image.height(),
                image.width(),
                image.channels()
            ));
        }
        Ok(())
    }

    /// `[C,H,W]` → `[TAPS, d_enc]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        let mut taps = Vec::with_capacity(TAPS);
        for (conv, head) in self.convs.iter().zip(&self.heads) {
            h = conv.forward(g, store, h)?;
            h = g.act(h, self.config.activation);
            let mut pooled = g.mean_spatial(h)?;
            if self.config.normalize_taps {
                let w = g.shape(pooled)[0];
                let one = g.constant(Tensor::full(&[w], 1.0));
                let zero = g.constant(Tensor::zeros(&[w]));
                pooled = g.layer_norm(pooled, one, zero)?;
            }
            let v = head.forward(g, store, pooled)?;
            taps.push(g.reshape(v, &[1, self.config.d_enc])?);
        }
        g.concat(&taps)
    }
}

/// Encode one image in eval mode.
pub fn encode_image(image: &ImageTensor, encoder: &EncoderModel, store: &ParamStore) -> Result<LayerFeatureSet> {
    encoder.check_image(image)?;
    let mut g = Graph::inference();
    let x = g.constant(image.to_chw());
    let out = encoder.forward(&mut g, store, x)?;
    LayerFeatureSet::from_matrix(g.value(out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapperConfig {
    pub d_enc: usize,
    pub hidden: usize,
    pub d_main: usize,
    pub layers: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub bias: bool,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self { d_enc: 64, hidden: 128, d_main: 64, layers: 5, dropout: 0.1, activation: Activation::Silu, bias: true }
    }
}

/// Shared-weight perceptron applied to each tap vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MapperModel {
    pub config: MapperConfig,
    pub mlp: Mlp,
}

impl MapperModel {
    pub fn new(store: &mut ParamStore, config: MapperConfig, rng: &mut Rng) -> Result<Self> {
        if config.layers == 0 {
            return Err(config_err!("mapper needs at least one layer"));
        }
        let mut dims = vec![config.d_enc];
        dims.extend(core::iter::repeat_n(config.hidden, config.layers - 1));
        dims.push(config.d_main);
        let mlp_cfg = MlpConfig { dims, activation: config.activation, dropout: config.dropout, bias: config.bias };
        let mlp = Mlp::new(store, "mapper", &mlp_cfg, Tag::Untagged, rng)?;
        Ok(Self { config, mlp })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }

    /// `[TAPS, d_enc]` → `[TAPS, d_main]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, raw: Var) -> Result<Var> {
        let s = g.shape(raw);
        if s != [TAPS, self.config.d_enc] {
            return Err(config_err!("mapper expects [{}, {}], got {:?}", TAPS, self.config.d_enc, s));
        }
        self.mlp.forward(g, store, raw)
    }
}

/// Map raw tap features into the main feature space (eval mode).
pub fn map_features(raw: &LayerFeatureSet, mapper: &MapperModel, store: &ParamStore) -> Result<LayerFeatureSet> {
    let mut g = Graph::inference();
    let x = g.constant(raw.to_matrix());
    let out = mapper.forward(&mut g, store, x)?;
    LayerFeatureSet::from_matrix(g.value(out))
}
