//! Procedural controlled-factor corpus: parametric shapes over patterned backgrounds.
//!
//! Every image is a pure function of its factors, so backgrounds and
//! pose-matched variants are exact ground truth rather than estimates.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Result};
use crate::feature::ImageTensor;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Triangle,
    Square,
    Star,
    Cross,
    Arrow,
    Crescent,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 6] = [
        ShapeFamily::Triangle,
        ShapeFamily::Square,
        ShapeFamily::Star,
        ShapeFamily::Cross,
        ShapeFamily::Arrow,
        ShapeFamily::Crescent,
    ];

    /// Prompt token naming the family.
    pub fn token(self) -> &'static str {
        match self {
            ShapeFamily::Triangle => "triangle",
            ShapeFamily::Square => "square",
            ShapeFamily::Star => "star",
            ShapeFamily::Cross => "cross",
            ShapeFamily::Arrow => "arrow",
            ShapeFamily::Crescent => "crescent",
        }
    }

    /// Inside test in the unit local frame.
    fn contains(self, x: f64, y: f64) -> bool {
        match self {
            ShapeFamily::Triangle => {
                // apex up, base at y = 0.6
                y <= 0.6 && y >= -0.9 && x.abs() <= (y + 0.9) * 0.62
            }
            ShapeFamily::Square => x.abs() <= 0.72 && y.abs() <= 0.72,
            ShapeFamily::Star => {
                let r = libm::sqrt(x * x + y * y);
                let phi = libm::atan2(y, x);
                let lobe = libm::cos(2.5 * (phi + core::f64::consts::FRAC_PI_2)).abs();
                r <= 0.38 + 0.55 * lobe * lobe
            }
            ShapeFamily::Cross => {
                (x.abs() <= 0.28 && y.abs() <= 0.9) || (y.abs() <= 0.28 && x.abs() <= 0.9)
            }
            ShapeFamily::Arrow => {
                (y.abs() <= 0.22 && (-0.9..=0.15).contains(&x)) || ((0.15..=0.9).contains(&x) && y.abs() <= 0.9 - x)
            }
            ShapeFamily::Crescent => {
                let outer = x * x + y * y <= 0.85 * 0.85;
                let (cx, cy) = (x - 0.38, y + 0.12);
                outer && cx * cx + cy * cy > 0.62 * 0.62
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Solid,
    Stripes,
    Dots,
    Ring,
}

impl Texture {
    pub const ALL: [Texture; 4] = [Texture::Solid, Texture::Stripes, Texture::Dots, Texture::Ring];

    pub fn token(self) -> &'static str {
        match self {
            Texture::Solid => "solid",
            Texture::Stripes => "striped",
            Texture::Dots => "dotted",
            Texture::Ring => "ringed",
        }
    }

    fn shade(self, base: [f64; 3], x: f64, y: f64) -> [f64; 3] {
        let dark = base.map(|c| 0.5 * c);
        let light = base.map(|c| 0.5 * c + 0.5);
        match self {
            Texture::Solid => base,
            Texture::Stripes => {
                if (libm::floor((x + 2.0) * 3.0) as i64) % 2 == 0 {
                    base
                } else {
                    dark
                }
            }
            Texture::Dots => {
                let (fx, fy) = (x * 2.5 - libm::round(x * 2.5), y * 2.5 - libm::round(y * 2.5));
                if fx * fx + fy * fy < 0.09 {
                    light
                } else {
                    base
                }
            }
            Texture::Ring => {
                if x * x + y * y > 0.3 {
                    dark
                } else {
                    base
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Solid,
    Gradient,
    Checker,
    Stripes,
    Noise,
}

impl Pattern {
    pub const ALL: [Pattern; 5] = [Pattern::Solid, Pattern::Gradient, Pattern::Checker, Pattern::Stripes, Pattern::Noise];

    pub fn token(self) -> &'static str {
        match self {
            Pattern::Solid => "plain",
            Pattern::Gradient => "gradient",
            Pattern::Checker => "checkered",
            Pattern::Stripes => "banded",
            Pattern::Noise => "noisy",
        }
    }
}

/// Caption words for the default colours, by index.
pub const COLOR_WORDS: [&str; 8] = ["red", "orange", "yellow", "green", "teal", "blue", "purple", "pink"];

/// Caption words for the default background palettes, by index.
pub const PALETTE_WORDS: [&str; 6] = ["cream", "slate", "sky", "sand", "moss", "lilac"];

/// Caption of a scene: `<colour> <texture> <shape> on <palette> <pattern> background`.
pub fn caption(factors: &FactorSpec) -> Result<Vec<&'static str>> {
    let id = factors.identity;
    let bg = factors.background;
    let color = COLOR_WORDS.get(id.color).ok_or_else(|| input_err!("no caption word for colour {}", id.color))?;
    let palette = PALETTE_WORDS.get(bg.palette).ok_or_else(|| input_err!("no caption word for palette {}", bg.palette))?;
    Ok(alloc::vec![color, id.texture.token(), id.shape.token(), "on", palette, bg.pattern.token(), "background"])
}

/// Subject appearance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Identity {
    pub shape: ShapeFamily,
    /// Index into [`Vocabulary::colors`].
    pub color: usize,
    pub texture: Texture,
}

/// Subject placement; indices into the pose vocabularies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: usize,
    pub offset: usize,
    pub scale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Background {
    pub pattern: Pattern,
    /// Index into [`Vocabulary::palettes`].
    pub palette: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactorSpec {
    pub identity: Identity,
    pub pose: Pose,
    pub background: Background,
}

/// A pose-matched identity variant, rendered on the neutral backdrop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VariantSpec {
    pub identity: Identity,
    pub pose: Pose,
}

/// Finite value sets every factor is drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub shapes: Vec<ShapeFamily>,
    pub colors: Vec<[f64; 3]>,
    pub textures: Vec<Texture>,
    /// Degrees.
    pub rotations: Vec<f64>,
    /// Pixels from the canvas centre.
    pub offsets: Vec<[f64; 2]>,
    /// Subject radius as a fraction of half the canvas.
    pub scales: Vec<f64>,
    pub patterns: Vec<Pattern>,
    pub palettes: Vec<[[f64; 3]; 2]>,
    pub neutral: [f64; 3],
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self {
            shapes: ShapeFamily::ALL.to_vec(),
            colors: vec![
                [0.85, 0.15, 0.15],
                [0.95, 0.55, 0.10],
                [0.95, 0.85, 0.15],
                [0.20, 0.70, 0.25],
                [0.10, 0.65, 0.65],
                [0.20, 0.30, 0.85],
                [0.55, 0.20, 0.75],
                [0.95, 0.45, 0.70],
            ],
            textures: Texture::ALL.to_vec(),
            rotations: (0..8).map(|i| 45.0 * i as f64).collect(),
            offsets: vec![[0.0, 0.0], [-4.0, -4.0], [4.0, -4.0], [-4.0, 4.0], [4.0, 4.0]],
            scales: vec![0.45, 0.55, 0.65],
            patterns: Pattern::ALL.to_vec(),
            palettes: vec![
                [[0.90, 0.90, 0.80], [0.60, 0.60, 0.50]],
                [[0.20, 0.25, 0.35], [0.45, 0.50, 0.60]],
                [[0.70, 0.85, 0.95], [0.30, 0.50, 0.70]],
                [[0.95, 0.80, 0.60], [0.60, 0.40, 0.25]],
                [[0.60, 0.80, 0.50], [0.25, 0.45, 0.20]],
                [[0.85, 0.70, 0.85], [0.50, 0.35, 0.55]],
            ],
            neutral: [0.5, 0.5, 0.5],
        }
    }
}

impl Vocabulary {
    pub fn identities(&self) -> Vec<Identity> {
        let mut out = Vec::new();
        for &shape in &self.shapes {
            for color in 0..self.colors.len() {
                for &texture in &self.textures {
                    out.push(Identity { shape, color, texture });
                }
            }
        }
        out
    }

    pub fn poses(&self) -> Vec<Pose> {
        let mut out = Vec::new();
        for rotation in 0..self.rotations.len() {
            for offset in 0..self.offsets.len() {
                for scale in 0..self.scales.len() {
                    out.push(Pose { rotation, offset, scale });
                }
            }
        }
        out
    }

    pub fn backgrounds(&self) -> Vec<Background> {
        let mut out = Vec::new();
        for &pattern in &self.patterns {
            for palette in 0..self.palettes.len() {
                out.push(Background { pattern, palette });
            }
        }
        out
    }

    fn check_identity(&self, id: &Identity) -> Result<()> {
        if !self.shapes.contains(&id.shape) || id.color >= self.colors.len() || !self.textures.contains(&id.texture) {
            return Err(input_err!("identity {:?} outside the vocabulary", id));
        }
        Ok(())
    }

    fn check_pose(&self, p: &Pose) -> Result<()> {
        if p.rotation >= self.rotations.len() || p.offset >= self.offsets.len() || p.scale >= self.scales.len() {
            return Err(input_err!("pose {:?} outside the vocabulary", p));
        }
        Ok(())
    }

    fn check_background(&self, b: &Background) -> Result<()> {
        if !self.patterns.contains(&b.pattern) || b.palette >= self.palettes.len() {
            return Err(input_err!("background {:?} outside the vocabulary", b));
        }
        Ok(())
    }
}

fn hash2(a: u64, b: u64) -> f64 {
    let mut z = a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_add(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

#[derive(Clone, Copy)]
enum Backdrop<'a> {
    Pattern(&'a Background),
    Neutral,
}

/// Deterministic rasteriser over a fixed vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Renderer {
    pub vocab: Vocabulary,
    pub size: usize,
    /// Samples per pixel along each axis.
    pub supersample: usize,
}

impl Renderer {
    pub fn new(vocab: Vocabulary, size: usize) -> Self {
        Self { vocab, size, supersample: 2 }
    }

    fn backdrop_color(&self, b: Backdrop, x: f64, y: f64) -> [f64; 3] {
        let bg = match b {
            Backdrop::Neutral => return self.vocab.neutral,
            Backdrop::Pattern(bg) => bg,
        };
        let [c1, c2] = self.vocab.palettes[bg.palette];
        let s = self.size as f64;
        match bg.pattern {
            Pattern::Solid => c1,
            Pattern::Gradient => lerp(c1, c2, ((x + y) / (2.0 * s)).clamp(0.0, 1.0)),
            Pattern::Checker => {
                if ((libm::floor(x / 8.0) + libm::floor(y / 8.0)) as i64) % 2 == 0 {
                    c1
                } else {
                    c2
                }
            }
            Pattern::Stripes => {
                if (libm::floor(y / 4.0) as i64) % 2 == 0 {
                    c1
                } else {
                    c2
                }
            }
            Pattern::Noise => {
                let cell = (libm::floor(y / 4.0) as u64) * 64 + libm::floor(x / 4.0) as u64;
                lerp(c1, c2, hash2(bg.palette as u64 + 1, cell))
            }
        }
    }

    /// Local unit-frame coordinates of canvas point `(x, y)`.
    fn local(&self, pose: &Pose, x: f64, y: f64) -> (f64, f64) {
        let half = self.size as f64 / 2.0;
        let [ox, oy] = self.vocab.offsets[pose.offset];
        let radius = self.vocab.scales[pose.scale] * half;
        let (dx, dy) = ((x - half - ox) / radius, (y - half - oy) / radius);
        let th = self.vocab.rotations[pose.rotation].to_radians();
        let (s, c) = (libm::sin(th), libm::cos(th));
        (c * dx + s * dy, -s * dx + c * dy)
    }

    fn raster(&self, subject: Option<(&Identity, &Pose)>, backdrop: Backdrop) -> (ImageTensor, Vec<bool>) {
        let n = self.size;
        let ss = self.supersample.max(1);
        let inv = 1.0 / (ss * ss) as f64;
        let mut pixels = vec![0.0; n * n * 3];
        let mut mask = vec![false; n * n];
        for py in 0..n {
            for px in 0..n {
                let mut acc = [0.0; 3];
                for sy in 0..ss {
                    for sx in 0..ss {
                        let x = px as f64 + (sx as f64 + 0.5) / ss as f64;
                        let y = py as f64 + (sy as f64 + 0.5) / ss as f64;
                        let mut col = self.backdrop_color(backdrop, x, y);
                        if let Some((id, pose)) = subject {
                            let (lx, ly) = self.local(pose, x, y);
                            if id.shape.contains(lx, ly) {
                                col = id.texture.shade(self.vocab.colors[id.color], lx, ly);
                                mask[py * n + px] = true;
                            }
                        }
                        for c in 0..3 {
                            acc[c] += col[c];
                        }
                    }
                }
                for c in 0..3 {
                    pixels[(py * n + px) * 3 + c] = (acc[c] * inv).clamp(0.0, 1.0);
                }
            }
        }
        (ImageTensor::new(n, n, 3, pixels).expect("rendered pixels are in range"), mask)
    }

    fn check(&self, f: &FactorSpec) -> Result<()> {
        self.vocab.check_identity(&f.identity)?;
        self.vocab.check_pose(&f.pose)?;
        self.vocab.check_background(&f.background)
    }

    /// Render a sample image; without the subject only the background remains.
    pub fn render(&self, factors: &FactorSpec, with_subject: bool) -> Result<ImageTensor> {
        self.check(factors)?;
        let subject = with_subject.then_some((&factors.identity, &factors.pose));
        Ok(self.raster(subject, Backdrop::Pattern(&factors.background)).0)
    }

    /// Pixels touched by the subject.
    pub fn subject_mask(&self, factors: &FactorSpec) -> Result<Vec<bool>> {
        self.check(factors)?;
        Ok(self.raster(Some((&factors.identity, &factors.pose)), Backdrop::Pattern(&factors.background)).1)
    }

    /// A pose-matched variant on the neutral backdrop.
    pub fn render_variant(&self, v: &VariantSpec) -> Result<ImageTensor> {
        self.vocab.check_identity(&v.identity)?;
        self.vocab.check_pose(&v.pose)?;
        Ok(self.raster(Some((&v.identity, &v.pose)), Backdrop::Neutral).0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub image_size: usize,
    pub originals: usize,
    pub subjects_per_original: usize,
    pub backgrounds_per_subject: usize,
    pub pose_variants: usize,
    /// Identities per shape family withheld from training.
    pub heldout_per_shape: usize,
    pub vocab: Vocabulary,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            originals: 100,
            subjects_per_original: 10,
            backgrounds_per_subject: 10,
            pose_variants: 3,
            heldout_per_shape: 4,
            vocab: Vocabulary::default(),
        }
    }
}

impl CorpusConfig {
    pub fn samples_per_original(&self) -> usize {
        self.subjects_per_original * self.backgrounds_per_subject
    }

    pub fn renderer(&self) -> Renderer {
        Renderer::new(self.vocab.clone(), self.image_size)
    }
}

/// One planned sample: factors plus the identities of its pose variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub original: usize,
    pub subject: usize,
    pub factors: FactorSpec,
    pub variants: Vec<VariantSpec>,
}

impl SampleRecord {
    pub fn subject_token(&self) -> &'static str {
        self.factors.identity.shape.token()
    }
}

/// Every sample of a corpus, before rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusPlan {
    pub config: CorpusConfig,
    pub seed: u64,
    pub train_identities: Vec<Identity>,
    pub heldout_identities: Vec<Identity>,
    pub samples: Vec<SampleRecord>,
}

fn choose_distinct<T: Copy>(rng: &mut Rng, pool: &[T], k: usize) -> Vec<T> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    for i in 0..k {
        let j = i + rng::below(rng, pool.len() - i);
        idx.swap(i, j);
    }
    idx[..k].iter().map(|&i| pool[i]).collect()
}

/// Split identities into training and held-out pools, balanced per shape.
pub fn split_identities(vocab: &Vocabulary, heldout_per_shape: usize, rng: &mut Rng) -> (Vec<Identity>, Vec<Identity>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for &shape in &vocab.shapes {
        let mut ids: Vec<Identity> = vocab.identities().into_iter().filter(|i| i.shape == shape).collect();
        rng::shuffle(rng, &mut ids);
        let k = heldout_per_shape.min(ids.len());
        held.extend_from_slice(&ids[..k]);
        train.extend_from_slice(&ids[k..]);
    }
    train.sort();
    held.sort();
    (train, held)
}

/// Plan `originals × subjects × backgrounds` samples from `seed`.
pub fn generate_plan(config: &CorpusConfig, seed: u64) -> Result<CorpusPlan> {
    let v = &config.vocab;
    if config.image_size < 8 || config.image_size % 2 != 0 {
        return Err(config_err!("image size {} must be even and >= 8", config.image_size));
    }
    if config.originals == 0 {
        return Err(config_err!("corpus needs at least one original"));
    }
    if v.colors.iter().chain(core::iter::once(&v.neutral)).chain(v.palettes.iter().flatten()).flatten().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(config_err!("vocabulary colours must lie in [0, 1]"));
    }
    if v.scales.iter().any(|s| !(*s > 0.0)) {
        return Err(config_err!("pose scales must be positive"));
    }
    let mut r = rng::seeded(seed);
    let (train, held) = split_identities(v, config.heldout_per_shape, &mut r);
    let poses = v.poses();
    let backgrounds = v.backgrounds();
    if config.pose_variants == 0 {
        return Err(config_err!("at least one pose variant is required"));
    }
    if config.subjects_per_original < config.pose_variants + 1 {
        return Err(config_err!(
            "{} subjects per original cannot supply {} distinct variants",
            config.subjects_per_original,
            config.pose_variants
        ));
    }
    if train.len() < config.subjects_per_original.max(10) {
        return Err(config_err!("{} training identities; need at least {}", train.len(), config.subjects_per_original.max(10)));
    }
    if poses.len() < 5 {
        return Err(config_err!("{} poses; need at least 5", poses.len()));
    }
    if backgrounds.len() < config.backgrounds_per_subject.max(10) {
        return Err(config_err!(
            "{} backgrounds; need at least {}",
            backgrounds.len(),
            config.backgrounds_per_subject.max(10)
        ));
    }

    let mut samples = Vec::with_capacity(config.originals * config.samples_per_original());
    for original in 0..config.originals {
        let subjects = choose_distinct(&mut r, &train, config.subjects_per_original);
        let pose = poses[rng::below(&mut r, poses.len())];
        for (k, &identity) in subjects.iter().enumerate() {
            let others: Vec<Identity> = subjects.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, i)| *i).collect();
            for background in choose_distinct(&mut r, &backgrounds, config.backgrounds_per_subject) {
                let variants = choose_distinct(&mut r, &others, config.pose_variants)
                    .into_iter()
                    .map(|identity| VariantSpec { identity, pose })
                    .collect();
                samples.push(SampleRecord {
                    original,
                    subject: k,
                    factors: FactorSpec { identity, pose, background },
                    variants,
                });
            }
        }
    }
    Ok(CorpusPlan { config: config.clone(), seed, train_identities: train, heldout_identities: held, samples })
}

/// A fully rendered training record.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSample {
    pub main_image: ImageTensor,
    pub background_image: ImageTensor,
    pub pose_variants: Vec<ImageTensor>,
    pub factors: FactorSpec,
    pub variants: Vec<VariantSpec>,
    pub subject_token: String,
}

impl CorpusSample {
    /// Structural invariants: variant count, pose equality, identity distinctness, image sizes.
    pub fn validate(&self, expected_variants: usize) -> Result<()> {
        if self.pose_variants.len() != expected_variants || self.variants.len() != expected_variants {
            return Err(input_err!(
                "expected {} pose variants, found {} images / {} records",
                expected_variants,
                self.pose_variants.len(),
                self.variants.len()
            ));
        }
        for (i, v) in self.variants.iter().enumerate() {
            if v.pose != self.factors.pose {
                return Err(input_err!("variant {} pose {:?} differs from main pose {:?}", i, v.pose, self.factors.pose));
            }
            if v.identity == self.factors.identity {
                return Err(input_err!("variant {} repeats the main identity", i));
            }
            if self.variants[..i].iter().any(|w| w.identity == v.identity) {
                return Err(input_err!("variant {} repeats another variant's identity", i));
            }
        }
        let dims = |im: &ImageTensor| (im.height(), im.width(), im.channels());
        let d = dims(&self.main_image);
        if dims(&self.background_image) != d || self.pose_variants.iter().any(|im| dims(im) != d) {
            return Err(input_err!("sample images differ in size"));
        }
        if self.subject_token != self.factors.identity.shape.token() {
            return Err(input_err!("subject token {:?} does not name {:?}", self.subject_token, self.factors.identity.shape));
        }
        Ok(())
    }
}

/// Render every image of `record`.
pub fn materialize(record: &SampleRecord, renderer: &Renderer) -> Result<CorpusSample> {
    let sample = CorpusSample {
        main_image: renderer.render(&record.factors, true)?,
        background_image: renderer.render(&record.factors, false)?,
        pose_variants: record.variants.iter().map(|v| renderer.render_variant(v)).collect::<Result<Vec<_>>>()?,
        factors: record.factors,
        variants: record.variants.clone(),
        subject_token: record.subject_token().to_string(),
    };
    sample.validate(record.variants.len())?;
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    fn small_config(originals: usize) -> CorpusConfig {
        CorpusConfig { originals, ..Default::default() }
    }

    fn spec(shape: ShapeFamily, color: usize) -> FactorSpec {
        FactorSpec {
            identity: Identity { shape, color, texture: Texture::Stripes },
            pose: Pose { rotation: 1, offset: 2, scale: 1 },
            background: Background { pattern: Pattern::Checker, palette: 3 },
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let r = Renderer::new(Vocabulary::default(), 32);
        let f = spec(ShapeFamily::Star, 2);
        assert_eq!(r.render(&f, true).unwrap(), r.render(&f, true).unwrap());
    }

    #[test]
    fn background_render_ignores_subject() {
        let r = Renderer::new(Vocabulary::default(), 32);
        let a = r.render(&spec(ShapeFamily::Star, 2), false).unwrap();
        let mut other = spec(ShapeFamily::Arrow, 5);
        other.pose = Pose { rotation: 3, offset: 0, scale: 2 };
        assert_eq!(a, r.render(&other, false).unwrap());
    }

    #[test]
    fn identity_change_is_confined_to_subject_masks() {
        let r = Renderer::new(Vocabulary::default(), 32);
        for (s1, s2) in [(ShapeFamily::Star, ShapeFamily::Arrow), (ShapeFamily::Square, ShapeFamily::Crescent)] {
            let (f1, f2) = (spec(s1, 0), spec(s2, 4));
            let (a, b) = (r.render(&f1, true).unwrap(), r.render(&f2, true).unwrap());
            let (m1, m2) = (r.subject_mask(&f1).unwrap(), r.subject_mask(&f2).unwrap());
            let mut differing = 0;
            for p in 0..32 * 32 {
                let diff = (0..3).any(|c| a.pixels()[p * 3 + c] != b.pixels()[p * 3 + c]);
                if diff {
                    differing += 1;
                    assert!(m1[p] || m2[p], "pixel {p} changed outside both masks");
                }
            }
            assert!(differing > 0);
        }
    }

    #[test]
    fn subjects_cover_a_reasonable_area() {
        let r = Renderer::new(Vocabulary::default(), 32);
        for &shape in &ShapeFamily::ALL {
            for scale in 0..3 {
                let mut f = spec(shape, 0);
                f.pose.scale = scale;
                let area = r.subject_mask(&f).unwrap().iter().filter(|&&m| m).count();
                assert!((40..700).contains(&area), "{shape:?} scale {scale}: {area}");
            }
        }
    }

    #[test]
    fn unknown_factor_is_input_error() {
        let r = Renderer::new(Vocabulary::default(), 32);
        let mut f = spec(ShapeFamily::Star, 99);
        assert!(matches!(r.render(&f, true), Err(crate::Error::Input(_))));
        f.identity.color = 0;
        f.pose.rotation = 8;
        assert!(r.render(&f, true).is_err());
    }

    #[test]
    fn one_original_expands_to_100_samples() {
        let mut cfg = small_config(1);
        cfg.vocab.rotations.truncate(1);
        cfg.vocab.offsets.truncate(5);
        cfg.vocab.scales.truncate(1);
        let plan = generate_plan(&cfg, 3).unwrap();
        assert_eq!(plan.samples.len(), 100);
    }

    #[test]
    fn plan_is_seeded_and_well_formed() {
        let cfg = small_config(10);
        let plan = generate_plan(&cfg, 7).unwrap();
        assert_eq!(plan, generate_plan(&cfg, 7).unwrap());
        assert_ne!(plan, generate_plan(&cfg, 8).unwrap());
        assert_eq!(plan.samples.len(), 1000);
        let held: BTreeSet<_> = plan.heldout_identities.iter().collect();
        assert_eq!(held.len(), 24);
        for s in &plan.samples {
            assert_eq!(s.variants.len(), 3);
            let ids: BTreeSet<_> = s.variants.iter().map(|v| v.identity).collect();
            assert_eq!(ids.len(), 3);
            assert!(!ids.contains(&s.factors.identity));
            assert!(s.variants.iter().all(|v| v.pose == s.factors.pose));
            assert!(!held.contains(&s.factors.identity));
            assert!(s.variants.iter().all(|v| !held.contains(&v.identity)));
        }
        for o in 0..10 {
            assert_eq!(plan.samples.iter().filter(|s| s.original == o).count(), 100);
        }
    }

    #[test]
    fn insufficient_vocabulary_is_config_error() {
        let mut cfg = small_config(1);
        cfg.vocab.patterns.truncate(1);
        assert!(matches!(generate_plan(&cfg, 0), Err(crate::Error::Config(_))));
        let mut cfg = small_config(1);
        cfg.vocab.rotations.truncate(1);
        cfg.vocab.offsets.truncate(2);
        cfg.vocab.scales.truncate(2);
        assert!(generate_plan(&cfg, 0).is_err());
        let mut cfg = small_config(1);
        cfg.vocab.shapes.truncate(1);
        cfg.vocab.colors.truncate(1);
        assert!(generate_plan(&cfg, 0).is_err());
    }

    #[test]
    fn materialized_sample_has_exact_ground_truth() {
        let cfg = small_config(1);
        let plan = generate_plan(&cfg, 1).unwrap();
        let r = cfg.renderer();
        let s = materialize(&plan.samples[17], &r).unwrap();
        assert_eq!(s.background_image, r.render(&s.factors, false).unwrap());
        let mut bad = s.clone();
        bad.variants[0].pose.rotation = (bad.variants[0].pose.rotation + 1) % 8;
        assert!(bad.validate(3).is_err());
        let mut bad = s.clone();
        bad.pose_variants.pop();
        assert!(bad.validate(3).is_err());
    }
}
