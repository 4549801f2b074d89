//! Prompt templates, the frozen toy text encoder, and the multimodal condition.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Activation, Graph, Var};
use crate::error::{config_err, input_err, Result};
use crate::feature::{LayerFeatureSet, TAPS};
use crate::nn::{sinusoidal, Linear, Mlp, MlpConfig, Norm, ParamId, ParamStore, Tag};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Token standing for the subject in every template.
pub const PLACEHOLDER: &str = "S*";

const DEFAULT_TEMPLATES: &str = include_str!("../data/templates.txt");
const DEFAULT_LEXICON: &str = include_str!("../data/lexicon.txt");

/// Whitespace-tokenised prompt with exactly one [`PLACEHOLDER`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
    tokens: Vec<String>,
    placeholder: usize,
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        let hits: Vec<usize> = tokens.iter().enumerate().filter(|(_, t)| *t == PLACEHOLDER).map(|(i, _)| i).collect();
        match hits.as_slice() {
            [i] => Ok(Self { text: tokens.join(" "), placeholder: *i, tokens }),
            [] => Err(input_err!("template {:?} has no {} placeholder", text, PLACEHOLDER)),
            _ => Err(input_err!("template {:?} has {} placeholders", text, hits.len())),
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn placeholder_index(&self) -> usize {
        self.placeholder
    }

    /// Rows of the condition built from this template.
    pub fn condition_rows(&self) -> usize {
        self.tokens.len() - 1 + TAPS
    }

    /// Tokens with the placeholder replaced by `word`.
    pub fn with_word<'a>(&'a self, word: &'a str) -> Vec<&'a str> {
        self.with_words(&[word])
    }

    /// Tokens with the placeholder replaced by the phrase `words`.
    pub fn with_words<'a>(&'a self, words: &[&'a str]) -> Vec<&'a str> {
        let mut out = Vec::with_capacity(self.tokens.len() + words.len());
        for t in &self.tokens {
            if t == PLACEHOLDER {
                out.extend_from_slice(words);
            } else {
                out.push(t.as_str());
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateBank {
    templates: Vec<PromptTemplate>,
}

impl Default for TemplateBank {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATES).expect("bundled template bank")
    }
}

impl TemplateBank {
    pub fn new(templates: Vec<PromptTemplate>) -> Result<Self> {
        if templates.is_empty() {
            return Err(config_err!("template bank is empty"));
        }
        Ok(Self { templates })
    }

    /// One template per non-blank line.
    pub fn parse(text: &str) -> Result<Self> {
        let templates =
            text.lines().filter(|l| !l.trim().is_empty()).map(PromptTemplate::parse).collect::<Result<Vec<_>>>()?;
        Self::new(templates)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn get(&self, i: usize) -> &PromptTemplate {
        &self.templates[i]
    }

    pub fn templates(&self) -> &[PromptTemplate] {
        &self.templates
    }

    pub fn sample_index(&self, rng: &mut Rng) -> usize {
        rng::below(rng, self.templates.len())
    }

    /// Uniform draw determined entirely by `seed`.
    pub fn sample(&self, seed: u64) -> &PromptTemplate {
        &self.templates[self.sample_index(&mut rng::seeded(seed))]
    }
}

/// Token → id map of the prompt vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    tokens: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::parse(DEFAULT_LEXICON).expect("bundled lexicon")
    }
}

impl Lexicon {
    /// One token per non-blank line; ids follow line order.
    pub fn parse(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut ids = BTreeMap::new();
        for tok in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if ids.insert(tok.to_string(), tokens.len()).is_some() {
                return Err(config_err!("duplicate lexicon token {:?}", tok));
            }
            tokens.push(tok.to_string());
        }
        if tokens.is_empty() {
            return Err(config_err!("lexicon is empty"));
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.ids.get(token).copied().ok_or_else(|| input_err!("token {:?} not in lexicon", token))
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentConfig {
    pub d_main: usize,
    pub hidden: usize,
    pub d_text: usize,
    pub activation: Activation,
    pub bias: bool,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self { d_main: 64, hidden: 128, d_text: 64, activation: Activation::Silu, bias: true }
    }
}

/// Two-layer perceptron from main-feature space to text-embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentModel {
    pub config: AlignmentConfig,
    pub mlp: Mlp,
}

impl AlignmentModel {
    pub fn new(store: &mut ParamStore, config: AlignmentConfig, rng: &mut Rng) -> Result<Self> {
        let mlp_cfg = MlpConfig {
            dims: vec![config.d_main, config.hidden, config.d_text],
            activation: config.activation,
            dropout: 0.0,
            bias: config.bias,
        };
        let mlp = Mlp::new(store, "aligner", &mlp_cfg, Tag::Untagged, rng)?;
        Ok(Self { config, mlp })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }

    /// `[TAPS, d_main]` → `[TAPS, d_text]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s != [TAPS, self.config.d_main] {
            return Err(config_err!("aligner expects [{}, {}], got {:?}", TAPS, self.config.d_main, s));
        }
        self.mlp.forward(g, store, x)
    }
}

/// Aligned image tokens in eval mode.
pub fn align_features(decoupled: &LayerFeatureSet, aligner: &AlignmentModel, store: &ParamStore) -> Result<LayerFeatureSet> {
    let mut g = Graph::inference();
    let x = g.constant(decoupled.to_matrix());
    let out = aligner.forward(&mut g, store, x)?;
    LayerFeatureSet::from_matrix(g.value(out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderConfig {
    pub d_text: usize,
    pub ffn_hidden: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self { d_text: 64, ffn_hidden: 128 }
    }
}

/// Frozen embedding table + sinusoidal positions + one pre-norm
/// self-attention block with a feed-forward sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderModel {
    pub config: TextEncoderConfig,
    pub lexicon: Lexicon,
    pub embedding: ParamId,
    norm_attn: Norm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    norm_ffn: Norm,
    ffn: Mlp,
    norm_out: Norm,
}

impl TextEncoderModel {
    pub fn new(store: &mut ParamStore, lexicon: Lexicon, config: TextEncoderConfig, rng: &mut Rng) -> Result<Self> {
        let d = config.d_text;
        if d == 0 {
            return Err(config_err!("text dimension must be positive"));
        }
        let table = Tensor::from_vec(&[lexicon.len(), d], (0..lexicon.len() * d).map(|_| rng::normal(rng)).collect())?;
        let embedding = store.add("text_encoder.embedding", table, Tag::Untagged)?;
        let lin = |store: &mut ParamStore, name: &str, rng: &mut Rng| {
            Linear::new(store, &alloc::format!("text_encoder.{name}"), d, d, false, Tag::Untagged, rng)
        };
        let norm_attn = Norm::new(store, "text_encoder.norm_attn", d, 1, Tag::Untagged)?;
        let wq = lin(store, "wq", rng)?;
        let wk = lin(store, "wk", rng)?;
        let wv = lin(store, "wv", rng)?;
        let wo = lin(store, "wo", rng)?;
        let norm_ffn = Norm::new(store, "text_encoder.norm_ffn", d, 1, Tag::Untagged)?;
        let ffn_cfg =
            MlpConfig { dims: vec![d, config.ffn_hidden, d], activation: Activation::Silu, dropout: 0.0, bias: true };
        let ffn = Mlp::new(store, "text_encoder.ffn", &ffn_cfg, Tag::Untagged, rng)?;
        let norm_out = Norm::new(store, "text_encoder.norm_out", d, 1, Tag::Untagged)?;
        Ok(Self { config, lexicon, embedding, norm_attn, wq, wk, wv, wo, norm_ffn, ffn, norm_out })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.embedding];
        v.extend(self.norm_attn.params());
        for l in [&self.wq, &self.wk, &self.wv, &self.wo] {
            v.extend(l.params());
        }
        v.extend(self.norm_ffn.params());
        v.extend(self.ffn.params());
        v.extend(self.norm_out.params());
        v
    }

    pub fn d_text(&self) -> usize {
        self.config.d_text
    }

    fn embed_tokens(&self, store: &ParamStore, tokens: &[&str]) -> Result<Tensor> {
        let d = self.config.d_text;
        let table = store.get(self.embedding);
        let mut out = Vec::with_capacity(tokens.len() * d);
        for t in tokens {
            let id = self.lexicon.id(t)?;
            out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
        }
        Tensor::from_vec(&[tokens.len(), d], out)
    }

    /// Contextualise an `[M, d_text]` token sequence.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let d = self.config.d_text;
        if shape.len() != 2 || shape[1] != d {
            return Err(config_err!("text encoder expects [M, {}], got {:?}", d, shape));
        }
        let m = shape[0];
        let mut pos = Vec::with_capacity(m * d);
        for i in 0..m {
            pos.extend(sinusoidal(i as f64, d));
        }
        let pos = g.constant(Tensor::from_vec(&[m, d], pos)?);
        let x = g.add(x, pos)?;

        let h = self.norm_attn.layer(g, store, x)?;
        let q = self.wq.forward(g, store, h)?;
        let k = self.wk.forward(g, store, h)?;
        let v = self.wv.forward(g, store, h)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / libm::sqrt(d as f64));
        let att = g.softmax_rows(scores)?;
        let mixed = g.matmul(att, v)?;
        let attn_out = self.wo.forward(g, store, mixed)?;
        let x = g.add(x, attn_out)?;

        let h = self.norm_ffn.layer(g, store, x)?;
        let f = self.ffn.forward(g, store, h)?;
        let x = g.add(x, f)?;
        self.norm_out.layer(g, store, x)
    }

    /// Multimodal condition: the `[TAPS, d_text]` image tokens take the
    /// placeholder's position, then the whole sequence is encoded.
    pub fn condition_var(&self, g: &mut Graph, store: &ParamStore, template: &PromptTemplate, image_tokens: Var) -> Result<Var> {
        let d = self.config.d_text;
        if g.shape(image_tokens) != [TAPS, d] {
            return Err(config_err!("image tokens must be [{}, {}], got {:?}", TAPS, d, g.shape(image_tokens)));
        }
        let toks: Vec<&str> = template.tokens().iter().map(String::as_str).collect();
        let p = template.placeholder_index();
        let mut parts = Vec::with_capacity(3);
        if p > 0 {
            let before = self.embed_tokens(store, &toks[..p])?;
            parts.push(g.constant(before));
        }
        parts.push(image_tokens);
        if p + 1 < toks.len() {
            let after = self.embed_tokens(store, &toks[p + 1..])?;
            parts.push(g.constant(after));
        }
        let seq = g.concat(&parts)?;
        self.encode(g, store, seq)
    }

    /// Text-only condition: the placeholder replaced by a lexicon `word`.
    pub fn prompt_var(&self, g: &mut Graph, store: &ParamStore, template: &PromptTemplate, word: &str) -> Result<Var> {
        self.tokens_var(g, store, &template.with_word(word))
    }

    /// Encode an arbitrary token sequence.
    pub fn tokens_var(&self, g: &mut Graph, store: &ParamStore, tokens: &[&str]) -> Result<Var> {
        let seq = self.embed_tokens(store, tokens)?;
        let seq = g.constant(seq);
        self.encode(g, store, seq)
    }
}

/// `M × d_text` matrix consumed by cross-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    pub tokens: Tensor,
}

impl ConditionEmbedding {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.shape()[0] == 0 {
            return Err(input_err!("condition must be a non-empty matrix, got {:?}", tokens.shape()));
        }
        if !tokens.is_finite() {
            return Err(input_err!("non-finite condition entry"));
        }
        Ok(Self { tokens })
    }

    pub fn rows(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Eval-mode [`TextEncoderModel::condition_var`].
pub fn build_condition(
    template: &PromptTemplate,
    image_tokens: &LayerFeatureSet,
    text_encoder: &TextEncoderModel,
    store: &ParamStore,
) -> Result<ConditionEmbedding> {
    let mut g = Graph::inference();
    let img = g.constant(image_tokens.to_matrix());
    let out = text_encoder.condition_var(&mut g, store, template, img)?;
    ConditionEmbedding::new(g.value(out).clone())
}

/// Eval-mode [`TextEncoderModel::prompt_var`].
pub fn build_prompt(
    template: &PromptTemplate,
    word: &str,
    text_encoder: &TextEncoderModel,
    store: &ParamStore,
) -> Result<ConditionEmbedding> {
    let mut g = Graph::inference();
    let out = text_encoder.prompt_var(&mut g, store, template, word)?;
    ConditionEmbedding::new(g.value(out).clone())
}
