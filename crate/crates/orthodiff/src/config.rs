//! Run configuration: defaults, TOML file, `ORTHODIFF_*` environment overrides and flags.
//!
//! Keys are `section.field`. Later sources win: defaults < file < environment < flags.
//! An environment variable `ORTHODIFF_TRAIN__BASE_LR=2e-4` sets `train.base_lr`
//! (double underscore separates section and field). `ORTHODIFF_LOG` is reserved for the log filter.

use std::collections::BTreeMap;
use std::path::Path;

use orthodiff_core::corpus::CorpusConfig;
use orthodiff_core::diffusion::{DenoiserConfig, LatentCodec, SamplerKind, ScheduleKind};
use orthodiff_core::disentangle::{DecoupleConfig, DecoupleMode};
use orthodiff_core::evaluation::EvalConfig;
use orthodiff_core::training::{Ablation, ModelConfig, PretrainConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Result};

pub const ENV_PREFIX: &str = "ORTHODIFF_";
/// Log filter variable; not a config key.
pub const LOG_ENV: &str = "ORTHODIFF_LOG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub originals: usize,
    pub image_size: usize,
    pub subjects_per_original: usize,
    pub backgrounds_per_subject: usize,
    pub pose_variants: usize,
    pub heldout_per_shape: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let c = CorpusConfig::default();
        Self {
            originals: c.originals,
            image_size: c.image_size,
            subjects_per_original: c.subjects_per_original,
            backgrounds_per_subject: c.backgrounds_per_subject,
            pose_variants: c.pose_variants,
            heldout_per_shape: c.heldout_per_shape,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_enc: usize,
    pub d_main: usize,
    pub d_text: usize,
    pub encoder_widths: [usize; 5],
    pub mapper_hidden: usize,
    pub mapper_layers: usize,
    pub expert_hidden: usize,
    pub expert_layers: usize,
    pub aligner_hidden: usize,
    pub dropout: f64,
    pub codec: String,
    pub base_channels: usize,
    pub mid_channels: usize,
    pub time_dim: usize,
    pub groups: usize,
    pub joint_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            d_enc: m.encoder.d_enc,
            d_main: m.mapper.d_main,
            d_text: m.text.d_text,
            encoder_widths: m.encoder.widths,
            mapper_hidden: m.mapper.hidden,
            mapper_layers: m.mapper.layers,
            expert_hidden: m.expert.hidden,
            expert_layers: m.expert.layers,
            aligner_hidden: m.aligner.hidden,
            dropout: m.mapper.dropout,
            codec: m.codec.name().into(),
            base_channels: m.denoiser.base_channels,
            mid_channels: m.denoiser.mid_channels,
            time_dim: m.denoiser.time_dim,
            groups: m.denoiser.groups,
            joint_dim: m.joint_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub batch_size: usize,
    pub encoder_steps: usize,
    pub encoder_lr: f64,
    pub backbone_steps: usize,
    pub backbone_lr: f64,
    pub head_steps: usize,
    pub head_lr: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            batch_size: p.batch_size,
            encoder_steps: p.encoder_steps,
            encoder_lr: p.encoder_lr,
            backbone_steps: p.backbone_steps,
            backbone_lr: p.backbone_lr,
            head_steps: p.head_steps,
            head_lr: p.head_lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub weight_decay: f64,
    pub schedule_steps: usize,
    pub schedule: String,
    pub mode: String,
    pub eps: f64,
    pub ablation: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            lambda1: t.lambda1,
            lambda2: t.lambda2,
            weight_decay: t.weight_decay,
            schedule_steps: t.schedule_steps,
            schedule: t.schedule_kind.name().into(),
            mode: t.decouple.mode.name().into(),
            eps: t.decouple.eps,
            ablation: t.ablation.name().into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub probe_train: usize,
    pub probe_test: usize,
    pub drift_pairs: usize,
    pub generations: usize,
    pub sampler: String,
    pub sampling_steps: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            probe_train: e.probe_train,
            probe_test: e.probe_test,
            drift_pairs: e.drift_pairs,
            generations: e.generations,
            sampler: e.sampler.name().into(),
            sampling_steps: e.sampling_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    /// Images written by `sample`.
    pub count: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { count: 8 }
    }
}

/// Every tunable of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub sample: SampleSection,
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

impl RunConfig {
    /// Parse TOML text over the defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err!("config: {}", e.message()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| config_err!("cannot read config {}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| config_err!("{}: {e}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Apply `key = value` overrides, e.g. `("train.steps", "200")`.
    pub fn with_overrides<'a>(&self, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut root = toml::Table::try_from(self).map_err(|e| config_err!("config: {e}"))?;
        for (key, raw) in overrides {
            let mut parts: Vec<&str> = key.split('.').collect();
            let leaf = parts.pop().filter(|l| !l.is_empty()).ok_or_else(|| config_err!("empty config key {key:?}"))?;
            let mut table = &mut root;
            for p in parts {
                table = match table.get_mut(p) {
                    Some(toml::Value::Table(t)) => t,
                    _ => return Err(config_err!("unknown config section in {key:?}")),
                };
            }
            if !table.contains_key(leaf) {
                return Err(config_err!("unknown config key {key:?}"));
            }
            table.insert(leaf.to_string(), parse_value(raw));
        }
        let cfg: RunConfig =
            toml::Value::Table(root).try_into().map_err(|e: toml::de::Error| config_err!("config: {}", e.message()))?;
        Ok(cfg)
    }

    /// `ORTHODIFF_SECTION__FIELD` variables from `vars`, as `(section.field, value)`.
    pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(String, String)> {
        vars.into_iter()
            .filter(|(k, _)| k != LOG_ENV)
            .filter_map(|(k, v)| {
                let rest = k.strip_prefix(ENV_PREFIX)?;
                Some((rest.to_ascii_lowercase().replace("__", "."), v))
            })
            .collect()
    }

    /// Defaults, then `file`, then the process environment, then `flags`.
    pub fn resolve(file: Option<&Path>, flags: &[(String, String)]) -> Result<Self> {
        let base = match file {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        let env = Self::env_overrides(std::env::vars());
        let cfg = base.with_overrides(env.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        let cfg = cfg.with_overrides(flags.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        let c = &self.corpus;
        CorpusConfig {
            image_size: c.image_size,
            originals: c.originals,
            subjects_per_original: c.subjects_per_original,
            backgrounds_per_subject: c.backgrounds_per_subject,
            pose_variants: c.pose_variants,
            heldout_per_shape: c.heldout_per_shape,
            ..CorpusConfig::default()
        }
    }

    pub fn codec(&self) -> Result<LatentCodec> {
        Ok(self.model.codec.parse()?)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let codec = self.codec()?;
        let mut cfg = ModelConfig::default().with_dims(m.d_enc, m.d_main, m.d_text);
        let size = self.corpus.image_size;
        cfg.encoder.image_size = size;
        cfg.encoder.widths = m.encoder_widths;
        cfg.mapper.hidden = m.mapper_hidden;
        cfg.mapper.layers = m.mapper_layers;
        cfg.mapper.dropout = m.dropout;
        cfg.expert.hidden = m.expert_hidden;
        cfg.expert.layers = m.expert_layers;
        cfg.expert.dropout = m.dropout;
        cfg.aligner.hidden = m.aligner_hidden;
        let [channels, latent, _] = codec.latent_shape(size, cfg.encoder.in_channels);
        cfg.denoiser = DenoiserConfig {
            latent_channels: channels,
            latent_size: latent,
            base_channels: m.base_channels,
            mid_channels: m.mid_channels,
            time_dim: m.time_dim,
            d_text: m.d_text,
            groups: m.groups,
        };
        cfg.codec = codec;
        cfg.joint_dim = m.joint_dim;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            seed: self.seed,
            batch_size: p.batch_size,
            encoder_steps: p.encoder_steps,
            encoder_lr: p.encoder_lr,
            backbone_steps: p.backbone_steps,
            backbone_lr: p.backbone_lr,
            head_steps: p.head_steps,
            head_lr: p.head_lr,
        }
    }

    pub fn ablation(&self) -> Result<Ablation> {
        Ok(self.train.ablation.parse()?)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let mode: DecoupleMode = t.mode.parse()?;
        let kind: ScheduleKind = t.schedule.parse()?;
        let cfg = TrainConfig {
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            lambda1: t.lambda1,
            lambda2: t.lambda2,
            steps: t.steps,
            seed: self.seed,
            decouple: DecoupleConfig { mode, eps: t.eps },
            ablation: self.ablation()?,
            weight_decay: t.weight_decay,
            schedule_steps: t.schedule_steps,
            schedule_kind: kind,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval_config(&self) -> Result<EvalConfig> {
        let e = &self.eval;
        let sampler: SamplerKind = e.sampler.parse()?;
        if e.sampling_steps == 0 || e.sampling_steps > self.train.schedule_steps {
            return Err(config_err!(
                "eval.sampling_steps must be in [1, {}], got {}",
                self.train.schedule_steps,
                e.sampling_steps
            ));
        }
        Ok(EvalConfig {
            seed: self.seed,
            probe_train: e.probe_train,
            probe_test: e.probe_test,
            drift_pairs: e.drift_pairs,
            generations: e.generations,
            sampler,
            sampling_steps: e.sampling_steps,
        })
    }

    /// Check every section converts to a valid core configuration.
    pub fn validate(&self) -> Result<()> {
        if self.corpus.originals == 0 {
            return Err(config_err!("corpus.originals must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(config_err!("model.dropout must be in [0, 1)"));
        }
        if self.pretrain.batch_size == 0 {
            return Err(config_err!("pretrain.batch_size must be at least 1"));
        }
        self.model_config()?;
        self.train_config()?;
        self.eval_config()?;
        Ok(())
    }

    /// Flattened `section.field → value` view, for provenance files.
    pub fn flatten(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        let root = toml::Table::try_from(self).expect("config is a table");
        for (k, v) in root {
            match v {
                toml::Value::Table(t) => {
                    for (f, x) in t {
                        out.insert(format!("{k}.{f}"), x.to_string());
                    }
                }
                other => {
                    out.insert(k, other.to_string());
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn overrides_parse_numbers_and_strings() {
        let c = RunConfig::default().with_overrides([("train.steps", "7"), ("train.mode", "joint"), ("seed", "3")]).unwrap();
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.train.mode, "joint");
        assert_eq!(c.seed, 3);
        assert!(RunConfig::default().with_overrides([("train.nope", "1")]).is_err());
        assert!(RunConfig::default().with_overrides([("train.steps", "many")]).is_err());
    }

    #[test]
    fn env_names_map_to_keys() {
        let vars = vec![
            ("ORTHODIFF_TRAIN__BASE_LR".to_string(), "2e-4".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ];
        assert_eq!(RunConfig::env_overrides(vars), vec![("train.base_lr".to_string(), "2e-4".to_string())]);
    }

    #[test]
    fn unknown_file_keys_and_bad_enums_are_config_errors() {
        assert!(matches!(RunConfig::from_toml("[train]\nstepz = 3\n"), Err(crate::error::Error::Config(_))));
        let c = RunConfig::from_toml("[train]\nmode = \"diagonal\"\n").unwrap();
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = a.with_overrides([("seed", "1")]).unwrap();
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
