//! Binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "ODCKPT\0\0" | u32 schema | u64 header length | header JSON
//! u64 entry count | entries | 32-byte SHA-256 of everything before it
//! entry = u32 name length | name | u8 dtype (1 = f64) | u32 rank | u64 dims.. | payload
//! ```
//!
//! Optimiser moments are stored as extra entries named `adam.m/<param>` and `adam.v/<param>`.

use std::collections::BTreeMap;
use std::path::Path;

use orthodiff_core::nn::ParamId;
use orthodiff_core::rng::RngState;
use orthodiff_core::training::{AdamW, Models, Moments, TrainerState};
use orthodiff_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::store::write_atomic;

pub const MAGIC: &[u8; 8] = b"ODCKPT\0\0";
pub const CHECKPOINT_SCHEMA: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// After the pretraining phases, before the main phase.
    Pretrained,
    Trained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngHeader {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngHeader {
    fn from_state(s: &RngState) -> Self {
        Self { seed: hex::encode(s.seed), stream: s.stream, word_pos: s.word_pos.to_string() }
    }

    fn to_state(&self) -> Result<RngState> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Corrupt(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| Error::Corrupt("rng seed must be 32 bytes".into()))?;
        let word_pos = self.word_pos.parse().map_err(|e| Error::Corrupt(format!("rng position: {e}")))?;
        Ok(RngState { seed, stream: self.stream, word_pos })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: RunConfig,
    pub stage: Stage,
    pub step: u64,
    pub rng: Option<RngHeader>,
    pub optimizer: Option<OptimizerHeader>,
}

/// Named tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub entries: Vec<Entry>,
}

const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

impl Checkpoint {
    /// Snapshot of `models`, with the trainer state when resuming is wanted.
    pub fn capture(config: &RunConfig, stage: Stage, models: &Models, state: Option<&TrainerState>) -> Self {
        let s = &models.store;
        let mut entries: Vec<Entry> =
            s.ids().map(|id| Entry { name: s.name(id).to_string(), tensor: s.get(id).clone() }).collect();
        let (mut rng, mut optimizer, mut step) = (None, None, 0);
        if let Some(st) = state {
            step = st.step;
            rng = Some(RngHeader::from_state(&st.rng));
            let o = &st.optimizer;
            optimizer = Some(OptimizerHeader {
                lr: o.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
                t: o.t,
            });
            for (id, m) in &o.moments {
                entries.push(Entry { name: format!("{M_PREFIX}{}", s.name(*id)), tensor: m.m.clone() });
                entries.push(Entry { name: format!("{V_PREFIX}{}", s.name(*id)), tensor: m.v.clone() });
            }
        }
        Self { header: Header { config: config.clone(), stage, step, rng, optimizer }, entries }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&CHECKPOINT_SCHEMA.to_le_bytes());
        let header = serde_json::to_vec(&self.header).expect("header serialises");
        b.extend_from_slice(&(header.len() as u64).to_le_bytes());
        b.extend_from_slice(&header);
        b.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            b.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            b.extend_from_slice(e.name.as_bytes());
            b.push(DTYPE_F64);
            b.extend_from_slice(&(e.tensor.shape().len() as u32).to_le_bytes());
            for &d in e.tensor.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in e.tensor.data() {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Integrity(format!("checkpoint {m}"));
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("has no valid magic header"));
        }
        let found = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if found != CHECKPOINT_SCHEMA {
            return Err(Error::Version { what: "checkpoint", found, expected: CHECKPOINT_SCHEMA });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("payload checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let hlen = r.u64()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Integrity(format!("checkpoint header: {e}")))?;
        let n = r.u64()? as usize;
        let mut entries = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| corrupt("entry name is not UTF-8"))?;
            if r.take(1)?[0] != DTYPE_F64 {
                return Err(corrupt("entry has an unknown element type"));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = r.take(count.checked_mul(8).ok_or_else(|| corrupt("entry is too large"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            entries.push(Entry { name, tensor: Tensor::from_vec(&shape, data)? });
        }
        if r.pos != body.len() {
            return Err(corrupt("has trailing bytes"));
        }
        Ok(Self { header, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::CheckpointNotFound(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Short identifier: the first 16 hex digits of the file checksum.
    pub fn id(&self) -> String {
        let bytes = self.to_bytes();
        hex::encode(&bytes[bytes.len() - 32..])[..16].to_string()
    }

    /// Rebuild the models; every parameter must be present exactly once.
    pub fn models(&self) -> Result<Models> {
        let cfg = self.header.config.model_config()?;
        let mut models = Models::new(cfg, self.header.config.seed)?;
        let mut by_name: BTreeMap<&str, &Tensor> = BTreeMap::new();
        for e in self.entries.iter().filter(|e| !e.name.starts_with("adam.")) {
            if by_name.insert(e.name.as_str(), &e.tensor).is_some() {
                return Err(Error::Integrity(format!("parameter {} appears twice", e.name)));
            }
        }
        let ids: Vec<ParamId> = models.store.ids().collect();
        for id in &ids {
            let name = models.store.name(*id).to_string();
            let t = by_name.remove(name.as_str()).ok_or_else(|| Error::Integrity(format!("parameter {name} missing")))?;
            models.store.set(*id, t.clone()).map_err(|e| Error::Integrity(format!("parameter {name}: {e}")))?;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Integrity(format!("unknown parameter {extra}")));
        }
        Ok(models)
    }

    /// Trainer state for resuming, when the checkpoint carries one.
    pub fn trainer_state(&self, models: &Models) -> Result<Option<TrainerState>> {
        let (Some(rng), Some(o)) = (&self.header.rng, &self.header.optimizer) else {
            return Ok(None);
        };
        let mut opt = AdamW::new(o.lr, o.weight_decay);
        opt.beta1 = o.beta1;
        opt.beta2 = o.beta2;
        opt.eps = o.eps;
        opt.t = o.t;
        let find = |name: &str| self.entries.iter().find(|e| e.name == name).map(|e| e.tensor.clone());
        for e in self.entries.iter().filter(|e| e.name.starts_with(M_PREFIX)) {
            let pname = &e.name[M_PREFIX.len()..];
            let id = models.store.find(pname).ok_or_else(|| Error::Integrity(format!("moments for unknown {pname}")))?;
            let v = find(&format!("{V_PREFIX}{pname}")).ok_or_else(|| Error::Integrity(format!("{pname} lacks a second moment")))?;
            opt.moments.insert(id, Moments { m: e.tensor.clone(), v });
        }
        Ok(Some(TrainerState { step: self.header.step, rng: rng.to_state()?, optimizer: opt }))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Integrity("checkpoint is truncated".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
