//! Corpus on disk: a JSON manifest plus PNG images.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/main/00000.png ...
//! <dir>/background/<pattern>-<palette>.png
//! <dir>/variant/<shape>-<color>-<texture>-r<rot>-o<off>-s<scale>.png
//! ```
//!
//! Backgrounds and pose variants are shared between samples and written once.
//! The manifest is written last, through a temporary file and a rename, so a
//! directory with a manifest always holds a complete corpus.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use orthodiff_core::corpus::{generate_plan, Background, CorpusConfig, CorpusPlan, CorpusSample, FactorSpec, SampleRecord, VariantSpec};
use orthodiff_core::training::SampleSource;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{read_png, write_png};

pub const MANIFEST: &str = "manifest.json";
pub const CORPUS_SCHEMA: u32 = 1;

/// Relative image paths of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub main: String,
    pub background: String,
    pub variants: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub plan: CorpusPlan,
    pub entries: Vec<ManifestEntry>,
}

fn background_path(b: &Background) -> String {
    let pattern = serde_json::to_value(b.pattern).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
    format!("background/{}-{}.png", pattern, b.palette)
}

fn variant_path(v: &VariantSpec) -> String {
    let id = v.identity;
    format!(
        "variant/{}-{}-{}-r{}-o{}-s{}.png",
        id.shape.token(),
        id.color,
        id.texture.token(),
        v.pose.rotation,
        v.pose.offset,
        v.pose.scale
    )
}

fn entry_for(i: usize, rec: &SampleRecord) -> ManifestEntry {
    ManifestEntry {
        main: format!("main/{i:05}.png"),
        background: background_path(&rec.factors.background),
        variants: rec.variants.iter().map(variant_path).collect(),
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Render `config` with `seed` into `dir`.
pub fn write_corpus(dir: &Path, config: &CorpusConfig, seed: u64) -> Result<Manifest> {
    let plan = generate_plan(config, seed)?;
    let renderer = plan.config.renderer();
    for sub in ["main", "background", "variant"] {
        create_dir(&dir.join(sub))?;
    }
    let mut written = BTreeSet::new();
    let mut entries = Vec::with_capacity(plan.samples.len());
    for (i, rec) in plan.samples.iter().enumerate() {
        let entry = entry_for(i, rec);
        write_png(&dir.join(&entry.main), &renderer.render(&rec.factors, true)?)?;
        if written.insert(entry.background.clone()) {
            write_png(&dir.join(&entry.background), &renderer.render(&rec.factors, false)?)?;
        }
        for (path, v) in entry.variants.iter().zip(&rec.variants) {
            if written.insert(path.clone()) {
                write_png(&dir.join(path), &renderer.render_variant(v)?)?;
            }
        }
        entries.push(entry);
    }
    let manifest = Manifest { schema_version: CORPUS_SCHEMA, plan, entries };
    write_atomic(&dir.join(MANIFEST), serde_json::to_string_pretty(&manifest).expect("manifest serialises").as_bytes())?;
    log::info!("wrote {} samples to {}", manifest.entries.len(), dir.display());
    Ok(manifest)
}

/// Write through a sibling temporary file and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// A corpus directory opened for reading.
#[derive(Debug, Clone)]
pub struct DiskCorpus {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl DiskCorpus {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.is_file() {
            return Err(Error::CorpusNotFound(dir.to_path_buf()));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let version: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))?;
        let found = version.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CORPUS_SCHEMA {
            return Err(Error::Version { what: "corpus manifest", found, expected: CORPUS_SCHEMA });
        }
        let manifest: Manifest =
            serde_json::from_value(version).map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))?;
        if manifest.entries.len() != manifest.plan.samples.len() {
            return Err(Error::Corrupt(format!(
                "manifest lists {} entries for {} planned samples",
                manifest.entries.len(),
                manifest.plan.samples.len()
            )));
        }
        for (i, (e, rec)) in manifest.entries.iter().zip(&manifest.plan.samples).enumerate() {
            if *e != entry_for(i, rec) {
                return Err(Error::Corrupt(format!("manifest entry {i} does not match its planned factors")));
            }
        }
        Ok(Self { root: dir.to_path_buf(), manifest })
    }

    pub fn plan(&self) -> &CorpusPlan {
        &self.manifest.plan
    }

    pub fn load_sample(&self, index: usize) -> Result<CorpusSample> {
        let rec = self
            .manifest
            .plan
            .samples
            .get(index)
            .ok_or_else(|| Error::Corrupt(format!("sample {index} out of range")))?;
        let e = &self.manifest.entries[index];
        let size = self.manifest.plan.config.image_size;
        let load = |p: &str| -> Result<_> {
            let img = read_png(&self.root.join(p))?;
            if img.height() != size || img.width() != size {
                return Err(Error::Corrupt(format!("{p} is {}×{}, expected {size}×{size}", img.height(), img.width())));
            }
            Ok(img)
        };
        let sample = CorpusSample {
            main_image: load(&e.main)?,
            background_image: load(&e.background)?,
            pose_variants: e.variants.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?,
            factors: rec.factors,
            variants: rec.variants.clone(),
            subject_token: rec.subject_token().to_string(),
        };
        sample.validate(self.manifest.plan.config.pose_variants).map_err(|e| Error::Corrupt(e.to_string()))?;
        Ok(sample)
    }

    /// Factors of every sample.
    pub fn factors(&self) -> impl Iterator<Item = &FactorSpec> {
        self.manifest.plan.samples.iter().map(|s| &s.factors)
    }
}

impl SampleSource for DiskCorpus {
    fn corpus_config(&self) -> &CorpusConfig {
        &self.manifest.plan.config
    }

    fn records(&self) -> &[SampleRecord] {
        &self.manifest.plan.samples
    }

    fn sample(&self, index: usize) -> orthodiff_core::Result<CorpusSample> {
        self.load_sample(index).map_err(|e| match e {
            Error::Core(c) => c,
            other => orthodiff_core::Error::Input(other.to_string()),
        })
    }
}
