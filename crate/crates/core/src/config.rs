//! Run configuration: TOML sections per module, presets and `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::CodecConfig;
use crate::data::{DatasetSpec, MaskSpec, RandomMaskConfig};
use crate::error::{Error, Result};
use crate::structure::StructureGenConfig;
use crate::texture::TextureGenConfig;

/// Optimizer and schedule of one training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSchedule {
    pub batch_size: usize,
    pub total_steps: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Linear warm-up then inverse square-root decay; 0 keeps the rate constant.
    pub warmup_steps: u64,
    pub checkpoint_interval: u64,
    pub eval_interval: u64,
}

impl PhaseSchedule {
    /// Learning rate for the 1-based step `step`.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.learning_rate;
        }
        let (s, w) = (step.max(1) as f64, self.warmup_steps as f64);
        self.learning_rate * (s / w).min((w / s).sqrt())
    }

    fn validate(&self, name: &str) -> Result<()> {
        let ok = self.batch_size > 0
            && self.total_steps > 0
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.checkpoint_interval > 0
            && self.eval_interval > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("train.{name}: steps, batch and intervals must be positive, betas in [0, 1)")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub polyak_decay: f64,
    /// `center` or `random`.
    pub mask: String,
    /// Validation images scored at each evaluation; 0 means the whole split.
    pub validation_images: usize,
    pub vqvae: PhaseSchedule,
    pub structure: PhaseSchedule,
    pub texture: PhaseSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub k: usize,
    pub temperature: f64,
    pub mask: String,
    pub entropy_map: bool,
    /// Number of test images used by `eval`; 0 means all.
    pub eval_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DatasetSpec,
    pub random_mask: RandomMaskConfig,
    pub codec: CodecConfig,
    pub structure: StructureGenConfig,
    pub texture: TextureGenConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
    /// Seconds-scale miniature of the whole pipeline for smoke runs and tests.
    Smoke,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            "smoke" => Ok(Self::Smoke),
            _ => Err(Error::Config(format!("unknown preset {s:?} (expected desk, paper or smoke)"))),
        }
    }
}

fn schedule(steps: u64, lr: f64, beta1: f64, warmup: u64) -> PhaseSchedule {
    PhaseSchedule {
        batch_size: 8,
        total_steps: steps,
        learning_rate: lr,
        beta1,
        beta2: 0.999,
        warmup_steps: warmup,
        checkpoint_interval: 1000,
        eval_interval: 1000,
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let seed = 1;
        match p {
            Preset::Desk => Self {
                seed,
                data: DatasetSpec::synthetic(10_000, 64, seed),
                random_mask: RandomMaskConfig::default(),
                codec: CodecConfig::desk(),
                structure: StructureGenConfig::default(),
                texture: TextureGenConfig::default(),
                train: TrainConfig {
                    polyak_decay: 0.9997,
                    mask: "center".into(),
                    validation_images: 256,
                    vqvae: schedule(20_000, 1e-4, 0.9, 0),
                    structure: schedule(50_000, 3e-4, 0.9, 5_000),
                    texture: schedule(50_000, 1e-4, 0.5, 0),
                },
                sample: SampleConfig {
                    k: 5,
                    temperature: 1.0,
                    mask: "center".into(),
                    entropy_map: false,
                    eval_images: 16,
                },
            },
            Preset::Paper => {
                let mut c = Self::preset(Preset::Desk);
                c.data = DatasetSpec::synthetic(10_000, 256, seed);
                c.codec = CodecConfig::paper();
                c.train.vqvae.total_steps = 1_000_000;
                c.train.structure.total_steps = 1_000_000;
                c.train.structure.warmup_steps = 10_000;
                c.train.texture.total_steps = 1_000_000;
                c.train.mask = "random".into();
                c
            }
            Preset::Smoke => {
                let mut c = Self::preset(Preset::Desk);
                c.data = DatasetSpec::synthetic(48, 32, seed);
                c.data.validation_fraction = 0.1;
                c.data.test_fraction = 0.1;
                c.codec = CodecConfig {
                    image_size: 32,
                    hidden_units: 16,
                    residual_units: 8,
                    residual_layers: 1,
                    codebook_size: 16,
                    code_dim: 8,
                    ..CodecConfig::desk()
                };
                c.structure = StructureGenConfig {
                    layers: 2,
                    attention_layers: 1,
                    attention_heads: 2,
                    hidden_units: 16,
                    residual_units: 16,
                    conditioning_hidden: 8,
                    conditioning_residual: 8,
                    conditioning_blocks: 1,
                    output_stack_layers: 1,
                    ..StructureGenConfig::default()
                };
                c.texture.generator_hidden = 8;
                c.texture.discriminator_hidden = 4;
                c.train.validation_images = 4;
                for s in [&mut c.train.vqvae, &mut c.train.structure, &mut c.train.texture] {
                    s.batch_size = 2;
                    s.total_steps = 4;
                    s.checkpoint_interval = 2;
                    s.eval_interval = 2;
                }
                c.train.structure.warmup_steps = 2;
                c.sample.k = 3;
                c.sample.eval_images = 2;
                c
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.random_mask.validate()?;
        self.codec.validate()?;
        self.structure.validate()?;
        self.texture.validate()?;
        if self.data.image_size != self.codec.image_size {
            return Err(Error::Config(format!(
                "data.image_size ({}) must equal codec.image_size ({})",
                self.data.image_size, self.codec.image_size
            )));
        }
        let d = self.train.polyak_decay;
        if !(d > 0.0 && d < 1.0) {
            return Err(Error::Config("train.polyak_decay must lie in (0, 1)".into()));
        }
        if self.train.mask != "center" && self.train.mask != "random" {
            return Err(Error::Config("train.mask must be center or random".into()));
        }
        self.train.vqvae.validate("vqvae")?;
        self.train.structure.validate("structure")?;
        self.train.texture.validate("texture")?;
        if self.sample.k == 0 || !(self.sample.temperature >= 0.0) {
            return Err(Error::Config("sample.k must be positive and sample.temperature non-negative".into()));
        }
        MaskSpec::parse(&self.sample.mask)?;
        Ok(())
    }

    /// Preset, then the optional file merged on top, then dotted `key=value` overrides.
    pub fn resolve(preset: Preset, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(Self::preset(preset))
            .map_err(|e| Error::Config(format!("serializing preset: {e}")))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let user: toml::Value = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, user);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration always serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// SHA-256 of the canonical TOML.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

/// Deep merge; a table whose `kind` tag changes is replaced rather than merged.
fn merge(base: &mut toml::Value, over: toml::Value) {
    let kind_changes = over.get("kind").is_some() && base.get("kind") != over.get("kind");
    match (base, over) {
        (b, o) if kind_changes => *b = o,
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Applies `a.b.c=value`; the value is parsed as TOML, falling back to a bare string.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, p) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {} is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            if !table.contains_key(*p) {
                return Err(Error::Config(format!("unknown configuration key {key}")));
            }
            table.insert(p.to_string(), value);
            return Ok(());
        }
        cur = table
            .get_mut(*p)
            .ok_or_else(|| Error::Config(format!("unknown configuration section {}", parts[..=i].join("."))))?;
    }
    unreachable!("override key has at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_round_trip() -> Result<()> {
        for p in [Preset::Desk, Preset::Paper, Preset::Smoke] {
            let c = RunConfig::preset(p);
            c.validate()?;
            assert_eq!(RunConfig::from_toml(&c.to_toml())?, c);
        }
        let d = RunConfig::preset(Preset::Desk);
        assert_eq!((d.train.vqvae.total_steps, d.train.structure.total_steps, d.train.texture.total_steps), (20_000, 50_000, 50_000));
        assert_eq!(d.train.texture.beta1, 0.5);
        assert_eq!(d.train.polyak_decay, 0.9997);
        Ok(())
    }

    #[test]
    fn overrides_and_unknown_keys() -> Result<()> {
        let c = RunConfig::resolve(
            Preset::Desk,
            None,
            &["train.vqvae.total_steps=10".into(), "sample.mask=random:3".into(), "seed=9".into()],
        )?;
        assert_eq!(c.train.vqvae.total_steps, 10);
        assert_eq!(c.sample.mask, "random:3");
        assert_eq!(c.seed, 9);
        assert!(RunConfig::resolve(Preset::Desk, None, &["train.nope=1".into()]).is_err());
        assert!(RunConfig::resolve(Preset::Desk, None, &["novalue".into()]).is_err());
        assert!(RunConfig::resolve(Preset::Desk, None, &["train.polyak_decay=1.0".into()]).is_err());
        Ok(())
    }

    #[test]
    fn file_merges_and_rejects_unknown_fields() -> Result<()> {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.toml");
        std::fs::write(&good, "[codec]\ncodebook_size = 64\n").unwrap();
        assert_eq!(RunConfig::resolve(Preset::Desk, Some(&good), &[])?.codec.codebook_size, 64);
        let bad = dir.path().join("bad.toml");
        std::fs::write(&bad, "[codec]\nmystery = 1\n").unwrap();
        assert!(RunConfig::resolve(Preset::Desk, Some(&bad), &[]).is_err());
        let folder = dir.path().join("folder.toml");
        std::fs::write(&folder, "[data.source]\nkind = \"image_folder\"\npath = \"/data/faces\"\n").unwrap();
        let cfg = RunConfig::resolve(Preset::Desk, Some(&folder), &[])?;
        assert_eq!(cfg.data.source, crate::data::DataSource::ImageFolder { path: "/data/faces".into() });
        Ok(())
    }

    #[test]
    fn schedule_is_continuous_at_warmup() {
        let s = schedule(100, 3e-4, 0.9, 5000);
        assert_eq!(s.learning_rate_at(5000), 3e-4);
        let (w, lr) = (5000.0f64, 3e-4);
        assert_eq!(lr * (w / w), lr * (w / w).sqrt());
        assert!((s.learning_rate_at(4999) - s.learning_rate_at(5001)).abs() < lr * 1e-3);
        assert!((s.learning_rate_at(20_000) - 1.5e-4).abs() < 1e-15);
        assert!((s.learning_rate_at(1) - 3e-4 / 5000.0).abs() < 1e-18);
        assert_eq!(schedule(1, 1e-4, 0.5, 0).learning_rate_at(7), 1e-4);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::preset(Preset::Desk);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 2;
        assert_ne!(a.hash(), b.hash());
    }
}
