//! Run configuration: one TOML file per run, unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub patch: usize,
    pub depth: usize,
    pub heads: usize,
    pub semantic_width: usize,
    pub structural_width: usize,
    /// Block index tapped for low-level features; `depth / 2` (min 1) when absent.
    pub shallow_layer: Option<usize>,
    pub region_grid: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            patch: 8,
            depth: 4,
            heads: 4,
            semantic_width: 48,
            structural_width: 32,
            shallow_layer: None,
            region_grid: 2,
        }
    }
}

impl EncoderSection {
    pub fn shallow_layer(&self) -> usize {
        self.shallow_layer.unwrap_or((self.depth / 2).max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSection {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub queries: usize,
    pub qformer_blocks: usize,
    pub context_dim: usize,
    /// Rows of the learned positional table in each intermediate encoder.
    pub max_tokens: usize,
}

impl Default for AdapterSection {
    fn default() -> Self {
        AdapterSection { width: 96, depth: 2, heads: 4, queries: 16, qformer_blocks: 2, context_dim: 64, max_tokens: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DitSection {
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
}

impl Default for DitSection {
    fn default() -> Self {
        DitSection { patch: 4, width: 128, depth: 4, heads: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub characters: usize,
    pub heldout: usize,
    pub views: usize,
    pub unpaired_fraction: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { characters: 160, heldout: 20, views: 4, unpaired_fraction: 0.5 }
    }
}

/// Preparation of the frozen components before adapter training: the
/// semantic encoder's identity-factor classification and the base DiT's
/// text-conditioned flow-matching pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub semantic_samples: usize,
    pub semantic_epochs: usize,
    pub semantic_batch: usize,
    pub semantic_lr: f64,
    pub base_characters: usize,
    pub base_steps_low: usize,
    pub base_steps_high: usize,
    pub base_batch: usize,
    pub base_lr: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            semantic_samples: 16384,
            semantic_epochs: 8,
            semantic_batch: 32,
            semantic_lr: 3e-3,
            base_characters: 400,
            base_steps_low: 4000,
            base_steps_high: 300,
            base_batch: 8,
            base_lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub steps: usize,
    pub scale: f64,
}

impl Default for SamplingSection {
    fn default() -> Self {
        SamplingSection { steps: 20, scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u8,
    pub resolution: usize,
    pub paired_weight: f64,
    pub unpaired_weight: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_drop")]
    pub drop_character_prob: f64,
    #[serde(default = "default_drop")]
    pub drop_text_prob: f64,
}

fn default_drop() -> f64 {
    0.1
}

impl StageConfig {
    pub fn default_stage(stage: u8, low: usize, high: usize) -> Self {
        let (resolution, paired, unpaired, steps) = match stage {
            1 => (low, 0.0, 1.0, 1000),
            2 => (low, 1.0, 0.0, 1000),
            _ => (high, 0.5, 0.5, 300),
        };
        StageConfig {
            stage,
            resolution,
            paired_weight: paired,
            unpaired_weight: unpaired,
            steps,
            batch_size: 8,
            learning_rate: 1e-4,
            drop_character_prob: 0.1,
            drop_text_prob: 0.1,
        }
    }

    /// Probability that a stage-3 draw comes from the paired subset.
    pub fn paired_probability(&self) -> f64 {
        self.paired_weight / (self.paired_weight + self.unpaired_weight)
    }

    pub fn validate(&self, low: usize, high: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("stage {}: {msg}", self.stage)));
        for (name, p) in [("drop_character_prob", self.drop_character_prob), ("drop_text_prob", self.drop_text_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.paired_weight < 0.0 || self.unpaired_weight < 0.0 {
            return bad("mix weights must be non-negative".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate = {} must be finite and non-negative", self.learning_rate));
        }
        match self.stage {
            1 => {
                if self.unpaired_weight != 1.0 || self.paired_weight != 0.0 {
                    return bad("stage 1 trains on unpaired data only (unpaired_weight = 1, paired_weight = 0)".into());
                }
                if self.resolution != low {
                    return bad(format!("resolution {} must equal toy_low_resolution {low}", self.resolution));
                }
            }
            2 => {
                if self.paired_weight != 1.0 || self.unpaired_weight != 0.0 {
                    return bad("stage 2 trains on paired data only (paired_weight = 1, unpaired_weight = 0)".into());
                }
                if self.resolution != low {
                    return bad(format!("resolution {} must equal toy_low_resolution {low}", self.resolution));
                }
            }
            3 => {
                if !(self.paired_weight > 0.0 && self.unpaired_weight > 0.0) {
                    return bad("stage 3 needs both mix weights > 0".into());
                }
                if self.resolution != high {
                    return bad(format!("resolution {} must equal toy_high_resolution {high}", self.resolution));
                }
            }
            s => return bad(format!("unknown stage id {s}")),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder_resolution: usize,
    pub toy_low_resolution: usize,
    pub toy_high_resolution: usize,
    pub encoder: EncoderSection,
    pub adapter: AdapterSection,
    pub dit: DitSection,
    pub dataset: DatasetSection,
    pub pretrain: PretrainSection,
    pub optimizer: OptimizerSection,
    pub sampling: SamplingSection,
    pub stages: Vec<StageConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let (low, high) = (32, 64);
        RunConfig {
            seed: 7,
            encoder_resolution: 32,
            toy_low_resolution: low,
            toy_high_resolution: high,
            encoder: EncoderSection::default(),
            adapter: AdapterSection::default(),
            dit: DitSection::default(),
            dataset: DatasetSection::default(),
            pretrain: PretrainSection::default(),
            optimizer: OptimizerSection::default(),
            sampling: SamplingSection::default(),
            stages: (1..=3).map(|s| StageConfig::default_stage(s, low, high)).collect(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.to_toml_string().as_bytes());
        d.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn stage(&self, id: u8) -> Option<&StageConfig> {
        self.stages.iter().find(|s| s.stage == id)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.encoder_resolution == 0 {
            return err("encoder_resolution must be > 0".into());
        }
        if self.toy_high_resolution != 2 * self.toy_low_resolution {
            return err(format!(
                "toy_high_resolution ({}) must be twice toy_low_resolution ({})",
                self.toy_high_resolution, self.toy_low_resolution
            ));
        }
        let e = &self.encoder;
        if !self.encoder_resolution.is_multiple_of(e.patch) {
            return err(format!("encoder_resolution {} not divisible by patch {}", self.encoder_resolution, e.patch));
        }
        let l = e.shallow_layer();
        if !(1 <= l && l < e.depth) {
            return err(format!("shallow_layer {l} must satisfy 1 <= l < depth ({})", e.depth));
        }
        for w in [e.semantic_width, e.structural_width] {
            if w % e.heads != 0 || w % 4 != 0 {
                return err(format!("encoder width {w} must be divisible by heads {} and by 4", e.heads));
            }
        }
        if e.region_grid == 0 {
            return err("region_grid must be >= 1".into());
        }
        let a = &self.adapter;
        if !a.width.is_multiple_of(a.heads) {
            return err(format!("adapter width {} not divisible by heads {}", a.width, a.heads));
        }
        if a.queries == 0 {
            return err("adapter queries must be >= 1".into());
        }
        let tokens = (self.encoder_resolution / e.patch).pow(2);
        let needed = tokens * (e.region_grid * e.region_grid + 1);
        if needed > a.max_tokens {
            return err(format!(
                "region pathway needs {needed} tokens but adapter.max_tokens is {}",
                a.max_tokens
            ));
        }
        let d = &self.dit;
        if !d.width.is_multiple_of(d.heads) || !d.width.is_multiple_of(4) {
            return err(format!("dit width {} must be divisible by heads {} and by 4", d.width, d.heads));
        }
        for r in [self.toy_low_resolution, self.toy_high_resolution] {
            if r % d.patch != 0 {
                return err(format!("resolution {r} not divisible by dit patch {}", d.patch));
            }
            if r % e.region_grid != 0 {
                return err(format!("resolution {r} not divisible by region grid {}", e.region_grid));
            }
        }
        let ds = &self.dataset;
        if !(0.0..=1.0).contains(&ds.unpaired_fraction) {
            return err("dataset.unpaired_fraction must be in [0, 1]".into());
        }
        for s in &self.stages {
            s.validate(self.toy_low_resolution, self.toy_high_resolution)?;
        }
        if self.sampling.steps == 0 {
            return err("sampling.steps must be >= 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = c.to_toml_string();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
        assert_eq!(c.encoder.shallow_layer(), 2);
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let err = RunConfig::from_toml_str("seed = 1\nsead = 2\n").unwrap_err();
        assert!(err.to_string().contains("sead"), "{err}");
        let err = RunConfig::from_toml_str("[dit]\nwidht = 64\n").unwrap_err();
        assert!(err.to_string().contains("widht"), "{err}");
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_toml_str("seed = 11\n[dit]\ndepth = 2\n").unwrap();
        assert_eq!(c.seed, 11);
        assert_eq!(c.dit.depth, 2);
        assert_eq!(c.dit.width, 128);
        assert_eq!(c.stages.len(), 3);
    }

    #[test]
    fn resolution_tiers_are_enforced() {
        let err = RunConfig::from_toml_str("toy_low_resolution = 32\ntoy_high_resolution = 48\n").unwrap_err();
        assert!(err.to_string().contains("twice"));
        let mut c = RunConfig::default();
        c.stages[2].resolution = 32;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.stages[0].paired_weight = 0.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 8;
        assert_ne!(a.hash(), b.hash());
    }
}
