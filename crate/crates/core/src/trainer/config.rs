//! Run configuration, read from a TOML file with nested sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::extractor::ExtractorSource;
use crate::generator::GeneratorConfig;
use crate::imaging::{ShapeKind, TRAIN_AREA_RANGE, VALIDATION_AREA_RANGE};
use crate::losses::LossWeights;
use crate::nn::{AdamConfig, Precision};
use crate::util::sha256_hex;
use crate::{Error, Result};

/// Environment variable that relative output directories are resolved against.
pub const OUTPUT_ENV: &str = "IPA_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub precision: Precision,
    /// Shrinks image size and all network widths for CPU-scale runs.
    pub desk_scale: bool,
    pub output_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 4,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            precision: Precision::F32,
            desk_scale: false,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub global: u64,
    pub data: u64,
    pub masks: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            global: 0,
            data: 1,
            masks: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Synthetic phantoms generated from the data seed.
    Phantom,
    /// A directory written by `gen-phantoms` or laid out the same way.
    Directory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub image_size: usize,
    pub n_train: usize,
    pub n_validation: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Phantom,
            image_size: 256,
            n_train: 32,
            n_validation: 8,
            dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub mode: ShapeKind,
    pub train_count: usize,
    pub validation_count: usize,
    pub train_area: [f64; 2],
    pub validation_area: [f64; 2],
    /// Side of square masks; a quarter of the image side when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub square_block: Option<usize>,
    /// Load corpora saved by `gen-masks` instead of generating them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_dir: Option<PathBuf>,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            mode: ShapeKind::Arbitrary,
            train_count: 100,
            validation_count: 50,
            train_area: [TRAIN_AREA_RANGE.0, TRAIN_AREA_RANGE.1],
            validation_area: [VALIDATION_AREA_RANGE.0, VALIDATION_AREA_RANGE.1],
            square_block: None,
            train_dir: None,
            validation_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub base_width: usize,
    pub stages: usize,
    /// Divides every discriminator width.
    pub disc_width_divisor: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        Self {
            depth: g.depth,
            base_width: g.base_width,
            stages: g.stages,
            disc_width_divisor: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub seeds: Seeds,
    pub data: DataConfig,
    pub masks: MaskConfig,
    pub model: ModelConfig,
    pub extractor: ExtractorSource,
    pub loss: LossWeights,
}

/// Image side and widths applied by `desk_scale`.
pub const DESK_IMAGE_SIZE: usize = 64;
pub const DESK_BASE_WIDTH: usize = 8;
pub const DESK_WIDTH_DIVISOR: usize = 8;

impl RunConfig {
    /// The desk-scale preset: 64×64 images, generator width 8, discriminator
    /// and extractor widths divided by 8.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.run.desk_scale = true;
        c.resolved()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies the desk-scale preset when requested.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if c.run.desk_scale {
            c.data.image_size = DESK_IMAGE_SIZE;
            c.model.base_width = DESK_BASE_WIDTH;
            c.model.disc_width_divisor = c.model.disc_width_divisor.max(DESK_WIDTH_DIVISOR);
            if let ExtractorSource::Random { width_divisor, .. } = &mut c.extractor {
                *width_divisor = (*width_divisor).max(DESK_WIDTH_DIVISOR);
            }
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.run.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let rates = [self.run.learning_rate, self.run.beta1, self.run.beta2];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Config("learning rate and moment decays must be > 0".into()));
        }
        if self.run.beta1 >= 1.0 || self.run.beta2 >= 1.0 {
            return Err(Error::Config("moment decays must be < 1".into()));
        }
        if self.masks.train_count == 0 || self.masks.validation_count == 0 {
            return Err(Error::Config("mask corpora need at least one mask".into()));
        }
        self.generator_config().validate()?;
        self.loss.validate()
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            depth: self.model.depth,
            base_width: self.model.base_width,
            stages: self.model.stages,
            in_channels: 1,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.run.learning_rate,
            beta1: self.run.beta1,
            beta2: self.run.beta2,
            ..AdamConfig::default()
        }
    }

    pub fn square_block(&self) -> usize {
        self.masks.square_block.unwrap_or(self.data.image_size / 4)
    }

    /// Output directory, resolved against `$IPA_OUTPUT_DIR` when relative.
    pub fn output_dir(&self) -> PathBuf {
        let dir = &self.run.output_dir;
        match std::env::var_os(OUTPUT_ENV) {
            Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
            _ => dir.clone(),
        }
    }

    fn hash_with(&self, strip_epochs: bool) -> String {
        let mut c = self.resolved();
        c.run.output_dir = PathBuf::new();
        if strip_epochs {
            c.run.epochs = 0;
        }
        sha256_hex(serde_json::to_string(&c).expect("serializable").as_bytes())
    }

    /// Hash of everything that shapes the run, except where outputs go.
    pub fn hash(&self) -> String {
        self.hash_with(false)
    }

    /// Like [`hash`](Self::hash) but ignoring the epoch budget, so a run can be
    /// resumed with more epochs.
    pub fn identity_hash(&self) -> String {
        self.hash_with(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_protocol() {
        let c = RunConfig::default();
        assert_eq!(c.run.epochs, 100);
        assert_eq!(c.run.batch_size, 4);
        assert_eq!(c.run.learning_rate, 2e-4);
        assert_eq!((c.run.beta1, c.run.beta2), (0.5, 0.999));
        assert_eq!((c.masks.train_count, c.masks.validation_count), (100, 50));
        assert_eq!(c.square_block(), 64);
        c.validate().unwrap();
    }

    #[test]
    fn toml_roundtrip_and_partial_files() {
        let c = RunConfig::desk();
        let text = c.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
        let partial = RunConfig::from_toml_str("[run]\nepochs = 3\ndesk_scale = true\n[loss]\npixel = 50.0\n").unwrap();
        assert_eq!(partial.run.epochs, 3);
        assert_eq!(partial.loss.pixel, 50.0);
        assert_eq!(partial.loss.style, 10.0);
        assert_eq!(partial.resolved().data.image_size, 64);
        assert!(RunConfig::from_toml_str("[run]\nepoch = 3\n").is_err());
    }

    #[test]
    fn hashes() {
        let a = RunConfig::desk();
        let mut b = a.clone();
        b.run.epochs = 7;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.identity_hash(), b.identity_hash());
        b.run.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.identity_hash(), b.identity_hash());
        b.seeds.global = 9;
        assert_ne!(a.identity_hash(), b.identity_hash());
    }

    #[test]
    fn validation_errors() {
        let mut c = RunConfig::desk();
        c.run.epochs = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::desk();
        c.run.learning_rate = 0.0;
        assert!(c.validate().is_err());
    }
}
