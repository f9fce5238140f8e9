//! Training checkpoints: one safetensors file plus a JSON sidecar.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::EpochMetrics;
use crate::generator::GeneratorConfig;
use crate::nn::{load_tensors, save_tensors};
use crate::{Error, Result};

pub const GENERATOR_PREFIX: &str = "g.";
pub const GLOBAL_D_PREFIX: &str = "dg.";
pub const PATCH_D_PREFIX: &str = "dp.";
pub const OPT_G_PREFIX: &str = "opt_g.";
pub const OPT_DG_PREFIX: &str = "opt_dg.";
pub const OPT_DP_PREFIX: &str = "opt_dp.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub config: RunConfig,
    pub config_hash: String,
    pub identity_hash: String,
    pub generator: GeneratorConfig,
    /// Adam step counts for generator, global and patch discriminators.
    pub optimizer_steps: [u64; 3],
    pub history: Vec<EpochMetrics>,
    pub best_val_ssim: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Writes `<stem>.safetensors` and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        if let Some(parent) = stem.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        save_tensors(&self.tensors, &stem.with_extension("safetensors"))?;
        let sidecar = stem.with_extension("json");
        let text = serde_json::to_string_pretty(&self.meta)?;
        std::fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let meta = Self::load_meta(stem)?;
        let tensors: HashMap<String, Tensor> = load_tensors(&stem.with_extension("safetensors"))?;
        Ok(Self {
            meta,
            tensors: tensors.into_iter().collect(),
        })
    }

    pub fn load_meta(stem: &Path) -> Result<CheckpointMeta> {
        let sidecar = stem.with_extension("json");
        let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Tensors under `prefix`, in the map form expected by `ParamStore::assign_from`.
    pub fn section(&self, prefix: &str) -> HashMap<String, Tensor> {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}

/// Accepts a checkpoint path given with or without an extension.
pub fn checkpoint_stem(path: &Path) -> std::path::PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("safetensors") | Some("json") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}
