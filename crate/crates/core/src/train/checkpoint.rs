//! Single-file checkpoints: a TOML manifest followed by a safetensors blob.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` manifest length (all
//! little endian), the manifest text, then the weights.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FUSION_PREFIX, GRAPH_PREFIX};
use crate::train::config::TrainConfig;

const MAGIC: &[u8; 8] = b"SMFNETCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Reconstruction pre-training.
    Stage1,
    /// Fusion training from a stage-I initialisation.
    Stage2,
    /// Encoder, fusion layers and decoder trained together from scratch.
    Joint,
}

impl Stage {
    pub fn has_fusion_layers(self) -> bool {
        !matches!(self, Stage::Stage1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: Stage,
    /// Epochs completed in `stage`.
    pub epoch: usize,
    pub seed: u64,
    /// Stages this checkpoint went through, oldest first.
    pub stages: Vec<Stage>,
    pub use_graph: bool,
    pub decoder_in_channels: usize,
    pub parameter_count: usize,
    pub config: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn has_fusion_layers(&self) -> bool {
        self.manifest.stage.has_fusion_layers()
            && self.tensors.keys().any(|k| k.starts_with(FUSION_PREFIX))
    }

    pub fn graph_tensor_names(&self) -> Vec<&str> {
        self.tensors
            .keys()
            .filter(|k| k.starts_with(GRAPH_PREFIX) || k.starts_with("fusion.graph."))
            .map(|k| k.as_str())
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest =
            toml::to_string(&self.manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let blob = safetensors::serialize(self.tensors.iter().map(|(k, v)| (k.as_str(), v)), None)
            .map_err(|e| Error::Checkpoint(format!("serializing weights: {e}")))?;
        let mut out = Vec::with_capacity(20 + manifest.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let end = 20usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated manifest"))?;
        let text =
            std::str::from_utf8(&bytes[20..end]).map_err(|_| bad("manifest is not UTF-8"))?;
        let manifest: Manifest =
            toml::from_str(text).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        let tensors = candle_core::safetensors::load_buffer(&bytes[end..], device)
            .map_err(|e| Error::Checkpoint(format!("weights: {e}")))?
            .into_iter()
            .collect();
        Ok(Self { manifest, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, device).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
