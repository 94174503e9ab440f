//! Binary checkpoint format.
//!
//! Layout: magic `HSCK`, format version (u32 LE), header length (u64 LE),
//! JSON header, then the tensor payload as raw f32 LE values concatenated
//! in the order declared by the header. Saves are atomic
//! (write-temp-then-rename) and round-trip bit-identically.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::train::{PolicyMode, PriorSpec, TrainConfig, TrainMode};
use crate::unet::{PrimaryNetConfig, SlotSpec};

pub const MAGIC: [u8; 4] = *b"HSCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error("header json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDecl {
    pub name: String,
    pub len: u64,
}

/// Mid-training state needed to resume bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    /// ChaCha word position of the training stream, decimal string.
    pub rng_word_pos: String,
    pub adam_step: u64,
    pub best_val_loss: Option<f64>,
    pub best_step: u64,
    pub rounds_since_improve: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub mode: TrainMode,
    pub policy_mode: PolicyMode,
    pub net: PrimaryNetConfig,
    pub prior: Option<PriorSpec>,
    pub phi_fixed: Option<f64>,
    pub seed: u64,
    pub step: u64,
    pub manifest: Vec<SlotSpec>,
    pub tensors: Vec<TensorDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_config: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume: Option<ResumeState>,
    /// For weights exported from a hypernetwork: the factor they were
    /// predicted at.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_phi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Vec<f32>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, d)| d.as_slice())
    }

    pub fn take_tensor(&mut self, name: &str) -> Option<Vec<f32>> {
        let idx = self.tensors.iter().position(|(n, _)| n == name)?;
        Some(self.tensors.remove(idx).1)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut meta = self.meta.clone();
        meta.tensors = self
            .tensors
            .iter()
            .map(|(name, data)| TensorDecl { name: clone_name(name), len: data.len() as u64 })
            .collect();
        let header = serde_json::to_vec(&meta)?;

        let mut bytes =
            Vec::with_capacity(16 + header.len() + 4 * self.tensors.iter().map(|(_, d)| d.len()).sum::<usize>());
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        for (_, data) in &self.tensors {
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }

        let tmp = path.with_extension("hsck.tmp");
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| CheckpointError::Io { path: parent.into(), source: e })?;
            }
        }
        let mut f = fs::File::create(&tmp).map_err(|e| CheckpointError::Io { path: tmp.clone(), source: e })?;
        f.write_all(&bytes).map_err(|e| CheckpointError::Io { path: tmp.clone(), source: e })?;
        f.sync_all().map_err(|e| CheckpointError::Io { path: tmp.clone(), source: e })?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| CheckpointError::Io { path: path.into(), source: e })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let mut f = fs::File::open(path).map_err(|e| CheckpointError::Io { path: path.into(), source: e })?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| CheckpointError::Io { path: path.into(), source: e })?;
        if bytes.len() < 16 || bytes[..4] != MAGIC {
            return Err(CheckpointError::Format("missing HSCK magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("sized"));
        if version != VERSION {
            return Err(CheckpointError::Format(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("sized")) as usize;
        if bytes.len() < 16 + header_len {
            return Err(CheckpointError::Format("truncated header".into()));
        }
        let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..16 + header_len])?;
        let payload = &bytes[16 + header_len..];
        let declared: u64 = meta.tensors.iter().map(|d| d.len).sum();
        if payload.len() as u64 != 4 * declared {
            return Err(CheckpointError::Format(format!(
                "payload is {} bytes but header declares {} elements",
                payload.len(),
                declared
            )));
        }
        let mut tensors = Vec::with_capacity(meta.tensors.len());
        let mut off = 0usize;
        for decl in &meta.tensors {
            let n = decl.len as usize;
            let data: Vec<f32> = payload[off..off + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("sized")))
                .collect();
            off += 4 * n;
            tensors.push((decl.name.clone(), data));
        }
        Ok(Checkpoint { meta, tensors })
    }
}

fn clone_name(name: &str) -> String {
    name.to_string()
}
