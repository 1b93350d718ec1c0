use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::Params;
use crate::error::{Error, Result};
use crate::jsonl;

/// JSON sidecar written next to every `.ckpt` weight file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub tag: String,
    pub model_config: serde_json::Value,
    pub vocab_hash: String,
    pub weight_hash: String,
    #[serde(default)]
    pub metrics: serde_json::Value,
}

/// `re3g.retriever.phase1.ckpt` -> `re3g.retriever.phase1.json`
pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

pub fn save(params: &Params, ckpt: &Path, meta: &CheckpointMeta) -> Result<()> {
    params.save(ckpt)?;
    jsonl::write_json(&sidecar_path(ckpt), meta)
}

pub fn read_meta(ckpt: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(ckpt);
    if !ckpt.exists() || !side.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "checkpoint {} (with sidecar) not found",
            ckpt.display()
        )));
    }
    jsonl::read_json(&side)
}

/// Loads weights into `params` and checks them against the sidecar hash.
pub fn load_into(params: &mut Params, ckpt: &Path) -> Result<CheckpointMeta> {
    let meta = read_meta(ckpt)?;
    params.load(ckpt)?;
    let actual = params.weight_hash("")?;
    if actual != meta.weight_hash {
        return Err(Error::invalid(format!(
            "checkpoint {} weight hash mismatch",
            ckpt.display()
        )));
    }
    Ok(meta)
}
