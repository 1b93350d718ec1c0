use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::seq2seq::DecodeConfig;
use crate::refine::TaskTemplate;

pub const RUN_DIR_ENV: &str = "RE3G_RUN_DIR";

/// Flat pipeline settings; every key is a top-level TOML key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub k_retrieve: usize,
    pub k_rerank_out: usize,
    pub tau: f64,
    pub n_negatives: usize,
    pub task: TaskTemplate,
    pub use_reranker: bool,
    pub use_refinement: bool,
    pub seed: u64,
    pub beam_size: usize,
    pub max_decode_len: usize,
    pub length_penalty: f64,
    /// Retriever phase served and used for indexing.
    pub retriever_phase: u8,
    pub retriever_epochs: Option<usize>,
    pub reranker_epochs: Option<usize>,
    pub generator_epochs: Option<usize>,
    /// Caps every training loop; meant for smoke runs.
    pub max_steps: Option<usize>,
    pub dev_fraction: f64,
    pub retriever_checkpoint: Option<PathBuf>,
    pub reranker_checkpoint: Option<PathBuf>,
    pub generator_checkpoint: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k_retrieve: 100,
            k_rerank_out: 5,
            tau: 0.07,
            n_negatives: 30,
            task: TaskTemplate::GroundThenAgent,
            use_reranker: true,
            use_refinement: true,
            seed: 13,
            beam_size: 4,
            max_decode_len: 128,
            length_penalty: 1.0,
            retriever_phase: 3,
            retriever_epochs: None,
            reranker_epochs: None,
            generator_epochs: None,
            max_steps: None,
            dev_fraction: 0.2,
            retriever_checkpoint: None,
            reranker_checkpoint: None,
            generator_checkpoint: None,
        }
    }
}

/// The subset of settings that changes trained artifacts.
#[derive(Serialize)]
struct ArtifactKey<'a> {
    k_retrieve: usize,
    tau: f64,
    n_negatives: usize,
    seed: u64,
    retriever_phase: u8,
    retriever_epochs: Option<usize>,
    reranker_epochs: Option<usize>,
    generator_epochs: Option<usize>,
    max_steps: Option<usize>,
    dev_fraction: f64,
    task: &'a TaskTemplate,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_rerank_out == 0 || self.k_rerank_out > self.k_retrieve {
            return Err(Error::Config(format!(
                "need 1 <= k_rerank_out <= k_retrieve, got k_rerank_out={} k_retrieve={}",
                self.k_rerank_out, self.k_retrieve
            )));
        }
        if self.k_rerank_out > crate::refine::prompt::MAX_PROMPT_PASSAGES {
            return Err(Error::Config(format!(
                "k_rerank_out={} exceeds the {} passages a prompt holds",
                self.k_rerank_out,
                crate::refine::prompt::MAX_PROMPT_PASSAGES
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(1..=3).contains(&self.retriever_phase) {
            return Err(Error::Config(format!("retriever_phase must be 1, 2 or 3, got {}", self.retriever_phase)));
        }
        if self.beam_size == 0 || self.max_decode_len == 0 {
            return Err(Error::Config("beam_size and max_decode_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return Err(Error::Config(format!("dev_fraction must be in [0, 1), got {}", self.dev_fraction)));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn decode(&self) -> DecodeConfig {
        DecodeConfig {
            beam_size: self.beam_size,
            max_len: self.max_decode_len,
            length_penalty: self.length_penalty,
        }
    }

    /// Task actually run: the refinement ablation forces answer-only output.
    pub fn effective_task(&self) -> TaskTemplate {
        if self.use_refinement {
            self.task
        } else {
            TaskTemplate::AgentOnly
        }
    }

    /// Short hash of the settings that shape trained artifacts. Serving-only
    /// knobs (output size, ablations, decoding, paths) are left out.
    pub fn artifact_hash(&self) -> String {
        let key = ArtifactKey {
            k_retrieve: self.k_retrieve,
            tau: self.tau,
            n_negatives: self.n_negatives,
            seed: self.seed,
            retriever_phase: self.retriever_phase,
            retriever_epochs: self.retriever_epochs,
            reranker_epochs: self.reranker_epochs,
            generator_epochs: self.generator_epochs,
            max_steps: self.max_steps,
            dev_fraction: self.dev_fraction,
            task: &self.task,
        };
        let bytes = serde_json::to_vec(&key).expect("plain struct serializes");
        hex::encode(Sha256::digest(&bytes))[..12].to_string()
    }

    /// `<base>/run-<hash>`, where `base` is `$RE3G_RUN_DIR` or `runs`.
    pub fn run_dir(&self) -> PathBuf {
        let base = std::env::var_os(RUN_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        base.join(format!("run-{}", self.artifact_hash()))
    }
}

/// Per-turn ablation switches; unset fields keep the pipeline's value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnOverrides {
    #[serde(default)]
    pub use_reranker: Option<bool>,
    #[serde(default)]
    pub use_refinement: Option<bool>,
}

impl TurnOverrides {
    pub fn apply(&self, cfg: &PipelineConfig) -> PipelineConfig {
        let mut out = cfg.clone();
        if let Some(r) = self.use_reranker {
            out.use_reranker = r;
        }
        if let Some(r) = self.use_refinement {
            out.use_refinement = r;
        }
        out
    }
}
