use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::prompt::{build_prompt, parse_output, GenerationOutput, TaskTemplate};
use crate::corpus::DialogueContext;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{self, CheckpointMeta};
use crate::nn::layers::EncoderConfig;
use crate::nn::params::Params;
use crate::nn::seq2seq::{DecodeConfig, Seq2Seq, Seq2SeqConfig};
use crate::nn::vocab::Vocab;

const SCOPE: &str = "gen";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seq2seq: Seq2SeqConfig,
    pub decode: DecodeConfig,
    /// Whitespace-token budget for a prompt.
    pub prompt_budget: usize,
}

impl GeneratorConfig {
    pub fn small(vocab_size: usize) -> Self {
        GeneratorConfig {
            seq2seq: Seq2SeqConfig {
                encoder: EncoderConfig {
                    vocab_size,
                    d_model: 64,
                    n_heads: 4,
                    n_layers: 2,
                    d_ff: 128,
                    max_len: 256,
                    feature_sizes: Vec::new(),
                },
                n_dec_layers: 1,
                max_target_len: 64,
            },
            decode: DecodeConfig::default(),
            prompt_budget: 224,
        }
    }
}

pub struct GeneratorModel {
    params: Params,
    model: Seq2Seq,
    vocab: Vocab,
    cfg: GeneratorConfig,
}

impl GeneratorModel {
    pub fn new(cfg: &GeneratorConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        if cfg.seq2seq.encoder.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "generator vocab_size {} != vocabulary size {}",
                cfg.seq2seq.encoder.vocab_size,
                vocab.len()
            )));
        }
        if cfg.prompt_budget == 0 {
            return Err(Error::Config("prompt_budget must be positive".into()));
        }
        let params = Params::new(seed);
        let model = Seq2Seq::new(&params.scope(SCOPE), &cfg.seq2seq)?;
        Ok(GeneratorModel {
            params,
            model,
            vocab,
            cfg: cfg.clone(),
        })
    }

    pub fn load(ckpt: &Path, vocab: Vocab) -> Result<Self> {
        let meta = checkpoint::read_meta(ckpt)?;
        if meta.kind != "generator" {
            return Err(Error::Config(format!("{} holds a {} checkpoint", ckpt.display(), meta.kind)));
        }
        if meta.vocab_hash != vocab.hash() {
            return Err(Error::Config(format!(
                "{} was trained with a different vocabulary",
                ckpt.display()
            )));
        }
        let cfg: GeneratorConfig = serde_json::from_value(meta.model_config)?;
        let mut model = Self::new(&cfg, vocab, 0)?;
        checkpoint::load_into(&mut model.params, ckpt)?;
        Ok(model)
    }

    pub fn save(&self, ckpt: &Path, tag: &str, metrics: serde_json::Value) -> Result<()> {
        let meta = CheckpointMeta {
            kind: "generator".into(),
            tag: tag.into(),
            model_config: serde_json::to_value(&self.cfg)?,
            vocab_hash: self.vocab.hash(),
            weight_hash: self.params.weight_hash("")?,
            metrics,
        };
        checkpoint::save(&self.params, ckpt, &meta)
    }

    /// Copies all weights from another generator with the same shape.
    pub fn copy_from(&self, other: &GeneratorModel) -> Result<()> {
        self.params.copy_from(&other.params)
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn prompt<S: AsRef<str>>(&self, task: TaskTemplate, ctx: &DialogueContext, passages: &[S]) -> Result<String> {
        build_prompt(task, ctx, passages, self.cfg.prompt_budget)
    }

    /// Summed target NLL per pair, shape `(B,)`, and the scored token count.
    pub fn nll(&self, pairs: &[(&str, &str)]) -> Result<(Tensor, usize)> {
        let sources: Vec<Vec<u32>> = pairs.iter().map(|(s, _)| self.vocab.encode(s)).collect();
        let targets: Vec<Vec<u32>> = pairs.iter().map(|(_, t)| self.vocab.encode(t)).collect();
        self.model.sequence_nll(&sources, &targets)
    }

    /// Mean per-token NLL over `pairs`, evaluated in chunks.
    pub fn mean_token_nll(&self, pairs: &[(&str, &str)]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0;
        for chunk in pairs.chunks(16) {
            let (nll, n) = self.nll(chunk)?;
            total += nll.sum_all()?.to_scalar::<f32>()? as f64;
            count += n;
        }
        Ok(total / count.max(1) as f64)
    }

    pub fn generate_raw(&self, prompt: &str, decode: &DecodeConfig) -> Result<String> {
        let source = self.vocab.encode(prompt);
        if source.is_empty() {
            return Err(Error::invalid("prompt encodes to no tokens"));
        }
        let ids = self.model.generate(&source, decode)?;
        Ok(self.vocab.decode(&ids))
    }

    pub fn generate<S: AsRef<str>>(
        &self,
        task: TaskTemplate,
        ctx: &DialogueContext,
        passages: &[S],
    ) -> Result<GenerationOutput> {
        self.generate_with(task, ctx, passages, &self.cfg.decode)
    }

    pub fn generate_with<S: AsRef<str>>(
        &self,
        task: TaskTemplate,
        ctx: &DialogueContext,
        passages: &[S],
        decode: &DecodeConfig,
    ) -> Result<GenerationOutput> {
        let prompt = self.prompt(task, ctx, passages)?;
        let raw = self.generate_raw(&prompt, decode)?;
        if raw.trim().is_empty() {
            return Err(Error::Decode {
                message: "generator produced no text".into(),
                raw,
            });
        }
        Ok(parse_output(&raw, task))
    }
}
