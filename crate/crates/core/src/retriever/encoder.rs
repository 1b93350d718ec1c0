use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::index::{DenseIndex, RetrievalResult};
use crate::corpus::{serialize_history, DialogueContext, Passage};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{self, CheckpointMeta};
use crate::nn::layers::{mean_pool, to_f32_vec, Batch, EncoderConfig, TextEncoder};
use crate::nn::params::Params;
use crate::nn::vocab::{Vocab, PAD};

const ENCODE_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiEncoderConfig {
    /// Shape shared by the context and passage towers.
    pub encoder: EncoderConfig,
}

impl BiEncoderConfig {
    pub fn small(vocab_size: usize) -> Self {
        BiEncoderConfig {
            encoder: EncoderConfig {
                vocab_size,
                d_model: 64,
                n_heads: 4,
                n_layers: 1,
                d_ff: 128,
                max_len: 128,
                feature_sizes: Vec::new(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tower {
    Context,
    Passage,
}

/// Two independent encoders whose mean-pooled outputs are compared by dot product.
///
/// Parameters live under the `ctx.` and `psg.` prefixes of one store.
pub struct BiEncoder {
    params: Params,
    ctx: TextEncoder,
    psg: TextEncoder,
    vocab: Vocab,
    pub cfg: BiEncoderConfig,
}

pub const CTX_PREFIX: &str = "ctx.";
pub const PSG_PREFIX: &str = "psg.";

impl BiEncoder {
    pub fn new(cfg: &BiEncoderConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        if cfg.encoder.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "encoder vocab_size {} != vocabulary size {}",
                cfg.encoder.vocab_size,
                vocab.len()
            )));
        }
        let params = Params::new(seed);
        let ctx = TextEncoder::new(&params.scope("ctx"), &cfg.encoder)?;
        let psg = TextEncoder::new(&params.scope("psg"), &cfg.encoder)?;
        // Both towers start from the same weights, as two copies of one
        // pretrained encoder would.
        params.copy_prefix(CTX_PREFIX, PSG_PREFIX)?;
        Ok(BiEncoder {
            params,
            ctx,
            psg,
            vocab,
            cfg: cfg.clone(),
        })
    }

    /// Rebuilds the model described by a checkpoint sidecar and loads its weights.
    pub fn load(ckpt: &Path, vocab: Vocab) -> Result<Self> {
        let meta = checkpoint::read_meta(ckpt)?;
        if meta.vocab_hash != vocab.hash() {
            return Err(Error::Config(format!(
                "{} was trained with a different vocabulary",
                ckpt.display()
            )));
        }
        let cfg: BiEncoderConfig = serde_json::from_value(meta.model_config)?;
        let mut model = Self::new(&cfg, vocab, 0)?;
        checkpoint::load_into(&mut model.params, ckpt)?;
        Ok(model)
    }

    pub fn save(&self, ckpt: &Path, tag: &str, metrics: serde_json::Value) -> Result<()> {
        let meta = CheckpointMeta {
            kind: "retriever".into(),
            tag: tag.into(),
            model_config: serde_json::to_value(&self.cfg)?,
            vocab_hash: self.vocab.hash(),
            weight_hash: self.params.weight_hash("")?,
            metrics,
        };
        checkpoint::save(&self.params, ckpt, &meta)
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.cfg.encoder.d_model
    }

    /// Hash of the passage tower only; an index is valid for exactly one value.
    pub fn passage_weight_hash(&self) -> Result<String> {
        self.params.weight_hash(PSG_PREFIX)
    }

    /// Word-piece ids clipped to the encoder budget. Empty text is rejected.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        if text.trim().is_empty() {
            return Err(Error::invalid("cannot encode an empty string"));
        }
        let mut ids = self.vocab.encode(text);
        ids.truncate(self.cfg.encoder.max_len);
        Ok(ids)
    }

    /// `(B, d)` embeddings with gradient tracking.
    pub fn embed(&self, tower: Tower, texts: &[&str]) -> Result<Tensor> {
        let seqs = texts
            .iter()
            .map(|t| self.tokenize(t))
            .collect::<Result<Vec<_>>>()?;
        let batch = Batch::new(&seqs, PAD, self.params.device())?;
        let enc = match tower {
            Tower::Context => &self.ctx,
            Tower::Passage => &self.psg,
        };
        mean_pool(&enc.forward(&batch, &[])?, &batch.mask)
    }

    /// Row-major `B × d` vectors, encoded in fixed-size chunks.
    pub fn encode_many(&self, tower: Tower, texts: &[&str]) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(texts.len() * self.dim());
        for chunk in texts.chunks(ENCODE_CHUNK) {
            out.extend(to_f32_vec(&self.embed(tower, chunk)?.detach())?);
        }
        Ok(out)
    }

    pub fn encode_context(&self, ctx_string: &str) -> Result<Vec<f32>> {
        self.encode_many(Tower::Context, &[ctx_string])
    }

    pub fn encode_passage(&self, passage_text: &str) -> Result<Vec<f32>> {
        self.encode_many(Tower::Passage, &[passage_text])
    }

    /// The query string a dialogue context is encoded from.
    pub fn query_string(&self, ctx: &DialogueContext) -> String {
        serialize_history(ctx, self.cfg.encoder.max_len)
    }

    /// Encodes every passage into a fresh snapshot one version after `previous`.
    pub fn build_index(&self, passages: &[Passage], previous: Option<&DenseIndex>) -> Result<DenseIndex> {
        if passages.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let texts: Vec<&str> = passages.iter().map(|p| p.text.as_str()).collect();
        let vectors = self.encode_many(Tower::Passage, &texts)?;
        DenseIndex::new(
            passages.iter().map(|p| p.passage_id.clone()).collect(),
            vectors,
            self.dim(),
            previous.map_or(1, |p| p.snapshot_version + 1),
            self.passage_weight_hash()?,
        )
    }

    pub fn retrieve(&self, ctx: &DialogueContext, k: usize, index: &DenseIndex) -> Result<Vec<RetrievalResult>> {
        self.retrieve_text(&self.query_string(ctx), k, index)
    }

    pub fn retrieve_text(&self, query: &str, k: usize, index: &DenseIndex) -> Result<Vec<RetrievalResult>> {
        if index.d() != self.dim() {
            return Err(Error::WidthMismatch {
                expected: self.dim(),
                actual: index.d(),
            });
        }
        index.search(&self.encode_context(query)?, k)
    }
}
