use candle_core::Tensor;

use crate::error::Result;
use crate::nn::layers::EncoderConfig;
use crate::nn::params::Params;
use crate::nn::seq2seq::{Seq2Seq, Seq2SeqConfig};
use crate::nn::vocab::Vocab;

/// Throwaway generator scoring `log P(answer | context, passage)` for the
/// phase-2 marginal likelihood. Never used to answer users.
pub struct VanillaGenerator {
    params: Params,
    model: Seq2Seq,
}

impl VanillaGenerator {
    /// A one-layer model sized after the retriever's encoder.
    pub fn config_for(encoder: &EncoderConfig, max_target_len: usize) -> Seq2SeqConfig {
        Seq2SeqConfig {
            encoder: EncoderConfig {
                n_layers: 1,
                max_len: encoder.max_len * 2,
                feature_sizes: Vec::new(),
                ..encoder.clone()
            },
            n_dec_layers: 1,
            max_target_len,
        }
    }

    pub fn new(cfg: &Seq2SeqConfig, seed: u64) -> Result<Self> {
        let params = Params::new(seed);
        let model = Seq2Seq::new(&params.scope("vanilla"), cfg)?;
        Ok(VanillaGenerator { params, model })
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// `(N,)` answer log-likelihoods, one per `(query, passage)` pair.
    pub fn log_likelihood(&self, vocab: &Vocab, pairs: &[(&str, &str)], answers: &[&str]) -> Result<Tensor> {
        let sources: Vec<Vec<u32>> = pairs
            .iter()
            .map(|(q, p)| vocab.encode(&format!("{q} {p}")))
            .collect();
        let targets: Vec<Vec<u32>> = answers.iter().map(|a| vocab.encode(a)).collect();
        let (nll, _) = self.model.sequence_nll(&sources, &targets)?;
        Ok(nll.neg()?)
    }
}
