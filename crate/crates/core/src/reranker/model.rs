use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;

use candle_core::{Module, Tensor, D};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::{self, CheckpointMeta};
use crate::nn::layers::{linear, to_f32_vec, Batch, EncoderConfig, TextEncoder};
use crate::nn::params::Params;
use crate::nn::vocab::{Vocab, CLS, PAD, SEP};
use crate::retriever::{RetrievalResult, Teacher};

const SCORE_CHUNK: usize = 64;

/// Segment id (passage or context) and lexical-match class per input token.
const FEATURE_SIZES: [usize; 2] = [2, 3];
const MATCH_NONE: u32 = 0;
const MATCH_UNIGRAM: u32 = 1;
const MATCH_BIGRAM: u32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossEncoderConfig {
    pub encoder: EncoderConfig,
}

impl CrossEncoderConfig {
    pub fn small(vocab_size: usize) -> Self {
        CrossEncoderConfig {
            encoder: EncoderConfig {
                vocab_size,
                d_model: 64,
                n_heads: 4,
                n_layers: 1,
                d_ff: 128,
                max_len: 128,
                feature_sizes: FEATURE_SIZES.to_vec(),
            },
        }
    }
}

/// One encoded `[CLS] passage [SEP] context [SEP]` input.
#[derive(Debug, Clone, PartialEq)]
pub struct PairInput {
    pub ids: Vec<u32>,
    pub segments: Vec<u32>,
    pub matches: Vec<u32>,
}

fn match_classes(seg: &[u32], other: &[u32]) -> Vec<u32> {
    let unigrams: HashSet<u32> = other.iter().copied().collect();
    let bigrams: HashSet<(u32, u32)> = other.windows(2).map(|w| (w[0], w[1])).collect();
    (0..seg.len())
        .map(|i| {
            let left = i > 0 && bigrams.contains(&(seg[i - 1], seg[i]));
            let right = i + 1 < seg.len() && bigrams.contains(&(seg[i], seg[i + 1]));
            if left || right {
                MATCH_BIGRAM
            } else if unigrams.contains(&seg[i]) {
                MATCH_UNIGRAM
            } else {
                MATCH_NONE
            }
        })
        .collect()
}

/// Cross-encoder over a passage and a dialogue context, scored from `[CLS]`.
pub struct CrossEncoder {
    params: Params,
    encoder: TextEncoder,
    head: Linear,
    vocab: Vocab,
    pub cfg: CrossEncoderConfig,
}

/// A candidate after reranking; `final_rank` is 1-based. Reranker fields
/// are empty when the candidate list comes straight from the retriever.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankCandidate {
    pub passage_id: String,
    pub retriever_rank: usize,
    pub retriever_score: f64,
    pub reranker_logit: Option<f64>,
    pub reranker_score: Option<f64>,
    pub final_rank: usize,
}

impl RerankCandidate {
    /// Retriever result kept in retriever order.
    pub fn from_retrieval(r: &RetrievalResult) -> Self {
        RerankCandidate {
            passage_id: r.passage_id.clone(),
            retriever_rank: r.rank,
            retriever_score: r.retriever_score,
            reranker_logit: None,
            reranker_score: None,
            final_rank: r.rank,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Orders candidates by reranker logit (descending), then retriever rank,
/// then passage id, and keeps the first `top_n`.
pub fn order_candidates(candidates: &[RetrievalResult], logits: &[f64], top_n: usize) -> Result<Vec<RerankCandidate>> {
    if candidates.is_empty() {
        return Err(Error::invalid("nothing to rerank"));
    }
    if top_n == 0 {
        return Err(Error::invalid("top_n must be at least 1"));
    }
    if candidates.len() != logits.len() {
        return Err(Error::LengthMismatch {
            left: candidates.len(),
            right: logits.len(),
        });
    }
    let mut out: Vec<(f64, RerankCandidate)> = candidates
        .iter()
        .zip(logits)
        .map(|(c, &l)| {
            let cand = RerankCandidate {
                passage_id: c.passage_id.clone(),
                retriever_rank: c.rank,
                retriever_score: c.retriever_score,
                reranker_logit: Some(l),
                reranker_score: Some(sigmoid(l)),
                final_rank: 0,
            };
            (l, cand)
        })
        .collect();
    out.sort_by(|(la, a), (lb, b)| {
        lb.partial_cmp(la)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.retriever_rank.cmp(&b.retriever_rank))
            .then_with(|| a.passage_id.cmp(&b.passage_id))
    });
    out.truncate(top_n);
    Ok(out
        .into_iter()
        .enumerate()
        .map(|(i, (_, c))| RerankCandidate { final_rank: i + 1, ..c })
        .collect())
}

impl CrossEncoder {
    pub fn new(cfg: &CrossEncoderConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        if cfg.encoder.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "encoder vocab_size {} != vocabulary size {}",
                cfg.encoder.vocab_size,
                vocab.len()
            )));
        }
        if cfg.encoder.feature_sizes != FEATURE_SIZES {
            return Err(Error::Config(format!(
                "cross-encoder needs feature_sizes {FEATURE_SIZES:?}"
            )));
        }
        if cfg.encoder.max_len < 5 {
            return Err(Error::Config("cross-encoder max_len must be at least 5".into()));
        }
        let params = Params::new(seed);
        let encoder = TextEncoder::new(&params.scope("rerank"), &cfg.encoder)?;
        let head = linear(&params.scope("rerank.head"), cfg.encoder.d_model, 1)?;
        Ok(CrossEncoder {
            params,
            encoder,
            head,
            vocab,
            cfg: cfg.clone(),
        })
    }

    pub fn load(ckpt: &Path, vocab: Vocab) -> Result<Self> {
        let meta = checkpoint::read_meta(ckpt)?;
        if meta.vocab_hash != vocab.hash() {
            return Err(Error::Config(format!(
                "{} was trained with a different vocabulary",
                ckpt.display()
            )));
        }
        let cfg: CrossEncoderConfig = serde_json::from_value(meta.model_config)?;
        let mut model = Self::new(&cfg, vocab, 0)?;
        checkpoint::load_into(&mut model.params, ckpt)?;
        Ok(model)
    }

    pub fn save(&self, ckpt: &Path, metrics: serde_json::Value) -> Result<()> {
        let meta = CheckpointMeta {
            kind: "reranker".into(),
            tag: "reranker".into(),
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

    /// Builds the joint input. The context loses its oldest tokens first; the
    /// passage is cut only if it alone overflows the budget.
    pub fn pair_input(&self, passage: &str, ctx: &str) -> Result<PairInput> {
        if passage.trim().is_empty() || ctx.trim().is_empty() {
            return Err(Error::invalid("passage and context must be non-empty"));
        }
        let budget = self.cfg.encoder.max_len - 3;
        let mut p = self.vocab.encode(passage);
        let mut c = self.vocab.encode(ctx);
        // keep at least one context token
        p.truncate(budget - 1);
        let room = budget - p.len();
        if c.len() > room {
            c.drain(..c.len() - room);
        }
        let pm = match_classes(&p, &c);
        let cm = match_classes(&c, &p);
        let mut ids = Vec::with_capacity(p.len() + c.len() + 3);
        ids.push(CLS);
        ids.extend(&p);
        ids.push(SEP);
        let first = ids.len();
        ids.extend(&c);
        ids.push(SEP);
        let segments = (0..ids.len()).map(|i| u32::from(i >= first)).collect();
        let mut matches = vec![MATCH_NONE];
        matches.extend(pm);
        matches.push(MATCH_NONE);
        matches.extend(cm);
        matches.push(MATCH_NONE);
        Ok(PairInput {
            ids,
            segments,
            matches,
        })
    }

    /// `(B,)` pre-sigmoid logits with gradient tracking.
    pub fn logits(&self, inputs: &[PairInput]) -> Result<Tensor> {
        let device = self.params.device();
        let ids: Vec<Vec<u32>> = inputs.iter().map(|i| i.ids.clone()).collect();
        let segs: Vec<Vec<u32>> = inputs.iter().map(|i| i.segments.clone()).collect();
        let matches: Vec<Vec<u32>> = inputs.iter().map(|i| i.matches.clone()).collect();
        let batch = Batch::new(&ids, PAD, device)?;
        let feats = [Batch::features(&segs, device)?, Batch::features(&matches, device)?];
        let hidden = self.encoder.forward(&batch, &feats)?;
        let cls = hidden.narrow(1, 0, 1)?.squeeze(1)?;
        Ok(self.head.forward(&cls)?.squeeze(D::Minus1)?)
    }

    /// Logits for each passage against one context, computed in chunks.
    pub fn score_logits(&self, ctx: &str, passages: &[&str]) -> Result<Vec<f64>> {
        let inputs = passages
            .iter()
            .map(|p| self.pair_input(p, ctx))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(SCORE_CHUNK) {
            out.extend(to_f32_vec(&self.logits(chunk)?.detach())?.into_iter().map(f64::from));
        }
        Ok(out)
    }

    /// `sigmoid(logit)` in (0, 1).
    pub fn score_pair(&self, passage: &str, ctx: &str) -> Result<f64> {
        Ok(sigmoid(self.score_logits(ctx, &[passage])?[0]))
    }

    /// Reranks retriever output; `text_of` resolves a passage id to its text.
    pub fn rerank<'a>(
        &self,
        ctx: &str,
        candidates: &[RetrievalResult],
        text_of: impl Fn(&str) -> Option<&'a str>,
        top_n: usize,
    ) -> Result<Vec<RerankCandidate>> {
        let texts = candidates
            .iter()
            .map(|c| text_of(&c.passage_id).ok_or_else(|| Error::UnknownId(c.passage_id.clone())))
            .collect::<Result<Vec<_>>>()?;
        let logits = if candidates.is_empty() {
            Vec::new()
        } else {
            self.score_logits(ctx, &texts)?
        };
        order_candidates(candidates, &logits, top_n)
    }
}

impl Teacher for CrossEncoder {
    fn scores(&self, query: &str, passages: &[&str]) -> Result<Vec<f64>> {
        self.score_logits(query, passages)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::IndexedRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(max_len: usize) -> CrossEncoder {
        let vocab = Vocab::build(
            ["the falcon has a red battery and a blue screen . how much does it cost ? ⟨user⟩ ⟨agent⟩"],
            1,
            100,
        );
        let mut cfg = CrossEncoderConfig::small(vocab.len());
        cfg.encoder.d_model = 16;
        cfg.encoder.d_ff = 32;
        cfg.encoder.max_len = max_len;
        CrossEncoder::new(&cfg, vocab, 1).unwrap()
    }

    fn results(n: usize) -> Vec<RetrievalResult> {
        (0..n)
            .map(|i| RetrievalResult {
                passage_id: format!("p{i:02}"),
                retriever_score: -(i as f64),
                rank: i + 1,
            })
            .collect()
    }

    #[test]
    fn match_features_mark_shared_bigrams() {
        let m = model(64);
        let inp = m.pair_input("a red battery and a blue screen", "⟨user⟩ the red battery").unwrap();
        let v = m.vocab();
        let pos = |tok: &str| inp.ids.iter().position(|&i| i == v.id(tok)).unwrap();
        assert_eq!(inp.matches[pos("red")], MATCH_BIGRAM);
        assert_eq!(inp.matches[pos("battery")], MATCH_BIGRAM);
        assert_eq!(inp.matches[pos("blue")], MATCH_NONE);
        assert_eq!(inp.ids[0], CLS);
        assert_eq!(*inp.ids.last().unwrap(), SEP);
        assert_eq!(inp.segments[0], 0);
        assert_eq!(*inp.segments.last().unwrap(), 1);
    }

    #[test]
    fn context_is_trimmed_oldest_first() {
        let m = model(10);
        let inp = m
            .pair_input("red battery", "⟨user⟩ the falcon ⟨agent⟩ a blue screen ⟨user⟩ how much")
            .unwrap();
        assert_eq!(inp.ids.len(), 10);
        // passage intact: [CLS] red battery [SEP]
        assert_eq!(&inp.ids[1..3], &m.vocab().encode("red battery")[..]);
        // context keeps its newest tokens
        assert_eq!(&inp.ids[4..9], &m.vocab().encode("blue screen ⟨user⟩ how much")[..]);
    }

    #[test]
    fn scores_are_probabilities_and_deterministic() {
        let m = model(64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let words = ["red", "blue", "battery", "screen", "falcon", "cost"];
        for _ in 0..100 {
            let p: Vec<&str> = (0..rng.random_range(1..6)).map(|_| *words.choose(&mut rng).unwrap()).collect();
            let c: Vec<&str> = (0..rng.random_range(1..6)).map(|_| *words.choose(&mut rng).unwrap()).collect();
            let s = m.score_pair(&p.join(" "), &c.join(" ")).unwrap();
            assert!(s > 0.0 && s < 1.0);
            assert_eq!(s, m.score_pair(&p.join(" "), &c.join(" ")).unwrap());
        }
        assert!(m.score_pair("", "x").is_err());
        assert!(m.score_pair("red", " ").is_err());
    }

    #[test]
    fn batched_scoring_matches_single() {
        let m = model(64);
        let passages = ["red battery", "a blue screen and a red battery", "falcon"];
        let batched = m.score_logits("how much does the red battery cost", &passages).unwrap();
        for (p, b) in passages.iter().zip(&batched) {
            let one = m.score_logits("how much does the red battery cost", &[p]).unwrap()[0];
            assert!((sigmoid(one) - sigmoid(*b)).abs() < 1e-5);
        }
    }

    #[test]
    fn ordering_examples() {
        let one = order_candidates(&results(1), &[0.3], 5).unwrap();
        assert_eq!(one[0].final_rank, 1);
        let two = order_candidates(&results(2), &[-2.0, 2.0], 5).unwrap();
        assert_eq!(two[0].passage_id, "p01");
        assert!(two[0].reranker_score.unwrap() > 0.85 && two[1].reranker_score.unwrap() < 0.15);
        let tied = order_candidates(&results(3), &[1.0, 1.0, 1.0], 3).unwrap();
        let ids: Vec<_> = tied.iter().map(|c| c.passage_id.as_str()).collect();
        assert_eq!(ids, ["p00", "p01", "p02"]);
        assert!(order_candidates(&[], &[], 1).is_err());
        assert!(order_candidates(&results(1), &[0.0], 0).is_err());
    }

    #[test]
    fn twenty_candidates_match_sort_oracle_and_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cands = results(20);
        let logits: Vec<f64> = (0..20).map(|_| rng.random_range(-3.0..3.0)).collect();
        let out = order_candidates(&cands, &logits, 20).unwrap();
        let mut oracle: Vec<(f64, String)> = logits.iter().cloned().zip(cands.iter().map(|c| c.passage_id.clone())).collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let got: Vec<String> = out.iter().map(|c| c.passage_id.clone()).collect();
        assert_eq!(got, oracle.into_iter().map(|x| x.1).collect::<Vec<_>>());
        let squashed: Vec<f64> = logits.iter().map(|l| l.powi(3) + 2.0 * l).collect();
        let again = order_candidates(&cands, &squashed, 20).unwrap();
        assert_eq!(got, again.iter().map(|c| c.passage_id.clone()).collect::<Vec<_>>());
        let top = order_candidates(&cands, &logits, 5).unwrap();
        assert_eq!(top.len(), 5);
        assert_eq!(top[..], out[..5]);
    }
}
