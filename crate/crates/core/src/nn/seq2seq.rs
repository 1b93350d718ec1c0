//! Encoder-decoder transformer with a copy (pointer) head.
//!
//! The output distribution mixes the vocabulary softmax with the copy
//! attention over source tokens, gated per step; the whole input is one flat
//! sequence, so evidence passages interact in encoder self-attention.

use candle_core::{DType, Module, Tensor, D};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};

use super::layers::{causal_bias, linear, Batch, DecoderLayer, EncoderConfig, LayerNorm, TextEncoder};
use super::params::Scope;
use super::vocab::{BOS, EOS, PAD};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seq2SeqConfig {
    pub encoder: EncoderConfig,
    pub n_dec_layers: usize,
    pub max_target_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_len: usize,
    /// Hypotheses are ranked by `logprob / len^length_penalty`.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 4,
            max_len: 128,
            length_penalty: 1.0,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        DecodeConfig {
            beam_size: 1,
            max_len,
            length_penalty: 1.0,
        }
    }
}

pub struct Seq2Seq {
    encoder: TextEncoder,
    layers: Vec<DecoderLayer>,
    ln_f: LayerNorm,
    out: Linear,
    copy_q: Linear,
    copy_k: Linear,
    gate: Linear,
    pub cfg: Seq2SeqConfig,
}

/// Encoded source side, reusable across decoding steps.
pub struct Encoded {
    memory: Tensor,
    bias: Tensor,
    copy_bias: Tensor,
    onehot: Tensor,
}

impl Seq2Seq {
    pub fn new(scope: &Scope<'_>, cfg: &Seq2SeqConfig) -> Result<Self> {
        let d = cfg.encoder.d_model;
        let layers = (0..cfg.n_dec_layers)
            .map(|i| {
                DecoderLayer::new(
                    &scope.pp(&format!("dec{i}")),
                    d,
                    cfg.encoder.n_heads,
                    cfg.encoder.d_ff,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Seq2Seq {
            encoder: TextEncoder::new(&scope.pp("enc"), &cfg.encoder)?,
            layers,
            ln_f: LayerNorm::new(&scope.pp("dec_ln"), d)?,
            out: linear(&scope.pp("out"), d, cfg.encoder.vocab_size)?,
            copy_q: linear(&scope.pp("copy_q"), d, d)?,
            copy_k: linear(&scope.pp("copy_k"), d, d)?,
            gate: linear(&scope.pp("gate"), 2 * d, 1)?,
            cfg: cfg.clone(),
        })
    }

    pub fn max_source_len(&self) -> usize {
        self.cfg.encoder.max_len
    }

    pub fn encode(&self, sources: &[Vec<u32>]) -> Result<Encoded> {
        let max = self.max_source_len();
        let clipped: Vec<Vec<u32>> = sources
            .iter()
            .map(|s| s[..s.len().min(max)].to_vec())
            .collect();
        let device = self.encoder.tok.embeddings().device().clone();
        let batch = Batch::new(&clipped, PAD, &device)?;
        let memory = self.encoder.forward(&batch, &[])?;
        let (b, s) = batch.ids.dims2()?;
        let vocab = Tensor::arange(0u32, self.cfg.encoder.vocab_size as u32, &device)?
            .reshape((1, 1, self.cfg.encoder.vocab_size))?;
        let onehot = batch
            .ids
            .unsqueeze(2)?
            .broadcast_eq(&vocab)?
            .to_dtype(DType::F32)?;
        Ok(Encoded {
            memory,
            copy_bias: batch.bias.reshape((b, 1, s))?,
            bias: batch.bias,
            onehot,
        })
    }

    /// Log-probabilities `(B, T, V)` of the next token at every target position.
    pub fn log_probs(&self, enc: &Encoded, targets_in: &Tensor) -> Result<Tensor> {
        let (_, t) = targets_in.dims2()?;
        if t > self.cfg.encoder.max_len {
            return Err(Error::invalid(format!("target length {t} exceeds position table")));
        }
        let device = targets_in.device();
        let mut x = self
            .encoder
            .embed_tokens(targets_in)?
            .broadcast_add(&self.encoder.positions(t)?)?;
        let self_bias = causal_bias(t, device)?;
        for layer in &self.layers {
            x = layer.forward(&x, &enc.memory, &self_bias, &enc.bias)?;
        }
        let h = self.ln_f.forward(&x)?;

        let vocab_p = candle_nn::ops::softmax(&self.out.forward(&h)?, D::Minus1)?;
        let d = self.cfg.encoder.d_model as f64;
        let q = self.copy_q.forward(&h)?;
        let k = self.copy_k.forward(&enc.memory)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / d.sqrt())?.broadcast_add(&enc.copy_bias)?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let copy_p = attn.matmul(&enc.onehot)?;
        let context = attn.matmul(&enc.memory)?;
        let g = candle_nn::ops::sigmoid(&self.gate.forward(&Tensor::cat(&[&h, &context], 2)?)?)?;
        let mixed = (vocab_p.broadcast_mul(&g)? + copy_p.broadcast_mul(&g.affine(-1.0, 1.0)?)?)?;
        Ok(mixed.clamp(1e-10, 1.0)?.log()?)
    }

    /// Summed negative log-likelihood of each target (plus EOS) given its source, shape `(B,)`,
    /// and the number of scored tokens.
    pub fn sequence_nll(&self, sources: &[Vec<u32>], targets: &[Vec<u32>]) -> Result<(Tensor, usize)> {
        if sources.len() != targets.len() {
            return Err(Error::LengthMismatch {
                left: sources.len(),
                right: targets.len(),
            });
        }
        let enc = self.encode(sources)?;
        let max_t = self.cfg.max_target_len;
        let mut ins = Vec::with_capacity(targets.len());
        let mut outs = Vec::with_capacity(targets.len());
        for t in targets {
            let body = &t[..t.len().min(max_t)];
            let mut i = vec![BOS];
            i.extend_from_slice(body);
            let mut o = body.to_vec();
            o.push(EOS);
            ins.push(i);
            outs.push(o);
        }
        let device = enc.memory.device().clone();
        let tin = Batch::new(&ins, PAD, &device)?;
        let tout = Batch::new(&outs, PAD, &device)?;
        let lp = self.log_probs(&enc, &tin.ids)?;
        let picked = lp.gather(&tout.ids.unsqueeze(2)?, 2)?.squeeze(2)?;
        let nll = (picked * &tout.mask)?.sum(1)?.neg()?;
        let count = tout.lengths.iter().sum();
        Ok((nll, count))
    }

    /// Beam search (greedy when `beam_size == 1`). Returns the best hypothesis without BOS/EOS.
    pub fn generate(&self, source: &[u32], cfg: &DecodeConfig) -> Result<Vec<u32>> {
        let beam = cfg.beam_size.max(1);
        let max_len = cfg.max_len.min(self.cfg.encoder.max_len - 1);
        let enc1 = self.encode(&[source.to_vec()])?;
        let score_of = |lp: f64, len: usize| lp / (len.max(1) as f64).powf(cfg.length_penalty);

        let mut alive: Vec<(Vec<u32>, f64)> = vec![(vec![BOS], 0.0)];
        let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
        for _ in 0..max_len {
            if alive.is_empty() || finished.len() >= beam {
                break;
            }
            let n = alive.len();
            let enc = Encoded {
                memory: enc1.memory.repeat((n, 1, 1))?,
                bias: enc1.bias.repeat((n, 1, 1, 1))?,
                copy_bias: enc1.copy_bias.repeat((n, 1, 1))?,
                onehot: enc1.onehot.repeat((n, 1, 1))?,
            };
            let seqs: Vec<Vec<u32>> = alive.iter().map(|(s, _)| s.clone()).collect();
            let t = seqs[0].len();
            let ids = Tensor::from_vec(seqs.concat(), (n, t), enc.memory.device())?;
            let lp = self.log_probs(&enc, &ids)?.narrow(1, t - 1, 1)?.squeeze(1)?;
            let rows: Vec<Vec<f32>> = lp.to_vec2()?;

            let mut cands: Vec<(usize, u32, f64)> = Vec::new();
            for (bi, row) in rows.iter().enumerate() {
                let mut idx: Vec<u32> = (0..row.len() as u32).collect();
                idx.sort_by(|&a, &b| {
                    row[b as usize]
                        .total_cmp(&row[a as usize])
                        .then(a.cmp(&b))
                });
                for &tok in idx.iter().take(beam) {
                    cands.push((bi, tok, alive[bi].1 + row[tok as usize] as f64));
                }
            }
            cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
            let mut next = Vec::new();
            for (bi, tok, lp) in cands {
                if next.len() >= beam {
                    break;
                }
                let mut seq = alive[bi].0.clone();
                if tok == EOS {
                    let len = seq.len();
                    finished.push((seq, score_of(lp, len)));
                    if finished.len() >= beam {
                        break;
                    }
                } else {
                    seq.push(tok);
                    next.push((seq, lp));
                }
            }
            alive = next;
        }
        let mut pool: Vec<(Vec<u32>, f64)> = finished;
        pool.extend(alive.into_iter().map(|(s, lp)| {
            let len = s.len();
            (s, score_of(lp, len))
        }));
        pool.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let best = pool
            .into_iter()
            .next()
            .ok_or_else(|| Error::Decode {
                message: "no hypothesis".into(),
                raw: String::new(),
            })?
            .0;
        Ok(best[1..].to_vec())
    }
}
