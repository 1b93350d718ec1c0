//! Transformer building blocks made of differentiable primitive ops only.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Embedding, Linear};
use serde::{Deserialize, Serialize};

use super::params::{Init, Scope};
use crate::error::Result;

pub const NEG_INF: f64 = -1e9;

pub fn linear(scope: &Scope<'_>, d_in: usize, d_out: usize) -> Result<Linear> {
    let bound = 1.0 / (d_in as f64).sqrt();
    let w = scope.get("weight", &[d_out, d_in], Init::Uniform(bound))?;
    let b = scope.get("bias", &[d_out], Init::Zeros)?;
    Ok(Linear::new(w, Some(b)))
}

pub fn embedding(scope: &Scope<'_>, n: usize, d: usize) -> Result<Embedding> {
    let w = scope.get("weight", &[n, d], Init::Normal(0.02_f64.max(1.0 / (d as f64).sqrt())))?;
    Ok(Embedding::new(w, d))
}

pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(scope: &Scope<'_>, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: scope.get("gamma", &[d], Init::Ones)?,
            beta: scope.get("beta", &[d], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    d_head: usize,
}

impl Attention {
    pub fn new(scope: &Scope<'_>, d: usize, heads: usize) -> Result<Self> {
        Ok(Attention {
            q: linear(&scope.pp("q"), d, d)?,
            k: linear(&scope.pp("k"), d, d)?,
            v: linear(&scope.pp("v"), d, d)?,
            o: linear(&scope.pp("o"), d, d)?,
            heads,
            d_head: d / heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        Ok(x
            .reshape((b, t, self.heads, self.d_head))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `bias` broadcasts to `(B, H, Tq, Tk)`: 0 for visible keys, a large negative otherwise.
    pub fn forward(&self, x: &Tensor, kv: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (b, tq, d) = x.dims3()?;
        let q = self.split(&self.q.forward(x)?)?;
        let k = self.split(&self.k.forward(kv)?)?;
        let v = self.split(&self.v.forward(kv)?)?;
        let scale = 1.0 / (self.d_head as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?.broadcast_add(bias)?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, tq, d))?;
        Ok(self.o.forward(&out)?)
    }
}

pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(scope: &Scope<'_>, d: usize, d_ff: usize) -> Result<Self> {
        Ok(FeedForward {
            up: linear(&scope.pp("up"), d, d_ff)?,
            down: linear(&scope.pp("down"), d_ff, d)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.down.forward(&self.up.forward(x)?.relu()?)?)
    }
}

/// Pre-norm self-attention block.
pub struct EncoderLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(scope: &Scope<'_>, d: usize, heads: usize, d_ff: usize) -> Result<Self> {
        Ok(EncoderLayer {
            ln1: LayerNorm::new(&scope.pp("ln1"), d)?,
            attn: Attention::new(&scope.pp("attn"), d, heads)?,
            ln2: LayerNorm::new(&scope.pp("ln2"), d)?,
            ff: FeedForward::new(&scope.pp("ff"), d, d_ff)?,
        })
    }

    pub fn forward(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, bias)?)?;
        let h = self.ln2.forward(&x)?;
        Ok((&x + self.ff.forward(&h)?)?)
    }
}

/// Pre-norm causal self-attention, cross-attention, feed-forward.
pub struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross: Attention,
    ln3: LayerNorm,
    ff: FeedForward,
}

impl DecoderLayer {
    pub fn new(scope: &Scope<'_>, d: usize, heads: usize, d_ff: usize) -> Result<Self> {
        Ok(DecoderLayer {
            ln1: LayerNorm::new(&scope.pp("ln1"), d)?,
            self_attn: Attention::new(&scope.pp("self_attn"), d, heads)?,
            ln2: LayerNorm::new(&scope.pp("ln2"), d)?,
            cross: Attention::new(&scope.pp("cross"), d, heads)?,
            ln3: LayerNorm::new(&scope.pp("ln3"), d)?,
            ff: FeedForward::new(&scope.pp("ff"), d, d_ff)?,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        memory: &Tensor,
        self_bias: &Tensor,
        cross_bias: &Tensor,
    ) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.self_attn.forward(&h, &h, self_bias)?)?;
        let h = self.ln2.forward(&x)?;
        let x = (&x + self.cross.forward(&h, memory, cross_bias)?)?;
        let h = self.ln3.forward(&x)?;
        Ok((&x + self.ff.forward(&h)?)?)
    }
}

/// Fixed sinusoidal position table `(max_len, d)`.
pub fn sinusoidal_positions(max_len: usize, d: usize, device: &Device) -> Result<Tensor> {
    let mut table = vec![0f32; max_len * d];
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = pos as f64 * freq;
            table[pos * d + 2 * i] = angle.sin() as f32;
            table[pos * d + 2 * i + 1] = angle.cos() as f32;
        }
    }
    Ok(Tensor::from_vec(table, (max_len, d), device)?)
}

/// `(T, T)` additive mask hiding future positions.
pub fn causal_bias(t: usize, device: &Device) -> Result<Tensor> {
    let v: Vec<f32> = (0..t * t)
        .map(|k| if k % t > k / t { NEG_INF as f32 } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(v, (t, t), device)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    /// Sizes of extra categorical per-token feature embeddings, added to the token embedding.
    #[serde(default)]
    pub feature_sizes: Vec<usize>,
}

/// A padded batch of token id sequences.
pub struct Batch {
    /// `(B, T)` u32
    pub ids: Tensor,
    /// `(B, T)` f32, 1 for real tokens
    pub mask: Tensor,
    /// `(B, 1, 1, T)` additive key mask
    pub bias: Tensor,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn new(seqs: &[Vec<u32>], pad_id: u32, device: &Device) -> Result<Self> {
        let b = seqs.len();
        let t = seqs.iter().map(Vec::len).max().unwrap_or(1).max(1);
        let mut ids = vec![pad_id; b * t];
        let mut mask = vec![0f32; b * t];
        for (i, s) in seqs.iter().enumerate() {
            ids[i * t..i * t + s.len()].copy_from_slice(s);
            mask[i * t..i * t + s.len()].iter_mut().for_each(|m| *m = 1.0);
        }
        let mask = Tensor::from_vec(mask, (b, t), device)?;
        let bias = ((mask.ones_like()? - &mask)? * NEG_INF)?.reshape((b, 1, 1, t))?;
        Ok(Batch {
            ids: Tensor::from_vec(ids, (b, t), device)?,
            mask,
            bias,
            lengths: seqs.iter().map(Vec::len).collect(),
        })
    }

    /// Per-token categorical features padded like the ids.
    pub fn features(seqs: &[Vec<u32>], device: &Device) -> Result<Tensor> {
        let b = seqs.len();
        let t = seqs.iter().map(Vec::len).max().unwrap_or(1).max(1);
        let mut v = vec![0u32; b * t];
        for (i, s) in seqs.iter().enumerate() {
            v[i * t..i * t + s.len()].copy_from_slice(s);
        }
        Ok(Tensor::from_vec(v, (b, t), device)?)
    }
}

/// Token + position (+ feature) embeddings followed by a stack of encoder layers.
pub struct TextEncoder {
    pub(crate) tok: Embedding,
    features: Vec<Embedding>,
    layers: Vec<EncoderLayer>,
    ln_f: LayerNorm,
    pos: Tensor,
    d: usize,
    pub cfg: EncoderConfig,
}

impl TextEncoder {
    pub fn new(scope: &Scope<'_>, cfg: &EncoderConfig) -> Result<Self> {
        let tok = embedding(&scope.pp("tok"), cfg.vocab_size, cfg.d_model)?;
        let features = cfg
            .feature_sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| embedding(&scope.pp(&format!("feat{i}")), n, cfg.d_model))
            .collect::<Result<Vec<_>>>()?;
        let layers = (0..cfg.n_layers)
            .map(|i| EncoderLayer::new(&scope.pp(&format!("layer{i}")), cfg.d_model, cfg.n_heads, cfg.d_ff))
            .collect::<Result<Vec<_>>>()?;
        Ok(TextEncoder {
            tok,
            features,
            layers,
            ln_f: LayerNorm::new(&scope.pp("ln_f"), cfg.d_model)?,
            pos: sinusoidal_positions(cfg.max_len, cfg.d_model, scope.device())?,
            d: cfg.d_model,
            cfg: cfg.clone(),
        })
    }

    pub fn embed_tokens(&self, ids: &Tensor) -> Result<Tensor> {
        Ok((self.tok.forward(ids)? * (self.d as f64).sqrt())?)
    }

    pub fn positions(&self, t: usize) -> Result<Tensor> {
        Ok(self.pos.narrow(0, 0, t)?)
    }

    /// `(B, T, d)` hidden states.
    pub fn forward(&self, batch: &Batch, features: &[Tensor]) -> Result<Tensor> {
        let (_, t) = batch.ids.dims2()?;
        let mut x = self.embed_tokens(&batch.ids)?.broadcast_add(&self.positions(t)?)?;
        for (emb, f) in self.features.iter().zip(features) {
            x = (x + emb.forward(f)?)?;
        }
        for layer in &self.layers {
            x = layer.forward(&x, &batch.bias)?;
        }
        self.ln_f.forward(&x)
    }
}

/// Masked mean over the time axis: `(B, T, d)` -> `(B, d)`.
pub fn mean_pool(hidden: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let m = mask.unsqueeze(2)?.to_dtype(hidden.dtype())?;
    let summed = hidden.broadcast_mul(&m)?.sum(1)?;
    let counts = m.sum(1)?.clamp(1.0, f64::MAX)?;
    Ok(summed.broadcast_div(&counts)?)
}

pub fn to_f32_vec(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}
