use candle_core::Tensor;
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retriever::loss::contrastive_nll;

/// Which reranker output the InfoNCE similarity is taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    /// Pre-sigmoid logit.
    #[default]
    Logit,
    /// Post-sigmoid score in (0, 1).
    Probability,
}

/// `-log exp(s⁺/τ) / Σ_{p ∈ {p⁺} ∪ negs} exp(s_p/τ)` for one positive.
///
/// `scores` is 1-D with the positive first. Zero negatives give a zero loss.
pub fn infonce_loss(scores: &Tensor, tau: f64) -> Result<Tensor> {
    let n = scores.dims1()?;
    let batch = scores.reshape((1, n))?;
    infonce_batch(&batch, None, tau)
}

/// Summed InfoNCE over rows of `(R, 1 + N)` scores whose column 0 is the
/// positive. `valid` masks padding columns for rows with fewer negatives.
pub fn infonce_batch(scores: &Tensor, valid: Option<&Tensor>, tau: f64) -> Result<Tensor> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let (r, n) = scores.dims2()?;
    if n == 1 {
        warn!("InfoNCE called without negatives; loss is zero");
        return Ok(scores.zeros_like()?.sum_all()?);
    }
    contrastive_nll(&(scores / tau)?, &vec![0; r], valid)
}
