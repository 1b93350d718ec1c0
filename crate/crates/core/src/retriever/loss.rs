//! Retriever training objectives over score tensors.
//!
//! Every function takes raw scores (dot products) and returns a summed scalar
//! so the batch loss matches the per-example sums in the objective; trainers
//! divide by the batch size before stepping.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `log Σ exp(x)` along the last axis, stabilized by the (detached) row max.
pub fn logsumexp_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    Ok(shifted.exp()?.sum_keepdim(D::Minus1)?.log()?.add(&max)?.squeeze(D::Minus1)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let lse = logsumexp_last(x)?.unsqueeze(D::Minus1)?;
    Ok(x.broadcast_sub(&lse)?)
}

/// Contrastive NLL: `-Σ_b log softmax(scores_b)[positive_b]`.
///
/// `scores` is `(B, N)`. `valid`, when given, is a `(B, N)` 0/1 mask of the
/// candidates each row may normalize over (its positive must be valid).
pub fn contrastive_nll(scores: &Tensor, positive: &[usize], valid: Option<&Tensor>) -> Result<Tensor> {
    let (b, n) = scores.dims2()?;
    if positive.len() != b {
        return Err(Error::LengthMismatch {
            left: positive.len(),
            right: b,
        });
    }
    if let Some(&bad) = positive.iter().find(|&&p| p >= n) {
        return Err(Error::invalid(format!("positive column {bad} out of range {n}")));
    }
    let masked = match valid {
        Some(m) => {
            let penalty = (m.ones_like()? - m)?.affine(-1e9, 0.0)?.to_dtype(scores.dtype())?;
            (scores + penalty)?
        }
        None => scores.clone(),
    };
    let lse = logsumexp_last(&masked)?;
    let idx = Tensor::from_vec(
        positive.iter().map(|&p| p as u32).collect::<Vec<_>>(),
        (b, 1),
        scores.device(),
    )?;
    let pos = scores.gather(&idx, 1)?.squeeze(1)?;
    Ok((lse - pos)?.sum_all()?)
}

/// Marginal NLL of the gold answer over retrieved candidates:
/// `-Σ_b log Σ_k softmax(scores_b)_k · exp(loglik_bk)`.
///
/// Both inputs are `(B, K)`; `gen_loglik` holds `log P_gen(a | C, p_k)`.
pub fn marginal_nll(scores: &Tensor, gen_loglik: &Tensor) -> Result<Tensor> {
    if scores.dims() != gen_loglik.dims() {
        return Err(Error::LengthMismatch {
            left: scores.elem_count(),
            right: gen_loglik.elem_count(),
        });
    }
    let joint = (log_softmax_last(scores)? + gen_loglik)?;
    Ok(logsumexp_last(&joint)?.neg()?.sum_all()?)
}

/// Which way the phase-3 divergence points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(P_rerank ‖ P_ret)`: teacher distribution as the fixed target.
    #[default]
    TeacherStudent,
    /// `KL(P_ret ‖ P_rerank)`.
    StudentTeacher,
}

/// Distillation loss `Σ_b KL` between `softmax(teacher / temperature)` (no
/// gradient) and `softmax(student)`, both `(B, K)`.
pub fn distill_kl(
    teacher_scores: &Tensor,
    student_scores: &Tensor,
    teacher_temperature: f64,
    direction: KlDirection,
) -> Result<Tensor> {
    if teacher_scores.dims() != student_scores.dims() {
        return Err(Error::LengthMismatch {
            left: teacher_scores.elem_count(),
            right: student_scores.elem_count(),
        });
    }
    if teacher_temperature <= 0.0 {
        return Err(Error::invalid("teacher temperature must be positive"));
    }
    let t_log = log_softmax_last(&(teacher_scores.detach() / teacher_temperature)?)?;
    let s_log = log_softmax_last(student_scores)?;
    let kl = match direction {
        KlDirection::TeacherStudent => (t_log.exp()? * (&t_log - &s_log)?)?,
        KlDirection::StudentTeacher => (s_log.exp()? * (&s_log - &t_log)?)?,
    };
    Ok(kl.sum_all()?)
}

/// KL between two explicit distributions given as `(B, K)` probabilities.
pub fn kl_from_probs(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    if p.dims() != q.dims() {
        return Err(Error::LengthMismatch {
            left: p.elem_count(),
            right: q.elem_count(),
        });
    }
    // 0 · log 0 = 0
    let p_safe = p.clamp(1e-300, 1.0)?;
    Ok((p * (p_safe.log()? - q.log()?)?)?.sum_all()?)
}
