//! Answer, grounding, and retrieval metrics plus run reports.
//!
//! Token F1 and ROUGE-L use SQuAD-style normalization; BLEU keeps articles.

mod metrics;
mod report;

pub use metrics::{
    bleu_tokens, exact_match, mrr, normalize, recall_at_k, reciprocal_rank, rouge_l, s_bleu,
    token_f1,
};
pub use report::{evaluate, evaluate_run, EvalReport, ExampleScores, Prediction, METRIC_KEYS};
