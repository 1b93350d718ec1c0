use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use candle_nn::Optimizer;
use log::info;
use serde::{Deserialize, Serialize};

use super::loss::{infonce_batch, Similarity};
use super::model::{CrossEncoder, PairInput};
use super::sampler::NegativeSampler;
use crate::corpus::{Corpus, GroundedExample};
use crate::error::{Error, Result};
use crate::evalkit::recall_at_k;
use crate::jsonl;
use crate::nn::optim::{adamw, epoch_order};
use crate::retriever::{BiEncoder, DenseIndex, RetrievalResult};

pub const CHECKPOINT_NAME: &str = "re3g.reranker.ckpt";
pub const POOLS_FILE: &str = "pools.jsonl";

pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join(CHECKPOINT_NAME)
}

/// Retriever candidates for one training example, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pool {
    pub example_id: String,
    pub candidate_passage_ids: Vec<String>,
}

/// Top-`pool_size` retriever candidates for every example, computed once
/// against a frozen index.
pub fn build_pools(
    retriever: &BiEncoder,
    index: &DenseIndex,
    examples: &[GroundedExample],
    pool_size: usize,
) -> Result<Vec<Pool>> {
    examples
        .iter()
        .map(|ex| {
            Ok(Pool {
                example_id: ex.example_id.clone(),
                candidate_passage_ids: retriever
                    .retrieve(&ex.context, pool_size, index)?
                    .into_iter()
                    .map(|r| r.passage_id)
                    .collect(),
            })
        })
        .collect()
}

pub fn write_pools(path: &Path, pools: &[Pool]) -> Result<()> {
    jsonl::write(path, pools)
}

pub fn read_pools(path: &Path) -> Result<HashMap<String, Vec<String>>> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "retriever pools {} not found",
            path.display()
        )));
    }
    let pools: Vec<Pool> = jsonl::read(path)?;
    Ok(pools
        .into_iter()
        .map(|p| (p.example_id, p.candidate_passage_ids))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankerTrainConfig {
    pub epochs: usize,
    /// Examples per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub tau: f64,
    pub similarity: Similarity,
    pub pool_size: usize,
    pub n_negatives: usize,
    /// Pool prefix reranked when measuring dev recall.
    pub eval_k: usize,
    pub max_steps: Option<usize>,
}

impl Default for RerankerTrainConfig {
    fn default() -> Self {
        RerankerTrainConfig {
            epochs: 5,
            batch_size: 8,
            lr: 1e-3,
            seed: 17,
            tau: 0.07,
            similarity: Similarity::Logit,
            pool_size: 100,
            n_negatives: 30,
            eval_k: 20,
            max_steps: None,
        }
    }
}

impl RerankerTrainConfig {
    pub fn sampler(&self) -> NegativeSampler {
        NegativeSampler {
            pool_size: self.pool_size,
            n_negatives: self.n_negatives,
            seed: self.seed,
        }
    }
}

pub struct RerankerData<'a> {
    pub corpus: &'a Corpus,
    pub train: &'a [GroundedExample],
    pub dev: &'a [GroundedExample],
    /// example id → retriever candidates, covering train and dev.
    pub pools: &'a HashMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankerEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub steps: usize,
    /// Share of examples whose negative set changed since the previous epoch.
    pub fresh_negative_fraction: f64,
    pub dev: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankerReport {
    pub epochs: Vec<RerankerEpoch>,
}

fn text<'c>(corpus: &'c Corpus, id: &str) -> Result<&'c str> {
    corpus
        .passage(id)
        .map(|p| p.text.as_str())
        .ok_or_else(|| Error::UnknownId(id.to_string()))
}

fn pool_of<'p>(pools: &'p HashMap<String, Vec<String>>, ex: &GroundedExample) -> Result<&'p [String]> {
    pools
        .get(&ex.example_id)
        .map(Vec::as_slice)
        .ok_or_else(|| Error::MissingPrerequisite(format!("no retriever pool for example {}", ex.example_id)))
}

/// InfoNCE over a batch: each positive of each example against that
/// example's sampled negatives, summed, divided by the number of examples.
pub fn batch_loss(
    model: &CrossEncoder,
    corpus: &Corpus,
    batch: &[(&GroundedExample, Vec<String>)],
    cfg: &RerankerTrainConfig,
) -> Result<Tensor> {
    let mut inputs: Vec<PairInput> = Vec::new();
    let mut rows: Vec<Vec<u32>> = Vec::new();
    for (ex, negatives) in batch {
        let ctx = crate::corpus::serialize_history(&ex.context, model.cfg.encoder.max_len);
        let neg_start = inputs.len() as u32;
        for n in negatives {
            inputs.push(model.pair_input(text(corpus, n)?, &ctx)?);
        }
        let neg_idx: Vec<u32> = (neg_start..inputs.len() as u32).collect();
        for p in &ex.positive_passage_ids {
            let pi = inputs.len() as u32;
            inputs.push(model.pair_input(text(corpus, p)?, &ctx)?);
            let mut row = vec![pi];
            row.extend(&neg_idx);
            rows.push(row);
        }
    }
    let width = rows.iter().map(Vec::len).max().unwrap_or(1);
    let mut gather = Vec::with_capacity(rows.len() * width);
    let mut valid = Vec::with_capacity(rows.len() * width);
    for row in &rows {
        for j in 0..width {
            gather.push(row.get(j).copied().unwrap_or(row[0]));
            valid.push(if j < row.len() { 1f32 } else { 0.0 });
        }
    }
    let logits = model.logits(&inputs)?;
    let sims = match cfg.similarity {
        Similarity::Logit => logits,
        Similarity::Probability => candle_nn::ops::sigmoid(&logits)?,
    };
    let device = sims.device().clone();
    let gather = Tensor::from_vec(gather, rows.len() * width, &device)?;
    let table = sims.index_select(&gather, 0)?.reshape((rows.len(), width))?;
    let valid = Tensor::from_vec(valid, (rows.len(), width), &device)?;
    let loss = infonce_batch(&table, Some(&valid), cfg.tau)?;
    Ok((loss / batch.len() as f64)?)
}

/// Reranks the first `k` pool entries of each example and reports recall
/// before (pool order) and after reranking.
pub fn dev_metrics(
    model: &CrossEncoder,
    corpus: &Corpus,
    examples: &[GroundedExample],
    pools: &HashMap<String, Vec<String>>,
    k: usize,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    if examples.is_empty() {
        return Ok(out);
    }
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    for ex in examples {
        let pool = pool_of(pools, ex)?;
        let cands: Vec<RetrievalResult> = pool
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, id)| RetrievalResult {
                passage_id: id.clone(),
                retriever_score: 0.0,
                rank: i + 1,
            })
            .collect();
        let ctx = crate::corpus::serialize_history(&ex.context, model.cfg.encoder.max_len);
        let reranked: Vec<String> = model
            .rerank(&ctx, &cands, |id| corpus.passage(id).map(|p| p.text.as_str()), cands.len())?
            .into_iter()
            .map(|c| c.passage_id)
            .collect();
        for at in [1usize, 5] {
            *sums.entry(format!("retriever_recall@{at}")).or_default() +=
                recall_at_k(&pool[..pool.len().min(k)], &ex.positive_passage_ids, at);
            *sums.entry(format!("rerank_recall@{at}")).or_default() +=
                recall_at_k(&reranked, &ex.positive_passage_ids, at);
        }
    }
    for (key, v) in sums {
        out.insert(key, v / examples.len() as f64);
    }
    Ok(out)
}

pub fn train_reranker(model: &CrossEncoder, data: &RerankerData<'_>, cfg: &RerankerTrainConfig) -> Result<RerankerReport> {
    for ex in data.train.iter().chain(data.dev) {
        pool_of(data.pools, ex)?;
    }
    let sampler = cfg.sampler();
    let mut opt = adamw(model.params().all_vars(), cfg.lr)?;
    let mut report = RerankerReport { epochs: Vec::new() };
    let mut previous: HashMap<&str, Vec<String>> = HashMap::new();
    let mut total_steps = 0usize;
    for epoch in 1..=cfg.epochs {
        if cfg.max_steps.is_some_and(|m| total_steps >= m) {
            break;
        }
        let order = epoch_order(data.train.len(), cfg.seed, epoch);
        let mut total = 0.0;
        let mut steps = 0;
        let mut fresh = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            if cfg.max_steps.is_some_and(|m| total_steps >= m) {
                break;
            }
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let ex = &data.train[i];
                let negs = sampler.sample(pool_of(data.pools, ex)?, &ex.positive_passage_ids, epoch, &ex.example_id);
                if previous.get(ex.example_id.as_str()) != Some(&negs) {
                    fresh += 1;
                }
                previous.insert(&ex.example_id, negs.clone());
                batch.push((ex, negs));
            }
            let loss = batch_loss(model, data.corpus, &batch, cfg)?;
            opt.backward_step(&loss)?;
            total += loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            steps += 1;
            total_steps += 1;
        }
        let dev = dev_metrics(model, data.corpus, data.dev, data.pools, cfg.eval_k)?;
        let loss = if steps > 0 { total / steps as f64 } else { 0.0 };
        info!("reranker epoch {epoch}: loss {loss:.4} dev {dev:?}");
        report.epochs.push(RerankerEpoch {
            epoch,
            loss,
            steps,
            fresh_negative_fraction: fresh as f64 / data.train.len().max(1) as f64,
            dev,
        });
    }
    Ok(report)
}
