//! Three-phase retriever training.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{Tensor, Var};
use candle_nn::Optimizer;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::encoder::{BiEncoder, BiEncoderConfig, Tower, CTX_PREFIX};
use super::index::DenseIndex;
use super::loss::{contrastive_nll, distill_kl, marginal_nll, KlDirection};
use super::vanilla::VanillaGenerator;
use crate::corpus::{Corpus, GroundedExample};
use crate::error::{Error, Result};
use crate::evalkit::recall_at_k;
use crate::nn::optim::{adamw, epoch_order};
use crate::nn::vocab::Vocab;

/// Relevance scores from a stronger model, used as the phase-3 target.
pub trait Teacher {
    /// One raw score per passage for the given query string.
    fn scores(&self, query: &str, passages: &[&str]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrieverTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stop after this many optimizer steps, whatever the epoch count.
    pub max_steps: Option<usize>,
    /// Candidates per context in phases 2 and 3.
    pub k_train: usize,
    pub teacher_temperature: f64,
    pub kl_direction: KlDirection,
    /// Dev examples whose KL is tracked in phase 3.
    pub kl_dev_examples: usize,
    pub vanilla_max_target_len: usize,
}

impl Default for RetrieverTrainConfig {
    fn default() -> Self {
        RetrieverTrainConfig {
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            seed: 13,
            max_steps: None,
            k_train: 24,
            teacher_temperature: 1.0,
            kl_direction: KlDirection::TeacherStudent,
            kl_dev_examples: 32,
            vanilla_max_target_len: 48,
        }
    }
}

pub struct RetrieverData<'a> {
    pub corpus: &'a Corpus,
    pub train: &'a [GroundedExample],
    pub dev: &'a [GroundedExample],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub steps: usize,
    pub dev_recall: BTreeMap<String, f64>,
    /// Phase 3 only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_kl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: u8,
    /// Per-step training losses (batch means).
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochLog>,
    /// Phase 3: held-out KL before any update.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_dev_kl: Option<f64>,
}

pub fn checkpoint_path(dir: &Path, phase: u8) -> PathBuf {
    dir.join(format!("re3g.retriever.phase{phase}.ckpt"))
}

fn passage_text<'c>(corpus: &'c Corpus, id: &str) -> Result<&'c str> {
    corpus
        .passage(id)
        .map(|p| p.text.as_str())
        .ok_or_else(|| Error::UnknownId(id.to_string()))
}

fn check_examples(corpus: &Corpus, examples: &[GroundedExample]) -> Result<()> {
    for ex in examples {
        if ex.positive_passage_ids.is_empty() {
            return Err(Error::invalid(format!("example {} has no positive passage", ex.example_id)));
        }
        for id in ex.positive_passage_ids.iter().chain(&ex.hard_negative_ids) {
            passage_text(corpus, id)?;
        }
    }
    Ok(())
}

/// Mean recall@{1,5,10} and MRR of `model` on `examples` against `index`.
pub fn dev_recall(model: &BiEncoder, index: &DenseIndex, examples: &[GroundedExample]) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    if examples.is_empty() {
        return Ok(out);
    }
    let ks = [1usize, 5, 10];
    let mut sums = [0.0; 3];
    let mut rr = 0.0;
    for ex in examples {
        let ranked: Vec<String> = model
            .retrieve(&ex.context, 10, index)?
            .into_iter()
            .map(|r| r.passage_id)
            .collect();
        for (s, &k) in sums.iter_mut().zip(&ks) {
            *s += recall_at_k(&ranked, &ex.positive_passage_ids, k);
        }
        rr += crate::evalkit::reciprocal_rank(&ranked, &ex.positive_passage_ids);
    }
    let n = examples.len() as f64;
    for (s, k) in sums.iter().zip(ks) {
        out.insert(format!("recall@{k}"), s / n);
    }
    out.insert("mrr@10".into(), rr / n);
    Ok(out)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Phase 1 batch loss: contrastive NLL with in-batch and hard negatives,
/// one term per positive, averaged over examples.
pub fn phase1_batch_loss(model: &BiEncoder, corpus: &Corpus, batch: &[&GroundedExample]) -> Result<Tensor> {
    let mut cols: Vec<&str> = Vec::new();
    let mut col_of: HashMap<&str, usize> = HashMap::new();
    for ex in batch {
        for id in ex.positive_passage_ids.iter().chain(&ex.hard_negative_ids) {
            if !col_of.contains_key(id.as_str()) {
                col_of.insert(id, cols.len());
                cols.push(id);
            }
        }
    }
    let n = cols.len();
    let mut row_example = Vec::new();
    let mut positives = Vec::new();
    let mut valid = Vec::new();
    for (e, ex) in batch.iter().enumerate() {
        if ex.positive_passage_ids.is_empty() {
            return Err(Error::invalid(format!("example {} has no positive passage", ex.example_id)));
        }
        for p in &ex.positive_passage_ids {
            let pc = col_of[p.as_str()];
            let mut mask = vec![1f32; n];
            for q in &ex.positive_passage_ids {
                let qc = col_of[q.as_str()];
                if qc != pc {
                    mask[qc] = 0.0;
                }
            }
            row_example.push(e as u32);
            positives.push(pc);
            valid.extend(mask);
        }
    }
    let queries: Vec<String> = batch.iter().map(|ex| model.query_string(&ex.context)).collect();
    let q_refs: Vec<&str> = queries.iter().map(String::as_str).collect();
    let texts = cols
        .iter()
        .map(|id| passage_text(corpus, id))
        .collect::<Result<Vec<_>>>()?;
    let ctx = model.embed(Tower::Context, &q_refs)?;
    let psg = model.embed(Tower::Passage, &texts)?;
    let device = ctx.device().clone();
    let rows = Tensor::from_vec(row_example, positives.len(), &device)?;
    let scores = ctx.index_select(&rows, 0)?.matmul(&psg.t()?)?;
    let valid = Tensor::from_vec(valid, (positives.len(), n), &device)?;
    let loss = contrastive_nll(&scores, &positives, Some(&valid))?;
    Ok((loss / batch.len() as f64)?)
}

fn budget_exhausted(cfg: &RetrieverTrainConfig, steps: usize) -> bool {
    cfg.max_steps.is_some_and(|m| steps >= m)
}

pub fn train_phase1(model: &BiEncoder, data: &RetrieverData<'_>, cfg: &RetrieverTrainConfig) -> Result<PhaseReport> {
    check_examples(data.corpus, data.train)?;
    let mut opt = adamw(model.params().all_vars(), cfg.lr)?;
    let mut report = PhaseReport {
        phase: 1,
        step_losses: Vec::new(),
        epochs: Vec::new(),
        initial_dev_kl: None,
    };
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(data.train.len(), cfg.seed, epoch);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            if budget_exhausted(cfg, report.step_losses.len()) {
                break;
            }
            let batch: Vec<&GroundedExample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let loss = phase1_batch_loss(model, data.corpus, &batch)?;
            opt.backward_step(&loss)?;
            let l = scalar(&loss)?;
            report.step_losses.push(l);
            total += l;
            steps += 1;
        }
        if steps == 0 {
            break;
        }
        let dev_recall = if data.dev.is_empty() {
            BTreeMap::new()
        } else {
            let index = model.build_index(data.corpus.passages(), None)?;
            dev_recall(model, &index, data.dev)?
        };
        info!("retriever phase 1 epoch {epoch}: loss {:.4} dev {:?}", total / steps as f64, dev_recall);
        report.epochs.push(EpochLog {
            epoch,
            loss: total / steps as f64,
            steps,
            dev_recall,
            dev_kl: None,
        });
    }
    Ok(report)
}

fn clip_k(k: usize, index: &DenseIndex) -> usize {
    if k > index.len() {
        warn!("k_train {k} exceeds index size {}; clipping", index.len());
        index.len()
    } else {
        k.max(1)
    }
}

/// Candidate passage vectors `(B, k, d)` and ids from a frozen index.
fn frozen_candidates(
    model: &BiEncoder,
    index: &DenseIndex,
    queries: &[&str],
    k: usize,
) -> Result<(Tensor, Vec<Vec<String>>)> {
    let d = index.d();
    let mut data = Vec::with_capacity(queries.len() * k * d);
    let mut ids = Vec::with_capacity(queries.len());
    for q in queries {
        let hits = model.retrieve_text(q, k, index)?;
        let mut row = Vec::with_capacity(k);
        for h in hits {
            let pos = index.position(&h.passage_id).expect("hit comes from the index");
            data.extend_from_slice(index.row(pos));
            row.push(h.passage_id);
        }
        ids.push(row);
    }
    let t = Tensor::from_vec(data, (queries.len(), k, d), model.params().device())?;
    Ok((t, ids))
}

/// `(B, d) · (B, k, d) -> (B, k)`
fn candidate_scores(ctx: &Tensor, candidates: &Tensor) -> Result<Tensor> {
    Ok(candidates.broadcast_mul(&ctx.unsqueeze(1)?)?.sum(2)?)
}

/// Phase 2 batch loss: marginal answer NLL over the top-k of a frozen index,
/// averaged over examples. Only the context tower and the vanilla generator
/// appear in the graph.
pub fn phase2_batch_loss(
    model: &BiEncoder,
    vanilla: &VanillaGenerator,
    corpus: &Corpus,
    index: &DenseIndex,
    batch: &[&GroundedExample],
    k_train: usize,
) -> Result<Tensor> {
    let k = clip_k(k_train, index);
    let queries: Vec<String> = batch.iter().map(|ex| model.query_string(&ex.context)).collect();
    let q_refs: Vec<&str> = queries.iter().map(String::as_str).collect();
    let (cands, ids) = frozen_candidates(model, index, &q_refs, k)?;
    let ctx = model.embed(Tower::Context, &q_refs)?;
    let scores = candidate_scores(&ctx, &cands)?;
    let mut pairs = Vec::with_capacity(batch.len() * k);
    let mut answers = Vec::with_capacity(batch.len() * k);
    for ((q, ex), row) in q_refs.iter().zip(batch).zip(&ids) {
        for id in row {
            pairs.push((*q, passage_text(corpus, id)?));
            answers.push(ex.gold_answer.as_str());
        }
    }
    let loglik = vanilla
        .log_likelihood(model.vocab(), &pairs, &answers)?
        .reshape((batch.len(), k))?;
    Ok((marginal_nll(&scores, &loglik)? / batch.len() as f64)?)
}

pub fn train_phase2(
    model: &BiEncoder,
    vanilla: &VanillaGenerator,
    data: &RetrieverData<'_>,
    cfg: &RetrieverTrainConfig,
) -> Result<PhaseReport> {
    check_examples(data.corpus, data.train)?;
    let index = model.build_index(data.corpus.passages(), None)?;
    let mut vars: Vec<Var> = model.params().vars_with_prefix(CTX_PREFIX);
    vars.extend(vanilla.params().all_vars());
    let mut opt = adamw(vars, cfg.lr)?;
    let mut report = PhaseReport {
        phase: 2,
        step_losses: Vec::new(),
        epochs: Vec::new(),
        initial_dev_kl: None,
    };
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(data.train.len(), cfg.seed, epoch);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            if budget_exhausted(cfg, report.step_losses.len()) {
                break;
            }
            let batch: Vec<&GroundedExample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let loss = phase2_batch_loss(model, vanilla, data.corpus, &index, &batch, cfg.k_train)?;
            opt.backward_step(&loss)?;
            let l = scalar(&loss)?;
            report.step_losses.push(l);
            total += l;
            steps += 1;
        }
        if steps == 0 {
            break;
        }
        let dev_recall = dev_recall(model, &index, data.dev)?;
        info!("retriever phase 2 epoch {epoch}: loss {:.4} dev {:?}", total / steps as f64, dev_recall);
        report.epochs.push(EpochLog {
            epoch,
            loss: total / steps as f64,
            steps,
            dev_recall,
            dev_kl: None,
        });
    }
    Ok(report)
}

/// A fixed candidate list with teacher scores, for distillation or for
/// tracking held-out KL.
pub struct KlExample {
    pub query: String,
    pub passage_texts: Vec<String>,
    pub teacher: Vec<f64>,
}

pub fn kl_examples(
    model: &BiEncoder,
    teacher: &dyn Teacher,
    corpus: &Corpus,
    index: &DenseIndex,
    examples: &[&GroundedExample],
    k: usize,
) -> Result<Vec<KlExample>> {
    let k = clip_k(k, index);
    examples
        .iter()
        .map(|ex| {
            let query = model.query_string(&ex.context);
            let passage_texts = model
                .retrieve_text(&query, k, index)?
                .iter()
                .map(|h| passage_text(corpus, &h.passage_id).map(str::to_string))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&str> = passage_texts.iter().map(String::as_str).collect();
            let teacher = teacher.scores(&query, &refs)?;
            if teacher.len() != refs.len() {
                return Err(Error::LengthMismatch {
                    left: teacher.len(),
                    right: refs.len(),
                });
            }
            Ok(KlExample {
                query,
                passage_texts,
                teacher,
            })
        })
        .collect()
}

/// Sum of per-example KL between teacher and student distributions, divided by the batch size.
pub fn phase3_batch_loss(model: &BiEncoder, batch: &[&KlExample], cfg: &RetrieverTrainConfig) -> Result<Tensor> {
    let b = batch.len();
    let k = batch[0].passage_texts.len();
    if k < 2 {
        return Err(Error::invalid("distillation needs at least two candidates"));
    }
    if let Some(bad) = batch.iter().find(|e| e.passage_texts.len() != k) {
        return Err(Error::LengthMismatch {
            left: bad.passage_texts.len(),
            right: k,
        });
    }
    let queries: Vec<&str> = batch.iter().map(|e| e.query.as_str()).collect();
    let texts: Vec<&str> = batch
        .iter()
        .flat_map(|e| e.passage_texts.iter().map(String::as_str))
        .collect();
    let ctx = model.embed(Tower::Context, &queries)?;
    let psg = model.embed(Tower::Passage, &texts)?.reshape((b, k, model.dim()))?;
    let student = candidate_scores(&ctx, &psg)?;
    let teacher: Vec<f32> = batch
        .iter()
        .flat_map(|e| e.teacher.iter().map(|&s| s as f32))
        .collect();
    let teacher = Tensor::from_vec(teacher, (b, k), ctx.device())?;
    let loss = distill_kl(&teacher, &student, cfg.teacher_temperature, cfg.kl_direction)?;
    Ok((loss / b as f64)?)
}

fn mean_kl(model: &BiEncoder, examples: &[KlExample], cfg: &RetrieverTrainConfig) -> Result<Option<f64>> {
    if examples.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for chunk in examples.chunks(16) {
        let refs: Vec<&KlExample> = chunk.iter().collect();
        total += scalar(&phase3_batch_loss(model, &refs, cfg)?.detach())? * chunk.len() as f64;
    }
    Ok(Some(total / examples.len() as f64))
}

/// Phase 3: distill the teacher's candidate distribution into both towers.
/// The index is re-encoded at every epoch boundary; held-out KL is measured on
/// candidate lists fixed before the first update.
pub fn train_phase3(
    model: &BiEncoder,
    teacher: &dyn Teacher,
    data: &RetrieverData<'_>,
    cfg: &RetrieverTrainConfig,
) -> Result<PhaseReport> {
    check_examples(data.corpus, data.train)?;
    let mut index = model.build_index(data.corpus.passages(), None)?;
    let dev_refs: Vec<&GroundedExample> = data.dev.iter().take(cfg.kl_dev_examples).collect();
    let dev_kl_set = kl_examples(model, teacher, data.corpus, &index, &dev_refs, cfg.k_train)?;
    let initial = mean_kl(model, &dev_kl_set, cfg)?;
    info!("retriever phase 3 initial dev KL {initial:?}");
    let mut opt = adamw(model.params().all_vars(), cfg.lr)?;
    let mut report = PhaseReport {
        phase: 3,
        step_losses: Vec::new(),
        epochs: Vec::new(),
        initial_dev_kl: initial,
    };
    for epoch in 1..=cfg.epochs {
        if epoch > 1 {
            index = model.build_index(data.corpus.passages(), Some(&index))?;
        }
        let order = epoch_order(data.train.len(), cfg.seed, epoch);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            if budget_exhausted(cfg, report.step_losses.len()) {
                break;
            }
            let batch: Vec<&GroundedExample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let targets = kl_examples(model, teacher, data.corpus, &index, &batch, cfg.k_train)?;
            let refs: Vec<&KlExample> = targets.iter().collect();
            let loss = phase3_batch_loss(model, &refs, cfg)?;
            opt.backward_step(&loss)?;
            let l = scalar(&loss)?;
            report.step_losses.push(l);
            total += l;
            steps += 1;
        }
        if steps == 0 {
            break;
        }
        let dev_kl = mean_kl(model, &dev_kl_set, cfg)?;
        let fresh = model.build_index(data.corpus.passages(), Some(&index))?;
        let dev_recall = dev_recall(model, &fresh, data.dev)?;
        info!(
            "retriever phase 3 epoch {epoch}: loss {:.4} dev KL {dev_kl:?} dev {:?}",
            total / steps as f64,
            dev_recall
        );
        report.epochs.push(EpochLog {
            epoch,
            loss: total / steps as f64,
            steps,
            dev_recall,
            dev_kl,
        });
    }
    Ok(report)
}

/// Runs one phase end to end: loads the previous phase's checkpoint from `dir`
/// (phase 1 starts from fresh weights), trains, and writes
/// `re3g.retriever.phase{n}.ckpt`.
pub fn train_retriever(
    phase: u8,
    dir: &Path,
    vocab: &Vocab,
    model_cfg: &BiEncoderConfig,
    data: &RetrieverData<'_>,
    cfg: &RetrieverTrainConfig,
    teacher: Option<&dyn Teacher>,
) -> Result<(BiEncoder, PhaseReport)> {
    let (model, report) = match phase {
        1 => {
            let model = BiEncoder::new(model_cfg, vocab.clone(), cfg.seed)?;
            let report = train_phase1(&model, data, cfg)?;
            (model, report)
        }
        2 => {
            let model = BiEncoder::load(&previous_phase(dir, 1)?, vocab.clone())?;
            let vcfg = VanillaGenerator::config_for(&model.cfg.encoder, cfg.vanilla_max_target_len);
            let vanilla = VanillaGenerator::new(&vcfg, cfg.seed.wrapping_add(1))?;
            let report = train_phase2(&model, &vanilla, data, cfg)?;
            (model, report)
        }
        3 => {
            let teacher = teacher.ok_or_else(|| {
                Error::MissingPrerequisite("phase 3 needs a trained reranker".into())
            })?;
            let model = BiEncoder::load(&previous_phase(dir, 2)?, vocab.clone())?;
            let report = train_phase3(&model, teacher, data, cfg)?;
            (model, report)
        }
        other => return Err(Error::Config(format!("unknown retriever phase {other}"))),
    };
    model.save(
        &checkpoint_path(dir, phase),
        &format!("phase{phase}"),
        serde_json::to_value(&report)?,
    )?;
    Ok((model, report))
}

fn previous_phase(dir: &Path, phase: u8) -> Result<PathBuf> {
    let path = checkpoint_path(dir, phase);
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingPrerequisite(format!(
            "phase {} starts from the phase-{phase} checkpoint, but {} does not exist",
            phase + 1,
            path.display()
        )))
    }
}
