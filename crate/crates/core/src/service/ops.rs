//! Pipeline steps run by the command line, each reading and writing one run directory.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use log::info;
use serde::Serialize;

use super::config::{PipelineConfig, TurnOverrides};
use super::layout::{self, require};
use super::pipeline::Pipeline;
use crate::corpus::{self, serialize_history, Corpus, Dialogue, GroundedExample, SplitPolicy};
use crate::error::{Error, Result};
use crate::evalkit::{self, EvalReport, Prediction};
use crate::experiment::{build_vocab, RankingConfig};
use crate::jsonl;
use crate::nn::vocab::Vocab;
use crate::refine::{self, GeneratorConfig, GeneratorData, GeneratorReport, GeneratorTrainConfig, TaskTemplate};
use crate::reranker::{self, CrossEncoder, RerankerData, RerankerReport};
use crate::retriever::{self, BiEncoder, DenseIndex, IndexManifest, PhaseReport, RetrieverData};
use crate::synth::{self, SynthConfig};

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the effective config next to the artifacts it produced.
pub fn echo_config(run_dir: &Path, cfg: &PipelineConfig) -> Result<()> {
    mkdir(run_dir)?;
    let path = run_dir.join(layout::CONFIG_ECHO);
    std::fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(path, e))
}

/// Writes synthetic `documents.jsonl` and `dialogues.jsonl` into `out_dir`.
pub fn write_synth(out_dir: &Path, cfg: &SynthConfig) -> Result<(usize, usize)> {
    mkdir(out_dir)?;
    let data = synth::generate(cfg)?;
    corpus::write_documents(&out_dir.join(layout::DOCUMENTS), &data.documents)?;
    corpus::write_dialogues(&out_dir.join(layout::DIALOGUES), &data.dialogues)?;
    Ok((data.documents.len(), data.dialogues.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestSummary {
    pub documents: usize,
    pub passages: usize,
    pub dialogues: usize,
}

pub fn ingest(
    run_dir: &Path,
    documents: &Path,
    dialogues: Option<&Path>,
    policy: &SplitPolicy,
    cfg: &PipelineConfig,
) -> Result<IngestSummary> {
    echo_config(run_dir, cfg)?;
    let docs = corpus::ingest_documents(documents)?;
    let corpus = Corpus::from_documents(docs, policy)?;
    corpus::write_documents(&run_dir.join(layout::DOCUMENTS), corpus.documents())?;
    corpus::write_passages(&run_dir.join(layout::PASSAGES), corpus.passages())?;
    let mut n_dialogues = 0;
    if let Some(path) = dialogues {
        let ds = corpus::ingest_dialogues(path)?;
        n_dialogues = ds.len();
        corpus::write_dialogues(&run_dir.join(layout::DIALOGUES), &ds)?;
    }
    let summary = IngestSummary {
        documents: corpus.documents().len(),
        passages: corpus.len(),
        dialogues: n_dialogues,
    };
    info!("ingested {summary:?}");
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitSummary {
    pub train: usize,
    pub dev: usize,
    pub vocab: usize,
}

/// Splits dialogues into train/dev examples and builds the shared vocabulary.
pub fn split(run_dir: &Path, cfg: &PipelineConfig) -> Result<SplitSummary> {
    echo_config(run_dir, cfg)?;
    let corpus = layout::read_corpus(run_dir)?;
    let dialogues: Vec<Dialogue> = corpus::ingest_dialogues(&require(run_dir.join(layout::DIALOGUES))?)?;
    let (train_d, dev_d) = synth::split_dialogues(&dialogues, cfg.dev_fraction, cfg.seed);
    let flatten = |ds: &[Dialogue]| -> Result<Vec<GroundedExample>> {
        let mut out = Vec::new();
        for d in ds {
            out.extend(d.examples()?);
        }
        Ok(out)
    };
    let train = flatten(&train_d)?;
    let dev = flatten(&dev_d)?;
    let problems = corpus.validate_examples(&train.iter().chain(&dev).cloned().collect::<Vec<_>>());
    if !problems.is_empty() {
        return Err(Error::invalid(format!("examples do not resolve against the corpus: {problems:?}")));
    }
    jsonl::write(&run_dir.join(layout::TRAIN), &train)?;
    jsonl::write(&run_dir.join(layout::DEV), &dev)?;
    let vocab = build_vocab(&corpus, &train);
    vocab.save(&run_dir.join(layout::VOCAB))?;
    Ok(SplitSummary {
        train: train.len(),
        dev: dev.len(),
        vocab: vocab.len(),
    })
}

/// Compact model shapes and training settings with the config's overrides applied.
pub fn training_configs(vocab_size: usize, cfg: &PipelineConfig) -> RankingConfig {
    let mut rc = RankingConfig::compact(vocab_size, cfg.seed);
    for phase in [&mut rc.phase1, &mut rc.phase2, &mut rc.phase3] {
        phase.max_steps = cfg.max_steps;
    }
    if let Some(e) = cfg.retriever_epochs {
        rc.phase1.epochs = e;
    }
    rc.reranker_train.tau = cfg.tau;
    rc.reranker_train.n_negatives = cfg.n_negatives;
    rc.reranker_train.pool_size = cfg.k_retrieve;
    rc.reranker_train.max_steps = cfg.max_steps;
    if let Some(e) = cfg.reranker_epochs {
        rc.reranker_train.epochs = e;
    }
    rc
}

pub fn generator_configs(vocab_size: usize, cfg: &PipelineConfig) -> (GeneratorConfig, GeneratorTrainConfig) {
    let mut model = GeneratorConfig::small(vocab_size);
    model.decode = cfg.decode();
    let mut train = GeneratorTrainConfig {
        seed: cfg.seed,
        max_steps: cfg.max_steps,
        n_passages: cfg.k_rerank_out,
        ..GeneratorTrainConfig::default()
    };
    if let Some(e) = cfg.generator_epochs {
        train.epochs = e;
    }
    (model, train)
}

struct Inputs {
    corpus: Corpus,
    vocab: Vocab,
    train: Vec<GroundedExample>,
    dev: Vec<GroundedExample>,
}

fn inputs(run_dir: &Path) -> Result<Inputs> {
    Ok(Inputs {
        corpus: layout::read_corpus(run_dir)?,
        vocab: Vocab::load(&require(run_dir.join(layout::VOCAB))?)?,
        train: layout::read_examples(run_dir, layout::TRAIN)?,
        dev: layout::read_examples(run_dir, layout::DEV)?,
    })
}

pub fn train_retriever(run_dir: &Path, phase: u8, cfg: &PipelineConfig) -> Result<PhaseReport> {
    if !(1..=3).contains(&phase) {
        return Err(Error::invalid(format!("unknown retriever phase {phase}; expected 1, 2 or 3")));
    }
    echo_config(run_dir, cfg)?;
    let inp = inputs(run_dir)?;
    let rc = training_configs(inp.vocab.len(), cfg);
    let data = RetrieverData {
        corpus: &inp.corpus,
        train: &inp.train,
        dev: &inp.dev,
    };
    let phase_cfg = match phase {
        1 => &rc.phase1,
        2 => &rc.phase2,
        _ => &rc.phase3,
    };
    let teacher = if phase == 3 {
        let path = require(reranker::train::checkpoint_path(run_dir))?;
        Some(CrossEncoder::load(&path, inp.vocab.clone())?)
    } else {
        None
    };
    let teacher_ref = teacher.as_ref().map(|t| t as &dyn retriever::Teacher);
    let (_, report) = retriever::train_retriever(phase, run_dir, &inp.vocab, &rc.retriever, &data, phase_cfg, teacher_ref)?;
    Ok(report)
}

/// Trains the reranker on pools from the phase-1 retriever, writing the pools first.
pub fn train_reranker(run_dir: &Path, cfg: &PipelineConfig) -> Result<RerankerReport> {
    echo_config(run_dir, cfg)?;
    let inp = inputs(run_dir)?;
    let rc = training_configs(inp.vocab.len(), cfg);
    let p1 = BiEncoder::load(&require(retriever::checkpoint_path(run_dir, 1))?, inp.vocab.clone())?;
    let index = p1.build_index(inp.corpus.passages(), None)?;
    let all: Vec<GroundedExample> = inp.train.iter().chain(&inp.dev).cloned().collect();
    let pools = reranker::build_pools(&p1, &index, &all, rc.reranker_train.pool_size)?;
    reranker::write_pools(&run_dir.join(reranker::train::POOLS_FILE), &pools)?;
    let pools: HashMap<String, Vec<String>> = pools
        .into_iter()
        .map(|p| (p.example_id, p.candidate_passage_ids))
        .collect();
    let model = CrossEncoder::new(&rc.reranker, inp.vocab.clone(), rc.reranker_train.seed)?;
    let data = RerankerData {
        corpus: &inp.corpus,
        train: &inp.train,
        dev: &inp.dev,
        pools: &pools,
    };
    let report = reranker::train_reranker(&model, &data, &rc.reranker_train)?;
    model.save(&reranker::train::checkpoint_path(run_dir), serde_json::to_value(&report)?)?;
    Ok(report)
}

/// Encodes the corpus with the configured retriever phase. The snapshot
/// version increments over any index already in the run directory.
pub fn build_index(run_dir: &Path, cfg: &PipelineConfig) -> Result<IndexManifest> {
    echo_config(run_dir, cfg)?;
    let corpus = layout::read_corpus(run_dir)?;
    let vocab = Vocab::load(&require(run_dir.join(layout::VOCAB))?)?;
    let ckpt = cfg
        .retriever_checkpoint
        .clone()
        .unwrap_or_else(|| retriever::checkpoint_path(run_dir, cfg.retriever_phase));
    let model = BiEncoder::load(&require(ckpt)?, vocab)?;
    let dir = run_dir.join(layout::INDEX_DIR);
    let previous = if dir.exists() {
        DenseIndex::load(&dir, Some(model.dim())).ok()
    } else {
        None
    };
    let index = model.build_index(corpus.passages(), previous.as_ref())?;
    index.save(&dir)?;
    Ok(index.manifest())
}

/// Top `k_out` passage ids per example after retrieving `k_retrieve` and,
/// with a reranker, reranking them.
pub fn rank_examples(
    retriever: &BiEncoder,
    index: &DenseIndex,
    reranker: Option<&CrossEncoder>,
    corpus: &Corpus,
    examples: &[GroundedExample],
    k_retrieve: usize,
    k_out: usize,
) -> Result<HashMap<String, Vec<String>>> {
    let k = k_retrieve.min(index.len());
    let mut out = HashMap::with_capacity(examples.len());
    for ex in examples {
        let hits = retriever.retrieve(&ex.context, k, index)?;
        let ids: Vec<String> = match reranker {
            Some(r) => {
                let q = serialize_history(&ex.context, r.cfg.encoder.max_len);
                r.rerank(&q, &hits, |id| corpus.passage(id).map(|p| p.text.as_str()), k_out)?
                    .into_iter()
                    .map(|c| c.passage_id)
                    .collect()
            }
            None => hits.into_iter().take(k_out).map(|h| h.passage_id).collect(),
        };
        out.insert(ex.example_id.clone(), ids);
    }
    Ok(out)
}

/// Stage 1 trains on the task mix; stage 2 runs one epoch per task from the
/// stage-1 checkpoint. Evidence comes from the served retriever and reranker.
pub fn train_generator(run_dir: &Path, stage: u8, cfg: &PipelineConfig) -> Result<Vec<GeneratorReport>> {
    if !(1..=2).contains(&stage) {
        return Err(Error::invalid(format!("unknown generator stage {stage}; expected 1 or 2")));
    }
    echo_config(run_dir, cfg)?;
    let inp = inputs(run_dir)?;
    let retr = BiEncoder::load(
        &require(retriever::checkpoint_path(run_dir, cfg.retriever_phase))?,
        inp.vocab.clone(),
    )?;
    let index = DenseIndex::load(&require(run_dir.join(layout::INDEX_DIR))?, Some(retr.dim()))?;
    if index.encoder_weight_hash != retr.passage_weight_hash()? {
        return Err(Error::MissingPrerequisite(
            "index was built by a different retriever checkpoint; rerun `index`".into(),
        ));
    }
    let rr_path = reranker::train::checkpoint_path(run_dir);
    let rr = if cfg.use_reranker {
        Some(CrossEncoder::load(&require(rr_path)?, inp.vocab.clone())?)
    } else {
        None
    };
    let ranked = rank_examples(&retr, &index, rr.as_ref(), &inp.corpus, &inp.train, cfg.k_retrieve, cfg.k_rerank_out)?;
    let data = GeneratorData {
        corpus: &inp.corpus,
        train: &inp.train,
        ranked: &ranked,
    };
    let (model_cfg, train_cfg) = generator_configs(inp.vocab.len(), cfg);
    if stage == 1 {
        let (_, report) = refine::train_stage1(run_dir, &inp.vocab, &model_cfg, &data, &train_cfg)?;
        return Ok(vec![report]);
    }
    TaskTemplate::ALL
        .iter()
        .map(|&task| refine::train_stage2(run_dir, &inp.vocab, &data, task, &train_cfg).map(|(_, r)| r))
        .collect()
}

/// Runs the served pipeline over the dev split and scores it.
pub fn evaluate_dev(run_dir: &Path, cfg: &PipelineConfig, overrides: &TurnOverrides) -> Result<EvalReport> {
    let dev = layout::read_examples(run_dir, layout::DEV)?;
    let pipeline = Pipeline::load(run_dir, cfg.clone())?;
    let preds = dev
        .iter()
        .map(|ex| pipeline.predict(ex, overrides))
        .collect::<Result<Vec<Prediction>>>()?;
    let out = run_dir.join(layout::EVAL_DIR);
    mkdir(&out)?;
    jsonl::write(&out.join(layout::PREDICTIONS), &preds)?;
    let report = evalkit::evaluate(&preds, &dev, serde_json::to_value(overrides.apply(cfg))?)?;
    report.write(&out)?;
    Ok(report)
}

/// Scores existing prediction and reference files, writing the report to `out_dir`.
pub fn evaluate_files(predictions: &Path, references: &Path, out_dir: &Path) -> Result<EvalReport> {
    let report = evalkit::evaluate_run(predictions, references)?;
    mkdir(out_dir)?;
    report.write(out_dir)?;
    Ok(report)
}

/// Short summary of what a run directory holds, for `/health`.
pub fn artifact_summary(run_dir: &Path) -> BTreeMap<String, bool> {
    let mut out = BTreeMap::new();
    for phase in 1..=3u8 {
        out.insert(format!("retriever.phase{phase}"), retriever::checkpoint_path(run_dir, phase).exists());
    }
    out.insert("reranker".into(), reranker::train::checkpoint_path(run_dir).exists());
    out.insert("index".into(), run_dir.join(layout::INDEX_DIR).exists());
    for stage in [
        refine::GeneratorStage::Joint,
        refine::GeneratorStage::Task(TaskTemplate::GroundThenAgent),
        refine::GeneratorStage::Task(TaskTemplate::GroundOnly),
        refine::GeneratorStage::Task(TaskTemplate::AgentOnly),
    ] {
        out.insert(format!("generator.{}", stage.tag()), refine::checkpoint_path(run_dir, stage).exists());
    }
    out
}

/// Every training step in dependency order: retriever phase 1, reranker,
/// phases 2 and 3, index, then both generator stages.
pub fn train_all(run_dir: &Path, cfg: &PipelineConfig) -> Result<()> {
    train_retriever(run_dir, 1, cfg)?;
    train_reranker(run_dir, cfg)?;
    train_retriever(run_dir, 2, cfg)?;
    train_retriever(run_dir, 3, cfg)?;
    build_index(run_dir, cfg)?;
    train_generator(run_dir, 1, cfg)?;
    train_generator(run_dir, 2, cfg)?;
    Ok(())
}
