//! End-to-end training on the synthetic corpus with fixed small models.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::corpus::{serialize_history, Corpus, GroundedExample, SplitPolicy};
use crate::error::Result;
use crate::evalkit::{recall_at_k, token_f1};
use crate::nn::vocab::Vocab;
use crate::refine::{self, GeneratorConfig, GeneratorData, GeneratorTrainConfig, TaskTemplate};
use crate::reranker::{self, CrossEncoder, CrossEncoderConfig, RerankerData, RerankerTrainConfig};
use crate::retriever::{self, BiEncoder, BiEncoderConfig, RetrieverData, RetrieverTrainConfig};
use crate::service::{ops, Pipeline, PipelineConfig, TurnOverrides};
use crate::synth::{self, SynthConfig};

/// Synthetic data split into a corpus and train/dev examples, plus the shared vocabulary.
pub struct SynthSetup {
    pub corpus: Corpus,
    pub train: Vec<GroundedExample>,
    pub dev: Vec<GroundedExample>,
    pub vocab: Vocab,
}

pub fn synth_setup(cfg: &SynthConfig) -> Result<SynthSetup> {
    let data = synth::generate(cfg)?;
    let corpus = Corpus::from_documents(data.documents, &SplitPolicy::Structural)?;
    let (train_d, dev_d) = synth::split_dialogues(&data.dialogues, cfg.dev_fraction, cfg.seed);
    let examples = |ds: &[crate::corpus::Dialogue]| -> Result<Vec<GroundedExample>> {
        Ok(ds
            .iter()
            .map(|d| d.examples())
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect())
    };
    let train = examples(&train_d)?;
    let dev = examples(&dev_d)?;
    let vocab = build_vocab(&corpus, &train);
    Ok(SynthSetup {
        corpus,
        train,
        dev,
        vocab,
    })
}

/// Vocabulary over passages, titles, and training dialogues.
pub fn build_vocab(corpus: &Corpus, train: &[GroundedExample]) -> Vocab {
    let mut texts: Vec<String> = corpus
        .passages()
        .iter()
        .flat_map(|p| [p.text.clone(), p.title.clone()])
        .collect();
    for ex in train {
        texts.push(serialize_history(&ex.context, usize::MAX));
        texts.push(ex.gold_span.clone());
        texts.push(ex.gold_answer.clone());
    }
    Vocab::build(texts.iter().map(String::as_str), 1, 20_000)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingExperiment {
    pub seed: u64,
    pub phase1_recall_at_5: f64,
    pub retriever_recall_at_1: f64,
    pub rerank_recall_at_1: f64,
    /// Held-out KL before phase 3, then after each epoch.
    pub phase3_dev_kl: Vec<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingConfig {
    pub retriever: BiEncoderConfig,
    pub phase1: RetrieverTrainConfig,
    pub phase2: RetrieverTrainConfig,
    pub phase3: RetrieverTrainConfig,
    pub reranker: CrossEncoderConfig,
    pub reranker_train: RerankerTrainConfig,
    /// Retriever candidates reranked at evaluation.
    pub rerank_k: usize,
}

impl RankingConfig {
    pub fn compact(vocab_size: usize, seed: u64) -> Self {
        let mut retriever = BiEncoderConfig::small(vocab_size);
        retriever.encoder.max_len = 64;
        let mut reranker = CrossEncoderConfig::small(vocab_size);
        reranker.encoder.max_len = 64;
        RankingConfig {
            retriever,
            phase1: RetrieverTrainConfig {
                epochs: 8,
                batch_size: 16,
                lr: 2e-3,
                seed,
                ..RetrieverTrainConfig::default()
            },
            phase2: RetrieverTrainConfig {
                epochs: 1,
                batch_size: 8,
                lr: 5e-4,
                seed,
                k_train: 4,
                ..RetrieverTrainConfig::default()
            },
            phase3: RetrieverTrainConfig {
                epochs: 3,
                batch_size: 16,
                lr: 3e-4,
                seed,
                k_train: 24,
                ..RetrieverTrainConfig::default()
            },
            reranker,
            reranker_train: RerankerTrainConfig {
                epochs: 1,
                batch_size: 8,
                lr: 1e-3,
                seed,
                ..RerankerTrainConfig::default()
            },
            rerank_k: 20,
        }
    }
}

/// Runs all three retriever phases and reranker training in `dir`, measuring
/// dev recall of the retriever alone and after reranking.
pub fn run_ranking(setup: &SynthSetup, cfg: &RankingConfig, dir: &Path) -> Result<RankingExperiment> {
    let start = Instant::now();
    let data = RetrieverData {
        corpus: &setup.corpus,
        train: &setup.train,
        dev: &setup.dev,
    };
    let (p1, report1) = retriever::train_retriever(1, dir, &setup.vocab, &cfg.retriever, &data, &cfg.phase1, None)?;
    let phase1_recall_at_5 = report1
        .epochs
        .last()
        .and_then(|e| e.dev_recall.get("recall@5").copied())
        .unwrap_or(0.0);
    info!("phase 1 done in {:.1}s", start.elapsed().as_secs_f64());

    let index = p1.build_index(setup.corpus.passages(), None)?;
    let all: Vec<GroundedExample> = setup.train.iter().chain(&setup.dev).cloned().collect();
    let pools = reranker::build_pools(&p1, &index, &all, cfg.reranker_train.pool_size)?;
    reranker::write_pools(&dir.join(reranker::train::POOLS_FILE), &pools)?;
    let pools: HashMap<String, Vec<String>> = pools
        .into_iter()
        .map(|p| (p.example_id, p.candidate_passage_ids))
        .collect();

    let cross = CrossEncoder::new(&cfg.reranker, setup.vocab.clone(), cfg.reranker_train.seed)?;
    let rdata = RerankerData {
        corpus: &setup.corpus,
        train: &setup.train,
        dev: &setup.dev,
        pools: &pools,
    };
    let rreport = reranker::train_reranker(&cross, &rdata, &cfg.reranker_train)?;
    cross.save(&reranker::train::checkpoint_path(dir), serde_json::to_value(&rreport)?)?;
    info!("reranker done in {:.1}s", start.elapsed().as_secs_f64());

    let mut retr_r1 = 0.0;
    let mut rerank_r1 = 0.0;
    for ex in &setup.dev {
        let hits = p1.retrieve(&ex.context, cfg.rerank_k, &index)?;
        let ids: Vec<&str> = hits.iter().map(|h| h.passage_id.as_str()).collect();
        retr_r1 += recall_at_k(&ids, &ex.positive_passage_ids, 1);
        let ctx = serialize_history(&ex.context, cfg.reranker.encoder.max_len);
        let reranked = cross.rerank(&ctx, &hits, |id| setup.corpus.passage(id).map(|p| p.text.as_str()), 1)?;
        rerank_r1 += recall_at_k(&[reranked[0].passage_id.as_str()], &ex.positive_passage_ids, 1);
    }
    let n = setup.dev.len().max(1) as f64;

    retriever::train_retriever(2, dir, &setup.vocab, &cfg.retriever, &data, &cfg.phase2, None)?;
    info!("phase 2 done in {:.1}s", start.elapsed().as_secs_f64());
    let (_, report3) = retriever::train_retriever(3, dir, &setup.vocab, &cfg.retriever, &data, &cfg.phase3, Some(&cross))?;
    let mut kl = vec![report3.initial_dev_kl.unwrap_or(f64::NAN)];
    kl.extend(report3.epochs.iter().map(|e| e.dev_kl.unwrap_or(f64::NAN)));
    info!("phase 3 done in {:.1}s", start.elapsed().as_secs_f64());

    Ok(RankingExperiment {
        seed: cfg.phase1.seed,
        phase1_recall_at_5,
        retriever_recall_at_1: retr_r1 / n,
        rerank_recall_at_1: rerank_r1 / n,
        phase3_dev_kl: kl,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationExperiment {
    pub seed: u64,
    /// Mean dev answer token-F1 of the full pipeline.
    pub full_f1: f64,
    /// Same, with retriever order in place of the reranker.
    pub no_rerank_f1: f64,
    /// Same, answer-only generation without the grounding span.
    pub no_refinement_f1: f64,
    pub generator_steps: usize,
    pub seconds: f64,
}

/// Generator shapes and settings used on the synthetic corpus.
pub fn ablation_generator(vocab_size: usize, seed: u64) -> (GeneratorConfig, GeneratorTrainConfig) {
    let mut model = GeneratorConfig::small(vocab_size);
    model.decode = crate::nn::seq2seq::DecodeConfig::greedy(48);
    let train = GeneratorTrainConfig {
        epochs: 4,
        lr: 2e-3,
        seed,
        ..GeneratorTrainConfig::default()
    };
    (model, train)
}

/// Serving pipeline over a directory trained by [`run_ranking`] and
/// [`run_ablation`]: phase-3 retriever, reranker, and the stage-1 generator for
/// both the joint and answer-only tasks, decoding greedily.
pub fn synth_pipeline(setup: &SynthSetup, cfg: &RankingConfig, dir: &Path) -> Result<Pipeline> {
    let retriever = BiEncoder::load(&retriever::checkpoint_path(dir, 3), setup.vocab.clone())?;
    let index = retriever.build_index(setup.corpus.passages(), None)?;
    let cross = CrossEncoder::load(&reranker::train::checkpoint_path(dir), setup.vocab.clone())?;
    let joint = refine::checkpoint_path(dir, refine::GeneratorStage::Joint);
    let mut generators = BTreeMap::new();
    for task in [TaskTemplate::GroundThenAgent, TaskTemplate::AgentOnly] {
        generators.insert(task, refine::GeneratorModel::load(&joint, setup.vocab.clone())?);
    }
    let pipeline_cfg = PipelineConfig {
        k_retrieve: cfg.rerank_k,
        k_rerank_out: refine::prompt::MAX_PROMPT_PASSAGES,
        beam_size: 1,
        max_decode_len: 48,
        seed: cfg.phase1.seed,
        ..PipelineConfig::default()
    };
    Pipeline::new(pipeline_cfg, setup.corpus.clone(), retriever, index, Some(cross), generators)
}

/// Trains a stage-1 generator on reranked evidence in a directory already
/// populated by [`run_ranking`], then scores dev answers with and without the
/// reranker and the grounding span.
pub fn run_ablation(setup: &SynthSetup, cfg: &RankingConfig, dir: &Path) -> Result<AblationExperiment> {
    let start = Instant::now();
    let seed = cfg.phase1.seed;
    let retriever = BiEncoder::load(&retriever::checkpoint_path(dir, 3), setup.vocab.clone())?;
    let index = retriever.build_index(setup.corpus.passages(), None)?;
    let cross = CrossEncoder::load(&reranker::train::checkpoint_path(dir), setup.vocab.clone())?;
    let k_out = refine::prompt::MAX_PROMPT_PASSAGES;

    let ranked = ops::rank_examples(&retriever, &index, Some(&cross), &setup.corpus, &setup.train, cfg.rerank_k, k_out)?;
    let data = GeneratorData {
        corpus: &setup.corpus,
        train: &setup.train,
        ranked: &ranked,
    };
    let (gen_cfg, gen_train) = ablation_generator(setup.vocab.len(), seed);
    let (_, report) = refine::train_stage1(dir, &setup.vocab, &gen_cfg, &data, &gen_train)?;
    info!("generator done in {:.1}s", start.elapsed().as_secs_f64());

    let pipeline = synth_pipeline(setup, cfg, dir)?;

    let mean_f1 = |overrides: TurnOverrides| -> Result<f64> {
        let mut total = 0.0;
        for ex in &setup.dev {
            let p = pipeline.predict(ex, &overrides)?;
            total += token_f1(&p.answer, &ex.gold_answer);
        }
        Ok(total / setup.dev.len().max(1) as f64)
    };
    let full_f1 = mean_f1(TurnOverrides::default())?;
    let no_rerank_f1 = mean_f1(TurnOverrides {
        use_reranker: Some(false),
        use_refinement: None,
    })?;
    let no_refinement_f1 = mean_f1(TurnOverrides {
        use_reranker: None,
        use_refinement: Some(false),
    })?;
    Ok(AblationExperiment {
        seed,
        full_f1,
        no_rerank_f1,
        no_refinement_f1,
        generator_steps: report.step_losses.len(),
        seconds: start.elapsed().as_secs_f64(),
    })
}
