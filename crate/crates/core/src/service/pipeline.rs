use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::config::{PipelineConfig, TurnOverrides};
use super::layout;
use crate::corpus::{serialize_history, Corpus, DialogueContext, GroundedExample, Passage};
use crate::evalkit::Prediction;
use crate::error::{Error, Result};
use crate::nn::vocab::Vocab;
use crate::refine::{self, GenerationOutput, GeneratorModel, GeneratorStage, TaskTemplate};
use crate::reranker::{self, CrossEncoder, RerankCandidate};
use crate::retriever::{self, BiEncoder, DenseIndex};

/// Where a generated span sits: char offsets into one listed candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanOffsets {
    pub passage_id: String,
    pub start: usize,
    pub end: usize,
}

/// Wall-clock milliseconds per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub retrieve_ms: f64,
    pub rerank_ms: f64,
    pub generate_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnRecord {
    pub turn_index: usize,
    pub user_text: String,
    pub answer: String,
    pub span: Option<String>,
    pub span_offsets: Option<SpanOffsets>,
    /// Evidence passed to the generator, in final rank order.
    pub candidates: Vec<RerankCandidate>,
    pub task: TaskTemplate,
    pub parse_ok: bool,
    pub raw_output: String,
    pub config: PipelineConfig,
    pub snapshot_version: u64,
    pub timings: Timings,
}

impl TurnRecord {
    /// JSON without timings, the part of a record that must replay exactly.
    pub fn canonical_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("timings");
        }
        Ok(serde_json::to_string(&v)?)
    }

    /// Candidates are ranked 1..n in order and offsets land inside a listed
    /// candidate of `corpus`.
    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::invalid("turn record lists no candidates"));
        }
        for (i, c) in self.candidates.iter().enumerate() {
            if c.final_rank != i + 1 {
                return Err(Error::invalid(format!(
                    "candidate {} has final_rank {}, expected {}",
                    c.passage_id,
                    c.final_rank,
                    i + 1
                )));
            }
            if corpus.passage(&c.passage_id).is_none() {
                return Err(Error::UnknownId(c.passage_id.clone()));
            }
        }
        if let Some(o) = &self.span_offsets {
            if !self.candidates.iter().any(|c| c.passage_id == o.passage_id) {
                return Err(Error::invalid(format!("span points into unlisted passage {}", o.passage_id)));
            }
            let len = corpus
                .passage(&o.passage_id)
                .map(|p| p.text.chars().count())
                .ok_or_else(|| Error::UnknownId(o.passage_id.clone()))?;
            if o.start >= o.end || o.end > len {
                return Err(Error::invalid(format!(
                    "span offsets {}..{} outside passage {} of {len} chars",
                    o.start, o.end, o.passage_id
                )));
            }
        }
        Ok(())
    }
}

/// Where `span` occurs in the first candidate that contains it. Falls back to
/// a lowercase match, since generated text is lowercased, when lowercasing
/// keeps the passage's char count.
pub fn locate_span(span: &str, candidates: &[&Passage]) -> Option<SpanOffsets> {
    let hit = |p: &Passage, m: crate::corpus::SpanMatch| SpanOffsets {
        passage_id: p.passage_id.clone(),
        start: m.start,
        end: m.end,
    };
    for p in candidates {
        if let Some(m) = p.find_span(span) {
            return Some(hit(p, m));
        }
    }
    let lowered = span.to_lowercase();
    for p in candidates {
        let text = p.text.to_lowercase();
        if text.chars().count() != p.text.chars().count() {
            continue;
        }
        if let Some(m) = crate::corpus::find_span_offsets(&text, &lowered) {
            return Some(hit(p, m));
        }
    }
    None
}

/// Loaded models and index; immutable while serving.
pub struct Pipeline {
    config: PipelineConfig,
    corpus: Corpus,
    retriever: BiEncoder,
    index: DenseIndex,
    reranker: Option<CrossEncoder>,
    generators: BTreeMap<TaskTemplate, GeneratorModel>,
}

impl Pipeline {
    pub fn new(
        config: PipelineConfig,
        corpus: Corpus,
        retriever: BiEncoder,
        index: DenseIndex,
        reranker: Option<CrossEncoder>,
        generators: BTreeMap<TaskTemplate, GeneratorModel>,
    ) -> Result<Self> {
        config.validate()?;
        if corpus.is_empty() || index.len() == 0 {
            return Err(Error::EmptyIndex);
        }
        if let Some(id) = index.ids().iter().find(|id| corpus.passage(id).is_none()) {
            return Err(Error::UnknownId(id.clone()));
        }
        if config.use_reranker && reranker.is_none() {
            return Err(Error::MissingPrerequisite("use_reranker is set but no reranker is loaded".into()));
        }
        let task = config.effective_task();
        if !generators.contains_key(&task) {
            return Err(Error::MissingPrerequisite(format!("no generator loaded for {task:?}")));
        }
        Ok(Pipeline {
            config,
            corpus,
            retriever,
            index,
            reranker,
            generators,
        })
    }

    /// Loads corpus, vocabulary, models and index from a run directory.
    pub fn load(run_dir: &Path, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let corpus = layout::read_corpus(run_dir)?;
        let vocab = Vocab::load(&layout::require(run_dir.join(layout::VOCAB))?)?;

        let retriever_ckpt = match &config.retriever_checkpoint {
            Some(p) => p.clone(),
            None => retriever::checkpoint_path(run_dir, config.retriever_phase),
        };
        let retriever = BiEncoder::load(&layout::require(retriever_ckpt)?, vocab.clone())?;
        let index = DenseIndex::load(&layout::require(run_dir.join(layout::INDEX_DIR))?, Some(retriever.dim()))?;
        if index.encoder_weight_hash != retriever.passage_weight_hash()? {
            return Err(Error::MissingPrerequisite(
                "index was built by a different retriever checkpoint; rerun `index`".into(),
            ));
        }

        let reranker_ckpt = config
            .reranker_checkpoint
            .clone()
            .unwrap_or_else(|| reranker::train::checkpoint_path(run_dir));
        let reranker = if reranker_ckpt.exists() {
            Some(CrossEncoder::load(&reranker_ckpt, vocab.clone())?)
        } else if config.use_reranker {
            return Err(Error::MissingPrerequisite(format!("{} not found", reranker_ckpt.display())));
        } else {
            None
        };

        let mut generators = BTreeMap::new();
        for task in [config.task, TaskTemplate::AgentOnly] {
            if generators.contains_key(&task) {
                continue;
            }
            let path = match &config.generator_checkpoint {
                Some(p) => p.clone(),
                None => {
                    let stage2 = refine::checkpoint_path(run_dir, GeneratorStage::Task(task));
                    if stage2.exists() {
                        stage2
                    } else {
                        refine::checkpoint_path(run_dir, GeneratorStage::Joint)
                    }
                }
            };
            generators.insert(task, GeneratorModel::load(&layout::require(path)?, vocab.clone())?);
        }
        info!(
            "pipeline loaded from {}: {} passages, index v{}",
            run_dir.display(),
            corpus.len(),
            index.snapshot_version
        );
        Self::new(config, corpus, retriever, index, reranker, generators)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn snapshot_version(&self) -> u64 {
        self.index.snapshot_version
    }

    pub fn has_reranker(&self) -> bool {
        self.reranker.is_some()
    }

    /// Retrieve, optionally rerank, then generate for a context whose last
    /// turn is the user's.
    pub fn answer(&self, ctx: &DialogueContext, overrides: &TurnOverrides, turn_index: usize) -> Result<TurnRecord> {
        self.run(ctx, overrides, turn_index)
    }

    /// Pipeline output for a dev example; the ranking lists every retrieved
    /// passage in final order, not only those shown to the generator. A decode
    /// failure scores as an empty answer instead of aborting the evaluation.
    pub fn predict(&self, ex: &GroundedExample, overrides: &TurnOverrides) -> Result<Prediction> {
        let cfg = overrides.apply(&self.config);
        cfg.validate()?;
        let (candidates, ranking) = self.rank(&ex.context, &cfg, &mut Timings::default())?;
        let (answer, span) = match self.generate(&ex.context, &cfg, &candidates) {
            Ok((out, _)) => (answer_of(&out), out.span),
            Err(Error::Decode { message, raw }) => {
                warn!("{}: {message} (raw {raw:?})", ex.example_id);
                (String::new(), None)
            }
            Err(e) => return Err(e),
        };
        Ok(Prediction {
            example_id: ex.example_id.clone(),
            answer,
            span,
            ranked_passage_ids: ranking,
        })
    }

    /// Final candidates cut to `k_rerank_out`, and the full ranking.
    fn rank(&self, ctx: &DialogueContext, cfg: &PipelineConfig, timings: &mut Timings) -> Result<(Vec<RerankCandidate>, Vec<String>)> {
        let t = Instant::now();
        let k = cfg.k_retrieve.min(self.index.len());
        let hits = self.retriever.retrieve(ctx, k, &self.index)?;
        timings.retrieve_ms = ms_since(t);

        let t = Instant::now();
        let mut ranked = if cfg.use_reranker {
            let reranker = self
                .reranker
                .as_ref()
                .ok_or_else(|| Error::MissingPrerequisite("no reranker checkpoint is loaded".into()))?;
            let query = serialize_history(ctx, reranker.cfg.encoder.max_len);
            reranker.rerank(&query, &hits, |id| self.corpus.passage(id).map(|p| p.text.as_str()), hits.len())?
        } else {
            hits.iter().map(RerankCandidate::from_retrieval).collect()
        };
        timings.rerank_ms = ms_since(t);
        let ranking: Vec<String> = ranked.iter().map(|c| c.passage_id.clone()).collect();
        ranked.truncate(cfg.k_rerank_out);
        Ok((ranked, ranking))
    }

    fn generate<'a>(
        &'a self,
        ctx: &DialogueContext,
        cfg: &PipelineConfig,
        candidates: &[RerankCandidate],
    ) -> Result<(GenerationOutput, Vec<&'a Passage>)> {
        let task = cfg.effective_task();
        let generator = self
            .generators
            .get(&task)
            .ok_or_else(|| Error::MissingPrerequisite(format!("no generator loaded for {task:?}")))?;
        let passages: Vec<&Passage> = candidates
            .iter()
            .map(|c| {
                self.corpus
                    .passage(&c.passage_id)
                    .ok_or_else(|| Error::UnknownId(c.passage_id.clone()))
            })
            .collect::<Result<_>>()?;
        let texts: Vec<&str> = passages.iter().map(|p| p.text.as_str()).collect();
        let out = generator.generate_with(task, ctx, &texts, &cfg.decode())?;
        Ok((out, passages))
    }

    fn run(&self, ctx: &DialogueContext, overrides: &TurnOverrides, turn_index: usize) -> Result<TurnRecord> {
        let cfg = overrides.apply(&self.config);
        cfg.validate()?;
        let start = Instant::now();
        let mut timings = Timings::default();
        let (candidates, _) = self.rank(ctx, &cfg, &mut timings)?;

        let t = Instant::now();
        let (out, passages) = self.generate(ctx, &cfg, &candidates)?;
        timings.generate_ms = ms_since(t);
        let span_offsets = match (&out.span, out.parse_ok) {
            (Some(s), true) => locate_span(s, &passages),
            _ => None,
        };
        timings.total_ms = ms_since(start);
        Ok(TurnRecord {
            turn_index,
            user_text: ctx.last_user_text().to_string(),
            answer: answer_of(&out),
            span: out.span,
            span_offsets,
            candidates,
            task: cfg.effective_task(),
            parse_ok: out.parse_ok,
            raw_output: out.raw,
            config: cfg,
            snapshot_version: self.snapshot_version(),
            timings,
        })
    }
}

/// The answer field, or the span when the task produces only a span.
fn answer_of(out: &GenerationOutput) -> String {
    out.answer.clone().or_else(|| out.span.clone()).unwrap_or_default()
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1000.0
}
