use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::model::{GeneratorConfig, GeneratorModel};
use super::prompt::{build_target, PromptExample, TaskTemplate, MAX_PROMPT_PASSAGES};
use crate::corpus::{Corpus, GroundedExample};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::nn::optim::{adamw, epoch_order};
use crate::nn::vocab::Vocab;

pub const PROMPTS_FILE: &str = "prompts.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorStage {
    /// Joint training over the task mix.
    Joint,
    /// One epoch on a single task, starting from the joint checkpoint.
    Task(TaskTemplate),
}

impl GeneratorStage {
    pub fn tag(self) -> &'static str {
        match self {
            GeneratorStage::Joint => "stage1",
            GeneratorStage::Task(TaskTemplate::GroundOnly) => "stage2.ground",
            GeneratorStage::Task(TaskTemplate::AgentOnly) => "stage2.agent",
            GeneratorStage::Task(TaskTemplate::GroundThenAgent) => "stage2.joint",
        }
    }
}

pub fn checkpoint_path(dir: &Path, stage: GeneratorStage) -> PathBuf {
    dir.join(format!("re3g.generator.{}.ckpt", stage.tag()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub stage2_lr: f64,
    pub seed: u64,
    pub max_steps: Option<usize>,
    /// Instances per example for each task in stage 1.
    pub task_mix: BTreeMap<TaskTemplate, usize>,
    pub n_passages: usize,
    /// Swap the lowest-ranked passage for a gold one when none is present.
    pub inject_gold: bool,
}

impl Default for GeneratorTrainConfig {
    fn default() -> Self {
        GeneratorTrainConfig {
            epochs: 10,
            batch_size: 8,
            lr: 1e-3,
            stage2_lr: 5e-4,
            seed: 23,
            max_steps: None,
            task_mix: TaskTemplate::ALL.iter().map(|&t| (t, 1)).collect(),
            n_passages: MAX_PROMPT_PASSAGES,
            inject_gold: true,
        }
    }
}

/// Training inputs: examples plus each example's ranked evidence ids.
pub struct GeneratorData<'a> {
    pub corpus: &'a Corpus,
    pub train: &'a [GroundedExample],
    pub ranked: &'a HashMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorReport {
    pub stage: String,
    pub step_losses: Vec<f64>,
    pub epochs: Vec<GeneratorEpoch>,
}

/// Top `n` ranked ids; with `inject_gold`, the last is replaced by the first
/// gold passage if none of them is gold.
pub fn evidence_ids(ranked: &[String], positives: &[String], n: usize, inject_gold: bool) -> Vec<String> {
    let mut ids: Vec<String> = ranked.iter().take(n).cloned().collect();
    if inject_gold && !positives.is_empty() && !ids.iter().any(|id| positives.contains(id)) {
        if ids.len() < n {
            ids.push(positives[0].clone());
        } else if let Some(last) = ids.last_mut() {
            *last = positives[0].clone();
        }
    }
    ids
}

pub fn example_prompt(
    model: &GeneratorModel,
    corpus: &Corpus,
    ex: &GroundedExample,
    evidence: &[String],
    task: TaskTemplate,
) -> Result<PromptExample> {
    let passages = evidence
        .iter()
        .map(|id| {
            corpus
                .passage(id)
                .map(|p| p.text.as_str())
                .ok_or_else(|| Error::UnknownId(id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PromptExample {
        example_id: ex.example_id.clone(),
        task,
        input_text: model.prompt(task, &ex.context, &passages)?,
        target_text: build_target(task, Some(&ex.gold_span), Some(&ex.gold_answer))?,
    })
}

/// Prompts for every example and task in `tasks`, `count` copies each.
pub fn build_prompts(
    model: &GeneratorModel,
    data: &GeneratorData<'_>,
    tasks: &BTreeMap<TaskTemplate, usize>,
    cfg: &GeneratorTrainConfig,
) -> Result<Vec<PromptExample>> {
    let mut out = Vec::new();
    for ex in data.train {
        let ranked = data
            .ranked
            .get(&ex.example_id)
            .ok_or_else(|| Error::MissingPrerequisite(format!("no ranked passages for {}", ex.example_id)))?;
        let evidence = evidence_ids(ranked, &ex.positive_passage_ids, cfg.n_passages, cfg.inject_gold);
        if evidence.is_empty() {
            warn!("skipping {}: no evidence passages", ex.example_id);
            continue;
        }
        for (&task, &count) in tasks {
            let p = example_prompt(model, data.corpus, ex, &evidence, task)?;
            out.extend(std::iter::repeat_n(p, count));
        }
    }
    Ok(out)
}

/// Mean per-token NLL of one batch of prompts.
pub fn batch_loss(model: &GeneratorModel, batch: &[&PromptExample]) -> Result<candle_core::Tensor> {
    let pairs: Vec<(&str, &str)> = batch
        .iter()
        .map(|p| (p.input_text.as_str(), p.target_text.as_str()))
        .collect();
    let (nll, count) = model.nll(&pairs)?;
    Ok((nll.sum_all()? / count.max(1) as f64)?)
}

pub fn train_on_prompts(
    model: &GeneratorModel,
    prompts: &[PromptExample],
    epochs: usize,
    lr: f64,
    cfg: &GeneratorTrainConfig,
    label: &str,
) -> Result<GeneratorReport> {
    if prompts.is_empty() {
        return Err(Error::invalid("no training prompts"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut opt = adamw(model.params().all_vars(), lr)?;
    let mut report = GeneratorReport {
        stage: label.to_string(),
        step_losses: Vec::new(),
        epochs: Vec::new(),
    };
    'outer: for epoch in 1..=epochs {
        let order = epoch_order(prompts.len(), cfg.seed, epoch);
        let mut sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| report.step_losses.len() >= m) {
                break 'outer;
            }
            let batch: Vec<&PromptExample> = chunk.iter().map(|&i| &prompts[i]).collect();
            let loss = batch_loss(model, &batch)?;
            candle_nn::Optimizer::backward_step(&mut opt, &loss)?;
            let l = loss.to_scalar::<f32>()? as f64;
            report.step_losses.push(l);
            sum += l;
            steps += 1;
        }
        let mean = sum / steps.max(1) as f64;
        info!("generator {label} epoch {epoch}: loss {mean:.4}");
        report.epochs.push(GeneratorEpoch { epoch, loss: mean, steps });
    }
    Ok(report)
}

/// Stage 1 on the task mix; writes `prompts.jsonl` and the stage-1 checkpoint.
pub fn train_stage1(
    dir: &Path,
    vocab: &Vocab,
    model_cfg: &GeneratorConfig,
    data: &GeneratorData<'_>,
    cfg: &GeneratorTrainConfig,
) -> Result<(GeneratorModel, GeneratorReport)> {
    let model = GeneratorModel::new(model_cfg, vocab.clone(), cfg.seed)?;
    let prompts = build_prompts(&model, data, &cfg.task_mix, cfg)?;
    jsonl::write(&dir.join(PROMPTS_FILE), &prompts)?;
    let report = train_on_prompts(&model, &prompts, cfg.epochs, cfg.lr, cfg, "stage1")?;
    model.save(
        &checkpoint_path(dir, GeneratorStage::Joint),
        GeneratorStage::Joint.tag(),
        serde_json::to_value(&report)?,
    )?;
    Ok((model, report))
}

/// Stage 2 for one task: exactly one epoch on that task's prompts, starting
/// from the stage-1 checkpoint in `dir`.
pub fn train_stage2(
    dir: &Path,
    vocab: &Vocab,
    data: &GeneratorData<'_>,
    task: TaskTemplate,
    cfg: &GeneratorTrainConfig,
) -> Result<(GeneratorModel, GeneratorReport)> {
    let stage1 = checkpoint_path(dir, GeneratorStage::Joint);
    if !stage1.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "stage 2 starts from {}",
            stage1.display()
        )));
    }
    let model = GeneratorModel::load(&stage1, vocab.clone())?;
    let tasks = BTreeMap::from([(task, 1)]);
    let prompts = build_prompts(&model, data, &tasks, cfg)?;
    let stage = GeneratorStage::Task(task);
    let report = train_on_prompts(&model, &prompts, 1, cfg.stage2_lr, cfg, stage.tag())?;
    model.save(&checkpoint_path(dir, stage), stage.tag(), serde_json::to_value(&report)?)?;
    Ok((model, report))
}
