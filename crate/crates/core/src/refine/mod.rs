//! Prompted span-then-answer generation over the reranked passages.

pub mod model;
pub mod prompt;
pub mod train;

pub use model::{GeneratorConfig, GeneratorModel};
pub use prompt::{build_prompt, build_target, parse_output, GenerationOutput, PromptExample, TaskTemplate};
pub use train::{
    checkpoint_path, evidence_ids, train_stage1, train_stage2, GeneratorData, GeneratorReport, GeneratorStage,
    GeneratorTrainConfig,
};
