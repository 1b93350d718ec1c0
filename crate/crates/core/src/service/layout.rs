//! File names inside a run directory.

use std::path::{Path, PathBuf};

use crate::corpus::{self, Corpus, Document, GroundedExample};
use crate::error::{Error, Result};
use crate::jsonl;

pub const DOCUMENTS: &str = "documents.jsonl";
pub const PASSAGES: &str = "passages.jsonl";
pub const DIALOGUES: &str = "dialogues.jsonl";
pub const TRAIN: &str = "train.jsonl";
pub const DEV: &str = "dev.jsonl";
pub const VOCAB: &str = "vocab.json";
pub const INDEX_DIR: &str = "index";
pub const CONFIG_ECHO: &str = "config.toml";
pub const SESSIONS_DIR: &str = "sessions";
pub const PREDICTIONS: &str = "predictions.jsonl";
pub const EVAL_DIR: &str = "eval";

/// `path` if it exists, otherwise a prerequisite error naming it.
pub fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingPrerequisite(format!("{} not found", path.display())))
    }
}

pub fn read_corpus(run_dir: &Path) -> Result<Corpus> {
    let docs: Vec<Document> = jsonl::read(&require(run_dir.join(DOCUMENTS))?)?;
    let passages = corpus::read_passages(&require(run_dir.join(PASSAGES))?)?;
    Corpus::new(docs, passages)
}

pub fn read_examples(run_dir: &Path, name: &str) -> Result<Vec<GroundedExample>> {
    jsonl::read(&require(run_dir.join(name))?)
}
