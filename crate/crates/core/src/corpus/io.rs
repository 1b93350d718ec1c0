use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DialogueContext, DialogueTurn, Document, GroundedExample, Passage, Role};
use crate::error::{Error, Result};
use crate::jsonl;

/// A record of `dialogues.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dial_id: String,
    pub turns: Vec<DialogueTurn>,
    #[serde(default)]
    pub grounding: Vec<Grounding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grounding {
    /// Index of the user turn being answered.
    pub turn_index: usize,
    pub positive_passage_ids: Vec<String>,
    pub span: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hard_negative_ids: Vec<String>,
}

impl Dialogue {
    /// One [`GroundedExample`] per grounding annotation, with the context cut at `turn_index`.
    pub fn examples(&self) -> Result<Vec<GroundedExample>> {
        self.grounding
            .iter()
            .map(|g| {
                if g.turn_index >= self.turns.len() {
                    return Err(Error::invalid(format!(
                        "dialogue {}: turn_index {} out of range",
                        self.dial_id, g.turn_index
                    )));
                }
                if self.turns[g.turn_index].role != Role::User {
                    return Err(Error::invalid(format!(
                        "dialogue {}: grounding points at a non-user turn {}",
                        self.dial_id, g.turn_index
                    )));
                }
                if g.positive_passage_ids.is_empty() {
                    return Err(Error::invalid(format!(
                        "dialogue {}: turn {} has no positive passage",
                        self.dial_id, g.turn_index
                    )));
                }
                Ok(GroundedExample {
                    example_id: format!("{}:{}", self.dial_id, g.turn_index),
                    context: DialogueContext::new(self.turns[..=g.turn_index].to_vec())?,
                    positive_passage_ids: g.positive_passage_ids.clone(),
                    gold_span: g.span.clone(),
                    gold_answer: g.answer.clone(),
                    hard_negative_ids: g.hard_negative_ids.clone(),
                })
            })
            .collect()
    }
}

fn jsonl_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        files.sort();
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

/// Reads `documents.jsonl` records from a file, or from every `*.jsonl` in a directory.
pub fn ingest_documents(path: &Path) -> Result<Vec<Document>> {
    let mut seen = HashSet::new();
    let mut docs = Vec::new();
    for file in jsonl_files(path)? {
        let records: Vec<Document> = jsonl::read(&file)?;
        for (i, doc) in records.into_iter().enumerate() {
            if doc.body.trim().is_empty() {
                return Err(Error::MalformedRecord {
                    path: file.clone(),
                    line: i + 1,
                    message: format!("document {} has an empty body", doc.doc_id),
                });
            }
            if !seen.insert(doc.doc_id.clone()) {
                return Err(Error::DuplicateId(doc.doc_id));
            }
            docs.push(doc);
        }
    }
    Ok(docs)
}

pub fn ingest_dialogues(path: &Path) -> Result<Vec<Dialogue>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for file in jsonl_files(path)? {
        for d in jsonl::read::<Dialogue>(&file)? {
            if !seen.insert(d.dial_id.clone()) {
                return Err(Error::DuplicateId(d.dial_id));
            }
            out.push(d);
        }
    }
    Ok(out)
}

pub fn write_documents(path: &Path, docs: &[Document]) -> Result<()> {
    jsonl::write(path, docs)
}

pub fn write_dialogues(path: &Path, dialogues: &[Dialogue]) -> Result<()> {
    jsonl::write(path, dialogues)
}

pub fn write_passages(path: &Path, passages: &[Passage]) -> Result<()> {
    jsonl::write(path, passages)
}

pub fn read_passages(path: &Path) -> Result<Vec<Passage>> {
    jsonl::read(path)
}
