//! Documents, passages, and dialogues.
//!
//! Everything here is immutable once loaded; a [`Corpus`] can be shared across
//! threads behind an `Arc` without further locking.

mod history;
mod io;
mod span;
mod split;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use history::serialize_history;
pub use io::{
    ingest_dialogues, ingest_documents, read_passages, write_dialogues, write_documents,
    write_passages, Dialogue, Grounding,
};
pub use span::{find_span_offsets, SpanMatch};
pub use split::{split_passages, SplitPolicy};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    #[serde(rename = "meta", default)]
    pub source_meta: BTreeMap<String, String>,
}

/// A retrievable unit cut from a [`Document`]. Offsets are char offsets into the body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub passage_id: String,
    pub doc_id: String,
    pub title: String,
    pub text: String,
    pub char_start: usize,
    pub char_end: usize,
}

impl Passage {
    pub fn find_span(&self, span: &str) -> Option<SpanMatch> {
        find_span_offsets(&self.text, span)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Agent,
}

impl Role {
    pub fn marker(self) -> &'static str {
        match self {
            Role::User => crate::text::USER_MARKER,
            Role::Agent => crate::text::AGENT_MARKER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub role: Role,
    pub text: String,
}

impl DialogueTurn {
    pub fn user(text: impl Into<String>) -> Self {
        DialogueTurn {
            role: Role::User,
            text: text.into(),
        }
    }

    pub fn agent(text: impl Into<String>) -> Self {
        DialogueTurn {
            role: Role::Agent,
            text: text.into(),
        }
    }
}

/// Ordered turns `(u1, a1, ..., ut)`. Always ends with a user turn; roles may repeat.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DialogueContext {
    turns: Vec<DialogueTurn>,
}

impl DialogueContext {
    pub fn new(turns: Vec<DialogueTurn>) -> Result<Self> {
        if let Some(bad) = turns.iter().position(|t| t.text.trim().is_empty()) {
            return Err(Error::invalid(format!("turn {bad} has empty text")));
        }
        match turns.last() {
            None => Err(Error::invalid("dialogue context has no turns")),
            Some(t) if t.role != Role::User => {
                Err(Error::invalid("dialogue context must end with a user turn"))
            }
            Some(_) => Ok(DialogueContext { turns }),
        }
    }

    pub fn single(user_text: impl Into<String>) -> Result<Self> {
        Self::new(vec![DialogueTurn::user(user_text)])
    }

    pub fn turns(&self) -> &[DialogueTurn] {
        &self.turns
    }

    pub fn last_user_text(&self) -> &str {
        &self.turns[self.turns.len() - 1].text
    }

    /// Context for the next exchange: this context, the agent reply, then a new user turn.
    pub fn extended(&self, agent_reply: &str, user_text: &str) -> Result<Self> {
        let mut turns = self.turns.clone();
        if !agent_reply.trim().is_empty() {
            turns.push(DialogueTurn::agent(agent_reply));
        }
        turns.push(DialogueTurn::user(user_text));
        Self::new(turns)
    }
}

impl<'de> Deserialize<'de> for DialogueContext {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            turns: Vec<DialogueTurn>,
        }
        let raw = Raw::deserialize(d)?;
        DialogueContext::new(raw.turns).map_err(serde::de::Error::custom)
    }
}

/// One supervised turn: the context up to a user turn plus its grounding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedExample {
    pub example_id: String,
    pub context: DialogueContext,
    pub positive_passage_ids: Vec<String>,
    pub gold_span: String,
    pub gold_answer: String,
    #[serde(default)]
    pub hard_negative_ids: Vec<String>,
}

impl GroundedExample {
    pub fn is_positive(&self, passage_id: &str) -> bool {
        self.positive_passage_ids.iter().any(|p| p == passage_id)
    }
}

/// Documents plus their passages, with id lookup.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    documents: Vec<Document>,
    passages: Vec<Passage>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(documents: Vec<Document>, passages: Vec<Passage>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            if by_id.insert(p.passage_id.clone(), i).is_some() {
                return Err(Error::DuplicateId(p.passage_id.clone()));
            }
        }
        Ok(Corpus {
            documents,
            passages,
            by_id,
        })
    }

    /// Split every document with `policy`.
    pub fn from_documents(documents: Vec<Document>, policy: &SplitPolicy) -> Result<Self> {
        let mut passages = Vec::new();
        for doc in &documents {
            passages.extend(split_passages(doc, policy)?);
        }
        Self::new(documents, passages)
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn passage(&self, id: &str) -> Option<&Passage> {
        self.by_id.get(id).map(|&i| &self.passages[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn document(&self, doc_id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.doc_id == doc_id)
    }

    /// Checks that each example's gold span occurs in one of its positives.
    /// Violations are logged and returned, never fatal.
    pub fn validate_examples(&self, examples: &[GroundedExample]) -> Vec<String> {
        let mut bad = Vec::new();
        for ex in examples {
            let ok = ex.positive_passage_ids.iter().any(|id| {
                self.passage(id)
                    .is_some_and(|p| ex.gold_span.is_empty() || p.find_span(&ex.gold_span).is_some())
            });
            if !ok {
                log::warn!(
                    "example {}: gold span not found in any positive passage",
                    ex.example_id
                );
                bad.push(ex.example_id.clone());
            }
        }
        bad
    }
}
