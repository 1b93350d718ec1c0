use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::jsonl;
use crate::text::{detokenize, word_pieces, AGENT_MARKER, GROUNDING_MARKER, USER_MARKER};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const BOS: u32 = 4;
pub const EOS: u32 = 5;

/// Tokens every model vocabulary starts with, in id order. Role markers, the
/// grounding marker, and the task-prefix words are whole single tokens.
pub const RESERVED: [&str; 11] = [
    "[pad]",
    "[unk]",
    "[cls]",
    "[sep]",
    "[bos]",
    "[eos]",
    USER_MARKER,
    AGENT_MARKER,
    GROUNDING_MARKER,
    "generate",
    "then",
];

/// Word-piece vocabulary shared by all models of a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    /// Reserved tokens, then pieces seen at least `min_count` times, most frequent first
    /// (ties alphabetical), capped at `max_size` entries overall.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize, max_size: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for p in word_pieces(t) {
                *counts.entry(p).or_default() += 1;
            }
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut rest: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !RESERVED.contains(&t.as_str()))
            .collect();
        rest.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        tokens.extend(
            rest.into_iter()
                .take(max_size.saturating_sub(RESERVED.len()))
                .map(|(t, _)| t),
        );
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or("[unk]", String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        word_pieces(text).iter().map(|p| self.id(p)).collect()
    }

    /// Detokenized text, dropping pad/bos/eos/cls/sep.
    pub fn decode(&self, ids: &[u32]) -> String {
        let pieces: Vec<&str> = ids
            .iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS | CLS | SEP))
            .map(|&i| self.token(i))
            .collect();
        detokenize(&pieces)
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let v: Vocab = jsonl::read_json(path)?;
        Ok(Self::from_tokens(v.tokens))
    }
}
