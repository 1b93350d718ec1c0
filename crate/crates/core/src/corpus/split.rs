use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{Document, Passage};
use crate::error::{Error, Result};
use crate::text::{char_len, char_offset, char_slice, whitespace_tokens};

/// How documents are cut into passages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitPolicy {
    /// One passage per markdown-style `#` header section.
    Structural,
    /// Overlapping windows of `size` whitespace tokens, one starting every `stride` tokens.
    Window { size: usize, stride: usize },
}

impl Default for SplitPolicy {
    fn default() -> Self {
        SplitPolicy::Window {
            size: 200,
            stride: 100,
        }
    }
}

fn header_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^#{1,6}[ \t]+\S[^\n]*$").expect("valid regex"))
}

fn make_passage(doc: &Document, index: usize, title: String, start: usize, end: usize) -> Passage {
    Passage {
        passage_id: format!("{}#{}", doc.doc_id, index),
        doc_id: doc.doc_id.clone(),
        title,
        text: char_slice(&doc.body, start, end).to_string(),
        char_start: start,
        char_end: end,
    }
}

fn whole_body(doc: &Document) -> Vec<Passage> {
    vec![make_passage(doc, 0, doc.title.clone(), 0, char_len(&doc.body))]
}

pub fn split_passages(doc: &Document, policy: &SplitPolicy) -> Result<Vec<Passage>> {
    if doc.body.is_empty() {
        return Err(Error::invalid(format!("document {} has an empty body", doc.doc_id)));
    }
    match *policy {
        SplitPolicy::Window { size, stride } => {
            if !(size > stride && stride > 0) {
                return Err(Error::invalid(format!(
                    "window policy needs size > stride > 0, got size={size} stride={stride}"
                )));
            }
            Ok(split_windows(doc, size, stride))
        }
        SplitPolicy::Structural => Ok(split_structural(doc)),
    }
}

fn split_windows(doc: &Document, size: usize, stride: usize) -> Vec<Passage> {
    let tokens = whitespace_tokens(&doc.body);
    let n = tokens.len();
    if n <= size {
        return whole_body(doc);
    }
    let body_len = char_len(&doc.body);
    (0..n)
        .step_by(stride)
        .enumerate()
        .map(|(i, s)| {
            let e = (s + size).min(n);
            // The first and last windows absorb leading/trailing whitespace so the
            // union of spans is the whole body.
            let start = if s == 0 { 0 } else { tokens[s].0 };
            let end = if e == n { body_len } else { tokens[e - 1].1 };
            make_passage(doc, i, doc.title.clone(), start, end)
        })
        .collect()
}

fn split_structural(doc: &Document) -> Vec<Passage> {
    let body = &doc.body;
    let headers: Vec<(usize, &str)> = header_regex()
        .find_iter(body)
        .map(|m| (m.start(), m.as_str()))
        .collect();
    if headers.is_empty() {
        return whole_body(doc);
    }

    let mut sections: Vec<(usize, usize, String)> = Vec::new();
    if !body[..headers[0].0].trim().is_empty() {
        sections.push((0, headers[0].0, doc.title.clone()));
    }
    for (i, &(start, line)) in headers.iter().enumerate() {
        let end = headers.get(i + 1).map_or(body.len(), |h| h.0);
        let heading = line.trim_start_matches('#').trim();
        sections.push((start, end, format!("{} / {}", doc.title, heading)));
    }

    sections
        .into_iter()
        .enumerate()
        .map(|(i, (start, end, title))| {
            let trimmed_end = start + body[start..end].trim_end().len();
            make_passage(
                doc,
                i,
                title,
                char_offset(body, start),
                char_offset(body, trimmed_end),
            )
        })
        .collect()
}
