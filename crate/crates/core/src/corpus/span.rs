use serde::{Deserialize, Serialize};

use crate::text::{char_offset, char_len};

/// Char offsets `[start, end)` of a span inside a passage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanMatch {
    pub start: usize,
    pub end: usize,
    /// True when only the whitespace-normalized comparison matched.
    pub normalized: bool,
}

/// Locates `span` in `text`: first exact occurrence, otherwise the first
/// occurrence after collapsing whitespace runs in both strings, mapped back to
/// raw offsets.
pub fn find_span_offsets(text: &str, span: &str) -> Option<SpanMatch> {
    if span.is_empty() {
        return None;
    }
    if let Some(b) = text.find(span) {
        let start = char_offset(text, b);
        return Some(SpanMatch {
            start,
            end: start + char_len(span),
            normalized: false,
        });
    }

    let needle: Vec<char> = span.split_whitespace().collect::<Vec<_>>().join(" ").chars().collect();
    if needle.is_empty() {
        return None;
    }
    // normalized haystack with each char's raw char index
    let mut hay: Vec<char> = Vec::new();
    let mut raw_idx: Vec<usize> = Vec::new();
    let mut in_ws = false;
    for (i, ch) in text.chars().enumerate() {
        if ch.is_whitespace() {
            if !in_ws && !hay.is_empty() {
                hay.push(' ');
                raw_idx.push(i);
            }
            in_ws = true;
        } else {
            hay.push(ch);
            raw_idx.push(i);
            in_ws = false;
        }
    }
    hay.windows(needle.len())
        .position(|w| w == needle.as_slice())
        .map(|pos| SpanMatch {
            start: raw_idx[pos],
            end: raw_idx[pos + needle.len() - 1] + 1,
            normalized: true,
        })
}
