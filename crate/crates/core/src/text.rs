//! String helpers shared by the corpus, prompt, and model layers.
//!
//! All public offsets in this crate count Unicode scalar values (`char`s), not
//! bytes, so that they line up with what a client sees when it indexes the
//! passage text.

use std::sync::OnceLock;

use regex::Regex;

pub const USER_MARKER: &str = "⟨user⟩";
pub const AGENT_MARKER: &str = "⟨agent⟩";
pub const GROUNDING_MARKER: &str = "⟨grounding⟩";

/// Number of `char`s in `s`.
pub fn char_len(s: &str) -> usize {
    s.chars().count()
}

/// Byte offset of the `char_idx`-th char; `s.len()` when `char_idx` is at or past the end.
pub fn byte_offset(s: &str, char_idx: usize) -> usize {
    s.char_indices().nth(char_idx).map_or(s.len(), |(b, _)| b)
}

/// Char offset corresponding to a byte offset on a char boundary.
pub fn char_offset(s: &str, byte_idx: usize) -> usize {
    s[..byte_idx].chars().count()
}

/// Slice by char offsets. Panics if the range is out of bounds, like `str` slicing.
pub fn char_slice(s: &str, start: usize, end: usize) -> &str {
    assert!(start <= end, "char_slice: start {start} > end {end}");
    let b0 = byte_offset(s, start);
    let b1 = byte_offset(s, end);
    assert!(end <= char_len(s), "char_slice: end {end} out of bounds");
    &s[b0..b1]
}

/// Whitespace tokens with their char offsets `[start, end)`.
pub fn whitespace_tokens(s: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut idx = 0;
    for ch in s.chars() {
        if ch.is_whitespace() {
            if let Some(st) = start.take() {
                out.push((st, idx));
            }
        } else if start.is_none() {
            start = Some(idx);
        }
        idx += 1;
    }
    if let Some(st) = start {
        out.push((st, idx));
    }
    out
}

pub fn count_whitespace_tokens(s: &str) -> usize {
    s.split_whitespace().count()
}

fn piece_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"⟨[a-z]+⟩|[\p{L}\p{N}]+|[^\s\p{L}\p{N}]").expect("valid regex"))
}

/// Model-level pre-tokenization: lowercased word pieces, single punctuation
/// characters, and the reserved `⟨...⟩` markers kept whole.
pub fn word_pieces(s: &str) -> Vec<String> {
    let lowered = s.to_lowercase();
    piece_regex()
        .find_iter(&lowered)
        .map(|m| m.as_str().to_string())
        .collect()
}

/// Inverse-ish of [`word_pieces`]: space-joined, with no space before closing punctuation.
pub fn detokenize<S: AsRef<str>>(pieces: &[S]) -> String {
    let mut out = String::new();
    for p in pieces {
        let p = p.as_ref();
        let attach = matches!(p, "." | "," | "!" | "?" | ";" | ":" | ")" | "'");
        if !out.is_empty() && !attach {
            out.push(' ');
        }
        out.push_str(p);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn char_offsets_handle_multibyte() {
        let s = "⟨user⟩ héllo";
        assert_eq!(char_len(s), 12);
        assert_eq!(char_slice(s, 7, 12), "héllo");
        assert_eq!(char_offset(s, byte_offset(s, 9)), 9);
    }

    #[test]
    fn whitespace_tokens_report_char_spans() {
        assert_eq!(whitespace_tokens("  ab c\n"), vec![(2, 4), (5, 6)]);
        assert!(whitespace_tokens("   ").is_empty());
    }

    #[test]
    fn pieces_keep_markers_whole() {
        assert_eq!(
            word_pieces("generate ⟨grounding⟩ then ⟨agent⟩ Hi, there."),
            vec!["generate", "⟨grounding⟩", "then", "⟨agent⟩", "hi", ",", "there", "."]
        );
    }

    #[test]
    fn detokenize_attaches_punctuation() {
        assert_eq!(detokenize(&["it", "costs", "40", "dollars", "."]), "it costs 40 dollars.");
    }
}
