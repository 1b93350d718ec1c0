use serde::{Deserialize, Serialize};

use crate::corpus::{serialize_history, DialogueContext};
use crate::error::{Error, Result};
use crate::text::{count_whitespace_tokens, whitespace_tokens, AGENT_MARKER, GROUNDING_MARKER};

pub const GROUND_THEN_AGENT_PREFIX: &str = "generate ⟨grounding⟩ then ⟨agent⟩";
pub const GROUND_ONLY_PREFIX: &str = "generate ⟨grounding⟩";
pub const AGENT_ONLY_PREFIX: &str = "generate ⟨agent⟩";

/// Most passages a prompt may carry.
pub const MAX_PROMPT_PASSAGES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub enum TaskTemplate {
    #[default]
    GroundThenAgent,
    GroundOnly,
    AgentOnly,
}

impl TaskTemplate {
    pub const ALL: [TaskTemplate; 3] = [
        TaskTemplate::GroundThenAgent,
        TaskTemplate::GroundOnly,
        TaskTemplate::AgentOnly,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            TaskTemplate::GroundThenAgent => GROUND_THEN_AGENT_PREFIX,
            TaskTemplate::GroundOnly => GROUND_ONLY_PREFIX,
            TaskTemplate::AgentOnly => AGENT_ONLY_PREFIX,
        }
    }

    pub fn wants_span(self) -> bool {
        self != TaskTemplate::AgentOnly
    }

    pub fn wants_answer(self) -> bool {
        self != TaskTemplate::GroundOnly
    }
}

/// One training pair in the format written to `prompts.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptExample {
    pub example_id: String,
    pub task: TaskTemplate,
    pub input_text: String,
    pub target_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub span: Option<String>,
    pub answer: Option<String>,
    pub parse_ok: bool,
    pub raw: String,
}

/// `prefix history passages…`, at most `budget` whitespace tokens.
///
/// The prefix is always kept whole. History keeps its newest turns; passages
/// fill what remains in rank order, so the lowest-ranked text is cut first.
pub fn build_prompt<S: AsRef<str>>(
    task: TaskTemplate,
    ctx: &DialogueContext,
    passages: &[S],
    budget: usize,
) -> Result<String> {
    if passages.is_empty() {
        return Err(Error::invalid("a prompt needs at least one passage"));
    }
    if passages.len() > MAX_PROMPT_PASSAGES {
        return Err(Error::invalid(format!(
            "at most {MAX_PROMPT_PASSAGES} passages fit a prompt, got {}",
            passages.len()
        )));
    }
    let prefix = task.prefix();
    let mut left = budget.saturating_sub(count_whitespace_tokens(prefix));
    let history = serialize_history(ctx, left.max(2));
    left = left.saturating_sub(count_whitespace_tokens(&history));

    let mut out = format!("{prefix} {history}");
    for p in passages {
        if left == 0 {
            break;
        }
        let text = p.as_ref().trim();
        let tokens = whitespace_tokens(text);
        if tokens.is_empty() {
            continue;
        }
        let take = tokens.len().min(left);
        let end_char = tokens[take - 1].1;
        let clipped: String = text.chars().take(end_char).collect();
        out.push(' ');
        out.push_str(&clipped);
        left -= take;
    }
    Ok(out)
}

fn check_marker_free(field: &str, value: &str) -> Result<()> {
    if value.contains(GROUNDING_MARKER) || value.contains(AGENT_MARKER) {
        return Err(Error::invalid(format!("{field} contains a reserved marker")));
    }
    Ok(())
}

pub fn build_target(task: TaskTemplate, span: Option<&str>, answer: Option<&str>) -> Result<String> {
    let need_span = || span.ok_or_else(|| Error::invalid(format!("{task:?} target needs a span")));
    let need_answer = || answer.ok_or_else(|| Error::invalid(format!("{task:?} target needs an answer")));
    match task {
        TaskTemplate::GroundThenAgent => {
            let (s, a) = (need_span()?, need_answer()?);
            check_marker_free("span", s)?;
            check_marker_free("answer", a)?;
            Ok(format!("{GROUNDING_MARKER} {s} {AGENT_MARKER} {a}"))
        }
        TaskTemplate::GroundOnly => {
            let s = need_span()?;
            check_marker_free("span", s)?;
            Ok(format!("{GROUNDING_MARKER} {s}"))
        }
        TaskTemplate::AgentOnly => {
            let a = need_answer()?;
            check_marker_free("answer", a)?;
            Ok(format!("{AGENT_MARKER} {a}"))
        }
    }
}

/// Splits generated text at the markers. When a marker the task requires is
/// missing, the whole raw string becomes the task's primary field and
/// `parse_ok` is false.
pub fn parse_output(raw: &str, task: TaskTemplate) -> GenerationOutput {
    let grounding = raw.find(GROUNDING_MARKER);
    let agent = raw.find(AGENT_MARKER);
    let span = grounding.map(|g| {
        let rest = &raw[g + GROUNDING_MARKER.len()..];
        let end = rest.find(AGENT_MARKER).unwrap_or(rest.len());
        rest[..end].trim().to_string()
    });
    let answer = agent.map(|a| raw[a + AGENT_MARKER.len()..].trim().to_string());
    let fallback = |primary_is_span: bool| GenerationOutput {
        span: primary_is_span.then(|| raw.to_string()),
        answer: (!primary_is_span).then(|| raw.to_string()),
        parse_ok: false,
        raw: raw.to_string(),
    };
    match task {
        TaskTemplate::GroundThenAgent => match (span, answer) {
            (Some(s), Some(a)) => GenerationOutput {
                span: Some(s),
                answer: Some(a),
                parse_ok: true,
                raw: raw.to_string(),
            },
            _ => fallback(false),
        },
        TaskTemplate::GroundOnly => match span {
            Some(s) => GenerationOutput {
                span: Some(s),
                answer: None,
                parse_ok: true,
                raw: raw.to_string(),
            },
            None => fallback(true),
        },
        TaskTemplate::AgentOnly => match answer {
            Some(a) => GenerationOutput {
                span: None,
                answer: Some(a),
                parse_ok: true,
                raw: raw.to_string(),
            },
            None => fallback(false),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::DialogueTurn;
    use proptest::prelude::*;

    fn hi() -> DialogueContext {
        DialogueContext::single("Hi").unwrap()
    }

    #[test]
    fn prompt_examples() {
        assert_eq!(
            build_prompt(TaskTemplate::GroundThenAgent, &hi(), &["P1"], 100).unwrap(),
            "generate ⟨grounding⟩ then ⟨agent⟩ ⟨user⟩ Hi P1"
        );
        assert_eq!(
            build_prompt(TaskTemplate::AgentOnly, &hi(), &["P1"], 100).unwrap(),
            "generate ⟨agent⟩ ⟨user⟩ Hi P1"
        );
        assert_eq!(
            build_prompt(TaskTemplate::GroundOnly, &hi(), &["P1", "P2"], 100).unwrap(),
            "generate ⟨grounding⟩ ⟨user⟩ Hi P1 P2"
        );
        let empty: [&str; 0] = [];
        assert!(build_prompt(TaskTemplate::GroundOnly, &hi(), &empty, 100).is_err());
        assert!(build_prompt(TaskTemplate::GroundOnly, &hi(), &["p"; 6], 100).is_err());
    }

    #[test]
    fn prefix_constants_are_byte_exact() {
        assert_eq!(TaskTemplate::GroundThenAgent.prefix().as_bytes(), "generate ⟨grounding⟩ then ⟨agent⟩".as_bytes());
        assert_eq!(TaskTemplate::GroundOnly.prefix().as_bytes(), "generate ⟨grounding⟩".as_bytes());
        assert_eq!(TaskTemplate::AgentOnly.prefix().as_bytes(), "generate ⟨agent⟩".as_bytes());
    }

    #[test]
    fn clipping_trims_lowest_ranked_passage_first() {
        let ctx = DialogueContext::new(vec![
            DialogueTurn::user("old question"),
            DialogueTurn::agent("old answer"),
            DialogueTurn::user("new question"),
        ])
        .unwrap();
        // prefix 4 + history 9 = 13 tokens; 4 remain for passages
        let p = build_prompt(TaskTemplate::GroundThenAgent, &ctx, &["a b c", "d e f"], 17).unwrap();
        assert_eq!(
            p,
            "generate ⟨grounding⟩ then ⟨agent⟩ ⟨user⟩ old question ⟨agent⟩ old answer ⟨user⟩ new question a b c d"
        );
        // history shrinks before the prefix is touched
        let p = build_prompt(TaskTemplate::GroundThenAgent, &ctx, &["a b c"], 8).unwrap();
        assert!(p.starts_with(GROUND_THEN_AGENT_PREFIX));
        assert!(p.contains("⟨user⟩ new question"));
        assert!(!p.contains("old"));
        assert_eq!(count_whitespace_tokens(&p), 8);
    }

    #[test]
    fn passage_order_follows_rank() {
        let a = build_prompt(TaskTemplate::AgentOnly, &hi(), &["first", "second"], 100).unwrap();
        let b = build_prompt(TaskTemplate::AgentOnly, &hi(), &["second", "first"], 100).unwrap();
        assert!(a.ends_with("first second"));
        assert!(b.ends_with("second first"));
    }

    #[test]
    fn target_examples() {
        let t = TaskTemplate::GroundThenAgent;
        assert_eq!(build_target(t, Some("s"), Some("a")).unwrap(), "⟨grounding⟩ s ⟨agent⟩ a");
        assert_eq!(build_target(TaskTemplate::GroundOnly, Some("s"), None).unwrap(), "⟨grounding⟩ s");
        assert_eq!(build_target(TaskTemplate::AgentOnly, None, Some("a")).unwrap(), "⟨agent⟩ a");
        assert!(build_target(t, Some("s"), None).is_err());
        assert!(build_target(TaskTemplate::GroundOnly, None, Some("a")).is_err());
        assert!(build_target(TaskTemplate::AgentOnly, Some("s"), None).is_err());
        assert!(build_target(t, Some("x ⟨agent⟩ y"), Some("a")).is_err());
    }

    #[test]
    fn parse_examples() {
        let o = parse_output("⟨grounding⟩ s ⟨agent⟩ a", TaskTemplate::GroundThenAgent);
        assert_eq!((o.span.as_deref(), o.answer.as_deref(), o.parse_ok), (Some("s"), Some("a"), true));
        let o = parse_output("⟨agent⟩ hello", TaskTemplate::AgentOnly);
        assert_eq!((o.span, o.answer.as_deref(), o.parse_ok), (None, Some("hello"), true));
        let o = parse_output("no markers here", TaskTemplate::GroundThenAgent);
        assert_eq!(o.answer.as_deref(), Some("no markers here"));
        assert!(!o.parse_ok);
        assert_eq!(o.raw, "no markers here");
        let o = parse_output("just text", TaskTemplate::GroundOnly);
        assert_eq!((o.span.as_deref(), o.answer, o.parse_ok), (Some("just text"), None, false));
        let o = parse_output("⟨grounding⟩ only span", TaskTemplate::GroundThenAgent);
        assert!(!o.parse_ok);
        assert_eq!(o.answer.as_deref(), Some("⟨grounding⟩ only span"));
    }

    fn marker_free() -> impl Strategy<Value = String> {
        "[a-zA-Z0-9 .,?!]{0,40}".prop_map(|s| s.trim().to_string())
    }

    proptest! {
        #[test]
        fn parse_inverts_build_target(s in marker_free(), a in marker_free()) {
            for task in TaskTemplate::ALL {
                let target = build_target(task, Some(&s), Some(&a)).unwrap();
                let out = parse_output(&target, task);
                prop_assert!(out.parse_ok);
                prop_assert_eq!(out.span.as_deref(), task.wants_span().then_some(s.as_str()));
                prop_assert_eq!(out.answer.as_deref(), task.wants_answer().then_some(a.as_str()));
            }
        }

        #[test]
        fn prompts_start_with_prefix(words in proptest::collection::vec("[a-z]{1,6}", 1..30), budget in 1usize..40) {
            let ctx = DialogueContext::single(words.join(" ")).unwrap();
            for task in TaskTemplate::ALL {
                let p = build_prompt(task, &ctx, &[words.join(" ")], budget).unwrap();
                prop_assert!(p.starts_with(task.prefix()));
            }
        }
    }
}
