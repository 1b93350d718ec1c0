use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{exact_match, recall_at_k, reciprocal_rank, rouge_l, s_bleu, token_f1};
use crate::corpus::GroundedExample;
use crate::error::{Error, Result};
use crate::jsonl;

/// One line of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub example_id: String,
    pub answer: String,
    #[serde(default)]
    pub span: Option<String>,
    #[serde(default)]
    pub ranked_passage_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    pub example_id: String,
    pub token_f1: f64,
    pub rouge_l: f64,
    pub grounding_em: f64,
    pub grounding_f1: f64,
    pub reciprocal_rank: f64,
    pub first_gold_rank: Option<usize>,
}

pub const METRIC_KEYS: [&str; 9] = [
    "token_f1",
    "s_bleu",
    "rouge_l",
    "recall@1",
    "recall@5",
    "recall@10",
    "mrr",
    "grounding_em",
    "grounding_f1",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub examples: Vec<ExampleScores>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn metric(&self, key: &str) -> f64 {
        self.metrics.get(key).copied().unwrap_or(f64::NAN)
    }

    /// Checks the report's structural invariants: every metric key present, all
    /// scalars in `[0, 1]` except `s_bleu` in `[0, 100]`, and per-example scores in range.
    pub fn validate(&self, expected_examples: usize) -> Result<()> {
        for key in METRIC_KEYS {
            let v = self
                .metrics
                .get(key)
                .ok_or_else(|| Error::invalid(format!("report lacks metric {key}")))?;
            let hi = if key == "s_bleu" { 100.0 } else { 1.0 };
            if !(0.0..=hi).contains(v) {
                return Err(Error::invalid(format!("metric {key} = {v} outside [0, {hi}]")));
            }
        }
        if self.examples.len() != expected_examples {
            return Err(Error::invalid(format!(
                "report has {} example records, expected {expected_examples}",
                self.examples.len()
            )));
        }
        for e in &self.examples {
            for v in [e.token_f1, e.rouge_l, e.grounding_em, e.grounding_f1, e.reciprocal_rank] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::invalid(format!("example {} has score {v}", e.example_id)));
                }
            }
        }
        Ok(())
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| metric | value |\n|---|---|\n");
        for key in METRIC_KEYS {
            let _ = writeln!(s, "| {key} | {:.4} |", self.metric(key));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        jsonl::write_json(&dir.join("report.json"), self)?;
        let md = dir.join("report.md");
        std::fs::write(&md, self.to_markdown()).map_err(|e| Error::io(md, e))
    }
}

/// Scores predictions against references matched by `example_id`.
pub fn evaluate(
    predictions: &[Prediction],
    references: &[GroundedExample],
    config: serde_json::Value,
) -> Result<EvalReport> {
    let pred_ids: BTreeSet<&str> = predictions.iter().map(|p| p.example_id.as_str()).collect();
    let ref_by_id: HashMap<&str, &GroundedExample> =
        references.iter().map(|r| (r.example_id.as_str(), r)).collect();
    let missing: Vec<String> = ref_by_id
        .keys()
        .filter(|id| !pred_ids.contains(*id))
        .chain(pred_ids.iter().filter(|id| !ref_by_id.contains_key(*id)))
        .map(|s| s.to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if !missing.is_empty() || pred_ids.len() != predictions.len() {
        return Err(Error::IdMismatch(missing));
    }

    let mut examples = Vec::with_capacity(predictions.len());
    let mut answers = Vec::new();
    let mut golds = Vec::new();
    let mut recall = [0.0f64; 3];
    for p in predictions {
        let r = ref_by_id[p.example_id.as_str()];
        let span = p.span.as_deref().unwrap_or("");
        let first_gold_rank = p
            .ranked_passage_ids
            .iter()
            .position(|id| r.is_positive(id))
            .map(|i| i + 1);
        for (slot, k) in recall.iter_mut().zip([1, 5, 10]) {
            *slot += recall_at_k(&p.ranked_passage_ids, &r.positive_passage_ids, k);
        }
        examples.push(ExampleScores {
            example_id: p.example_id.clone(),
            token_f1: token_f1(&p.answer, &r.gold_answer),
            rouge_l: rouge_l(&p.answer, &r.gold_answer),
            grounding_em: exact_match(span, &r.gold_span),
            grounding_f1: token_f1(span, &r.gold_span),
            reciprocal_rank: reciprocal_rank(&p.ranked_passage_ids, &r.positive_passage_ids),
            first_gold_rank,
        });
        answers.push(p.answer.as_str());
        golds.push(r.gold_answer.as_str());
    }

    let n = examples.len().max(1) as f64;
    let mean = |f: fn(&ExampleScores) -> f64| examples.iter().map(f).sum::<f64>() / n;
    let mut metrics = BTreeMap::new();
    metrics.insert("token_f1".to_string(), mean(|e| e.token_f1));
    metrics.insert("rouge_l".to_string(), mean(|e| e.rouge_l));
    metrics.insert("s_bleu".to_string(), s_bleu(&answers, &golds));
    metrics.insert("recall@1".to_string(), recall[0] / n);
    metrics.insert("recall@5".to_string(), recall[1] / n);
    metrics.insert("recall@10".to_string(), recall[2] / n);
    metrics.insert("mrr".to_string(), mean(|e| e.reciprocal_rank));
    metrics.insert("grounding_em".to_string(), mean(|e| e.grounding_em));
    metrics.insert("grounding_f1".to_string(), mean(|e| e.grounding_f1));

    let mut config = config;
    if let serde_json::Value::Object(map) = &mut config {
        map.insert(
            "bleu".into(),
            serde_json::json!({"order": 4, "smoothing": "add-epsilon", "epsilon": 1e-9, "tokenize": "lowercase, strip punctuation, whitespace split"}),
        );
    }
    Ok(EvalReport {
        metrics,
        examples,
        config,
    })
}

/// File-level entry point: `predictions.jsonl` vs `references.jsonl`.
pub fn evaluate_run(predictions: &Path, references: &Path) -> Result<EvalReport> {
    let preds: Vec<Prediction> = jsonl::read(predictions)?;
    let refs: Vec<GroundedExample> = jsonl::read(references)?;
    evaluate(
        &preds,
        &refs,
        serde_json::json!({
            "predictions": predictions.display().to_string(),
            "references": references.display().to_string(),
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::DialogueContext;

    fn reference(id: &str) -> GroundedExample {
        GroundedExample {
            example_id: id.into(),
            context: DialogueContext::single("q").unwrap(),
            positive_passage_ids: vec!["p1".into()],
            gold_span: "the span".into(),
            gold_answer: "the answer text".into(),
            hard_negative_ids: vec![],
        }
    }

    fn pred(id: &str, ranked: &[&str]) -> Prediction {
        Prediction {
            example_id: id.into(),
            answer: "answer text".into(),
            span: Some("span".into()),
            ranked_passage_ids: ranked.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn report_metrics_and_schema() {
        let refs = vec![reference("a"), reference("b")];
        let preds = vec![pred("a", &["p1", "p2"]), pred("b", &["p2", "p1"])];
        let rep = evaluate(&preds, &refs, serde_json::json!({})).unwrap();
        rep.validate(2).unwrap();
        assert_eq!(rep.metric("token_f1"), 1.0);
        assert_eq!(rep.metric("grounding_em"), 1.0);
        assert_eq!(rep.metric("recall@1"), 0.5);
        assert_eq!(rep.metric("recall@5"), 1.0);
        assert_eq!(rep.metric("mrr"), 0.75);
        assert!(rep.to_markdown().contains("| recall@1 | 0.5000 |"));
        assert!(rep.config.get("bleu").is_some());
    }

    #[test]
    fn id_mismatch_lists_missing() {
        let refs = vec![reference("a"), reference("b")];
        let preds = vec![pred("a", &[]), pred("c", &[])];
        match evaluate(&preds, &refs, serde_json::json!({})) {
            Err(Error::IdMismatch(ids)) => assert_eq!(ids, vec!["b".to_string(), "c".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validate_rejects_out_of_range() {
        let refs = vec![reference("a")];
        let mut rep = evaluate(&[pred("a", &["p1"])], &refs, serde_json::json!({})).unwrap();
        assert!(rep.validate(2).is_err());
        rep.metrics.insert("mrr".into(), 1.5);
        assert!(rep.validate(1).is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("predictions.jsonl");
        let r = dir.path().join("references.jsonl");
        jsonl::write(&p, &[pred("a", &["p1"])]).unwrap();
        jsonl::write(&r, &[reference("a")]).unwrap();
        let rep = evaluate_run(&p, &r).unwrap();
        rep.write(dir.path()).unwrap();
        let back: EvalReport = jsonl::read_json(&dir.path().join("report.json")).unwrap();
        back.validate(1).unwrap();
        assert!(dir.path().join("report.md").exists());
    }
}
