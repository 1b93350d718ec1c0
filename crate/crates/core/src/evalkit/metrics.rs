use std::collections::HashMap;

const ARTICLES: [&str; 3] = ["a", "an", "the"];
const BLEU_EPSILON: f64 = 1e-9;

fn strip_and_split(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// Lowercases, strips punctuation, drops the articles `a`/`an`/`the`, splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    strip_and_split(text)
        .into_iter()
        .filter(|t| !ARTICLES.contains(&t.as_str()))
        .collect()
}

/// Tokenization used by BLEU: like [`normalize`] but articles are kept.
pub fn bleu_tokens(text: &str) -> Vec<String> {
    strip_and_split(text)
}

fn f_measure(overlap: usize, pred_len: usize, ref_len: usize) -> f64 {
    match (pred_len, ref_len) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ if overlap == 0 => 0.0,
        _ => {
            let p = overlap as f64 / pred_len as f64;
            let r = overlap as f64 / ref_len as f64;
            2.0 * p * r / (p + r)
        }
    }
}

/// Multiset token-overlap F1 over [`normalize`]d tokens.
pub fn token_f1(pred: &str, reference: &str) -> f64 {
    let p = normalize(pred);
    let r = normalize(reference);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &r {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut overlap = 0;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    f_measure(overlap, p.len(), r.len())
}

pub(crate) fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure over [`normalize`]d tokens.
pub fn rouge_l(pred: &str, reference: &str) -> f64 {
    let p = normalize(pred);
    let r = normalize(reference);
    f_measure(lcs_len(&p, &r), p.len(), r.len())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

/// Corpus BLEU-4 in `[0, 100]`.
///
/// Clipped n-gram matches and totals are summed over the corpus. A zero match
/// count is floored to `1e-9`. Orders with no candidate n-grams at all (every
/// prediction shorter than `n`) are left out of the geometric mean, so a corpus
/// scored against itself is always 100.
pub fn s_bleu<P: AsRef<str>, R: AsRef<str>>(preds: &[P], refs: &[R]) -> f64 {
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let mut pred_len = 0usize;
    let mut ref_len = 0usize;
    for (p, r) in preds.iter().zip(refs) {
        let p = bleu_tokens(p.as_ref());
        let r = bleu_tokens(r.as_ref());
        pred_len += p.len();
        ref_len += r.len();
        for n in 1..=4 {
            let pc = ngram_counts(&p, n);
            let rc = ngram_counts(&r, n);
            for (g, c) in &pc {
                matches[n - 1] += (*c).min(rc.get(g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    if pred_len == 0 {
        return if ref_len == 0 { 100.0 } else { 0.0 };
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..4 {
        if totals[n] == 0 {
            continue;
        }
        let num = if matches[n] == 0 {
            BLEU_EPSILON
        } else {
            matches[n] as f64
        };
        log_sum += (num / totals[n] as f64).ln();
        orders += 1;
    }
    let bp = if pred_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / pred_len as f64).exp()
    };
    100.0 * bp * (log_sum / orders as f64).exp()
}

/// 1.0 if any gold id is among the first `k` ranked ids.
pub fn recall_at_k<S: AsRef<str>, G: AsRef<str>>(ranked: &[S], gold: &[G], k: usize) -> f64 {
    let hit = ranked
        .iter()
        .take(k)
        .any(|id| gold.iter().any(|g| g.as_ref() == id.as_ref()));
    if hit {
        1.0
    } else {
        0.0
    }
}

/// Reciprocal rank of the first gold id; 0 when none is ranked.
pub fn reciprocal_rank<S: AsRef<str>, G: AsRef<str>>(ranked: &[S], gold: &[G]) -> f64 {
    ranked
        .iter()
        .position(|id| gold.iter().any(|g| g.as_ref() == id.as_ref()))
        .map_or(0.0, |i| 1.0 / (i as f64 + 1.0))
}

/// Mean reciprocal rank over queries.
pub fn mrr<S: AsRef<str>, G: AsRef<str>>(queries: &[(Vec<S>, Vec<G>)]) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    queries
        .iter()
        .map(|(r, g)| reciprocal_rank(r, g))
        .sum::<f64>()
        / queries.len() as f64
}

/// Exact match after normalization.
pub fn exact_match(pred: &str, reference: &str) -> f64 {
    if normalize(pred) == normalize(reference) {
        1.0
    } else {
        0.0
    }
}
