use std::collections::{BTreeMap, BTreeSet};

use crate::kb::KnowledgeBase;
use crate::pattern::BehavioralPattern;

/// Scores documents against a query; higher is more relevant.
pub trait RelevanceScorer {
    fn scores(&self, query: &str, docs: &[String]) -> Vec<f64>;
}

/// Cosine similarity of TF-IDF vectors over lowercased word tokens, with
/// smoothed idf `ln((1 + N) / (1 + df)) + 1` fitted on the documents.
#[derive(Debug, Clone, Copy, Default)]
pub struct TfIdf;

pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

fn term_counts(text: &str) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for t in tokens(text) {
        *m.entry(t).or_insert(0.0) += 1.0;
    }
    m
}

impl RelevanceScorer for TfIdf {
    fn scores(&self, query: &str, docs: &[String]) -> Vec<f64> {
        let doc_tf: Vec<BTreeMap<String, f64>> = docs.iter().map(|d| term_counts(d)).collect();
        let n = docs.len() as f64;
        let mut df: BTreeMap<&str, f64> = BTreeMap::new();
        for tf in &doc_tf {
            for t in tf.keys() {
                *df.entry(t.as_str()).or_insert(0.0) += 1.0;
            }
        }
        let idf = |t: &str| ((1.0 + n) / (1.0 + df.get(t).copied().unwrap_or(0.0))).ln() + 1.0;
        let weigh = |tf: &BTreeMap<String, f64>| -> BTreeMap<String, f64> {
            tf.iter().filter(|(t, _)| df.contains_key(t.as_str())).map(|(t, c)| (t.clone(), c * idf(t))).collect()
        };
        let q = weigh(&term_counts(query));
        let qn = q.values().map(|v| v * v).sum::<f64>().sqrt();
        doc_tf
            .iter()
            .map(|tf| {
                let d = weigh(tf);
                let dn = d.values().map(|v| v * v).sum::<f64>().sqrt();
                if qn == 0.0 || dn == 0.0 {
                    return 0.0;
                }
                let dot: f64 = q.iter().filter_map(|(t, w)| d.get(t).map(|x| x * w)).sum();
                dot / (qn * dn)
            })
            .collect()
    }
}

pub fn pattern_document(p: &BehavioralPattern) -> String {
    format!("{} {}", p.name, p.description)
}

/// Patterns ranked by relevance to `target_desc`, best first, ties by id.
pub fn relevant_patterns<'a>(
    kb: &'a KnowledgeBase,
    target_desc: &str,
    k: usize,
    scorer: &dyn RelevanceScorer,
) -> Vec<(&'a BehavioralPattern, f64)> {
    let docs: Vec<String> = kb.patterns.iter().map(pattern_document).collect();
    let scores = scorer.scores(target_desc, &docs);
    let mut ranked: Vec<(&BehavioralPattern, f64)> = kb.patterns.iter().zip(scores).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.id.cmp(&b.0.id)));
    ranked.truncate(k.max(1));
    ranked
}

/// Distinct tokens shared by two texts; handy for explaining a ranking.
pub fn shared_tokens(a: &str, b: &str) -> BTreeSet<String> {
    let ta: BTreeSet<String> = tokens(a).into_iter().collect();
    tokens(b).into_iter().filter(|t| ta.contains(t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_cosine() {
        // docs: d1 = "behavioral loyalty churn risk", d2 = "spending variability"
        // N = 2; idf(t) = ln(3/2) + 1 for every doc term (df = 1 each)
        // query "will the client churn" keeps only "churn"
        // cos(q, d1) = idf / (sqrt(4) * idf) = 0.5; cos(q, d2) = 0
        let docs = vec!["behavioral loyalty churn risk".to_string(), "spending variability".to_string()];
        let s = TfIdf.scores("will the client churn", &docs);
        assert!((s[0] - 0.5).abs() < 1e-12, "{s:?}");
        assert_eq!(s[1], 0.0);
    }

    #[test]
    fn idf_downweights_common_terms() {
        // "client" in both docs: idf = ln(3/3)+1 = 1; "churn" in d1: ln(3/2)+1
        let docs = vec!["client churn".to_string(), "client spending".to_string()];
        let s = TfIdf.scores("client churn", &docs);
        let a = (1.5f64).ln() + 1.0;
        let expect0 = 1.0; // identical vectors
        let expect1 = 1.0 / ((1.0 + a * a).sqrt() * (1.0 + a * a).sqrt());
        assert!((s[0] - expect0).abs() < 1e-12);
        assert!((s[1] - expect1).abs() < 1e-12);
    }

    #[test]
    fn tokenizer_lowercases() {
        assert_eq!(tokens("Will the CLIENT churn?"), vec!["will", "the", "client", "churn"]);
        assert_eq!(shared_tokens("a b c", "C d"), BTreeSet::from(["c".to_string()]));
    }
}
