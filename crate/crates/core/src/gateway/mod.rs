//! LLM access: an OpenAI-compatible chat-completions client, a deterministic
//! mock for tests, and parsing of free-text answers into predictions.

mod http;
mod mock;

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{GatewayConfig, HttpGateway, LogEntry};
pub use mock::MockGateway;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("gateway configuration error: {0}")]
    Config(String),
    #[error("mock script exhausted after {0} replies")]
    ScriptExhausted(usize),
}

/// Anything that turns a prompt into a completion.
pub trait Gateway: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, GatewayError>;

    /// Upper bound on in-flight requests.
    fn max_concurrent(&self) -> usize {
        1
    }
}

impl<G: Gateway + ?Sized> Gateway for &G {
    fn complete(&self, prompt: &str) -> Result<String, GatewayError> {
        (**self).complete(prompt)
    }

    fn max_concurrent(&self) -> usize {
        (**self).max_concurrent()
    }
}

/// A target class, or the explicit abstention sink.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", from = "String")]
pub enum PredictedLabel {
    Class(String),
    Abstain,
}

pub const ABSTAIN: &str = "ABSTAIN";

impl From<PredictedLabel> for String {
    fn from(l: PredictedLabel) -> String {
        l.to_string()
    }
}

impl From<String> for PredictedLabel {
    fn from(s: String) -> Self {
        if s == ABSTAIN {
            PredictedLabel::Abstain
        } else {
            PredictedLabel::Class(s)
        }
    }
}

impl fmt::Display for PredictedLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PredictedLabel::Class(c) => f.write_str(c),
            PredictedLabel::Abstain => f.write_str(ABSTAIN),
        }
    }
}

impl PredictedLabel {
    pub fn class(&self) -> Option<&str> {
        match self {
            PredictedLabel::Class(c) => Some(c),
            PredictedLabel::Abstain => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub prompt: String,
    pub response: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionFlags {
    #[serde(default)]
    pub unrevised: bool,
    #[serde(default)]
    pub no_memory: bool,
    #[serde(default)]
    pub parse_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub label: PredictedLabel,
    pub rationale: String,
    /// Rule ids from the prompt context that the rationale cites.
    pub evidence: Vec<String>,
    #[serde(default)]
    pub transcripts: Vec<Exchange>,
    #[serde(default)]
    pub flags: PredictionFlags,
}

fn answer_line() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^\s*[*_`#>\s]*answer\s*[*_]*\s*:\s*(.*?)\s*$").expect("valid regex"))
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

/// Start offsets of `token` in `text` where it is not glued to other word
/// characters.
fn token_positions(text: &str, token: &str, ascii_case_insensitive: bool) -> Vec<usize> {
    if token.is_empty() {
        return Vec::new();
    }
    let (hay, needle) = if ascii_case_insensitive {
        (text.to_ascii_lowercase(), token.to_ascii_lowercase())
    } else {
        (text.to_string(), token.to_string())
    };
    let bytes = hay.as_bytes();
    hay.match_indices(needle.as_str())
        .map(|(i, _)| i)
        .filter(|&i| {
            let end = i + needle.len();
            (i == 0 || !is_word_byte(bytes[i - 1])) && (end == bytes.len() || !is_word_byte(bytes[end]))
        })
        .collect()
}

fn match_class<'a>(raw: &str, classes: &'a [String]) -> Option<&'a String> {
    let cleaned = raw
        .trim()
        .trim_matches(|c: char| matches!(c, '*' | '`' | '"' | '\'' | '.' | '<' | '>' | '[' | ']' | '(' | ')'))
        .trim();
    classes.iter().find(|c| c.eq_ignore_ascii_case(cleaned))
}

/// Parses a free-text completion.
///
/// The label comes from the last `ANSWER: <x>` line matching a class
/// (case-insensitive). Failing that, the last standalone class name in the
/// text is used and `parse_fallback` is set; otherwise the label is ABSTAIN.
/// Evidence holds the ids from `context_rule_ids` that occur in the text as
/// whole tokens, in order of first appearance.
pub fn parse_prediction(response: &str, classes: &[String], context_rule_ids: &[String]) -> PredictionResult {
    let mut flags = PredictionFlags::default();
    let lines: Vec<&str> = response.lines().collect();
    let answer = lines
        .iter()
        .enumerate()
        .rev()
        .find_map(|(i, l)| answer_line().captures(l).map(|c| (i, c.get(1).map_or("", |m| m.as_str()).to_string())));

    let mut label = answer
        .as_ref()
        .and_then(|(_, x)| match_class(x, classes))
        .map(|c| PredictedLabel::Class(c.clone()));
    if label.is_none() {
        let last = classes
            .iter()
            .filter_map(|c| {
                token_positions(response, c, true).into_iter().max().map(|pos| (pos, c))
            })
            .max_by_key(|(pos, c)| (*pos, c.len()));
        if let Some((_, c)) = last {
            flags.parse_fallback = true;
            label = Some(PredictedLabel::Class(c.clone()));
        }
    }

    let rationale = lines
        .iter()
        .enumerate()
        .filter(|(i, _)| answer.as_ref().is_none_or(|(ai, _)| ai != i))
        .map(|(_, l)| *l)
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_string();

    PredictionResult {
        label: label.unwrap_or(PredictedLabel::Abstain),
        rationale,
        evidence: cited_ids(response, context_rule_ids),
        transcripts: Vec::new(),
        flags,
    }
}

/// Ids from `known` that appear in `text` as whole tokens, by first position.
pub fn cited_ids(text: &str, known: &[String]) -> Vec<String> {
    let mut hits: Vec<(usize, &String)> = known
        .iter()
        .filter_map(|id| token_positions(text, id, false).first().map(|&p| (p, id)))
        .collect();
    hits.sort();
    hits.dedup_by(|a, b| a.1 == b.1);
    hits.into_iter().map(|(_, id)| id.clone()).collect()
}

/// Every token shaped like a knowledge-base rule id (`r<digits>`).
pub fn rule_id_tokens(text: &str) -> Vec<String> {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?:^|[^A-Za-z0-9_])(r\d+)(?:$|[^A-Za-z0-9_])").expect("valid regex"));
    let mut out: Vec<String> = Vec::new();
    // matches may share a delimiter, so scan position by position
    let mut start = 0;
    while let Some(c) = re.captures_at(text, start) {
        let m = c.get(1).expect("group");
        if !out.iter().any(|x| x == m.as_str()) {
            out.push(m.as_str().to_string());
        }
        start = m.end();
    }
    out
}

/// Maps `f` over `items` with at most `bound` calls in flight; results keep
/// submission order.
pub fn parallel_map<T, R, F>(items: &[T], bound: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = bound.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = Vec::with_capacity(items.len());
    slots.resize_with(items.len(), || None);
    let results = std::sync::Mutex::new(slots);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                results.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}
