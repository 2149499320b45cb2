//! Prompt assembly: relevance retrieval, capped fact lists, few-shot
//! examples, reflection memory and the two-pass revise protocol.

mod relevance;
pub mod template;

use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::essence::EssenceVector;
use crate::gateway::{parse_prediction, Exchange, Gateway, GatewayError, PredictionResult};
use crate::ingest::{largest_remainder, UserHistory, SECONDS_PER_DAY};
use crate::kb::{fmt_observed, Fact, FactKind, KnowledgeBase, TargetSpec};
use crate::util::sha256_hex;
use crate::whitebox::Supports;

pub use relevance::{pattern_document, relevant_patterns, shared_tokens, tokens, RelevanceScorer, TfIdf};
use template::*;

/// Hard caps on prompt contents.
pub const MAX_FACTS: usize = 20;
pub const MAX_SHOTS: usize = 16;
pub const RATIONALE_EXCERPT_CHARS: usize = 400;
pub const MEMORY_PER_OUTCOME: usize = 2;

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("unknown context strategy `{0}` (expected zs, q, fi, qfi or kb)")]
    UnknownStrategy(String),
    #[error("strategy {strategy} needs {what}")]
    MissingInput { strategy: ContextStrategy, what: &'static str },
    #[error("{0} shots requested, at most 16 allowed")]
    TooManyShots(usize),
    #[error("target {0} is not in the knowledge base")]
    UnknownTarget(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextStrategy {
    /// Raw transaction rows only.
    Zs,
    /// Raw rows plus population quantiles.
    Q,
    /// Raw rows plus information-value feature ranking.
    Fi,
    /// Raw rows, quantiles and ranking.
    Qfi,
    /// Graded facts retrieved from the knowledge base.
    KbViaWb,
}

impl ContextStrategy {
    pub const ALL: [ContextStrategy; 5] =
        [ContextStrategy::Zs, ContextStrategy::Q, ContextStrategy::Fi, ContextStrategy::Qfi, ContextStrategy::KbViaWb];

    fn raw_rows(self) -> bool {
        self != ContextStrategy::KbViaWb
    }

    fn quantiles(self) -> bool {
        matches!(self, ContextStrategy::Q | ContextStrategy::Qfi)
    }

    fn importance(self) -> bool {
        matches!(self, ContextStrategy::Fi | ContextStrategy::Qfi)
    }
}

impl fmt::Display for ContextStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContextStrategy::Zs => "zs",
            ContextStrategy::Q => "q",
            ContextStrategy::Fi => "fi",
            ContextStrategy::Qfi => "qfi",
            ContextStrategy::KbViaWb => "kb",
        })
    }
}

impl FromStr for ContextStrategy {
    type Err = ContextError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_', ' '], "").as_str() {
            "zs" | "zeroshot" => Ok(ContextStrategy::Zs),
            "q" => Ok(ContextStrategy::Q),
            "fi" => Ok(ContextStrategy::Fi),
            "qfi" => Ok(ContextStrategy::Qfi),
            "kb" | "kbviawb" => Ok(ContextStrategy::KbViaWb),
            _ => Err(ContextError::UnknownStrategy(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextConfig {
    /// Clamped to 20.
    pub max_facts: usize,
    /// Patterns retrieved per target.
    pub relevant_patterns: usize,
    pub max_raw_rows: usize,
    /// Evidence lines shown per example.
    pub shot_lines: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig { max_facts: MAX_FACTS, relevant_patterns: 3, max_raw_rows: 50, shot_lines: 5 }
    }
}

/// What is known about the user being predicted.
#[derive(Debug, Clone, Copy)]
pub struct UserEvidence<'a> {
    pub user_id: &'a str,
    pub facts: &'a [Fact],
    pub history: Option<&'a UserHistory>,
    pub essences: Option<&'a EssenceVector>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shot {
    pub user_id: String,
    pub lines: Vec<String>,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Correct,
    Incorrect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionEntry {
    pub context_digest: String,
    pub prediction: String,
    pub outcome: Option<Outcome>,
    pub rationale: String,
}

impl ReflectionEntry {
    pub fn new(ctx: &PromptContext, prediction: &str, gold: Option<&str>, rationale: &str) -> Self {
        ReflectionEntry {
            context_digest: ctx.digest(),
            prediction: prediction.to_string(),
            outcome: gold.map(|g| if g == prediction { Outcome::Correct } else { Outcome::Incorrect }),
            rationale: rationale.chars().take(RATIONALE_EXCERPT_CHARS).collect(),
        }
    }

    fn line(&self) -> String {
        let outcome = match self.outcome {
            Some(Outcome::Correct) => "correct",
            Some(Outcome::Incorrect) => "incorrect",
            None => "unknown",
        };
        let rationale = self.rationale.split_whitespace().collect::<Vec<_>>().join(" ");
        format!("- Predicted {}; outcome: {outcome}. Reasoning: {rationale}", self.prediction)
    }
}

/// Append-only store of past predictions and their outcomes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionMemory {
    entries: Vec<ReflectionEntry>,
}

impl ReflectionMemory {
    pub fn push(&mut self, e: ReflectionEntry) {
        self.entries.push(e);
    }

    pub fn entries(&self) -> &[ReflectionEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// The two most recent correct and two most recent incorrect entries, in
/// their original order.
pub fn select_memory(memory: &[ReflectionEntry]) -> Vec<ReflectionEntry> {
    let mut keep = vec![false; memory.len()];
    for outcome in [Outcome::Correct, Outcome::Incorrect] {
        memory
            .iter()
            .enumerate()
            .rev()
            .filter(|(_, e)| e.outcome == Some(outcome))
            .take(MEMORY_PER_OUTCOME)
            .for_each(|(i, _)| keep[i] = true);
    }
    memory.iter().zip(keep).filter(|(_, k)| *k).map(|(e, _)| e.clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub target: TargetSpec,
    pub strategy: ContextStrategy,
    pub user_id: String,
    pub facts: Vec<Fact>,
    pub shots: Vec<Shot>,
    pub reflections: Vec<ReflectionEntry>,
    /// Row-wise transaction rendering (non-KB strategies).
    pub raw_rows: Vec<String>,
    pub quantile_lines: Vec<String>,
    pub importance_lines: Vec<String>,
    pub rendered: String,
}

impl PromptContext {
    pub fn render(&self) -> String {
        self.render_with(&self.reflections, None)
    }

    fn render_with(&self, reflections: &[ReflectionEntry], initial: Option<&str>) -> String {
        let t = &self.target;
        let mut out = format!(
            "{PREAMBLE}\n\n{TARGET_PREFIX}{}\n{TASK_PREFIX}{}\n{ANSWERS_PREFIX}{} (positive class: {})\n",
            t.name,
            t.description,
            t.classes.join(", "),
            t.positive_class
        );
        let mut block = |header: &str, lines: &[String]| {
            out.push('\n');
            out.push_str(header);
            out.push('\n');
            for l in lines {
                out.push_str(l);
                out.push('\n');
            }
        };
        if self.strategy == ContextStrategy::KbViaWb {
            block(EVIDENCE_HEADER, &self.facts.iter().map(Fact::line).collect::<Vec<_>>());
        }
        if self.strategy.raw_rows() {
            block(TRANSACTIONS_HEADER, &self.raw_rows);
        }
        if self.strategy.quantiles() {
            block(QUANTILES_HEADER, &self.quantile_lines);
        }
        if self.strategy.importance() {
            block(IMPORTANCE_HEADER, &self.importance_lines);
        }
        if !self.shots.is_empty() {
            let mut lines = Vec::new();
            for (i, s) in self.shots.iter().enumerate() {
                lines.push(format!("Example {}:", i + 1));
                lines.extend(s.lines.iter().cloned());
                lines.push(format!("Label: {}", s.label));
            }
            block(EXAMPLES_HEADER, &lines);
        }
        if !reflections.is_empty() {
            block(REFLECTIONS_HEADER, &reflections.iter().map(ReflectionEntry::line).collect::<Vec<_>>());
        }
        if let Some(first) = initial {
            block("Your initial answer:", &[first.trim().to_string()]);
            out.push_str(
                "\nCompare your reasoning with the past reflections above, then confirm or revise your answer.\n",
            );
        }
        out.push('\n');
        out.push_str(ANSWER_INSTRUCTION);
        out.push('\n');
        out
    }

    /// Stable hash of the evidence and examples.
    pub fn digest(&self) -> String {
        let facts: Vec<String> = self.facts.iter().map(Fact::line).collect();
        sha256_hex(serde_json::to_string(&(&facts, &self.raw_rows, &self.shots)).expect("serializes").as_bytes())
    }

    /// Rule ids visible anywhere in the prompt's evidence or examples.
    pub fn rule_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .facts
            .iter()
            .filter(|f| f.kind == FactKind::RuleFired)
            .map(|f| f.subject.clone())
            .collect();
        for s in &self.shots {
            for l in &s.lines {
                if let Some(id) = l.strip_prefix("- [").and_then(|r| r.split_once(']')).map(|(id, _)| id) {
                    if id.starts_with('r') && !ids.iter().any(|x| x == id) {
                        ids.push(id.to_string());
                    }
                }
            }
        }
        ids
    }
}

fn raw_rows(history: &UserHistory, max_rows: usize) -> Vec<String> {
    let n = history.transactions.len();
    let skip = n.saturating_sub(max_rows);
    let mut rows = Vec::new();
    if skip > 0 {
        rows.push(format!("(last {max_rows} of {n} transactions)"));
    }
    for t in &history.transactions[skip..] {
        let day = t.ts as f64 / SECONDS_PER_DAY as f64;
        let mcc = t.mcc_code.map_or_else(|| "-".to_string(), |c| c.to_string());
        let mut row = format!("day {day:.2} | mcc {mcc} | amount {:.2}", t.amount);
        if let Some(ty) = &t.txn_type {
            row.push_str(&format!(" | type {ty}"));
        }
        rows.push(row);
    }
    rows
}

/// Candidate KB facts for a target: its rules, plus rules and levels of the
/// most relevant patterns; ranked and capped.
fn kb_facts(kb: &KnowledgeBase, target: &TargetSpec, facts: &[Fact], cfg: &ContextConfig) -> Vec<Fact> {
    let entry = kb.target(&target.id);
    let signals: Vec<&str> = entry.map(|e| e.models.iter().map(|m| m.signal.as_str()).collect()).unwrap_or_default();
    let patterns: Vec<String> = relevant_patterns(kb, &target.description, cfg.relevant_patterns, &TfIdf)
        .into_iter()
        .map(|(p, _)| p.id.clone())
        .collect();
    let mut picked: Vec<Fact> = facts
        .iter()
        .filter(|f| match f.kind {
            FactKind::PatternLevel => patterns.contains(&f.subject),
            FactKind::RuleFired => match kb.rule(&f.subject).map(|r| &r.supports) {
                Some(Supports::Target(s)) => signals.contains(&s.as_str()),
                Some(Supports::Pattern(p)) => patterns.contains(p),
                None => false,
            },
        })
        .cloned()
        .collect();
    picked.sort_by(Fact::rank_cmp);
    picked.truncate(cfg.max_facts.min(MAX_FACTS));
    picked
}

/// Evidence lines describing a labeled example under `strategy`.
pub fn shot_lines(
    kb: &KnowledgeBase,
    target: &TargetSpec,
    strategy: ContextStrategy,
    user: &UserEvidence<'_>,
    cfg: &ContextConfig,
) -> Vec<String> {
    if strategy == ContextStrategy::KbViaWb {
        kb_facts(kb, target, user.facts, cfg).iter().take(cfg.shot_lines).map(Fact::line).collect()
    } else {
        user.history.map(|h| raw_rows(h, cfg.shot_lines)).unwrap_or_default()
    }
}

pub fn assemble_context(
    kb: &KnowledgeBase,
    target: &TargetSpec,
    user: &UserEvidence<'_>,
    strategy: ContextStrategy,
    shots: Vec<Shot>,
    reflections: Vec<ReflectionEntry>,
    cfg: &ContextConfig,
) -> Result<PromptContext, ContextError> {
    if shots.len() > MAX_SHOTS {
        return Err(ContextError::TooManyShots(shots.len()));
    }
    let mut ctx = PromptContext {
        target: target.clone(),
        strategy,
        user_id: user.user_id.to_string(),
        facts: Vec::new(),
        shots,
        reflections,
        raw_rows: Vec::new(),
        quantile_lines: Vec::new(),
        importance_lines: Vec::new(),
        rendered: String::new(),
    };
    if strategy == ContextStrategy::KbViaWb {
        ctx.facts = kb_facts(kb, target, user.facts, cfg);
    } else {
        let h = user.history.ok_or(ContextError::MissingInput { strategy, what: "the user's transactions" })?;
        ctx.raw_rows = raw_rows(h, cfg.max_raw_rows);
    }
    if strategy.quantiles() {
        let e = user.essences.ok_or(ContextError::MissingInput { strategy, what: "the user's essences" })?;
        ctx.quantile_lines = kb
            .meta
            .essence_stats
            .iter()
            .map(|(name, s)| {
                format!(
                    "- {name}: this client {}; population {} / {} / {}",
                    fmt_observed(e.get(name).flatten()),
                    fmt_observed(s.p10),
                    fmt_observed(s.p50),
                    fmt_observed(s.p90)
                )
            })
            .collect();
    }
    if strategy.importance() {
        let entry = kb.target(&target.id).ok_or_else(|| ContextError::UnknownTarget(target.id.clone()))?;
        let mut ranked: Vec<(String, f64)> = Vec::new();
        for m in &entry.models {
            for (f, iv) in &m.iv {
                match ranked.iter_mut().find(|(n, _)| n == f) {
                    Some(slot) => slot.1 = slot.1.max(*iv),
                    None => ranked.push((f.clone(), *iv)),
                }
            }
        }
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ctx.importance_lines = ranked.iter().enumerate().map(|(i, (f, iv))| format!("{}. {f} ({iv:.4})", i + 1)).collect();
    }
    ctx.rendered = ctx.render();
    Ok(ctx)
}

/// Class-stratified sample of `n` pool indices, deterministic in `seed`.
pub fn sample_shots(pool_labels: &[String], classes: &[String], n: usize, seed: u64) -> Vec<usize> {
    let n = n.min(MAX_SHOTS).min(pool_labels.len());
    let groups: Vec<Vec<usize>> = classes
        .iter()
        .map(|c| pool_labels.iter().enumerate().filter(|(_, l)| *l == c).map(|(i, _)| i).collect())
        .collect();
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let quota = largest_remainder(&sizes, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = Vec::with_capacity(n);
    for (g, q) in groups.iter().zip(quota) {
        picked.extend(g.choose_multiple(&mut rng, q).copied());
    }
    picked.shuffle(&mut rng);
    picked
}

/// Two-pass prediction: answer, then confirm or revise against up to four
/// reflection entries. A failed second pass returns the first answer
/// flagged `unrevised`.
pub fn reflect_revise(
    gateway: &dyn Gateway,
    ctx: &PromptContext,
    memory: &[ReflectionEntry],
) -> Result<PredictionResult, GatewayError> {
    let ids = ctx.rule_ids();
    let first = gateway.complete(&ctx.rendered)?;
    let mut pass1 = parse_prediction(&first, &ctx.target.classes, &ids);
    pass1.transcripts.push(Exchange { prompt: ctx.rendered.clone(), response: first.clone() });
    let selected = select_memory(memory);
    let revision_prompt = ctx.render_with(&selected, Some(&first));
    match gateway.complete(&revision_prompt) {
        Ok(second) => {
            let mut r = parse_prediction(&second, &ctx.target.classes, &ids);
            r.transcripts = pass1.transcripts;
            r.transcripts.push(Exchange { prompt: revision_prompt, response: second });
            r.flags.no_memory = selected.is_empty();
            r.flags.parse_fallback |= pass1.flags.parse_fallback && r.flags.parse_fallback;
            Ok(r)
        }
        Err(e) => {
            log::warn!("revision pass failed for {}: {e}", ctx.user_id);
            pass1.flags.unrevised = true;
            pass1.flags.no_memory = selected.is_empty();
            Ok(pass1)
        }
    }
}

/// Single-pass prediction.
pub fn predict_once(gateway: &dyn Gateway, ctx: &PromptContext) -> Result<PredictionResult, GatewayError> {
    let response = gateway.complete(&ctx.rendered)?;
    let mut r = parse_prediction(&response, &ctx.target.classes, &ctx.rule_ids());
    r.transcripts.push(Exchange { prompt: ctx.rendered.clone(), response });
    Ok(r)
}
