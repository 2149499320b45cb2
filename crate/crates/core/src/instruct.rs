//! Instruction-tuning triplets built from knowledge-base evidence.
//!
//! Each labeled user becomes one `{instruction, context, response}` example.
//! The context is the user's graded evidence, and the response must end with
//! the gold label and cite only rule ids present in that context.

use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::template::{ANSWER_INSTRUCTION, EVIDENCE_HEADER};
use crate::context::{assemble_context, ContextConfig, ContextError, ContextStrategy, PromptContext, UserEvidence};
use crate::essence::{compute_essences, EssenceError};
use crate::gateway::{parallel_map, rule_id_tokens, Gateway};
use crate::ingest::UserHistory;
use crate::kb::{instantiate_facts, Fact, FactKind, KbError, KnowledgeBase, TargetSpec};
use crate::util::write_atomic;
use crate::whitebox::{Polarity, Supports};

#[derive(Debug, Error)]
pub enum InstructError {
    #[error("target {0} is not in the knowledge base")]
    UnknownTarget(String),
    #[error("user {0} has no label")]
    Unlabeled(String),
    #[error("no triplet survived validation ({dropped} dropped)")]
    NoTriplets { dropped: usize },
    #[error("refusing to export an empty dataset")]
    EmptyExport,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Essence(#[from] EssenceError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletMeta {
    pub user_id: String,
    pub target_id: String,
    /// Rule ids shown in `context`.
    pub rule_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionTriplet {
    pub instruction: String,
    pub context: String,
    pub response: String,
    pub meta: TripletMeta,
}

impl InstructionTriplet {
    /// Checks that the response ends with `ANSWER: <gold>` and cites only
    /// rule ids from its own context.
    pub fn validate(&self, gold: &str) -> Result<(), String> {
        let last = self.response.trim_end().lines().last().unwrap_or("").trim();
        match last.strip_prefix("ANSWER:") {
            Some(label) if label.trim() == gold => {}
            Some(label) => return Err(format!("answer `{}` differs from gold `{gold}`", label.trim())),
            None => return Err("response does not end with an ANSWER line".into()),
        }
        let foreign: Vec<String> =
            rule_id_tokens(&self.response).into_iter().filter(|id| !self.meta.rule_ids.contains(id)).collect();
        if !foreign.is_empty() {
            return Err(format!("cites rule ids outside the context: {}", foreign.join(", ")));
        }
        Ok(())
    }

    /// Prompt half for fine-tuning ingestion.
    pub fn prompt(&self) -> String {
        format!("{}\n\n{}", self.instruction, self.context)
    }
}

#[derive(Clone, Copy)]
pub enum GenerationMode<'a> {
    /// Deterministic explanation stitched from agreeing rules.
    Template,
    /// The gateway writes the explanation; outputs are validated.
    Llm(&'a dyn Gateway),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedTriplet {
    pub user_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub triplets: Vec<InstructionTriplet>,
    /// Users whose first LLM output failed validation.
    pub regenerated: usize,
    pub dropped: Vec<DroppedTriplet>,
}

fn instruction_text(target: &TargetSpec) -> String {
    format!(
        "{}\nUsing only the behavioral evidence, answer with one of: {}. Cite the rule ids you rely on in brackets. {}",
        target.description,
        target.classes.join(", "),
        ANSWER_INSTRUCTION
    )
}

fn context_text(ctx: &PromptContext) -> String {
    let mut out = String::from(EVIDENCE_HEADER);
    for f in &ctx.facts {
        out.push('\n');
        out.push_str(&f.line());
    }
    out
}

/// Whether a fired rule fact points toward `gold`.
fn agrees(kb: &KnowledgeBase, target: &TargetSpec, fact: &Fact, gold: &str) -> bool {
    if fact.kind != FactKind::RuleFired {
        return false;
    }
    let Some(rule) = kb.rule(&fact.subject) else { return false };
    let Supports::Target(signal) = &rule.supports else { return false };
    let toward = rule.polarity == Polarity::Toward;
    target.sub_targets().iter().any(|s| &s.signal == signal && ((s.class == gold) == toward))
}

fn template_response(kb: &KnowledgeBase, target: &TargetSpec, ctx: &PromptContext, gold: &str) -> String {
    let lines: Vec<String> = ctx
        .facts
        .iter()
        .filter(|f| agrees(kb, target, f, gold))
        .map(|f| format!("[{}] {}", f.subject, f.rendered_text))
        .collect();
    let body = if lines.is_empty() {
        format!("No fired rule points to {gold}; the remaining evidence is mixed or weak.")
    } else {
        format!("Evidence pointing to {gold}:\n{}", lines.join("\n"))
    };
    format!("{body}\nANSWER: {gold}")
}

enum Outcome {
    Kept { triplet: InstructionTriplet, regenerated: bool },
    Dropped(DroppedTriplet),
}

fn generate_one(
    kb: &KnowledgeBase,
    target: &TargetSpec,
    ctx: &PromptContext,
    gold: &str,
    mode: GenerationMode<'_>,
) -> Outcome {
    let mut triplet = InstructionTriplet {
        instruction: instruction_text(target),
        context: context_text(ctx),
        response: String::new(),
        meta: TripletMeta { user_id: ctx.user_id.clone(), target_id: target.id.clone(), rule_ids: ctx.rule_ids() },
    };
    let gateway = match mode {
        GenerationMode::Template => {
            triplet.response = template_response(kb, target, ctx, gold);
            return Outcome::Kept { triplet, regenerated: false };
        }
        GenerationMode::Llm(g) => g,
    };
    let mut prompt = ctx.rendered.clone();
    let mut reason = String::new();
    for attempt in 0..2 {
        match gateway.complete(&prompt) {
            Ok(reply) => {
                triplet.response = reply.trim().to_string();
                match triplet.validate(gold) {
                    Ok(()) => return Outcome::Kept { triplet, regenerated: attempt > 0 },
                    Err(e) => reason = e,
                }
            }
            Err(e) => reason = e.to_string(),
        }
        prompt = format!("{}\nYour previous reply was rejected: {reason}. Answer again.\n", ctx.rendered);
    }
    Outcome::Dropped(DroppedTriplet { user_id: ctx.user_id.clone(), reason })
}

/// One triplet per labeled user. In LLM mode a failing output is
/// regenerated once and then dropped; the drops are reported.
pub fn generate_triplets(
    kb: &KnowledgeBase,
    histories: &[UserHistory],
    target: &str,
    mode: GenerationMode<'_>,
    cfg: &ContextConfig,
) -> Result<GenerationReport, InstructError> {
    let entry = kb.target(target).ok_or_else(|| InstructError::UnknownTarget(target.to_string()))?;
    let spec = &entry.spec;
    let mut contexts = Vec::with_capacity(histories.len());
    for h in histories {
        let gold = h.label.clone().ok_or_else(|| InstructError::Unlabeled(h.user_id.clone()))?;
        let essences = compute_essences(h, &kb.essences)?;
        let facts = instantiate_facts(kb, &essences)?;
        let evidence = UserEvidence { user_id: &h.user_id, facts: &facts, history: Some(h), essences: Some(&essences) };
        let ctx = assemble_context(kb, spec, &evidence, ContextStrategy::KbViaWb, Vec::new(), Vec::new(), cfg)?;
        contexts.push((ctx, gold));
    }
    let bound = match mode {
        GenerationMode::Template => 1,
        GenerationMode::Llm(g) => g.max_concurrent(),
    };
    let outcomes = parallel_map(&contexts, bound, |(ctx, gold)| generate_one(kb, spec, ctx, gold, mode));
    let mut report = GenerationReport { triplets: Vec::new(), regenerated: 0, dropped: Vec::new() };
    for o in outcomes {
        match o {
            Outcome::Kept { triplet, regenerated } => {
                report.regenerated += usize::from(regenerated);
                report.triplets.push(triplet);
            }
            Outcome::Dropped(d) => {
                log::warn!("dropped triplet for {}: {}", d.user_id, d.reason);
                report.dropped.push(d);
            }
        }
    }
    if report.triplets.is_empty() {
        return Err(InstructError::NoTriplets { dropped: report.dropped.len() });
    }
    Ok(report)
}

/// Writes one JSON object per line, replacing `path` atomically.
pub fn export_dataset(triplets: &[InstructionTriplet], path: &Path) -> Result<(), InstructError> {
    if triplets.is_empty() {
        return Err(InstructError::EmptyExport);
    }
    let mut out = String::new();
    for t in triplets {
        out.push_str(&serde_json::to_string(t).expect("triplet serializes"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(reader: R) -> Result<Vec<InstructionTriplet>, InstructError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| InstructError::Parse { line: i + 1, message: e.to_string() })?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::essence::default_essence_specs;
    use crate::gateway::MockGateway;
    use crate::ingest::{generate_synthetic, PlantSpec, Split};
    use crate::kb::{build_kb, KbConfig, TargetData};
    use crate::pattern::SelectionStrategy;

    fn planted(n: usize) -> (Vec<UserHistory>, KnowledgeBase) {
        let plan = PlantSpec::churn(70, 0.1);
        let hs = generate_synthetic(n, 4, &plan).unwrap();
        let t = TargetData::from_histories(TargetSpec::for_plant(&plan), &hs, &[Split::Train]);
        let kb = build_kb(&hs, &default_essence_specs(), &SelectionStrategy::Random { seed: 1 }, &[t], &KbConfig::default(), None)
            .unwrap();
        (hs, kb)
    }

    #[test]
    fn template_triplets_are_grounded() {
        let (hs, kb) = planted(400);
        let report = generate_triplets(&kb, &hs, "churn", GenerationMode::Template, &ContextConfig::default()).unwrap();
        assert_eq!(report.triplets.len(), hs.len());
        assert!(report.dropped.is_empty());
        for (t, h) in report.triplets.iter().zip(&hs) {
            let gold = h.label.as_deref().unwrap();
            t.validate(gold).unwrap();
            assert!(t.response.ends_with(&format!("ANSWER: {gold}")));
            for id in rule_id_tokens(&t.response) {
                assert!(t.context.contains(&format!("[{id}]")));
            }
        }
        // a churner below the planted threshold cites the activity rule
        let churner = report
            .triplets
            .iter()
            .find(|t| t.response.contains("activity_period_days <=") && t.response.ends_with("ANSWER: churn"));
        assert!(churner.is_some());
    }

    #[test]
    fn template_cites_every_agreeing_rule() {
        let (hs, kb) = planted(300);
        let h = hs.iter().find(|h| h.label.as_deref() == Some("churn")).unwrap();
        let report =
            generate_triplets(&kb, std::slice::from_ref(h), "churn", GenerationMode::Template, &ContextConfig::default()).unwrap();
        let t = &report.triplets[0];
        let agreeing: Vec<&str> = t
            .context
            .lines()
            .filter(|l| l.contains("churn signal") && !l.contains("counter-churn"))
            .map(|l| &l[l.find('[').unwrap() + 1..l.find(']').unwrap()])
            .collect();
        let cited = rule_id_tokens(&t.response);
        assert_eq!(cited, agreeing.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    }

    #[test]
    fn wrong_label_then_correct_is_regenerated_once() {
        let (hs, kb) = planted(200);
        let h = hs.iter().find(|h| h.label.as_deref() == Some("churn")).unwrap();
        let gw = MockGateway::scripted(["Looks stable.\nANSWER: retain", "Short activity span.\nANSWER: churn"]);
        let report = generate_triplets(&kb, std::slice::from_ref(h), "churn", GenerationMode::Llm(&gw), &ContextConfig::default())
            .unwrap();
        assert_eq!(report.regenerated, 1);
        assert_eq!(report.triplets.len(), 1);
        assert!(report.dropped.is_empty());
        assert_eq!(gw.calls(), 2);
    }

    #[test]
    fn foreign_citation_twice_is_dropped() {
        let (hs, kb) = planted(200);
        let users: Vec<UserHistory> = hs.iter().filter(|h| h.label.as_deref() == Some("churn")).take(2).cloned().collect();
        let gw = MockGateway::scripted([
            "See [r999].\nANSWER: churn",
            "Again [r999].\nANSWER: churn",
            "Nothing cited.\nANSWER: churn",
        ]);
        let report = generate_triplets(&kb, &users, "churn", GenerationMode::Llm(&gw), &ContextConfig::default()).unwrap();
        assert_eq!(report.dropped.len(), 1);
        assert_eq!(report.dropped[0].user_id, users[0].user_id);
        assert!(report.dropped[0].reason.contains("r999"));
        assert_eq!(report.triplets.len(), 1);

        let gw = MockGateway::scripted(["[r999]\nANSWER: churn", "[r999]\nANSWER: churn"]);
        let err = generate_triplets(&kb, &users[..1], "churn", GenerationMode::Llm(&gw), &ContextConfig::default()).unwrap_err();
        assert!(matches!(err, InstructError::NoTriplets { dropped: 1 }));
    }

    #[test]
    fn unlabeled_user_rejected() {
        let (mut hs, kb) = planted(100);
        hs[0].label = None;
        let err = generate_triplets(&kb, &hs, "churn", GenerationMode::Template, &ContextConfig::default()).unwrap_err();
        assert!(matches!(err, InstructError::Unlabeled(_)));
    }

    #[test]
    fn export_round_trip_and_empty() {
        let (hs, kb) = planted(150);
        let report = generate_triplets(&kb, &hs, "churn", GenerationMode::Template, &ContextConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("triplets.jsonl");
        export_dataset(&report.triplets, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), report.triplets.len());
        assert!(text.lines().next().unwrap().starts_with("{\"instruction\":"));
        let back = read_dataset(text.as_bytes()).unwrap();
        assert_eq!(back, report.triplets);

        let empty = dir.path().join("empty.jsonl");
        assert!(matches!(export_dataset(&[], &empty), Err(InstructError::EmptyExport)));
        assert!(!empty.exists());
    }
}
