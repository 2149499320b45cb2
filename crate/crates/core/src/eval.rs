//! Metrics and the evaluation protocol: leakage checks, shot sampling,
//! per-user prediction and run reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{
    assemble_context, predict_once, reflect_revise, sample_shots, shot_lines, ContextConfig, ContextError,
    ContextStrategy, ReflectionEntry, Shot, UserEvidence,
};
use crate::essence::{compute_essences, EssenceError, EssenceVector};
use crate::gateway::{parallel_map, Gateway, PredictedLabel, PredictionFlags, PredictionResult};
use crate::ingest::{Split, UserHistory};
use crate::kb::{instantiate_facts, Fact, FactKind, KbError, KnowledgeBase, TargetEntry};
use crate::util::{derive_seed, json_hash};
use crate::whitebox::Supports;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("leakage: {0}")]
    Leakage(String),
    #[error("no labeled test users")]
    NoTestUsers,
    #[error("{wanted} shots requested but the labeled pool has {available} users")]
    ShotPool { wanted: usize, available: usize },
    #[error("target {0} is not in the knowledge base")]
    UnknownTarget(String),
    #[error("the full-label arm needs a fitted scorecard for {0}")]
    NoScorecard(String),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Essence(#[from] EssenceError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// One-vs-rest table for `class`. An abstention counts as a false
    /// negative for its gold class and is a true negative elsewhere.
    pub fn one_vs_rest(pairs: &[(String, PredictedLabel)], class: &str) -> Self {
        let mut c = ConfusionCounts::default();
        for (gold, pred) in pairs {
            let g = gold == class;
            let p = pred.class() == Some(class);
            match (g, p) {
                (true, true) => c.tp += 1,
                (true, false) => c.fn_ += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }
}

/// Matthews correlation; 0 when any marginal is empty.
pub fn mcc(c: &ConfusionCounts) -> f64 {
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if den == 0.0 {
        return 0.0;
    }
    (tp * tn - fp * fn_) / den.sqrt()
}

/// `2tp / (2tp + fp + fn)`; 0 when the denominator is 0.
pub fn f1(c: &ConfusionCounts) -> f64 {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        0.0
    } else {
        (2 * c.tp) as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub f1: f64,
    pub mcc: f64,
    pub accuracy: f64,
    pub abstain_rate: f64,
    /// One-vs-rest table per class.
    pub per_class: BTreeMap<String, ConfusionCounts>,
}

/// Binary targets report positive-class F1 and MCC; multiclass targets the
/// unweighted macro mean over one-vs-rest tables.
pub fn score(pairs: &[(String, PredictedLabel)], classes: &[String], positive: &str) -> Metrics {
    let per_class: BTreeMap<String, ConfusionCounts> =
        classes.iter().map(|c| (c.clone(), ConfusionCounts::one_vs_rest(pairs, c))).collect();
    let (f1v, mccv) = if classes.len() == 2 {
        let c = &per_class[positive];
        (f1(c), mcc(c))
    } else {
        let k = classes.len().max(1) as f64;
        (per_class.values().map(f1).sum::<f64>() / k, per_class.values().map(mcc).sum::<f64>() / k)
    };
    let n = pairs.len().max(1) as f64;
    Metrics {
        f1: f1v,
        mcc: mccv,
        accuracy: pairs.iter().filter(|(g, p)| p.class() == Some(g.as_str())).count() as f64 / n,
        abstain_rate: pairs.iter().filter(|(_, p)| *p == PredictedLabel::Abstain).count() as f64 / n,
        per_class,
    }
}

/// Labeled examples available at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShotBudget {
    Count(usize),
    /// All training labels, through the knowledge base scorecard.
    Full,
}

impl fmt::Display for ShotBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShotBudget::Count(n) => write!(f, "{n}"),
            ShotBudget::Full => f.write_str("full"),
        }
    }
}

impl FromStr for ShotBudget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(ShotBudget::Full);
        }
        match s.parse::<usize>() {
            Ok(n) if n <= crate::context::MAX_SHOTS => Ok(ShotBudget::Count(n)),
            Ok(n) => Err(format!("{n} shots exceeds the cap of {}", crate::context::MAX_SHOTS)),
            Err(_) => Err(format!("invalid shot budget `{s}` (expected 0..=16 or full)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub dataset: String,
    pub target: String,
    pub strategy: ContextStrategy,
    pub shots: ShotBudget,
    pub seed: u64,
    #[serde(default)]
    pub context: ContextConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub gold: String,
    pub prediction: PredictedLabel,
    pub evidence: Vec<String>,
    pub flags: PredictionFlags,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub target: String,
    pub strategy: ContextStrategy,
    pub kb_selection: String,
    pub shots: ShotBudget,
    pub seed: u64,
    pub n_test: usize,
    pub shot_users: Vec<String>,
    pub metrics: Metrics,
    pub config_hash: String,
    pub records: Vec<UserRecord>,
}

impl RunReport {
    pub fn summary_line(&self) -> String {
        format!(
            "dataset={} target={} kb={} strategy={} shots={} seed={} n={} f1={:.4} mcc={:.4} abstain={:.4}",
            self.dataset,
            self.target,
            self.kb_selection,
            self.strategy,
            self.shots,
            self.seed,
            self.n_test,
            self.metrics.f1,
            self.metrics.mcc,
            self.metrics.abstain_rate
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Plain-text table: dataset × strategy × shots → F1 / MCC.
pub fn summary_table(reports: &[RunReport]) -> String {
    let mut out = format!("{:<16} {:<18} {:<8} {:<6} {:>8} {:>8}\n", "dataset", "kb", "context", "shots", "F1", "MCC");
    for r in reports {
        out.push_str(&format!(
            "{:<16} {:<18} {:<8} {:<6} {:>8.4} {:>8.4}\n",
            r.dataset,
            r.kb_selection,
            r.strategy.to_string(),
            r.shots.to_string(),
            r.metrics.f1,
            r.metrics.mcc
        ));
    }
    out
}

/// Refuses runs where a user is in several splits or a test user helped
/// fit the knowledge base.
pub fn check_leakage(kb: &KnowledgeBase, histories: &[UserHistory]) -> Result<(), EvalError> {
    let mut seen: HashMap<&str, Split> = HashMap::new();
    for h in histories {
        if let Some(prev) = seen.insert(&h.user_id, h.split) {
            return Err(EvalError::Leakage(if prev == h.split {
                format!("user {} appears twice", h.user_id)
            } else {
                format!("user {} appears in both {prev:?} and {:?} splits", h.user_id, h.split)
            }));
        }
    }
    let fit: std::collections::HashSet<&str> = kb.meta.fit_users.iter().map(String::as_str).collect();
    let mut leaked: Vec<&str> =
        histories.iter().filter(|h| h.split == Split::Test && fit.contains(h.user_id.as_str())).map(|h| h.user_id.as_str()).collect();
    if !leaked.is_empty() {
        leaked.sort();
        let n = leaked.len();
        leaked.truncate(5);
        return Err(EvalError::Leakage(format!(
            "{n} test users were used to build the knowledge base (e.g. {})",
            leaked.join(", ")
        )));
    }
    Ok(())
}

struct Prepared<'a> {
    history: &'a UserHistory,
    essences: EssenceVector,
    facts: Vec<Fact>,
}

fn prepare<'a>(kb: &KnowledgeBase, h: &'a UserHistory) -> Result<Prepared<'a>, EvalError> {
    let essences = compute_essences(h, &kb.essences)?;
    let facts = instantiate_facts(kb, &essences)?;
    Ok(Prepared { history: h, essences, facts })
}

impl Prepared<'_> {
    fn evidence(&self) -> UserEvidence<'_> {
        UserEvidence {
            user_id: &self.history.user_id,
            facts: &self.facts,
            history: Some(self.history),
            essences: Some(&self.essences),
        }
    }
}

fn scorecard_prediction(kb: &KnowledgeBase, entry: &TargetEntry, p: &Prepared<'_>) -> Result<PredictionResult, EvalError> {
    let mut best: Option<(f64, &str)> = None;
    for m in &entry.models {
        let sc = m.scorecard.as_ref().ok_or_else(|| EvalError::NoScorecard(m.signal.clone()))?;
        let s = sc.score(|f| p.essences.get(f).flatten());
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, m.class.as_str()));
        }
    }
    let (s, class) = best.ok_or_else(|| EvalError::NoScorecard(entry.spec.id.clone()))?;
    let label = if entry.spec.is_binary() && s < 0.5 {
        entry.spec.classes.iter().find(|c| **c != entry.spec.positive_class).expect("binary").clone()
    } else {
        class.to_string()
    };
    let evidence = p
        .facts
        .iter()
        .filter(|f| f.kind == FactKind::RuleFired)
        .filter(|f| matches!(kb.rule(&f.subject).map(|r| &r.supports), Some(Supports::Target(_))))
        .map(|f| f.subject.clone())
        .collect();
    Ok(PredictionResult {
        label: PredictedLabel::Class(label),
        rationale: format!("scorecard probability {s:.4}"),
        evidence,
        transcripts: Vec::new(),
        flags: PredictionFlags::default(),
    })
}

/// Runs one evaluation arm.
///
/// Test users are the labeled `Test` split; shots come from the labeled
/// `Train` split. With shots, each test user gets the two-pass revise
/// protocol against a memory seeded by first-pass predictions on the shot
/// users.
pub fn run_eval(
    kb: &KnowledgeBase,
    histories: &[UserHistory],
    spec: &EvalSpec,
    gateway: &dyn Gateway,
) -> Result<RunReport, EvalError> {
    check_leakage(kb, histories)?;
    let entry = kb.target(&spec.target).ok_or_else(|| EvalError::UnknownTarget(spec.target.clone()))?;
    let target = &entry.spec;
    let test: Vec<&UserHistory> = histories.iter().filter(|h| h.split == Split::Test && h.label.is_some()).collect();
    if test.is_empty() {
        return Err(EvalError::NoTestUsers);
    }
    let pool: Vec<&UserHistory> = histories.iter().filter(|h| h.split == Split::Train && h.label.is_some()).collect();
    let prepared: Vec<Prepared<'_>> = test.iter().map(|h| prepare(kb, h)).collect::<Result<_, _>>()?;

    let n_shots = match spec.shots {
        ShotBudget::Count(n) => n,
        ShotBudget::Full => 0,
    };
    if n_shots > pool.len() {
        return Err(EvalError::ShotPool { wanted: n_shots, available: pool.len() });
    }
    let pool_labels: Vec<String> = pool.iter().map(|h| h.label.clone().expect("filtered")).collect();
    let picks = sample_shots(&pool_labels, &target.classes, n_shots, derive_seed(spec.seed, &format!("{}/{}", spec.dataset, n_shots)));
    let shot_users: Vec<Prepared<'_>> = picks.iter().map(|&i| prepare(kb, pool[i])).collect::<Result<_, _>>()?;
    let shots: Vec<Shot> = shot_users
        .iter()
        .map(|p| Shot {
            user_id: p.history.user_id.clone(),
            lines: shot_lines(kb, target, spec.strategy, &p.evidence(), &spec.context),
            label: p.history.label.clone().expect("labeled"),
        })
        .collect();

    // reflection memory from first-pass answers on the shot users
    let mut memory: Vec<ReflectionEntry> = Vec::new();
    if spec.shots != ShotBudget::Full {
        for p in &shot_users {
            let ctx = assemble_context(kb, target, &p.evidence(), spec.strategy, Vec::new(), Vec::new(), &spec.context)?;
            if let Ok(r) = predict_once(gateway, &ctx) {
                memory.push(ReflectionEntry::new(&ctx, &r.label.to_string(), p.history.label.as_deref(), &r.rationale));
            }
        }
    }

    let contexts = prepared
        .iter()
        .map(|p| assemble_context(kb, target, &p.evidence(), spec.strategy, shots.clone(), Vec::new(), &spec.context))
        .collect::<Result<Vec<_>, _>>()?;
    let jobs: Vec<usize> = (0..prepared.len()).collect();
    let results: Vec<Result<PredictionResult, String>> = match spec.shots {
        ShotBudget::Full => prepared.iter().map(|p| scorecard_prediction(kb, entry, p).map_err(|e| e.to_string())).collect(),
        ShotBudget::Count(0) => {
            parallel_map(&jobs, gateway.max_concurrent(), |&i| predict_once(gateway, &contexts[i]).map_err(|e| e.to_string()))
        }
        ShotBudget::Count(_) => parallel_map(&jobs, gateway.max_concurrent(), |&i| {
            reflect_revise(gateway, &contexts[i], &memory).map_err(|e| e.to_string())
        }),
    };
    if let Some(Err(e)) = results.iter().find(|r| r.is_err()) {
        if let ShotBudget::Full = spec.shots {
            return Err(EvalError::NoScorecard(e.clone()));
        }
    }

    let records: Vec<UserRecord> = prepared
        .iter()
        .zip(results)
        .map(|(p, r)| {
            let gold = p.history.label.clone().expect("labeled");
            match r {
                Ok(r) => UserRecord {
                    user_id: p.history.user_id.clone(),
                    gold,
                    prediction: r.label,
                    evidence: r.evidence,
                    flags: r.flags,
                    error: None,
                },
                Err(e) => UserRecord {
                    user_id: p.history.user_id.clone(),
                    gold,
                    prediction: PredictedLabel::Abstain,
                    evidence: Vec::new(),
                    flags: PredictionFlags::default(),
                    error: Some(e),
                },
            }
        })
        .collect();
    let pairs: Vec<(String, PredictedLabel)> = records.iter().map(|r| (r.gold.clone(), r.prediction.clone())).collect();
    let metrics = score(&pairs, &target.classes, &target.positive_class);
    Ok(RunReport {
        dataset: spec.dataset.clone(),
        target: target.id.clone(),
        strategy: spec.strategy,
        kb_selection: kb.meta.strategy.name().to_string(),
        shots: spec.shots,
        seed: spec.seed,
        n_test: records.len(),
        shot_users: shot_users.iter().map(|p| p.history.user_id.clone()).collect(),
        metrics,
        config_hash: json_hash(&(&kb.meta.config_hash, &kb.meta.data_fingerprint, spec)),
        records,
    })
}
