//! The layered knowledge base: essences, patterns and targets joined by
//! graded rule edges, plus per-user fact instantiation and persistence.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::essence::{validate_specs, EssenceError, EssenceMatrix, EssenceSpec, EssenceVector};
use crate::gateway::{Exchange, Gateway};
use crate::ingest::{histories_to_jsonl, PlantSpec, Split, UserHistory};
use crate::pattern::{link_patterns, propose_patterns, BehavioralPattern, Level, PatternError, SelectionStrategy};
use crate::util::{json_hash, quantile_sorted, sha256_hex, write_atomic};
use crate::whitebox::{
    fit_scorecard, rules_for_feature, FeatureColumn, FeatureWoE, Grade, GradeThresholds, Rule, Scorecard,
    ScorecardConfig, Supports, WhiteboxError,
};

pub const KB_VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("no histories to build from")]
    Empty,
    #[error("invalid target: {0}")]
    Target(String),
    #[error("user {user} lacks essence `{key}`")]
    MissingEssence { user: String, key: String },
    #[error("knowledge base version {found} needs migration (reader supports version {supported})")]
    Migration { found: u64, supported: u64 },
    #[error("corrupt knowledge base at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("knowledge base integrity: {0}")]
    Integrity(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Essence(#[from] EssenceError),
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error(transparent)]
    Whitebox(#[from] WhiteboxError),
}

/// A downstream objective.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub id: String,
    pub name: String,
    pub description: String,
    pub classes: Vec<String>,
    pub positive_class: String,
}

impl TargetSpec {
    pub fn validate(&self) -> Result<(), KbError> {
        if self.id.trim().is_empty() || self.name.trim().is_empty() {
            return Err(KbError::Target("id and name must be nonempty".into()));
        }
        if self.description.trim().is_empty() {
            return Err(KbError::Target(format!("{}: description is empty", self.id)));
        }
        let distinct: BTreeSet<&String> = self.classes.iter().collect();
        if self.classes.len() < 2 || distinct.len() != self.classes.len() {
            return Err(KbError::Target(format!("{}: need at least 2 distinct classes", self.id)));
        }
        if !self.classes.contains(&self.positive_class) {
            return Err(KbError::Target(format!(
                "{}: positive class `{}` is not among the classes",
                self.id, self.positive_class
            )));
        }
        Ok(())
    }

    pub fn is_binary(&self) -> bool {
        self.classes.len() == 2
    }

    /// Binary sub-problems: the positive class for binary targets, one per
    /// class (one-vs-rest) otherwise.
    pub fn sub_targets(&self) -> Vec<SubTarget> {
        if self.is_binary() {
            vec![SubTarget { class: self.positive_class.clone(), signal: self.name.clone() }]
        } else {
            self.classes
                .iter()
                .map(|c| SubTarget { class: c.clone(), signal: format!("{}={c}", self.name) })
                .collect()
        }
    }

    pub fn for_plant(plan: &PlantSpec) -> Self {
        TargetSpec {
            id: plan.target.clone(),
            name: plan.target.clone(),
            description: format!(
                "Will the client {} soon? Predict whether the client stops using the bank (churn) or stays.",
                plan.target
            ),
            classes: vec![plan.positive_label.clone(), plan.negative_label.clone()],
            positive_class: plan.positive_label.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubTarget {
    pub class: String,
    /// Name carried by rules for this sub-problem, e.g. `churn`.
    pub signal: String,
}

/// Labels for one target, keyed by user id.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetData {
    pub spec: TargetSpec,
    pub labels: HashMap<String, String>,
}

impl TargetData {
    /// Labels of the users in `splits`.
    pub fn from_histories(spec: TargetSpec, histories: &[UserHistory], splits: &[Split]) -> Self {
        let labels = histories
            .iter()
            .filter(|h| splits.contains(&h.split))
            .filter_map(|h| h.label.clone().map(|l| (h.user_id.clone(), l)))
            .collect();
        TargetData { spec, labels }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssociationAggregation {
    #[default]
    Max,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KbConfig {
    pub scorecard: ScorecardConfig,
    pub grades: GradeThresholds,
    /// Features below this information value get no target rules.
    pub min_iv: f64,
    pub association: AssociationAggregation,
}

impl Default for KbConfig {
    fn default() -> Self {
        KbConfig {
            scorecard: ScorecardConfig::default(),
            grades: GradeThresholds::default(),
            min_iv: 0.02,
            association: AssociationAggregation::Max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetModel {
    pub class: String,
    pub signal: String,
    /// Information value of every essence, highest first.
    pub iv: IndexMap<String, f64>,
    pub scorecard: Option<Scorecard>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetEntry {
    #[serde(flatten)]
    pub spec: TargetSpec,
    pub models: Vec<TargetModel>,
}

/// Graded link from a pattern to a target class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Association {
    pub pattern: String,
    pub target: String,
    pub signal: String,
    pub grade: Grade,
    pub supporting_rules: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssenceStats {
    pub p10: Option<f64>,
    pub p50: Option<f64>,
    pub p90: Option<f64>,
    pub missing_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildMeta {
    pub config_hash: String,
    pub data_fingerprint: String,
    pub strategy: SelectionStrategy,
    pub fit_users: Vec<String>,
    pub essence_stats: IndexMap<String, EssenceStats>,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default)]
    pub proposal_transcript: Vec<Exchange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub version: u64,
    pub essences: Vec<EssenceSpec>,
    /// Patterns; their rules live in `edges`.
    pub patterns: Vec<BehavioralPattern>,
    pub targets: Vec<TargetEntry>,
    pub edges: Vec<Rule>,
    pub associations: Vec<Association>,
    pub meta: BuildMeta,
    /// Fields written by newer tools, kept as-is.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl KnowledgeBase {
    pub fn rule(&self, id: &str) -> Option<&Rule> {
        self.edges.iter().find(|r| r.id == id)
    }

    pub fn pattern(&self, id: &str) -> Option<&BehavioralPattern> {
        self.patterns.iter().find(|p| p.id == id)
    }

    pub fn target(&self, id_or_name: &str) -> Option<&TargetEntry> {
        self.targets.iter().find(|t| t.spec.id == id_or_name || t.spec.name == id_or_name)
    }

    pub fn pattern_rules<'a>(&'a self, pattern_id: &'a str) -> impl Iterator<Item = &'a Rule> + 'a {
        self.edges.iter().filter(move |r| matches!(&r.supports, Supports::Pattern(p) if p == pattern_id))
    }

    /// Essence→target rules for every sub-target of `target`.
    pub fn target_rules<'a>(&'a self, target: &'a TargetEntry) -> impl Iterator<Item = &'a Rule> + 'a {
        self.edges.iter().filter(move |r| match &r.supports {
            Supports::Target(s) => target.models.iter().any(|m| &m.signal == s),
            Supports::Pattern(_) => false,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("knowledge base serializes");
        s.push('\n');
        s
    }

    /// Parses and checks a KB document.
    pub fn from_json(text: &str) -> Result<Self, KbError> {
        let parse_err = |e: serde_json::Error| KbError::Parse { line: e.line(), column: e.column(), message: e.to_string() };
        let raw: serde_json::Value = serde_json::from_str(text).map_err(parse_err)?;
        let version = raw
            .get("version")
            .and_then(|v| v.as_u64().or_else(|| v.as_str().and_then(|s| s.parse().ok())))
            .ok_or(KbError::Parse { line: 1, column: 1, message: "missing or invalid `version` field".into() })?;
        if version != KB_VERSION {
            return Err(KbError::Migration { found: version, supported: KB_VERSION });
        }
        let kb: KnowledgeBase = serde_json::from_str(text).map_err(parse_err)?;
        kb.check_integrity()?;
        Ok(kb)
    }

    /// Every edge endpoint resolves, ids are unique, texts regenerate.
    pub fn check_integrity(&self) -> Result<(), KbError> {
        let bad = |m: String| Err(KbError::Integrity(m));
        let essences: BTreeSet<&str> = self.essences.iter().map(|e| e.name.as_str()).collect();
        let mut pattern_ids = BTreeSet::new();
        for p in &self.patterns {
            if !pattern_ids.insert(p.id.as_str()) {
                return bad(format!("duplicate pattern id {}", p.id));
            }
            for m in &p.member_essences {
                let Some(spec) = self.essences.iter().find(|e| &e.name == m) else {
                    return bad(format!("pattern {} references unknown essence {m}", p.id));
                };
                if spec.category != p.category {
                    return bad(format!("pattern {} mixes categories via {m}", p.id));
                }
            }
        }
        let signals: BTreeSet<&str> =
            self.targets.iter().flat_map(|t| t.models.iter().map(|m| m.signal.as_str())).collect();
        let mut rule_ids = BTreeSet::new();
        for r in &self.edges {
            if !rule_ids.insert(r.id.as_str()) {
                return bad(format!("duplicate rule id {}", r.id));
            }
            if !essences.contains(r.feature.as_str()) {
                return bad(format!("rule {} references unknown essence {}", r.id, r.feature));
            }
            match &r.supports {
                Supports::Pattern(p) => {
                    let Some(pat) = self.pattern(p) else {
                        return bad(format!("rule {} points at unknown pattern {p}", r.id));
                    };
                    if !pat.member_essences.contains(&r.feature) {
                        return bad(format!("rule {} feature {} is not a member of {p}", r.id, r.feature));
                    }
                }
                Supports::Target(s) if !signals.contains(s.as_str()) => {
                    return bad(format!("rule {} points at unknown target {s}", r.id));
                }
                Supports::Target(_) => {}
            }
            if !r.text_is_consistent() {
                return bad(format!("rule {} text does not match its fields", r.id));
            }
        }
        for a in &self.associations {
            if !pattern_ids.contains(a.pattern.as_str()) || !signals.contains(a.signal.as_str()) {
                return bad(format!("association {} -> {} dangles", a.pattern, a.signal));
            }
            if let Some(r) = a.supporting_rules.iter().find(|r| !rule_ids.contains(r.as_str())) {
                return bad(format!("association {} -> {} cites unknown rule {r}", a.pattern, a.signal));
            }
        }
        Ok(())
    }
}

pub fn save_kb(kb: &KnowledgeBase, path: &Path) -> Result<(), KbError> {
    write_atomic(path, kb.to_json().as_bytes())
        .map_err(|source| KbError::Io { path: path.display().to_string(), source })
}

pub fn load_kb(path: &Path) -> Result<KnowledgeBase, KbError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| KbError::Io { path: path.display().to_string(), source })?;
    KnowledgeBase::from_json(&text)
}

fn essence_stats(matrix: &EssenceMatrix) -> IndexMap<String, EssenceStats> {
    matrix
        .names
        .iter()
        .map(|n| {
            let col = matrix.column(n);
            let mut v: Vec<f64> = col.iter().flatten().copied().collect();
            v.sort_by(f64::total_cmp);
            let stats = EssenceStats {
                p10: quantile_sorted(&v, 0.1),
                p50: quantile_sorted(&v, 0.5),
                p90: quantile_sorted(&v, 0.9),
                missing_share: if col.is_empty() { 0.0 } else { (col.len() - v.len()) as f64 / col.len() as f64 },
            };
            (n.clone(), stats)
        })
        .collect()
}

fn grade_mean(grades: &[Grade]) -> Grade {
    let m = grades.iter().map(|g| g.weight() as f64).sum::<f64>() / grades.len().max(1) as f64;
    match m.round() as i64 {
        i64::MIN..=1 => Grade::Weak,
        2 => Grade::Moderate,
        _ => Grade::Strong,
    }
}

/// Builds a KB from the histories it is allowed to learn from.
///
/// Patterns are proposed and linked to their members by unsupervised
/// tercile rules, so adding a target never changes them. Each target gets a
/// scorecard per sub-target, one rule per bin of every essence whose IV
/// reaches `cfg.min_iv`, and pattern associations graded by the supporting
/// target rules on member essences.
pub fn build_kb(
    histories: &[UserHistory],
    specs: &[EssenceSpec],
    strategy: &SelectionStrategy,
    targets: &[TargetData],
    cfg: &KbConfig,
    gateway: Option<&dyn Gateway>,
) -> Result<KnowledgeBase, KbError> {
    if histories.is_empty() {
        return Err(KbError::Empty);
    }
    validate_specs(specs)?;
    for t in targets {
        t.spec.validate()?;
    }
    let matrix = EssenceMatrix::compute(histories, specs)?;
    let proposal = propose_patterns(specs, strategy, gateway)?;
    let suppress = strategy.suppresses_rules();
    let mut patterns = link_patterns(&proposal.patterns, &matrix, None, suppress)?;

    let mut edges: Vec<Rule> = Vec::new();
    for p in &mut patterns {
        edges.append(&mut p.rules);
    }

    let columns: Vec<(String, Vec<Option<f64>>)> = matrix.names.iter().map(|n| (n.clone(), matrix.column(n))).collect();
    let mut entries = Vec::new();
    let mut warnings = proposal.warnings.clone();
    for t in targets {
        // rows with a label for this target, in matrix order
        let rows: Vec<usize> = matrix.rows.iter().enumerate().filter(|(_, r)| t.labels.contains_key(&r.user_id)).map(|(i, _)| i).collect();
        for i in &rows {
            let label = &t.labels[&matrix.rows[*i].user_id];
            if !t.spec.classes.contains(label) {
                return Err(KbError::Target(format!("{}: label `{label}` is not a declared class", t.spec.id)));
            }
        }
        let sub_cols: Vec<(String, Vec<Option<f64>>)> =
            columns.iter().map(|(n, c)| (n.clone(), rows.iter().map(|&i| c[i]).collect())).collect();
        let view: Vec<FeatureColumn<'_>> = sub_cols.iter().map(|(n, v)| FeatureColumn { name: n, values: v }).collect();
        let mut models = Vec::new();
        for sub in t.spec.sub_targets() {
            let labels: Vec<bool> = rows.iter().map(|&i| t.labels[&matrix.rows[i].user_id] == sub.class).collect();
            if suppress {
                models.push(TargetModel { class: sub.class, signal: sub.signal, iv: IndexMap::new(), scorecard: None });
                continue;
            }
            let mut fitted: Vec<FeatureWoE> = Vec::new();
            for c in &view {
                fitted.push(FeatureWoE::fit(c.name, c.values, &labels, &cfg.scorecard.binning)?);
            }
            fitted.sort_by(|a, b| b.iv.total_cmp(&a.iv).then_with(|| a.feature.cmp(&b.feature)));
            let iv: IndexMap<String, f64> = fitted.iter().map(|f| (f.feature.clone(), f.iv)).collect();
            let selected: Vec<String> = fitted.iter().filter(|f| f.iv >= cfg.min_iv && f.bins.len() > 1).map(|f| f.feature.clone()).collect();
            let scorecard = if selected.is_empty() {
                warnings.push(format!("{}: no essence reaches IV {}", sub.signal, cfg.min_iv));
                None
            } else {
                let sc = fit_scorecard(&view, &labels, &selected, &cfg.scorecard)?;
                warnings.extend(sc.meta.warnings.iter().map(|w| format!("{}: {w}", sub.signal)));
                Some(sc)
            };
            if let Some(sc) = &scorecard {
                for fw in sc.by_iv() {
                    edges.extend(rules_for_feature(fw, &sub.signal, &cfg.grades));
                }
            }
            models.push(TargetModel { class: sub.class, signal: sub.signal, iv, scorecard });
        }
        entries.push(TargetEntry { spec: t.spec.clone(), models });
    }

    for (i, r) in edges.iter_mut().enumerate() {
        r.id = format!("r{}", i + 1);
    }

    let mut associations = Vec::new();
    for entry in &entries {
        for m in &entry.models {
            for p in &patterns {
                let support: Vec<&Rule> = edges
                    .iter()
                    .filter(|r| matches!(&r.supports, Supports::Target(s) if s == &m.signal))
                    .filter(|r| p.member_essences.contains(&r.feature))
                    .collect();
                if support.is_empty() {
                    continue;
                }
                let grades: Vec<Grade> = support.iter().map(|r| r.grade).collect();
                let grade = match cfg.association {
                    AssociationAggregation::Max => *grades.iter().max().expect("nonempty"),
                    AssociationAggregation::Mean => grade_mean(&grades),
                };
                associations.push(Association {
                    pattern: p.id.clone(),
                    target: entry.spec.id.clone(),
                    signal: m.signal.clone(),
                    grade,
                    supporting_rules: support.iter().map(|r| r.id.clone()).collect(),
                });
            }
        }
    }

    let mut fingerprint_input = histories_to_jsonl(histories);
    for t in targets {
        let mut labels: Vec<(&String, &String)> = t.labels.iter().collect();
        labels.sort();
        fingerprint_input.push_str(&serde_json::to_string(&(&t.spec.id, labels)).expect("labels serialize"));
    }
    let target_specs: Vec<&TargetSpec> = targets.iter().map(|t| &t.spec).collect();
    let kb = KnowledgeBase {
        version: KB_VERSION,
        essences: specs.to_vec(),
        patterns,
        targets: entries,
        edges,
        associations,
        meta: BuildMeta {
            config_hash: json_hash(&(cfg, strategy, specs, &target_specs)),
            data_fingerprint: sha256_hex(fingerprint_input.as_bytes()),
            strategy: strategy.clone(),
            fit_users: histories.iter().map(|h| h.user_id.clone()).collect(),
            essence_stats: essence_stats(&matrix),
            warnings,
            proposal_transcript: proposal.transcript,
            run_config: None,
        },
        extra: serde_json::Map::new(),
    };
    kb.check_integrity()?;
    Ok(kb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactKind {
    RuleFired,
    PatternLevel,
}

/// One piece of per-user evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fact {
    pub user_id: String,
    pub kind: FactKind,
    /// Rule id or pattern id.
    pub subject: String,
    pub observed: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<Level>,
    pub grade: Grade,
    pub woe: f64,
    pub rendered_text: String,
}

pub(crate) fn fmt_observed(v: Option<f64>) -> String {
    match v {
        Some(x) if x.fract() == 0.0 && x.abs() < 1e15 => format!("{x}"),
        Some(x) => format!("{}", (x * 1e4).round() / 1e4),
        None => "missing".into(),
    }
}

impl Fact {
    /// Text for a rule fact, from the rule and the observed value.
    pub fn rule_text(rule: &Rule, observed: Option<f64>) -> String {
        format!("{} (observed: {})", rule.rendered_text, fmt_observed(observed))
    }

    pub fn pattern_text(pattern: &BehavioralPattern, level: Option<Level>) -> String {
        match level {
            Some(l) => format!("{} level: {l}", pattern.name),
            None => format!("{} level: unknown", pattern.name),
        }
    }

    /// Prompt line, e.g. `- [r3] IF ... (observed: 50)`.
    pub fn line(&self) -> String {
        format!("- [{}] {}", self.subject, self.rendered_text)
    }

    /// Ranking key: grade desc, |woe| desc, subject id asc.
    pub fn rank_cmp(&self, other: &Fact) -> Ordering {
        other
            .grade
            .cmp(&self.grade)
            .then_with(|| other.woe.abs().total_cmp(&self.woe.abs()))
            .then_with(|| id_key(&self.subject).cmp(&id_key(&other.subject)))
    }
}

/// Orders ids like `r2` before `r10`.
pub(crate) fn id_key(id: &str) -> (&str, u64, &str) {
    let split = id.trim_end_matches(|c: char| c.is_ascii_digit()).len();
    let num = id[split..].parse().unwrap_or(0);
    (&id[..split], num, id)
}

/// Evaluates every edge and pattern against one user's essences.
pub fn instantiate_facts(kb: &KnowledgeBase, user: &EssenceVector) -> Result<Vec<Fact>, KbError> {
    let value = |key: &str| {
        user.get(key).ok_or_else(|| KbError::MissingEssence { user: user.user_id.clone(), key: key.to_string() })
    };
    let mut facts = Vec::new();
    for r in &kb.edges {
        let v = value(&r.feature)?;
        if r.condition.contains(v) {
            facts.push(Fact {
                user_id: user.user_id.clone(),
                kind: FactKind::RuleFired,
                subject: r.id.clone(),
                observed: v,
                level: None,
                grade: r.grade,
                woe: r.woe,
                rendered_text: Fact::rule_text(r, v),
            });
        }
    }
    for p in &kb.patterns {
        for m in &p.member_essences {
            value(m)?;
        }
        let level = p.level_fn.level(|n| user.get(n).flatten());
        let grade = kb.associations.iter().filter(|a| a.pattern == p.id).map(|a| a.grade).max().unwrap_or(Grade::Weak);
        facts.push(Fact {
            user_id: user.user_id.clone(),
            kind: FactKind::PatternLevel,
            subject: p.id.clone(),
            observed: None,
            level,
            grade,
            woe: 0.0,
            rendered_text: Fact::pattern_text(p, level),
        });
    }
    Ok(facts)
}

/// Facts as line-delimited JSON.
pub fn facts_to_jsonl(facts: &[Fact]) -> String {
    facts.iter().map(|f| serde_json::to_string(f).expect("fact serializes") + "\n").collect()
}
