//! Behavioral patterns: named combinations of essences from one category,
//! proposed at random or by an LLM, and linked to their members by rules.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use indexmap::IndexMap;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::essence::{Category, EssenceMatrix, EssenceSpec};
use crate::gateway::{Exchange, Gateway, GatewayError};
use crate::util::{derive_seed, quantile_sorted};
use crate::whitebox::{
    rules_for_feature, BinningConfig, Condition, FeatureWoE, Grade, GradeThresholds, Polarity, Rule, RuleTemplate,
    Supports, WhiteboxError,
};

pub const MAX_PATTERNS_PER_CATEGORY: usize = 2;

pub const DEFAULT_PROPOSAL_TEMPLATE: &str = include_str!("../assets/pattern_proposal.txt");

#[derive(Debug, Error)]
pub enum PatternError {
    #[error("no essence specs given")]
    NoSpecs,
    #[error("LLM-guided selection needs a gateway")]
    NoGateway,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("essence matrix lacks column {0}")]
    MissingColumn(String),
    #[error(transparent)]
    Whitebox(#[from] WhiteboxError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectionStrategy {
    Random {
        seed: u64,
    },
    LlmGuided {
        seed: u64,
        /// Proposal prompt; `None` uses the built-in template.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        template: Option<String>,
    },
    /// Random selection with every rule link suppressed (ablation arm).
    WithoutWhiteBox {
        seed: u64,
    },
}

impl SelectionStrategy {
    pub fn seed(&self) -> u64 {
        match self {
            SelectionStrategy::Random { seed }
            | SelectionStrategy::LlmGuided { seed, .. }
            | SelectionStrategy::WithoutWhiteBox { seed } => *seed,
        }
    }

    pub fn suppresses_rules(&self) -> bool {
        matches!(self, SelectionStrategy::WithoutWhiteBox { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            SelectionStrategy::Random { .. } => "random",
            SelectionStrategy::LlmGuided { .. } => "llm_guided",
            SelectionStrategy::WithoutWhiteBox { .. } => "without_white_box",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Low,
    Medium,
    High,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Low => "low",
            Level::Medium => "medium",
            Level::High => "high",
        })
    }
}

/// Member terciles fitted on the population: `(p33, p67)` per essence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelFn {
    pub terciles: IndexMap<String, (f64, f64)>,
}

impl LevelFn {
    pub fn tercile_of(&self, essence: &str, value: f64) -> Option<Level> {
        let &(lo, hi) = self.terciles.get(essence)?;
        Some(if value <= lo {
            Level::Low
        } else if value <= hi {
            Level::Medium
        } else {
            Level::High
        })
    }

    /// Majority tercile over the members with a value; ties go to medium.
    /// `None` when no member has a value.
    pub fn level(&self, value_of: impl Fn(&str) -> Option<f64>) -> Option<Level> {
        let mut counts: BTreeMap<Level, usize> = BTreeMap::new();
        for name in self.terciles.keys() {
            if let Some(l) = value_of(name).and_then(|v| self.tercile_of(name, v)) {
                *counts.entry(l).or_default() += 1;
            }
        }
        let top = *counts.values().max()?;
        let leaders: Vec<Level> = counts.iter().filter(|(_, &c)| c == top).map(|(l, _)| *l).collect();
        Some(if leaders.len() == 1 { leaders[0] } else { Level::Medium })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehavioralPattern {
    pub id: String,
    pub name: String,
    pub category: Category,
    pub member_essences: Vec<String>,
    pub description: String,
    #[serde(default)]
    pub level_fn: LevelFn,
    #[serde(default)]
    pub rules: Vec<Rule>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub patterns: Vec<BehavioralPattern>,
    pub warnings: Vec<String>,
    pub transcript: Vec<Exchange>,
}

fn short_slug(c: Category) -> &'static str {
    c.slug().split('_').next().unwrap_or("cat")
}

fn describe(members: &[String], specs: &[EssenceSpec]) -> String {
    let parts: Vec<String> = members
        .iter()
        .filter_map(|m| specs.iter().find(|s| &s.name == m))
        .map(|s| s.description.trim_end_matches('.').to_string())
        .collect();
    format!("Combines: {}.", parts.join("; "))
}

fn by_category(specs: &[EssenceSpec]) -> Vec<(Category, Vec<&EssenceSpec>)> {
    Category::ALL
        .iter()
        .map(|&c| (c, specs.iter().filter(|s| s.category == c).collect::<Vec<_>>()))
        .filter(|(_, v)| !v.is_empty())
        .collect()
}

fn random_patterns(specs: &[EssenceSpec], seed: u64) -> Vec<BehavioralPattern> {
    let mut out = Vec::new();
    for (cat, members) in by_category(specs) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, cat.slug()));
        let wanted = rng.random_range(1..=MAX_PATTERNS_PER_CATEGORY);
        let mut seen: BTreeSet<Vec<String>> = BTreeSet::new();
        for _ in 0..wanted * 4 {
            if seen.len() == wanted {
                break;
            }
            let size = rng.random_range(2..=3).min(members.len());
            let picked: BTreeSet<&str> = members.choose_multiple(&mut rng, size).map(|s| s.name.as_str()).collect();
            // keep catalog order inside a pattern
            let chosen: Vec<String> =
                members.iter().filter(|s| picked.contains(s.name.as_str())).map(|s| s.name.clone()).collect();
            seen.insert(chosen);
        }
        let mut chosen: Vec<Vec<String>> = seen.into_iter().collect();
        chosen.sort_by_key(|m| m.iter().map(|n| members.iter().position(|s| &s.name == n)).collect::<Vec<_>>());
        for (i, m) in chosen.into_iter().enumerate() {
            let id = format!("pattern_{}_{}", short_slug(cat), i + 1);
            out.push(BehavioralPattern {
                name: id.clone(),
                id,
                category: cat,
                description: describe(&m, specs),
                member_essences: m,
                level_fn: LevelFn::default(),
                rules: Vec::new(),
            });
        }
    }
    out
}

fn render_proposal_prompt(template: &str, specs: &[EssenceSpec]) -> String {
    let mut listing = String::new();
    for (cat, members) in by_category(specs) {
        listing.push_str(&format!("{cat}:\n"));
        for s in members {
            listing.push_str(&format!("- {}: {}\n", s.name, s.description));
        }
    }
    template
        .replace("{essences}", listing.trim_end())
        .replace("{max_per_category}", &MAX_PATTERNS_PER_CATEGORY.to_string())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ProposedBody {
    Members(Vec<String>),
    Full {
        members: Vec<String>,
        #[serde(default)]
        description: Option<String>,
    },
}

fn json_object(text: &str) -> Option<IndexMap<String, ProposedBody>> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    serde_json::from_str(text.get(start..=end)?).ok()
}

/// Validates one LLM reply. Returns the accepted patterns, or `None` when
/// the reply is unparseable or yields nothing usable.
fn validate_reply(text: &str, specs: &[EssenceSpec], warnings: &mut Vec<String>) -> Option<Vec<BehavioralPattern>> {
    let Some(map) = json_object(text) else {
        warnings.push("pattern proposal is not a JSON object".into());
        return None;
    };
    let mut per_cat: BTreeMap<Category, usize> = BTreeMap::new();
    let mut out = Vec::new();
    for (name, body) in map {
        let (members, description) = match body {
            ProposedBody::Members(m) => (m, None),
            ProposedBody::Full { members, description } => (members, description),
        };
        let mut category: Option<Category> = None;
        let mut kept: Vec<String> = Vec::new();
        for m in members {
            let Some(spec) = specs.iter().find(|s| s.name == m) else {
                warnings.push(format!("pattern '{name}': unknown essence '{m}' dropped"));
                continue;
            };
            let cat = *category.get_or_insert(spec.category);
            if spec.category != cat {
                warnings.push(format!("pattern '{name}': essence '{m}' is outside category {cat}, dropped"));
            } else if !kept.contains(&m) {
                kept.push(m);
            }
        }
        let Some(cat) = category.filter(|_| !kept.is_empty()) else {
            warnings.push(format!("pattern '{name}' has no valid members, rejected"));
            continue;
        };
        let count = per_cat.entry(cat).or_default();
        if *count >= MAX_PATTERNS_PER_CATEGORY {
            warnings.push(format!("pattern '{name}' exceeds the cap of {MAX_PATTERNS_PER_CATEGORY} per category, rejected"));
            continue;
        }
        *count += 1;
        let name = name.trim().to_string();
        out.push(BehavioralPattern {
            id: format!("pattern_{}_{}", short_slug(cat), *count),
            description: description.filter(|d| !d.trim().is_empty()).unwrap_or_else(|| describe(&kept, specs)),
            name: if name.is_empty() { format!("pattern_{}_{}", short_slug(cat), *count) } else { name },
            category: cat,
            member_essences: kept,
            level_fn: LevelFn::default(),
            rules: Vec::new(),
        });
    }
    if out.is_empty() {
        None
    } else {
        out.sort_by(|a, b| a.category.cmp(&b.category).then_with(|| a.id.cmp(&b.id)));
        Some(out)
    }
}

/// Proposes patterns for a catalog. Rules are left empty; see [`link_patterns`].
pub fn propose_patterns(
    specs: &[EssenceSpec],
    strategy: &SelectionStrategy,
    gateway: Option<&dyn Gateway>,
) -> Result<Proposal, PatternError> {
    if specs.is_empty() {
        return Err(PatternError::NoSpecs);
    }
    match strategy {
        SelectionStrategy::Random { seed } | SelectionStrategy::WithoutWhiteBox { seed } => {
            Ok(Proposal { patterns: random_patterns(specs, *seed), ..Proposal::default() })
        }
        SelectionStrategy::LlmGuided { seed, template } => {
            let gw = gateway.ok_or(PatternError::NoGateway)?;
            let prompt = render_proposal_prompt(template.as_deref().unwrap_or(DEFAULT_PROPOSAL_TEMPLATE), specs);
            let mut proposal = Proposal::default();
            for attempt in 0..2 {
                let reply = gw.complete(&prompt)?;
                let accepted = validate_reply(&reply, specs, &mut proposal.warnings);
                proposal.transcript.push(Exchange { prompt: prompt.clone(), response: reply });
                if let Some(p) = accepted {
                    proposal.patterns = p;
                    return Ok(proposal);
                }
                if attempt == 0 {
                    proposal.warnings.push("retrying pattern proposal".into());
                }
            }
            proposal.warnings.push("pattern proposal failed twice; falling back to random selection".into());
            proposal.patterns = random_patterns(specs, *seed);
            Ok(proposal)
        }
    }
}

fn terciles(values: &[Option<f64>]) -> Option<(f64, f64)> {
    let mut v: Vec<f64> = values.iter().flatten().copied().collect();
    v.sort_by(f64::total_cmp);
    Some((quantile_sorted(&v, 1.0 / 3.0)?, quantile_sorted(&v, 2.0 / 3.0)?))
}

/// Supervision for [`link_patterns`]: binary labels aligned with the matrix
/// rows and the signal name rules should carry.
pub struct LinkLabels<'a> {
    pub labels: &'a [bool],
    pub signal: &'a str,
    pub binning: &'a BinningConfig,
    pub thresholds: &'a GradeThresholds,
}

/// Fits level functions and essence→pattern rules.
///
/// With labels, each member essence is binned against the target and every
/// bin becomes a rule supporting the pattern. Without labels, each member
/// gets a moderate "top tercile" rule. `suppress` empties all rules.
pub fn link_patterns(
    patterns: &[BehavioralPattern],
    matrix: &EssenceMatrix,
    labels: Option<&LinkLabels<'_>>,
    suppress: bool,
) -> Result<Vec<BehavioralPattern>, PatternError> {
    let mut out = Vec::with_capacity(patterns.len());
    for p in patterns {
        let mut linked = p.clone();
        linked.level_fn = LevelFn::default();
        linked.rules.clear();
        for m in &p.member_essences {
            if !matrix.names.iter().any(|n| n == m) {
                return Err(PatternError::MissingColumn(m.clone()));
            }
            let col = matrix.column(m);
            let cuts = terciles(&col);
            if let Some(c) = cuts {
                linked.level_fn.terciles.insert(m.clone(), c);
            }
            if suppress {
                continue;
            }
            match labels {
                Some(l) => {
                    let fw = FeatureWoE::fit(m, &col, l.labels, l.binning)?;
                    for mut r in rules_for_feature(&fw, l.signal, l.thresholds) {
                        r.supports = Supports::Pattern(p.id.clone());
                        linked.rules.push(r);
                    }
                }
                None => {
                    if let Some((_, hi)) = cuts {
                        linked.rules.push(tercile_rule(m, hi, p));
                    }
                }
            }
        }
        out.push(linked);
    }
    Ok(out)
}

fn tercile_rule(essence: &str, upper_cut: f64, p: &BehavioralPattern) -> Rule {
    let mut r = Rule {
        id: String::new(),
        feature: essence.to_string(),
        condition: Condition { lower: Some(upper_cut), upper: None, missing: false },
        polarity: Polarity::Toward,
        grade: Grade::Moderate,
        woe: 0.0,
        supports: Supports::Pattern(p.id.clone()),
        signal: p.name.clone(),
        template: RuleTemplate::TopTercile,
        rendered_text: String::new(),
    };
    r.rendered_text = r.render();
    r
}
