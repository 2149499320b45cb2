//! White-box rule induction: WoE binning, a scorecard over WoE features,
//! grading, and human-readable rule rendering.

mod binning;
mod rule;
mod scorecard;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use binning::{
    fit_bins, information_value, woe_of_bin, Bin, BinningConfig, ClassTotals, FeatureWoE, SMOOTHING,
};
pub use rule::{grade, render_rule, Condition, Grade, GradeThresholds, Polarity, Rule, RuleTemplate, Supports};
pub use scorecard::{fit_scorecard, FeatureColumn, FitMethod, Scorecard, ScorecardConfig, TrainingMeta};

#[derive(Debug, Error)]
pub enum WhiteboxError {
    #[error("degenerate target")]
    DegenerateTarget,
    #[error("{n} rows, at least {min} required")]
    TooFewSamples { n: usize, min: usize },
    #[error("{values} values but {labels} labels")]
    LengthMismatch { values: usize, labels: usize },
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("scorecard document version {found} is not supported (reader version {expected})")]
    Version { found: u64, expected: u64 },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub const SCORECARD_DOC_VERSION: u64 = 1;

/// Versioned JSON document holding a scorecard and the rules rendered from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorecardDocument {
    pub version: u64,
    pub scorecard: Scorecard,
    pub rules: Vec<Rule>,
}

impl ScorecardDocument {
    pub fn new(scorecard: Scorecard, rules: Vec<Rule>) -> Self {
        ScorecardDocument { version: SCORECARD_DOC_VERSION, scorecard, rules }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, WhiteboxError> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let found = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
        if found != SCORECARD_DOC_VERSION {
            return Err(WhiteboxError::Version { found, expected: SCORECARD_DOC_VERSION });
        }
        Ok(serde_json::from_value(raw)?)
    }
}

/// Plain-text audit export, one rendered rule per line.
pub fn rules_to_text(rules: &[Rule]) -> String {
    rules.iter().map(|r| format!("{}\n", r.rendered_text)).collect()
}

/// Renders one rule per bin of a fitted feature, graded by `thresholds`.
pub fn rules_for_feature(fw: &FeatureWoE, signal: &str, thresholds: &GradeThresholds) -> Vec<Rule> {
    fw.bins
        .iter()
        .map(|b| render_rule(&fw.feature, b, thresholds.grade(b.woe), Polarity::of_woe(b.woe), signal))
        .collect()
}
