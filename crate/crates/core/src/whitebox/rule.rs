use std::fmt;

use serde::{Deserialize, Serialize};

use super::binning::Bin;

/// Evidence strength of a rule, ordered `Weak < Moderate < Strong`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grade {
    Weak,
    Moderate,
    Strong,
}

impl Grade {
    pub fn as_str(self) -> &'static str {
        match self {
            Grade::Weak => "weak",
            Grade::Moderate => "moderate",
            Grade::Strong => "strong",
        }
    }

    /// Votes used by the grade-sum reasoner: 1 / 2 / 3.
    pub fn weight(self) -> i64 {
        match self {
            Grade::Weak => 1,
            Grade::Moderate => 2,
            Grade::Strong => 3,
        }
    }

    pub fn parse(s: &str) -> Option<Grade> {
        match s {
            "weak" => Some(Grade::Weak),
            "moderate" => Some(Grade::Moderate),
            "strong" => Some(Grade::Strong),
            _ => None,
        }
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradeThresholds {
    pub strong: f64,
    pub moderate: f64,
}

impl Default for GradeThresholds {
    fn default() -> Self {
        GradeThresholds { strong: 0.5, moderate: 0.2 }
    }
}

impl GradeThresholds {
    pub fn grade(&self, woe: f64) -> Grade {
        let a = woe.abs();
        if a >= self.strong {
            Grade::Strong
        } else if a >= self.moderate {
            Grade::Moderate
        } else {
            Grade::Weak
        }
    }
}

/// Grades a WoE with the default 0.5 / 0.2 cutoffs on `|woe|`.
pub fn grade(woe: f64) -> Grade {
    GradeThresholds::default().grade(woe)
}

/// +1 when the rule's range points toward the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    #[serde(rename = "+1")]
    Toward,
    #[serde(rename = "-1")]
    Away,
}

impl Polarity {
    pub fn of_woe(woe: f64) -> Polarity {
        if woe > 0.0 {
            Polarity::Toward
        } else {
            Polarity::Away
        }
    }

    pub fn sign(self) -> i64 {
        match self {
            Polarity::Toward => 1,
            Polarity::Away => -1,
        }
    }
}

/// Value range a rule fires on: `(lower, upper]` or missing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    #[serde(default)]
    pub missing: bool,
}

impl Condition {
    pub fn of_bin(bin: &Bin) -> Self {
        Condition { lower: bin.lower, upper: bin.upper, missing: bin.is_missing_bin }
    }

    pub fn contains(&self, value: Option<f64>) -> bool {
        match value.filter(|v| !v.is_nan()) {
            None => self.missing,
            Some(v) => !self.missing && self.lower.is_none_or(|l| v > l) && self.upper.is_none_or(|u| v <= u),
        }
    }
}

/// What a rule is evidence for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "lowercase")]
pub enum Supports {
    Target(String),
    Pattern(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleTemplate {
    /// `IF <cond> -> <grade> [counter-]<signal> signal`
    Signal,
    /// `IF <feature> in top tercile -> high <signal>`
    TopTercile,
}

/// One bin rendered as a graded, human-readable condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub id: String,
    pub feature: String,
    pub condition: Condition,
    pub polarity: Polarity,
    pub grade: Grade,
    pub woe: f64,
    pub supports: Supports,
    /// Name printed in the conclusion (target name, class, or pattern name).
    pub signal: String,
    pub template: RuleTemplate,
    pub rendered_text: String,
}

fn num(v: f64) -> String {
    // shortest representation that round-trips
    format!("{v}")
}

impl Rule {
    /// Regenerates the rendered text from the structured fields.
    pub fn render(&self) -> String {
        let f = &self.feature;
        match self.template {
            RuleTemplate::TopTercile => format!("IF {f} in top tercile -> high {}", self.signal),
            RuleTemplate::Signal => {
                let c = &self.condition;
                let cond = if c.missing {
                    format!("{f} is missing")
                } else {
                    match (c.lower, c.upper) {
                        (None, Some(u)) => format!("{f} <= {}", num(u)),
                        (Some(l), None) => format!("{f} > {}", num(l)),
                        (Some(l), Some(u)) => format!("{} < {f} <= {}", num(l), num(u)),
                        (None, None) => format!("{f} is present"),
                    }
                };
                let counter = if self.polarity == Polarity::Away { "counter-" } else { "" };
                format!("IF {cond} -> {} {counter}{} signal", self.grade, self.signal)
            }
        }
    }

    pub fn text_is_consistent(&self) -> bool {
        self.rendered_text == self.render()
    }
}

/// Builds a signal rule for one fitted bin; `id` and `supports` are set by
/// the caller's context (kb / pattern linking).
pub fn render_rule(feature: &str, bin: &Bin, grade: Grade, polarity: Polarity, target_name: &str) -> Rule {
    let mut rule = Rule {
        id: String::new(),
        feature: feature.to_string(),
        condition: Condition::of_bin(bin),
        polarity,
        grade,
        woe: bin.woe,
        supports: Supports::Target(target_name.to_string()),
        signal: target_name.to_string(),
        template: RuleTemplate::Signal,
        rendered_text: String::new(),
    };
    rule.rendered_text = rule.render();
    rule
}
