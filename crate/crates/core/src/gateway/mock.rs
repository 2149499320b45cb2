use std::collections::VecDeque;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};

use regex::Regex;

use super::{Gateway, GatewayError};
use crate::context::template::{ANSWERS_PREFIX, EVIDENCE_HEADER, TARGET_PREFIX};
use crate::whitebox::Grade;

enum Mode {
    Scripted(Mutex<VecDeque<String>>),
    Policy,
}

/// Deterministic stand-in for an LLM.
///
/// Scripted mode replays canned replies in order and errors once they run
/// out. Policy mode reads the graded evidence lines of the prompt, sums
/// `±weight(grade)` for facts about the target and answers with the class
/// the sum points to. It is a test fixture, not a model of LLM behavior.
pub struct MockGateway {
    mode: Mode,
    served: AtomicUsize,
    prompts: Mutex<Vec<String>>,
}

impl MockGateway {
    pub fn scripted<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        MockGateway {
            mode: Mode::Scripted(Mutex::new(replies.into_iter().map(Into::into).collect())),
            served: AtomicUsize::new(0),
            prompts: Mutex::new(Vec::new()),
        }
    }

    /// Script file: a JSON array of reply strings.
    pub fn from_script_file(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("cannot read mock script {}: {e}", path.display())))?;
        let replies: Vec<String> = serde_json::from_str(&text)
            .map_err(|e| GatewayError::Config(format!("mock script {} is not a JSON string array: {e}", path.display())))?;
        Ok(Self::scripted(replies))
    }

    pub fn policy() -> Self {
        MockGateway { mode: Mode::Policy, served: AtomicUsize::new(0), prompts: Mutex::new(Vec::new()) }
    }

    /// Prompts received so far, in call order.
    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().expect("prompt lock").clone()
    }

    pub fn calls(&self) -> usize {
        self.prompts.lock().expect("prompt lock").len()
    }
}

impl Gateway for MockGateway {
    fn complete(&self, prompt: &str) -> Result<String, GatewayError> {
        self.prompts.lock().expect("prompt lock").push(prompt.to_string());
        match &self.mode {
            Mode::Scripted(q) => {
                let next = q.lock().expect("script lock").pop_front();
                match next {
                    Some(r) => {
                        self.served.fetch_add(1, Ordering::Relaxed);
                        Ok(r)
                    }
                    None => Err(GatewayError::ScriptExhausted(self.served.load(Ordering::Relaxed))),
                }
            }
            Mode::Policy => Ok(policy_reply(prompt)),
        }
    }

    fn max_concurrent(&self) -> usize {
        match self.mode {
            Mode::Scripted(_) => 1,
            Mode::Policy => 8,
        }
    }
}

struct GradedFact {
    id: String,
    signed_weight: i64,
    signal: String,
}

fn fact_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^- \[([^\]]+)\] IF .+ -> (strong|moderate|weak) (counter-)?(.+?) signal(?: \(observed: [^)]*\))?$")
            .expect("valid regex")
    })
}

fn evidence(prompt: &str) -> Vec<GradedFact> {
    let mut out = Vec::new();
    let mut lines = prompt.lines().skip_while(|l| l.trim() != EVIDENCE_HEADER);
    lines.next();
    for line in lines.take_while(|l| !l.trim().is_empty()) {
        if let Some(c) = fact_line().captures(line.trim()) {
            let w = Grade::parse(&c[2]).map_or(0, |g| g.weight());
            out.push(GradedFact {
                id: c[1].to_string(),
                signed_weight: if c.get(3).is_some() { -w } else { w },
                signal: c[4].to_string(),
            });
        }
    }
    out
}

fn answers(prompt: &str) -> (Vec<String>, Option<String>) {
    let Some(line) = prompt.lines().find_map(|l| l.trim().strip_prefix(ANSWERS_PREFIX)) else {
        return (Vec::new(), None);
    };
    let (list, positive) = match line.split_once(" (positive class: ") {
        Some((l, p)) => (l, Some(p.trim_end_matches(')').trim().to_string())),
        None => (line, None),
    };
    (list.split(", ").map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(), positive)
}

/// The grade-sum policy answer for one prompt. A zero sum is settled by the
/// first directional fact in prompt order.
pub fn policy_reply(prompt: &str) -> String {
    let target = prompt
        .lines()
        .find_map(|l| l.trim().strip_prefix(TARGET_PREFIX))
        .unwrap_or("")
        .trim()
        .to_string();
    let (classes, positive) = answers(prompt);
    let facts = evidence(prompt);
    if classes.is_empty() {
        return "No answer options were given.\nANSWER: ABSTAIN".into();
    }

    let (label, score, supporting): (String, i64, Vec<&GradedFact>) = if classes.len() == 2 {
        let pos = positive.clone().unwrap_or_else(|| classes[0].clone());
        let neg = classes.iter().find(|c| **c != pos).cloned().unwrap_or_else(|| classes[1].clone());
        let about: Vec<&GradedFact> = facts.iter().filter(|f| f.signal.eq_ignore_ascii_case(&target)).collect();
        let score: i64 = about.iter().map(|f| f.signed_weight).sum();
        // a tie goes to the first listed directional fact, the strongest one
        let direction = match score.signum() {
            0 => about.iter().map(|f| f.signed_weight.signum()).find(|&s| s != 0).unwrap_or(0),
            s => s,
        };
        let label = if direction > 0 { pos } else { neg };
        let agree = about.into_iter().filter(|f| f.signed_weight.signum() == direction && direction != 0).collect();
        (label, score, agree)
    } else {
        // one-vs-rest signals are named "<target>=<class>"
        let mut best: Option<(i64, &String)> = None;
        for c in &classes {
            let name = format!("{target}={c}");
            let s: i64 = facts.iter().filter(|f| f.signal.eq_ignore_ascii_case(&name)).map(|f| f.signed_weight).sum();
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, c));
            }
        }
        let (s, c) = best.expect("classes nonempty");
        let name = format!("{target}={c}");
        let agree = facts.iter().filter(|f| f.signal.eq_ignore_ascii_case(&name) && f.signed_weight > 0).collect();
        (c.clone(), s, agree)
    };

    let cited: Vec<String> = supporting.iter().take(2).map(|f| format!("[{}]", f.id)).collect();
    let body = if cited.is_empty() {
        format!("No directional evidence (score {score}); defaulting.")
    } else {
        format!("Graded evidence sums to {score}. Key rules: {}.", cited.join(", "))
    };
    format!("{body}\nANSWER: {label}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::parse_prediction;

    fn prompt(facts: &[&str]) -> String {
        let mut p = String::from("Preamble.\n\nTarget: churn\nTask: will the client churn\nPossible answers: churn, retain (positive class: churn)\n\n");
        p.push_str("Behavioral evidence:\n");
        for f in facts {
            p.push_str(f);
            p.push('\n');
        }
        p.push_str("\nRespond.\n");
        p
    }

    #[test]
    fn one_strong_fact_decides() {
        let p = prompt(&["- [r4] IF activity_period_days <= 70 -> strong churn signal (observed: 50)"]);
        let r = policy_reply(&p);
        assert!(r.ends_with("ANSWER: churn"), "{r}");
        let parsed = parse_prediction(&r, &["churn".into(), "retain".into()], &["r4".into()]);
        assert_eq!(parsed.evidence, vec!["r4".to_string()]);
    }

    #[test]
    fn counter_evidence_outweighs() {
        let p = prompt(&[
            "- [r1] IF 70 < activity_period_days -> strong counter-churn signal (observed: 90)",
            "- [r2] IF txn_count <= 10 -> moderate churn signal (observed: 5)",
            "- [r3] IF top_mcc_share > 0.4 -> weak counter-churn signal (observed: 0.5)",
            "- [pattern_temporal_0] activity rhythm level: high",
        ]);
        let r = policy_reply(&p);
        assert!(r.contains("[r1], [r3]"), "{r}");
        assert!(r.ends_with("ANSWER: retain"));
    }

    #[test]
    fn tie_follows_first_listed_fact() {
        let churn = "- [r8] IF activity_period_days <= 71 -> strong churn signal (observed: 43)";
        let stay = "- [r10] IF days_since_last_txn <= 37 -> strong counter-churn signal (observed: 20)";
        let r = policy_reply(&prompt(&[churn, stay]));
        assert!(r.ends_with("ANSWER: churn"), "{r}");
        assert!(r.contains("[r8]") && !r.contains("[r10]"));
        assert!(policy_reply(&prompt(&[stay, churn])).ends_with("ANSWER: retain"));
    }

    #[test]
    fn no_facts_gives_fixed_class() {
        let r = policy_reply(&prompt(&[]));
        assert!(r.ends_with("ANSWER: retain"));
        assert_eq!(policy_reply(&prompt(&[])), r);
    }

    #[test]
    fn script_replays_then_errors() {
        let gw = MockGateway::scripted(["a", "b"]);
        assert_eq!(gw.complete("x").unwrap(), "a");
        assert_eq!(gw.complete("y").unwrap(), "b");
        assert!(matches!(gw.complete("z"), Err(GatewayError::ScriptExhausted(2))));
        assert_eq!(gw.calls(), 3);
    }

    #[test]
    fn multiclass_argmax() {
        let p = "Target: segment\nPossible answers: a, b, c (positive class: a)\n\nBehavioral evidence:\n\
                 - [r1] IF x <= 1 -> strong segment=b signal (observed: 0)\n\
                 - [r2] IF y <= 1 -> weak segment=c signal (observed: 0)\n\n";
        assert!(policy_reply(p).ends_with("ANSWER: b"));
    }
}
