//! Fixed prompt template, version 1.

pub const TEMPLATE_VERSION: u32 = 1;

pub const PREAMBLE: &str = "You are a careful financial behavior analyst. Base your answer only on the information below and cite the rule ids you rely on.";
pub const TARGET_PREFIX: &str = "Target: ";
pub const TASK_PREFIX: &str = "Task: ";
pub const ANSWERS_PREFIX: &str = "Possible answers: ";
pub const EVIDENCE_HEADER: &str = "Behavioral evidence:";
pub const TRANSACTIONS_HEADER: &str = "Transactions:";
pub const QUANTILES_HEADER: &str = "Population quantiles (p10 / p50 / p90):";
pub const IMPORTANCE_HEADER: &str = "Feature importance (information value):";
pub const EXAMPLES_HEADER: &str = "Examples:";
pub const REFLECTIONS_HEADER: &str = "Past reflections:";
pub const ANSWER_INSTRUCTION: &str =
    "Explain your reasoning briefly, then end with a final line of the form ANSWER: <label>, where <label> is one of the possible answers.";
