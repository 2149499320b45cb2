//! Canonical event-sequence model and the ways data enters it: dataset
//! adapters for delimited / line-JSON logs and a synthetic generator with a
//! planted ground-truth rule.

mod adapter;
mod parse;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adapter::{AmountSign, ColumnMap, DatasetAdapter, LabelColumns, TimestampConvention};
pub use parse::{attach_labels, parse_transactions, InputFormat, ParseOutcome, RowError};
pub use synth::{generate_synthetic, PlantSpec};

pub const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("schema error: mapped column `{0}` not found in input")]
    MissingColumn(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("{malformed} of {total} rows malformed (more than half); first error at row {first_row}: {first_message}")]
    TooManyMalformed {
        malformed: usize,
        total: usize,
        first_row: usize,
        first_message: String,
    },
    #[error("invalid adapter: {0}")]
    Adapter(String),
    #[error("invalid plant: {0}")]
    Plant(String),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One raw event, normalized to the canonical form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transaction {
    pub user_id: String,
    /// Seconds since the user's first event.
    pub ts: i64,
    pub mcc_code: Option<u16>,
    /// Minor currency units; inflow positive, outflow negative.
    pub amount: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub txn_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub currency: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Unlabeled,
}

/// A user's time-ordered events.
///
/// `anchor_epoch` is the clock time (seconds in the adapter's clock) of the
/// first event and feeds calendar essences such as weekend share. `horizon`
/// is the end of the observation window, in seconds since the first event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user_id: String,
    pub transactions: Vec<Transaction>,
    #[serde(default)]
    pub label: Option<String>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_epoch: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<i64>,
}

impl UserHistory {
    /// Checks the canonical-form invariants.
    pub fn validate(&self) -> Result<(), String> {
        let labeled = matches!(self.split, Split::Train | Split::Test);
        if labeled != self.label.is_some() {
            return Err(format!(
                "user {}: label must be present iff split is train/test",
                self.user_id
            ));
        }
        if labeled && self.transactions.is_empty() {
            return Err(format!("user {}: labeled user without transactions", self.user_id));
        }
        let mut prev = 0i64;
        for t in &self.transactions {
            if t.ts < 0 || t.ts < prev {
                return Err(format!("user {}: timestamps not sorted/non-negative", self.user_id));
            }
            if !t.amount.is_finite() {
                return Err(format!("user {}: non-finite amount", self.user_id));
            }
            if matches!(t.mcc_code, Some(c) if c > 9999) {
                return Err(format!("user {}: mcc code out of range", self.user_id));
            }
            prev = t.ts;
        }
        Ok(())
    }
}

/// Writes histories as line-delimited JSON, one user per line.
pub fn histories_to_jsonl(histories: &[UserHistory]) -> String {
    let mut out = String::new();
    for h in histories {
        out.push_str(&serde_json::to_string(h).expect("history serializes"));
        out.push('\n');
    }
    out
}

/// Reads line-delimited canonical histories.
pub fn read_histories_jsonl<R: BufRead>(reader: R) -> Result<Vec<UserHistory>, IngestError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let h: UserHistory =
            serde_json::from_str(&line).map_err(|source| IngestError::Json { line: i + 1, source })?;
        h.validate().map_err(IngestError::Schema)?;
        out.push(h);
    }
    Ok(out)
}

/// Moves a label-stratified `fraction` of the labeled users to the test split.
pub fn assign_test_split(histories: &mut [UserHistory], fraction: f64, seed: u64) {
    let mut by_label: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, h) in histories.iter().enumerate() {
        if let Some(l) = &h.label {
            by_label.entry(l.clone()).or_default().push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for idx in by_label.values_mut() {
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * fraction).round() as usize;
        for (k, &i) in idx.iter().enumerate() {
            histories[i].split = if k < n_test { Split::Test } else { Split::Train };
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    Uniform,
    #[default]
    Stratified,
}

/// Draws `n` users. Stratified sampling keeps per-label proportions
/// (unlabeled users form their own stratum); output keeps input order.
pub fn subsample(histories: &[UserHistory], n: usize, sampling: Sampling, seed: u64) -> Vec<UserHistory> {
    if n >= histories.len() {
        return histories.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: BTreeSet<usize> = match sampling {
        Sampling::Uniform => {
            let mut idx: Vec<usize> = (0..histories.len()).collect();
            idx.shuffle(&mut rng);
            idx.into_iter().take(n).collect()
        }
        Sampling::Stratified => {
            let mut strata: BTreeMap<Option<String>, Vec<usize>> = BTreeMap::new();
            for (i, h) in histories.iter().enumerate() {
                strata.entry(h.label.clone()).or_default().push(i);
            }
            let quotas = largest_remainder(
                &strata.values().map(|v| v.len()).collect::<Vec<_>>(),
                n,
            );
            let mut chosen = BTreeSet::new();
            for (idx, quota) in strata.values_mut().zip(quotas) {
                idx.shuffle(&mut rng);
                chosen.extend(idx.iter().take(quota).copied());
            }
            chosen
        }
    };
    chosen.into_iter().map(|i| histories[i].clone()).collect()
}

/// Apportions `total` across groups proportionally to `sizes` (Hamilton method).
pub(crate) fn largest_remainder(sizes: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = sizes.iter().sum();
    if sum == 0 {
        return vec![0; sizes.len()];
    }
    let total = total.min(sum);
    let exact: Vec<f64> = sizes.iter().map(|&s| s as f64 * total as f64 / sum as f64).collect();
    let mut alloc: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = total - alloc.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if alloc[i] < sizes[i] {
            alloc[i] += 1;
            left -= 1;
        }
    }
    alloc
}
