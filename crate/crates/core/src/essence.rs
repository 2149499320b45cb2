//! Task-agnostic numeric descriptors ("essences") of one user's history,
//! grouped into temporal, monetary and merchant categories.

use std::collections::BTreeMap;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{UserHistory, SECONDS_PER_DAY};
use crate::util::{mean, sample_std};

#[derive(Debug, Error)]
pub enum EssenceError {
    #[error("user {0} has no transactions")]
    EmptyHistory(String),
    #[error("invalid essence catalog: {0}")]
    Catalog(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    TemporalDynamics,
    MonetaryBehavior,
    MerchantDistribution,
}

impl Category {
    pub const ALL: [Category; 3] =
        [Category::TemporalDynamics, Category::MonetaryBehavior, Category::MerchantDistribution];

    pub fn slug(self) -> &'static str {
        match self {
            Category::TemporalDynamics => "temporal_dynamics",
            Category::MonetaryBehavior => "monetary_behavior",
            Category::MerchantDistribution => "merchant_distribution",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.slug().replace('_', " "))
    }
}

/// Computation behind an essence. Catalog overrides may rename or
/// re-describe essences but must point at one of these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorId {
    ActivityPeriodDays,
    TxnCount,
    MeanInterTxnHours,
    StdInterTxnHours,
    DaysSinceLastTxn,
    WeekendTxnFraction,
    NightTxnFraction,
    TotalOutflow,
    TotalInflow,
    MeanTxnAmount,
    StdTxnAmount,
    MaxTxnAmount,
    InflowOutflowRatio,
    MonthlyInflowCv,
    NUniqueMcc,
    MccEntropy,
    TopMccShare,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssenceSpec {
    pub name: String,
    pub category: Category,
    pub description: String,
    pub extractor: ExtractorId,
}

fn spec(name: &str, category: Category, extractor: ExtractorId, description: &str) -> EssenceSpec {
    EssenceSpec { name: name.into(), category, description: description.into(), extractor }
}

/// The built-in 17-essence catalog (7 temporal, 7 monetary, 3 merchant).
pub fn default_essence_specs() -> Vec<EssenceSpec> {
    use Category::*;
    use ExtractorId::*;
    vec![
        spec("activity_period_days", TemporalDynamics, ActivityPeriodDays,
            "Number of days between the client's first and last transaction."),
        spec("txn_count", TemporalDynamics, TxnCount, "Total number of transactions."),
        spec("mean_inter_txn_hours", TemporalDynamics, MeanInterTxnHours,
            "Average gap between consecutive transactions, in hours."),
        spec("std_inter_txn_hours", TemporalDynamics, StdInterTxnHours,
            "Variability of the gaps between consecutive transactions, in hours; low values mean regular activity."),
        spec("days_since_last_txn", TemporalDynamics, DaysSinceLastTxn,
            "Days from the last transaction to the end of the observation window."),
        spec("weekend_txn_fraction", TemporalDynamics, WeekendTxnFraction,
            "Share of transactions made on Saturday or Sunday."),
        spec("night_txn_fraction", TemporalDynamics, NightTxnFraction,
            "Share of transactions made between midnight and 6 am."),
        spec("total_outflow", MonetaryBehavior, TotalOutflow, "Total amount spent (debits)."),
        spec("total_inflow", MonetaryBehavior, TotalInflow, "Total amount received (credits such as salary)."),
        spec("mean_txn_amount", MonetaryBehavior, MeanTxnAmount, "Average absolute transaction amount."),
        spec("std_txn_amount", MonetaryBehavior, StdTxnAmount,
            "Spending variability: standard deviation of absolute transaction amounts."),
        spec("max_txn_amount", MonetaryBehavior, MaxTxnAmount, "Largest absolute transaction amount."),
        spec("inflow_outflow_ratio", MonetaryBehavior, InflowOutflowRatio,
            "Money received divided by money spent."),
        spec("monthly_inflow_cv", MonetaryBehavior, MonthlyInflowCv,
            "Income consistency: coefficient of variation of inflow per 30-day window."),
        spec("n_unique_mcc", MerchantDistribution, NUniqueMcc, "Number of distinct merchant categories used."),
        spec("mcc_entropy", MerchantDistribution, MccEntropy,
            "Diversity of purchases: entropy of the merchant category distribution."),
        spec("top_mcc_share", MerchantDistribution, TopMccShare,
            "Category concentration: share of transactions in the most frequent merchant category."),
    ]
}

/// Loads a catalog override: a TOML document with one `[[essence]]` table
/// per entry (`name`, `category`, `description`, `extractor`).
pub fn essence_specs_from_toml(text: &str) -> Result<Vec<EssenceSpec>, EssenceError> {
    #[derive(Deserialize)]
    struct Doc {
        essence: Vec<EssenceSpec>,
    }
    let doc: Doc = toml::from_str(text).map_err(|e| EssenceError::Catalog(e.to_string()))?;
    validate_specs(&doc.essence)?;
    Ok(doc.essence)
}

pub fn validate_specs(specs: &[EssenceSpec]) -> Result<(), EssenceError> {
    if specs.is_empty() {
        return Err(EssenceError::Catalog("catalog is empty".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        if specs[..i].iter().any(|p| p.name == s.name) {
            return Err(EssenceError::Catalog(format!("duplicate essence name `{}`", s.name)));
        }
        if s.description.trim().is_empty() {
            return Err(EssenceError::Catalog(format!("essence `{}` has no description", s.name)));
        }
    }
    Ok(())
}

/// Essence values of one user, in catalog order; `None` marks an
/// undefined value (for example the spread of a single interval).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssenceVector {
    pub user_id: String,
    pub values: IndexMap<String, Option<f64>>,
}

impl EssenceVector {
    pub fn get(&self, name: &str) -> Option<Option<f64>> {
        self.values.get(name).copied()
    }
}

struct Stats {
    span_s: f64,
    n: usize,
    intervals_h: Vec<f64>,
    days_since_last: Option<f64>,
    weekend: Option<f64>,
    night: Option<f64>,
    outflow: f64,
    inflow: f64,
    abs_amounts: Vec<f64>,
    monthly_inflow: Vec<f64>,
    mcc_counts: BTreeMap<u16, usize>,
}

impl Stats {
    fn new(history: &UserHistory) -> Self {
        let txns = &history.transactions;
        let mut ts: Vec<i64> = txns.iter().map(|t| t.ts).collect();
        ts.sort_unstable();
        let t0 = ts[0];
        let rel: Vec<i64> = ts.iter().map(|t| t - t0).collect();
        let last = *rel.last().expect("nonempty");
        let intervals_h = rel.windows(2).map(|w| (w[1] - w[0]) as f64 / 3600.0).collect();

        let calendar = history.anchor_epoch.map(|anchor| {
            let mut weekend = 0usize;
            let mut night = 0usize;
            for t in txns {
                let clock = anchor + (t.ts - t0);
                let day = clock.div_euclid(SECONDS_PER_DAY);
                let hour = clock.rem_euclid(SECONDS_PER_DAY) / 3600;
                // 1970-01-01 was a Thursday; Monday = 0
                let weekday = (day + 3).rem_euclid(7);
                weekend += usize::from(weekday >= 5);
                night += usize::from(hour < 6);
            }
            (weekend as f64 / txns.len() as f64, night as f64 / txns.len() as f64)
        });

        let mut outflow = 0.0;
        let mut inflow = 0.0;
        let windows = (last / (30 * SECONDS_PER_DAY)) as usize + 1;
        let mut monthly_inflow = vec![0.0; windows];
        let mut mcc_counts = BTreeMap::new();
        for t in txns {
            if t.amount < 0.0 {
                outflow += -t.amount;
            } else {
                inflow += t.amount;
                monthly_inflow[((t.ts - t0) / (30 * SECONDS_PER_DAY)) as usize] += t.amount;
            }
            if let Some(m) = t.mcc_code {
                *mcc_counts.entry(m).or_insert(0) += 1;
            }
        }
        Stats {
            span_s: last as f64,
            n: txns.len(),
            intervals_h,
            days_since_last: history.horizon.map(|h| (h - last) as f64 / SECONDS_PER_DAY as f64),
            weekend: calendar.map(|c| c.0),
            night: calendar.map(|c| c.1),
            outflow,
            inflow,
            abs_amounts: txns.iter().map(|t| t.amount.abs()).collect(),
            monthly_inflow,
            mcc_counts,
        }
    }

    fn extract(&self, id: ExtractorId) -> Option<f64> {
        use ExtractorId::*;
        match id {
            ActivityPeriodDays => Some(self.span_s / SECONDS_PER_DAY as f64),
            TxnCount => Some(self.n as f64),
            MeanInterTxnHours => mean(&self.intervals_h),
            StdInterTxnHours => sample_std(&self.intervals_h),
            DaysSinceLastTxn => self.days_since_last,
            WeekendTxnFraction => self.weekend,
            NightTxnFraction => self.night,
            TotalOutflow => Some(self.outflow),
            TotalInflow => Some(self.inflow),
            MeanTxnAmount => mean(&self.abs_amounts),
            StdTxnAmount => sample_std(&self.abs_amounts),
            MaxTxnAmount => self.abs_amounts.iter().copied().reduce(f64::max),
            InflowOutflowRatio => (self.outflow > 0.0).then(|| self.inflow / self.outflow),
            MonthlyInflowCv => {
                let m = mean(&self.monthly_inflow)?;
                let s = sample_std(&self.monthly_inflow)?;
                (m > 0.0).then(|| s / m)
            }
            NUniqueMcc => Some(self.mcc_counts.len() as f64),
            MccEntropy => {
                let total: usize = self.mcc_counts.values().sum();
                (total > 0).then(|| {
                    -self
                        .mcc_counts
                        .values()
                        .map(|&c| {
                            let p = c as f64 / total as f64;
                            p * p.ln()
                        })
                        .sum::<f64>()
                        + 0.0
                })
            }
            TopMccShare => {
                let top = self.mcc_counts.values().copied().max()?;
                Some(top as f64 / self.n as f64)
            }
        }
    }
}

/// Computes the essence vector of one history.
pub fn compute_essences(history: &UserHistory, specs: &[EssenceSpec]) -> Result<EssenceVector, EssenceError> {
    if history.transactions.is_empty() {
        return Err(EssenceError::EmptyHistory(history.user_id.clone()));
    }
    let stats = Stats::new(history);
    let values = specs
        .iter()
        .map(|s| (s.name.clone(), stats.extract(s.extractor).filter(|v| v.is_finite())))
        .collect();
    Ok(EssenceVector { user_id: history.user_id.clone(), values })
}

/// Essence vectors of a population, one row per user, sharing one key set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssenceMatrix {
    pub names: Vec<String>,
    pub rows: Vec<EssenceVector>,
}

impl EssenceMatrix {
    pub fn compute(histories: &[UserHistory], specs: &[EssenceSpec]) -> Result<Self, EssenceError> {
        let rows = histories
            .iter()
            .map(|h| compute_essences(h, specs))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(EssenceMatrix { names: specs.iter().map(|s| s.name.clone()).collect(), rows })
    }

    pub fn column(&self, name: &str) -> Vec<Option<f64>> {
        self.rows.iter().map(|r| r.get(name).flatten()).collect()
    }

    pub fn row(&self, user_id: &str) -> Option<&EssenceVector> {
        self.rows.iter().find(|r| r.user_id == user_id)
    }

    /// Delimited export: header `user_id,<essence names>`, missing as empty.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["user_id".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![r.user_id.clone()];
            rec.extend(
                self.names
                    .iter()
                    .map(|n| r.get(n).flatten().map(|v| v.to_string()).unwrap_or_default()),
            );
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}
