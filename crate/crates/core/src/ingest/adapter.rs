use serde::{Deserialize, Serialize};

use super::{IngestError, SECONDS_PER_DAY};

const ROSBANK: &str = include_str!("../../assets/adapters/rosbank.toml");
const GENDER: &str = include_str!("../../assets/adapters/gender.toml");
const DATAFUSION: &str = include_str!("../../assets/adapters/datafusion.toml");

/// Source column for each canonical field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub user_id: String,
    pub timestamp: String,
    pub amount: String,
    #[serde(default)]
    pub mcc_code: Option<String>,
    #[serde(default)]
    pub txn_type: Option<String>,
    #[serde(default)]
    pub currency: Option<String>,
    #[serde(default)]
    pub label: Option<String>,
}

/// Columns of a separate labels file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelColumns {
    pub user_id: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimestampConvention {
    /// Integer or fractional seconds since the Unix epoch.
    EpochSeconds,
    /// Calendar datetime parsed with a chrono format string, read as UTC.
    Datetime { format: String },
    /// Fractional days since a dataset-specific origin.
    RelativeDays,
    /// `"<day> HH:MM:SS"`: a relative day number plus time of day.
    DayClock,
    /// Event ordinal; each step is `seconds_per_step` seconds.
    RelativeIndex {
        #[serde(default = "default_step")]
        seconds_per_step: i64,
    },
}

fn default_step() -> i64 {
    SECONDS_PER_DAY
}

impl TimestampConvention {
    /// Converts one raw cell to seconds in the adapter's clock.
    pub fn to_seconds(&self, raw: &str) -> Result<i64, String> {
        let raw = raw.trim();
        let bad = || format!("unparseable timestamp `{raw}`");
        match self {
            TimestampConvention::EpochSeconds => {
                let v: f64 = raw.parse().map_err(|_| bad())?;
                finite_seconds(v).ok_or_else(bad)
            }
            TimestampConvention::Datetime { format } => {
                let dt = chrono::NaiveDateTime::parse_from_str(raw, format)
                    .or_else(|_| {
                        chrono::NaiveDate::parse_from_str(raw, format)
                            .map(|d| d.and_hms_opt(0, 0, 0).expect("midnight"))
                    })
                    .map_err(|_| bad())?;
                Ok(dt.and_utc().timestamp())
            }
            TimestampConvention::RelativeDays => {
                let v: f64 = raw.parse().map_err(|_| bad())?;
                finite_seconds(v * SECONDS_PER_DAY as f64).ok_or_else(bad)
            }
            TimestampConvention::DayClock => {
                let (day, clock) = raw.split_once(' ').ok_or_else(bad)?;
                let day: i64 = day.trim().parse().map_err(|_| bad())?;
                let t = chrono::NaiveTime::parse_from_str(clock.trim(), "%H:%M:%S").map_err(|_| bad())?;
                use chrono::Timelike;
                Ok(day * SECONDS_PER_DAY + t.num_seconds_from_midnight() as i64)
            }
            TimestampConvention::RelativeIndex { seconds_per_step } => {
                let v: f64 = raw.parse().map_err(|_| bad())?;
                finite_seconds(v * *seconds_per_step as f64).ok_or_else(bad)
            }
        }
    }
}

fn finite_seconds(v: f64) -> Option<i64> {
    (v.is_finite() && v.abs() < 1e15).then(|| v.round() as i64)
}

/// How the source encodes direction of money flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AmountSign {
    /// Already canonical: credits positive, debits negative.
    InflowPositive,
    /// Debits positive, credits negative.
    OutflowPositive,
    /// Unsigned magnitudes; rows whose type is listed are inflows.
    ByType { inflow_types: Vec<String> },
}

impl AmountSign {
    pub fn apply(&self, amount: f64, txn_type: Option<&str>) -> f64 {
        match self {
            AmountSign::InflowPositive => amount,
            AmountSign::OutflowPositive => -amount,
            AmountSign::ByType { inflow_types } => {
                let inflow = txn_type.is_some_and(|t| inflow_types.iter().any(|x| x == t));
                if inflow {
                    amount.abs()
                } else {
                    -amount.abs()
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetAdapter {
    pub name: String,
    pub columns: ColumnMap,
    pub timestamp: TimestampConvention,
    pub amount_sign: AmountSign,
    #[serde(default)]
    pub positive_label: Option<String>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default)]
    pub labels: Option<LabelColumns>,
}

fn default_delimiter() -> char {
    ','
}

impl DatasetAdapter {
    pub fn from_toml(text: &str) -> Result<Self, IngestError> {
        let a: DatasetAdapter = toml::from_str(text).map_err(|e| IngestError::Adapter(e.to_string()))?;
        a.validate()?;
        Ok(a)
    }

    /// Built-in adapters: `rosbank`, `gender`, `datafusion`.
    pub fn builtin(name: &str) -> Option<Self> {
        let text = match name {
            "rosbank" => ROSBANK,
            "gender" => GENDER,
            "datafusion" => DATAFUSION,
            _ => return None,
        };
        Some(Self::from_toml(text).expect("built-in adapter is valid"))
    }

    pub fn builtin_names() -> &'static [&'static str] {
        &["rosbank", "gender", "datafusion"]
    }

    /// Mapped source columns, in canonical-field order.
    pub fn mapped_columns(&self) -> Vec<&str> {
        let c = &self.columns;
        let mut cols = vec![c.user_id.as_str(), c.timestamp.as_str(), c.amount.as_str()];
        for s in [&c.mcc_code, &c.txn_type, &c.currency, &c.label].into_iter().flatten() {
            cols.push(s.as_str());
        }
        cols
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if self.name.trim().is_empty() {
            return Err(IngestError::Adapter("adapter name is empty".into()));
        }
        let cols = self.mapped_columns();
        for (i, c) in cols.iter().enumerate() {
            if c.is_empty() {
                return Err(IngestError::Adapter("empty column name".into()));
            }
            if cols[..i].contains(c) {
                return Err(IngestError::Adapter(format!(
                    "source column `{c}` mapped to more than one canonical field"
                )));
            }
        }
        if let TimestampConvention::RelativeIndex { seconds_per_step } = self.timestamp {
            if seconds_per_step <= 0 {
                return Err(IngestError::Adapter("seconds_per_step must be positive".into()));
            }
        }
        Ok(())
    }
}
