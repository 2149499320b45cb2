use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::{IngestError, Split, Transaction, UserHistory, SECONDS_PER_DAY};

/// Monday 2021-01-04 00:00:00 UTC; calendar origin of generated users.
const BASE_EPOCH: i64 = 1_609_718_400;
const MCC_POOL: [u16; 12] = [5411, 5812, 5912, 5541, 4111, 5311, 5999, 5732, 5651, 4814, 6011, 5814];

/// A planted ground-truth rule: `positive ⇔ activity span ≤ threshold_days`,
/// with each label flipped independently with probability `noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub target: String,
    pub positive_label: String,
    pub negative_label: String,
    pub threshold_days: u32,
    pub noise: f64,
    /// Declared range for the expected share of positive labels.
    pub balance: (f64, f64),
}

impl PlantSpec {
    pub fn churn(threshold_days: u32, noise: f64) -> Self {
        PlantSpec {
            target: "churn".into(),
            positive_label: "churn".into(),
            negative_label: "retain".into(),
            threshold_days,
            noise,
            balance: (0.35, 0.65),
        }
    }

    /// Inclusive range of whole-day activity spans, centred on the threshold.
    pub fn span_range(&self) -> (u32, u32) {
        let t = self.threshold_days.max(1);
        let lo = (t / 14).max(1);
        (lo, 2 * t - lo)
    }

    /// Observation window length in days.
    pub fn window_days(&self) -> u32 {
        self.span_range().1 + 30
    }

    /// The planted predicate on a span measured in days.
    pub fn predicate(&self, span_days: f64) -> bool {
        span_days <= self.threshold_days as f64
    }

    pub fn expected_positive_share(&self) -> f64 {
        let (lo, hi) = self.span_range();
        let p = (self.threshold_days.max(1) - lo + 1) as f64 / (hi - lo + 1) as f64;
        p * (1.0 - self.noise) + (1.0 - p) * self.noise
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if !(0.0..0.5).contains(&self.noise) {
            return Err(IngestError::Plant(format!(
                "label noise {} outside [0, 0.5): the planted rule would be unrecoverable",
                self.noise
            )));
        }
        if self.threshold_days == 0 {
            return Err(IngestError::Plant("threshold must be at least one day".into()));
        }
        if self.positive_label == self.negative_label {
            return Err(IngestError::Plant("positive and negative labels coincide".into()));
        }
        let share = self.expected_positive_share();
        if share < self.balance.0 || share > self.balance.1 {
            return Err(IngestError::Plant(format!(
                "expected positive share {share:.3} outside declared balance [{}, {}]",
                self.balance.0, self.balance.1
            )));
        }
        Ok(())
    }
}

/// `<target>:activity<=<days>[:noise<eps>]`, e.g. `churn:activity<=70:noise0.1`.
impl FromStr for PlantSpec {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |m: &str| IngestError::Plant(format!("`{s}`: {m}"));
        let mut parts = s.split(':');
        let target = parts.next().filter(|t| !t.is_empty()).ok_or_else(|| bad("missing target"))?;
        let rule = parts.next().ok_or_else(|| bad("missing rule"))?;
        let days = rule
            .strip_prefix("activity<=")
            .ok_or_else(|| bad("rule must look like activity<=<days>"))?
            .parse::<u32>()
            .map_err(|_| bad("threshold must be a whole number of days"))?;
        let mut noise = 0.0;
        for extra in parts {
            let v = extra.strip_prefix("noise").ok_or_else(|| bad("unknown plan field"))?;
            noise = v.parse().map_err(|_| bad("noise must be a number"))?;
        }
        let mut plan = PlantSpec::churn(days, noise);
        plan.target = target.to_string();
        if target != "churn" {
            plan.positive_label = target.to_string();
            plan.negative_label = format!("not_{target}");
        }
        plan.validate()?;
        Ok(plan)
    }
}

/// Generates `n_users` labeled histories carrying the planted rule.
///
/// Every user's activity span is a whole number of days drawn uniformly from
/// [`PlantSpec::span_range`]; the rest of the history (transaction count,
/// merchants, amounts, salary inflows, calendar placement) is independent
/// noise. All users land in the train split.
pub fn generate_synthetic(n_users: usize, seed: u64, plan: &PlantSpec) -> Result<Vec<UserHistory>, IngestError> {
    if n_users == 0 {
        return Err(IngestError::Plant("n_users must be positive".into()));
    }
    plan.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = plan.span_range();
    let window = plan.window_days() as i64;
    let spend = LogNormal::<f64>::new(7.0, 1.0).expect("valid lognormal");
    let salary = LogNormal::<f64>::new(11.0, 0.4).expect("valid lognormal");
    let width = (n_users.max(10) - 1).to_string().len();

    let mut out = Vec::with_capacity(n_users);
    for u in 0..n_users {
        let user_id = format!("u{u:0width$}");
        let span_days = rng.random_range(lo..=hi) as i64;
        let span = span_days * SECONDS_PER_DAY;
        let start_day = rng.random_range(0..=(window - span_days));
        let start_hour = rng.random_range(8..20i64);
        let anchor = BASE_EPOCH + start_day * SECONDS_PER_DAY + start_hour * 3600;

        let n_merchants = rng.random_range(2..=8usize);
        let merchants: Vec<u16> = MCC_POOL.choose_multiple(&mut rng, n_merchants).copied().collect();
        let n_spend = rng.random_range(8..=60usize);

        let mut ts: Vec<i64> = vec![0, span];
        ts.extend((2..n_spend).map(|_| rng.random_range(0..=span)));
        let mut txns: Vec<Transaction> = ts
            .into_iter()
            .map(|t| Transaction {
                user_id: user_id.clone(),
                ts: t,
                mcc_code: Some(*merchants.choose(&mut rng).expect("nonempty")),
                amount: -(spend.sample(&mut rng) * 100.0).round() / 100.0,
                txn_type: Some("purchase".into()),
                currency: Some("RUB".into()),
            })
            .collect();

        let base_salary = salary.sample(&mut rng);
        let pay_offset = rng.random_range(1..30i64) * SECONDS_PER_DAY;
        let mut pay = pay_offset;
        while pay < span {
            let jitter: f64 = 1.0 + rng.random_range(-0.1..0.1);
            txns.push(Transaction {
                user_id: user_id.clone(),
                ts: pay,
                mcc_code: None,
                amount: (base_salary * jitter * 100.0).round() / 100.0,
                txn_type: Some("salary".into()),
                currency: Some("RUB".into()),
            });
            pay += 30 * SECONDS_PER_DAY;
        }
        txns.sort_by_key(|t| t.ts);

        let truth = plan.predicate(span_days as f64);
        let flipped = rng.random::<f64>() < plan.noise;
        let positive = truth != flipped;
        let label = if positive { &plan.positive_label } else { &plan.negative_label };
        out.push(UserHistory {
            user_id,
            transactions: txns,
            label: Some(label.clone()),
            split: Split::Train,
            anchor_epoch: Some(anchor),
            horizon: Some((window - start_day) * SECONDS_PER_DAY - start_hour * 3600),
        });
    }
    Ok(out)
}
