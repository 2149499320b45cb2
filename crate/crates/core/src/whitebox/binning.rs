//! Supervised discretization: equal-frequency candidate cuts, greedy merging
//! of adjacent bins, and smoothed Weight-of-Evidence per bin.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::WhiteboxError;

/// Additive smoothing applied to each bin's class counts.
pub const SMOOTHING: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BinningConfig {
    pub max_bins: usize,
    pub min_samples: usize,
    /// Adjacent bins closer than this in WoE are merged.
    pub merge_woe_delta: f64,
    /// Bins holding less than this share of rows are merged into a neighbor.
    pub min_bin_share: f64,
    /// Family-wise significance level for keeping adjacent bins apart: a
    /// pair is merged unless its WoE gap is significant after a Bonferroni
    /// correction over all candidate cut points. 0 disables the test.
    pub merge_alpha: f64,
    /// Opt-in pool-adjacent-violators pass enforcing monotone WoE.
    pub monotonic: bool,
}

impl Default for BinningConfig {
    fn default() -> Self {
        BinningConfig {
            max_bins: 10,
            min_samples: 20,
            merge_woe_delta: 0.05,
            min_bin_share: 0.05,
            merge_alpha: 0.05,
            monotonic: false,
        }
    }
}

/// A value range `(lower, upper]` (`None` = unbounded) or the missing bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    #[serde(default)]
    pub is_missing_bin: bool,
    pub event_count: u64,
    pub nonevent_count: u64,
    pub woe: f64,
}

impl Bin {
    pub fn contains(&self, value: Option<f64>) -> bool {
        match value.filter(|v| !v.is_nan()) {
            None => self.is_missing_bin,
            Some(v) => {
                !self.is_missing_bin
                    && self.lower.is_none_or(|l| v > l)
                    && self.upper.is_none_or(|u| v <= u)
            }
        }
    }

    pub fn support(&self) -> u64 {
        self.event_count + self.nonevent_count
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTotals {
    pub events: u64,
    pub nonevents: u64,
}

/// `ln(((e + ½) / (E + ½B)) / ((n + ½) / (N + ½B)))`; positive values point
/// toward the event (positive) class.
pub fn woe_of_bin(bin: &Bin, totals: ClassTotals, n_bins: usize) -> f64 {
    woe_from_counts(bin.event_count, bin.nonevent_count, totals, n_bins)
}

pub(crate) fn woe_from_counts(e: u64, n: u64, totals: ClassTotals, n_bins: usize) -> f64 {
    let (pe, pn) = smoothed_shares(e, n, totals, n_bins);
    // difference of logs keeps woe(e, n) == -woe(n, e) bit-for-bit
    pe.ln() - pn.ln()
}

fn smoothed_shares(e: u64, n: u64, totals: ClassTotals, n_bins: usize) -> (f64, f64) {
    let b = n_bins as f64 * SMOOTHING;
    (
        (e as f64 + SMOOTHING) / (totals.events as f64 + b),
        (n as f64 + SMOOTHING) / (totals.nonevents as f64 + b),
    )
}

/// Binned view of one feature with its Information Value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWoE {
    pub feature: String,
    pub bins: Vec<Bin>,
    pub iv: f64,
}

impl FeatureWoE {
    pub fn fit(
        feature: &str,
        values: &[Option<f64>],
        labels: &[bool],
        cfg: &BinningConfig,
    ) -> Result<Self, WhiteboxError> {
        let bins = fit_bins(values, labels, cfg)?;
        let mut fw = FeatureWoE { feature: feature.to_string(), bins, iv: 0.0 };
        fw.iv = information_value(&fw);
        Ok(fw)
    }

    pub fn totals(&self) -> ClassTotals {
        ClassTotals {
            events: self.bins.iter().map(|b| b.event_count).sum(),
            nonevents: self.bins.iter().map(|b| b.nonevent_count).sum(),
        }
    }

    pub fn bin_index(&self, value: Option<f64>) -> Option<usize> {
        self.bins.iter().position(|b| b.contains(value))
    }

    /// WoE of the bin holding `value`; 0 when no bin holds it (a missing
    /// value for a feature that had no missing values during fitting).
    pub fn woe_for(&self, value: Option<f64>) -> f64 {
        self.bin_index(value).map_or(0.0, |i| self.bins[i].woe)
    }
}

/// `Σ (p_event − p_nonevent) · woe` over bins, with smoothed shares.
pub fn information_value(fw: &FeatureWoE) -> f64 {
    let totals = fw.totals();
    let nb = fw.bins.len();
    fw.bins
        .iter()
        .map(|b| {
            let (pe, pn) = smoothed_shares(b.event_count, b.nonevent_count, totals, nb);
            (pe - pn) * (pe.ln() - pn.ln())
        })
        .sum()
}

#[derive(Debug, Clone, Copy)]
struct Span {
    lower: Option<f64>,
    upper: Option<f64>,
    e: u64,
    n: u64,
}

impl Span {
    fn absorb(&mut self, right: Span) {
        self.upper = right.upper;
        self.e += right.e;
        self.n += right.n;
    }
}

/// Bins one feature against a binary target.
///
/// Candidate cuts are the distinct values found at up to `max_bins`
/// equal-frequency quantiles. Adjacent bins are then merged greedily, first
/// any bin below `min_bin_share` of rows, then the pair with the smallest
/// WoE gap while that gap is under `merge_woe_delta` or not significant at
/// `merge_alpha`. Missing values get their own bin.
pub fn fit_bins(values: &[Option<f64>], labels: &[bool], cfg: &BinningConfig) -> Result<Vec<Bin>, WhiteboxError> {
    if values.len() != labels.len() {
        return Err(WhiteboxError::LengthMismatch { values: values.len(), labels: labels.len() });
    }
    let n = values.len();
    if n < cfg.min_samples {
        return Err(WhiteboxError::TooFewSamples { n, min: cfg.min_samples });
    }
    let totals = ClassTotals {
        events: labels.iter().filter(|&&l| l).count() as u64,
        nonevents: labels.iter().filter(|&&l| !l).count() as u64,
    };
    if totals.events == 0 || totals.nonevents == 0 {
        return Err(WhiteboxError::DegenerateTarget);
    }

    let mut finite: Vec<(f64, bool)> = Vec::with_capacity(n);
    let (mut miss_e, mut miss_n) = (0u64, 0u64);
    for (v, &l) in values.iter().zip(labels) {
        match v.filter(|x| !x.is_nan()) {
            Some(x) => finite.push((x, l)),
            None if l => miss_e += 1,
            None => miss_n += 1,
        }
    }
    finite.sort_by(|a, b| a.0.total_cmp(&b.0));
    let has_missing = miss_e + miss_n > 0;

    let mut spans: Vec<Span> = Vec::new();
    if !finite.is_empty() {
        let m = finite.len();
        let max = finite[m - 1].0;
        let mut cuts: Vec<f64> = Vec::new();
        for i in 1..cfg.max_bins.max(1) {
            let idx = (i * m).div_ceil(cfg.max_bins) - 1;
            let c = finite[idx.min(m - 1)].0;
            if c < max && cuts.last().is_none_or(|&last| c > last) {
                cuts.push(c);
            }
        }
        let mut lower = None;
        let mut pos = 0;
        for upper in cuts.iter().map(|&c| Some(c)).chain(std::iter::once(None)) {
            let mut s = Span { lower, upper, e: 0, n: 0 };
            while pos < m && upper.is_none_or(|u| finite[pos].0 <= u) {
                if finite[pos].1 {
                    s.e += 1;
                } else {
                    s.n += 1;
                }
                pos += 1;
            }
            spans.push(s);
            lower = upper;
        }
        let n_bins = |spans: &Vec<Span>| spans.len() + usize::from(has_missing);
        merge_spans(&mut spans, totals, n, cfg, n_bins);
        if cfg.monotonic {
            pool_adjacent_violators(&mut spans, totals, n_bins);
        }
    }

    let nb = spans.len() + usize::from(has_missing);
    let mut bins: Vec<Bin> = spans
        .iter()
        .map(|s| Bin {
            lower: s.lower,
            upper: s.upper,
            is_missing_bin: false,
            event_count: s.e,
            nonevent_count: s.n,
            woe: woe_from_counts(s.e, s.n, totals, nb),
        })
        .collect();
    if has_missing {
        bins.push(Bin {
            lower: None,
            upper: None,
            is_missing_bin: true,
            event_count: miss_e,
            nonevent_count: miss_n,
            woe: woe_from_counts(miss_e, miss_n, totals, nb),
        });
    }
    Ok(bins)
}

/// Two-sided Bonferroni critical value for `pairs` simultaneous tests.
fn critical_z(alpha: f64, pairs: usize) -> f64 {
    if alpha <= 0.0 || pairs == 0 {
        return 0.0;
    }
    let tail = (alpha / (2.0 * pairs as f64)).min(0.5);
    Normal::standard().inverse_cdf(1.0 - tail)
}

fn merge_spans(
    spans: &mut Vec<Span>,
    totals: ClassTotals,
    n: usize,
    cfg: &BinningConfig,
    n_bins: impl Fn(&Vec<Span>) -> usize,
) {
    let min_support = cfg.min_bin_share * n as f64;
    let z_crit = critical_z(cfg.merge_alpha, spans.len().saturating_sub(1));
    while spans.len() > 1 {
        let nb = n_bins(spans);
        let woes: Vec<f64> = spans.iter().map(|s| woe_from_counts(s.e, s.n, totals, nb)).collect();

        // undersized bins first, smallest support wins
        let small = (0..spans.len())
            .filter(|&i| ((spans[i].e + spans[i].n) as f64) < min_support)
            .min_by_key(|&i| (spans[i].e + spans[i].n, i));
        if let Some(i) = small {
            let left = (i > 0).then(|| (woes[i] - woes[i - 1]).abs());
            let right = (i + 1 < spans.len()).then(|| (woes[i] - woes[i + 1]).abs());
            let into_left = match (left, right) {
                (Some(l), Some(r)) => l <= r,
                (Some(_), None) => true,
                _ => false,
            };
            let (a, b) = if into_left { (i - 1, i) } else { (i, i + 1) };
            let right_span = spans.remove(b);
            spans[a].absorb(right_span);
            continue;
        }

        let mut best: Option<(f64, usize)> = None;
        for i in 0..spans.len() - 1 {
            let gap = (woes[i] - woes[i + 1]).abs();
            let (a, b) = (spans[i], spans[i + 1]);
            let se = (1.0 / (a.e as f64 + SMOOTHING)
                + 1.0 / (a.n as f64 + SMOOTHING)
                + 1.0 / (b.e as f64 + SMOOTHING)
                + 1.0 / (b.n as f64 + SMOOTHING))
                .sqrt();
            let z = gap / se;
            let mergeable = gap < cfg.merge_woe_delta || z < z_crit;
            if mergeable && best.is_none_or(|(bz, _)| z < bz) {
                best = Some((z, i));
            }
        }
        match best {
            Some((_, i)) => {
                let right_span = spans.remove(i + 1);
                spans[i].absorb(right_span);
            }
            None => break,
        }
    }
}

fn pool_adjacent_violators(spans: &mut Vec<Span>, totals: ClassTotals, n_bins: impl Fn(&Vec<Span>) -> usize) {
    if spans.len() < 2 {
        return;
    }
    let woe = |s: &Span, nb| woe_from_counts(s.e, s.n, totals, nb);
    let nb = n_bins(spans);
    let increasing = woe(&spans[spans.len() - 1], nb) >= woe(&spans[0], nb);
    loop {
        let nb = n_bins(spans);
        let violator = (0..spans.len() - 1).find(|&i| {
            let (a, b) = (woe(&spans[i], nb), woe(&spans[i + 1], nb));
            if increasing {
                b < a
            } else {
                b > a
            }
        });
        match violator {
            Some(i) => {
                let right_span = spans.remove(i + 1);
                spans[i].absorb(right_span);
            }
            None => break,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bin(e: u64, n: u64) -> Bin {
        Bin { lower: None, upper: None, is_missing_bin: false, event_count: e, nonevent_count: n, woe: 0.0 }
    }

    #[test]
    fn woe_equal_proportions_is_zero() {
        let t = ClassTotals { events: 10, nonevents: 10 };
        assert_eq!(woe_of_bin(&bin(5, 5), t, 2), 0.0);
    }

    #[test]
    fn woe_hand_evaluated() {
        let t = ClassTotals { events: 10, nonevents: 10 };
        let want = ((9.5f64 / 11.0) / (1.5 / 11.0)).ln();
        assert!((woe_of_bin(&bin(9, 1), t, 2) - want).abs() < 1e-15);
        assert!((want - (9.5f64 / 1.5).ln()).abs() < 1e-12);
    }

    #[test]
    fn woe_antisymmetric_in_class_roles() {
        let t = ClassTotals { events: 37, nonevents: 81 };
        let swapped = ClassTotals { events: 81, nonevents: 37 };
        for (e, n) in [(3, 9), (0, 5), (20, 1)] {
            assert_eq!(woe_of_bin(&bin(e, n), t, 4), -woe_of_bin(&bin(n, e), swapped, 4));
        }
    }

    #[test]
    fn constant_feature_single_bin() {
        let values = vec![Some(3.0); 40];
        let labels: Vec<bool> = (0..40).map(|i| i % 3 == 0).collect();
        let bins = fit_bins(&values, &labels, &BinningConfig::default()).unwrap();
        assert_eq!(bins.len(), 1);
        assert_eq!((bins[0].lower, bins[0].upper), (None, None));
        assert!(!bins[0].is_missing_bin);
    }

    #[test]
    fn all_missing_single_missing_bin() {
        let values = vec![None; 40];
        let labels: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
        let bins = fit_bins(&values, &labels, &BinningConfig::default()).unwrap();
        assert_eq!(bins.len(), 1);
        assert!(bins[0].is_missing_bin);
        assert_eq!(bins[0].support(), 40);
    }

    #[test]
    fn degenerate_target_rejected() {
        let values: Vec<Option<f64>> = (0..30).map(|i| Some(i as f64)).collect();
        let err = fit_bins(&values, &[true; 30], &BinningConfig::default()).unwrap_err();
        assert!(matches!(err, WhiteboxError::DegenerateTarget));
        assert_eq!(err.to_string(), "degenerate target");
    }

    #[test]
    fn too_few_samples_rejected() {
        let values: Vec<Option<f64>> = (0..10).map(|i| Some(i as f64)).collect();
        let labels: Vec<bool> = (0..10).map(|i| i < 5).collect();
        assert!(matches!(
            fit_bins(&values, &labels, &BinningConfig::default()),
            Err(WhiteboxError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn single_catch_all_iv_is_zero() {
        let values = vec![Some(1.0); 50];
        let labels: Vec<bool> = (0..50).map(|i| i % 5 == 0).collect();
        let fw = FeatureWoE::fit("x", &values, &labels, &BinningConfig::default()).unwrap();
        assert_eq!(fw.iv, 0.0);
    }

    #[test]
    fn perfect_separation_iv_matches_direct_sum() {
        // 100 events at x <= 0, 100 non-events at x > 0
        let values: Vec<Option<f64>> = (0..200).map(|i| Some(if i < 100 { -1.0 - i as f64 } else { i as f64 })).collect();
        let labels: Vec<bool> = (0..200).map(|i| i < 100).collect();
        let fw = FeatureWoE::fit("x", &values, &labels, &BinningConfig::default()).unwrap();
        assert_eq!(fw.bins.len(), 2);
        // direct evaluation with B = 2, E = N = 100
        let pe: [f64; 2] = [100.5 / 101.0, 0.5 / 101.0];
        let pn: [f64; 2] = [0.5 / 101.0, 100.5 / 101.0];
        let want: f64 = (0..2).map(|k| (pe[k] - pn[k]) * (pe[k] / pn[k]).ln()).sum();
        assert!((fw.iv - want).abs() < 1e-12);
    }

    #[test]
    fn missing_values_get_dedicated_bin() {
        let values: Vec<Option<f64>> = (0..100).map(|i| if i % 10 == 0 { None } else { Some(i as f64) }).collect();
        let labels: Vec<bool> = (0..100).map(|i| i < 50).collect();
        let bins = fit_bins(&values, &labels, &BinningConfig::default()).unwrap();
        let missing: Vec<_> = bins.iter().filter(|b| b.is_missing_bin).collect();
        assert_eq!(missing.len(), 1);
        assert_eq!(missing[0].support(), 10);
        assert!(bins.last().unwrap().is_missing_bin);
    }

    #[test]
    fn monotone_option_yields_monotone_woe() {
        // noisy increasing event rate
        let values: Vec<Option<f64>> = (0..400).map(|i| Some(i as f64)).collect();
        let labels: Vec<bool> = (0..400).map(|i| (i * 7919 % 400) < i).collect();
        let cfg = BinningConfig { merge_alpha: 0.0, merge_woe_delta: 0.0, monotonic: true, ..Default::default() };
        let bins = fit_bins(&values, &labels, &cfg).unwrap();
        assert!(bins.windows(2).all(|w| w[1].woe >= w[0].woe));
    }

    /// Brute-force threshold sweep: the best single cut by accuracy.
    fn best_threshold(values: &[f64], labels: &[bool]) -> f64 {
        let mut cands: Vec<f64> = values.to_vec();
        cands.sort_by(f64::total_cmp);
        cands.dedup();
        let mut best = (0usize, cands[0]);
        for &t in &cands {
            let correct = values.iter().zip(labels).filter(|(v, l)| (**v <= t) == **l).count();
            if correct > best.0 {
                best = (correct, t);
            }
        }
        best.1
    }

    #[test]
    fn planted_threshold_recovered() {
        use crate::essence::{default_essence_specs, EssenceMatrix};
        use crate::ingest::{generate_synthetic, PlantSpec};
        let hs = generate_synthetic(2000, 7, &PlantSpec::churn(70, 0.1)).unwrap();
        let m = EssenceMatrix::compute(&hs, &default_essence_specs()).unwrap();
        let span: Vec<f64> = m.column("activity_period_days").into_iter().map(Option::unwrap).collect();
        let labels: Vec<bool> = hs.iter().map(|h| h.label.as_deref() == Some("churn")).collect();
        let oracle = best_threshold(&span, &labels);
        assert!((65.0..=75.0).contains(&oracle), "oracle optimum {oracle}");
        let bins = fit_bins(&m.column("activity_period_days"), &labels, &BinningConfig::default()).unwrap();
        assert!(
            bins.iter().any(|b| b.upper.is_some_and(|u| (65.0..=75.0).contains(&u))),
            "{bins:?}"
        );
    }

    proptest! {
        #[test]
        fn partition_property(
            data in prop::collection::vec((prop::option::of(-50.0f64..50.0), any::<bool>()), 20..150),
            probes in prop::collection::vec(prop::option::of(-100.0f64..100.0), 1..20),
        ) {
            let values: Vec<Option<f64>> = data.iter().map(|d| d.0).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let bins = fit_bins(&values, &labels, &BinningConfig::default()).unwrap();
            let has_missing_bin = bins.iter().any(|b| b.is_missing_bin);
            for v in values.iter().chain(&probes) {
                let hits = bins.iter().filter(|b| b.contains(*v)).count();
                if v.is_none() && !has_missing_bin {
                    prop_assert_eq!(hits, 0);
                } else {
                    prop_assert_eq!(hits, 1, "value {:?} in {:?}", v, bins);
                }
            }
            let finite: Vec<&Bin> = bins.iter().filter(|b| !b.is_missing_bin).collect();
            for w in finite.windows(2) {
                prop_assert!(w[0].upper.unwrap() < w[1].upper.unwrap_or(f64::INFINITY));
                prop_assert_eq!(w[0].upper, w[1].lower);
            }
            prop_assert!(bins.iter().all(|b| b.support() >= 1 && b.woe.is_finite()));
        }

        #[test]
        fn iv_non_negative(
            data in prop::collection::vec((prop::option::of(0.0f64..10.0), any::<bool>()), 20..120),
        ) {
            let values: Vec<Option<f64>> = data.iter().map(|d| d.0).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let fw = FeatureWoE::fit("x", &values, &labels, &BinningConfig::default()).unwrap();
            prop_assert!(fw.iv >= -1e-15);
        }

        #[test]
        fn monotone_map_keeps_count_multiset(
            data in prop::collection::vec((-20.0f64..20.0, any::<bool>()), 20..150),
        ) {
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let raw: Vec<Option<f64>> = data.iter().map(|d| Some(d.0)).collect();
            let mapped: Vec<Option<f64>> = data.iter().map(|d| Some(d.0.exp() * 3.0 + 1.0)).collect();
            let cfg = BinningConfig::default();
            let counts = |bins: Vec<Bin>| {
                let mut c: Vec<(u64, u64)> = bins.iter().map(|b| (b.event_count, b.nonevent_count)).collect();
                c.sort();
                c
            };
            prop_assert_eq!(counts(fit_bins(&raw, &labels, &cfg).unwrap()), counts(fit_bins(&mapped, &labels, &cfg).unwrap()));
        }

        #[test]
        fn order_independent(
            data in prop::collection::vec((prop::option::of(-5.0f64..5.0), any::<bool>()), 20..80),
        ) {
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let values: Vec<Option<f64>> = data.iter().map(|d| d.0).collect();
            let mut rev = data.clone();
            rev.reverse();
            let rv: Vec<Option<f64>> = rev.iter().map(|d| d.0).collect();
            let rl: Vec<bool> = rev.iter().map(|d| d.1).collect();
            let cfg = BinningConfig::default();
            prop_assert_eq!(fit_bins(&values, &labels, &cfg).unwrap(), fit_bins(&rv, &rl, &cfg).unwrap());
        }
    }
}
