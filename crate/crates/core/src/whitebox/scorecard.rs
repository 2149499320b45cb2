use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::binning::{BinningConfig, FeatureWoE};
use super::WhiteboxError;
use crate::util::json_hash;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorecardConfig {
    pub binning: BinningConfig,
    /// L2 penalty on feature weights (the intercept is not penalized).
    pub l2: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// Below this many rows the logistic layer is skipped.
    pub few_shot_rows: usize,
    /// Backward elimination after the logistic fit: features with a
    /// non-positive weight or a Wald |z| below this are dropped one at a
    /// time and the model refit. 0 keeps every selected feature.
    pub wald_z: f64,
}

impl Default for ScorecardConfig {
    fn default() -> Self {
        ScorecardConfig { binning: BinningConfig::default(), l2: 1.0, max_iter: 100, tol: 1e-8, few_shot_rows: 50, wald_z: 1.96 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    Logistic,
    NaiveWoeSum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub n: usize,
    pub events: usize,
    /// Share of rows in the positive class.
    pub prior: f64,
    pub config_hash: String,
    pub method: FitMethod,
    #[serde(default)]
    pub warnings: Vec<String>,
    /// Features removed by backward elimination, in removal order.
    #[serde(default)]
    pub dropped: Vec<String>,
}

/// Logistic layer over WoE-transformed features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scorecard {
    pub features: Vec<FeatureWoE>,
    pub intercept: f64,
    pub weights: IndexMap<String, f64>,
    pub meta: TrainingMeta,
}

#[derive(Debug, Clone, Copy)]
pub struct FeatureColumn<'a> {
    pub name: &'a str,
    pub values: &'a [Option<f64>],
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Scorecard {
    pub fn feature(&self, name: &str) -> Option<&FeatureWoE> {
        self.features.iter().find(|f| f.feature == name)
    }

    /// Linear predictor `intercept + Σ w_f · woe_f`.
    pub fn logit(&self, value_of: impl Fn(&str) -> Option<f64>) -> f64 {
        self.intercept
            + self
                .features
                .iter()
                .map(|f| self.weights[&f.feature] * f.woe_for(value_of(&f.feature)))
                .sum::<f64>()
    }

    /// Probability of the positive class.
    pub fn score(&self, value_of: impl Fn(&str) -> Option<f64>) -> f64 {
        sigmoid(self.logit(value_of))
    }

    /// Features ordered by Information Value, highest first (name breaks ties).
    pub fn by_iv(&self) -> Vec<&FeatureWoE> {
        let mut v: Vec<&FeatureWoE> = self.features.iter().collect();
        v.sort_by(|a, b| b.iv.total_cmp(&a.iv).then_with(|| a.feature.cmp(&b.feature)));
        v
    }
}

/// Bins each selected feature, WoE-transforms the rows and fits an L2
/// logistic regression by iteratively reweighted least squares. With fewer
/// than `few_shot_rows` rows, or when IRLS does not converge, the model
/// falls back to the naive WoE sum: intercept = ln(prior odds), weights 1.
pub fn fit_scorecard(
    columns: &[FeatureColumn<'_>],
    labels: &[bool],
    selected: &[String],
    cfg: &ScorecardConfig,
) -> Result<Scorecard, WhiteboxError> {
    let n = labels.len();
    let events = labels.iter().filter(|&&l| l).count();
    if events == 0 || events == n {
        return Err(WhiteboxError::DegenerateTarget);
    }
    let mut features = Vec::with_capacity(selected.len());
    let mut transformed: Vec<Vec<f64>> = Vec::with_capacity(selected.len());
    for name in selected {
        let col = columns
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| WhiteboxError::UnknownFeature(name.clone()))?;
        let fw = FeatureWoE::fit(name, col.values, labels, &cfg.binning)?;
        transformed.push(col.values.iter().map(|v| fw.woe_for(*v)).collect());
        features.push(fw);
    }

    let prior_logit = (events as f64 / (n - events) as f64).ln();
    let mut dropped = Vec::new();
    let (intercept, weights, method, warnings) = if n < cfg.few_shot_rows {
        (prior_logit, features.iter().map(|f| (f.feature.clone(), 1.0)).collect(), FitMethod::NaiveWoeSum, Vec::new())
    } else {
        loop {
            let Some(fit) = irls(&transformed, labels, cfg) else {
                log::warn!("scorecard IRLS did not converge in {} iterations; using naive WoE sum", cfg.max_iter);
                let weights = features.iter().map(|f| (f.feature.clone(), 1.0)).collect();
                let warning = format!("IRLS did not converge in {} iterations; naive WoE sum used", cfg.max_iter);
                break (prior_logit, weights, FitMethod::NaiveWoeSum, vec![warning]);
            };
            match weakest(&fit, cfg.wald_z) {
                Some(j) if features.len() > 1 => {
                    dropped.push(features.remove(j).feature);
                    transformed.remove(j);
                }
                _ => {
                    let weights =
                        features.iter().zip(fit.beta.iter().skip(1)).map(|(f, &w)| (f.feature.clone(), w)).collect();
                    break (fit.beta[0], weights, FitMethod::Logistic, Vec::new());
                }
            }
        }
    };
    Ok(Scorecard {
        features,
        intercept,
        weights,
        meta: TrainingMeta {
            n,
            events,
            prior: events as f64 / n as f64,
            config_hash: json_hash(&(cfg, selected)),
            method,
            warnings,
            dropped,
        },
    })
}

struct Fit {
    beta: Vec<f64>,
    /// Standard errors from the inverse penalized Hessian.
    se: Vec<f64>,
}

/// Index (into the feature list, intercept excluded) of the feature to drop
/// next: the most negative weight if any is non-positive, otherwise the
/// smallest Wald |z| below `min_z`.
fn weakest(fit: &Fit, min_z: f64) -> Option<usize> {
    if min_z <= 0.0 {
        return None;
    }
    let coefs = || fit.beta.iter().zip(&fit.se).skip(1).enumerate();
    let non_positive = coefs().filter(|(_, (&b, _))| b <= 0.0).min_by(|a, b| a.1 .0.total_cmp(b.1 .0)).map(|(j, _)| j);
    non_positive.or_else(|| {
        coefs()
            .map(|(j, (&b, &se))| (j, b / se))
            .filter(|&(_, z)| z < min_z)
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(j, _)| j)
    })
}

fn irls(columns: &[Vec<f64>], labels: &[bool], cfg: &ScorecardConfig) -> Option<Fit> {
    let n = labels.len();
    let p = columns.len() + 1;
    let x = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { columns[j - 1][i] });
    let y = DVector::from_iterator(n, labels.iter().map(|&l| if l { 1.0 } else { 0.0 }));
    let mut penalty = DMatrix::identity(p, p) * cfg.l2;
    penalty[(0, 0)] = 0.0;
    let mut beta = DVector::zeros(p);
    for _ in 0..cfg.max_iter {
        let eta = &x * &beta;
        let mu = eta.map(sigmoid);
        let w = mu.map(|m| (m * (1.0 - m)).max(1e-12));
        let grad = x.transpose() * (&y - &mu) - &penalty * &beta;
        let xw = DMatrix::from_fn(n, p, |i, j| x[(i, j)] * w[i]);
        let hess = x.transpose() * xw + &penalty;
        let chol = hess.cholesky()?;
        let step = chol.solve(&grad);
        beta += &step;
        if !beta.iter().all(|b| b.is_finite()) {
            return None;
        }
        if step.amax() < cfg.tol {
            let cov = chol.inverse();
            let se = (0..p).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
            return Some(Fit { beta: beta.iter().copied().collect(), se });
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    type Columns = Vec<(String, Vec<Option<f64>>)>;

    fn planted() -> (Columns, Vec<bool>) {
        use crate::essence::{default_essence_specs, EssenceMatrix};
        use crate::ingest::{generate_synthetic, PlantSpec};
        let hs = generate_synthetic(2000, 7, &PlantSpec::churn(70, 0.1)).unwrap();
        let m = EssenceMatrix::compute(&hs, &default_essence_specs()).unwrap();
        let cols = m.names.iter().map(|n| (n.clone(), m.column(n))).collect();
        let labels = hs.iter().map(|h| h.label.as_deref() == Some("churn")).collect();
        (cols, labels)
    }

    fn view(cols: &[(String, Vec<Option<f64>>)]) -> Vec<FeatureColumn<'_>> {
        cols.iter().map(|(n, v)| FeatureColumn { name: n, values: v }).collect()
    }

    #[test]
    fn planted_feature_has_top_iv() {
        let (cols, labels) = planted();
        let names: Vec<String> = cols.iter().map(|c| c.0.clone()).collect();
        let sc = fit_scorecard(&view(&cols), &labels, &names, &ScorecardConfig::default()).unwrap();
        assert_eq!(sc.meta.method, FitMethod::Logistic);
        // brute-force IV of each feature from its own bins, direct formula
        let mut best = (f64::MIN, String::new());
        for f in &sc.features {
            let e: f64 = f.bins.iter().map(|b| b.event_count as f64).sum();
            let n: f64 = f.bins.iter().map(|b| b.nonevent_count as f64).sum();
            let k = f.bins.len() as f64;
            let iv: f64 = f
                .bins
                .iter()
                .map(|b| {
                    let pe = (b.event_count as f64 + 0.5) / (e + 0.5 * k);
                    let pn = (b.nonevent_count as f64 + 0.5) / (n + 0.5 * k);
                    (pe - pn) * (pe / pn).ln()
                })
                .sum();
            assert!((iv - f.iv).abs() < 1e-9);
            if iv > best.0 {
                best = (iv, f.feature.clone());
            }
        }
        assert_eq!(best.1, "activity_period_days");
        assert_eq!(sc.by_iv()[0].feature, "activity_period_days");
        let churner = sc.score(|f| (f == "activity_period_days").then_some(30.0));
        let stayer = sc.score(|f| (f == "activity_period_days").then_some(120.0));
        assert!(churner > stayer);
    }

    #[test]
    fn elimination_drops_noise() {
        use rand::{Rng, SeedableRng};
        let (mut cols, labels) = planted();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let noise: Vec<Option<f64>> = labels.iter().map(|_| Some(rng.random::<f64>())).collect();
        cols.push(("noise".to_string(), noise));
        let names = vec!["activity_period_days".to_string(), "noise".to_string()];
        let cfg = ScorecardConfig {
            binning: BinningConfig { merge_alpha: 0.0, merge_woe_delta: 0.0, ..Default::default() },
            ..Default::default()
        };
        let sc = fit_scorecard(&view(&cols), &labels, &names, &cfg).unwrap();
        assert_eq!(sc.meta.dropped, vec!["noise".to_string()]);
        assert_eq!(sc.weights.keys().collect::<Vec<_>>(), vec!["activity_period_days"]);
        assert!(sc.weights["activity_period_days"] > 0.0);

        let keep = fit_scorecard(&view(&cols), &labels, &names, &ScorecardConfig { wald_z: 0.0, ..cfg }).unwrap();
        assert!(keep.meta.dropped.is_empty());
        assert_eq!(keep.features.len(), 2);
    }

    #[test]
    fn few_shot_uses_naive_sum() {
        let (cols, labels) = planted();
        let small: Vec<(String, Vec<Option<f64>>)> = cols.iter().map(|(n, v)| (n.clone(), v[..16].to_vec())).collect();
        let cfg = ScorecardConfig {
            binning: BinningConfig { min_samples: 10, ..Default::default() },
            ..Default::default()
        };
        let names = vec!["activity_period_days".to_string(), "txn_count".to_string()];
        let sc = fit_scorecard(&view(&small), &labels[..16], &names, &cfg).unwrap();
        assert_eq!(sc.meta.method, FitMethod::NaiveWoeSum);
        assert!(sc.weights.values().all(|&w| w == 1.0));
        let e = labels[..16].iter().filter(|&&l| l).count() as f64;
        assert!((sc.intercept - (e / (16.0 - e)).ln()).abs() < 1e-12);
    }

    #[test]
    fn label_flip_negates_woe_and_prior() {
        let (cols, labels) = planted();
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let names = vec!["activity_period_days".to_string(), "mcc_entropy".to_string()];
        let cfg = ScorecardConfig { few_shot_rows: usize::MAX, ..Default::default() };
        let a = fit_scorecard(&view(&cols), &labels, &names, &cfg).unwrap();
        let b = fit_scorecard(&view(&cols), &flipped, &names, &cfg).unwrap();
        assert!((a.intercept + b.intercept).abs() < 1e-12);
        for (fa, fb) in a.features.iter().zip(&b.features) {
            assert_eq!(fa.bins.len(), fb.bins.len());
            for (ba, bb) in fa.bins.iter().zip(&fb.bins) {
                assert!((ba.woe + bb.woe).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_convergence_falls_back() {
        let (cols, labels) = planted();
        let cfg = ScorecardConfig { max_iter: 1, ..Default::default() };
        let names = vec!["activity_period_days".to_string()];
        let sc = fit_scorecard(&view(&cols), &labels, &names, &cfg).unwrap();
        assert_eq!(sc.meta.method, FitMethod::NaiveWoeSum);
        assert_eq!(sc.meta.warnings.len(), 1);
    }

    #[test]
    fn degenerate_and_unknown_rejected() {
        let (cols, labels) = planted();
        let names = vec!["activity_period_days".to_string()];
        let all = vec![true; labels.len()];
        assert!(matches!(
            fit_scorecard(&view(&cols), &all, &names, &ScorecardConfig::default()),
            Err(WhiteboxError::DegenerateTarget)
        ));
        assert!(matches!(
            fit_scorecard(&view(&cols), &labels, &["nope".to_string()], &ScorecardConfig::default()),
            Err(WhiteboxError::UnknownFeature(_))
        ));
    }

    #[test]
    fn deterministic_fit() {
        let (cols, labels) = planted();
        let names: Vec<String> = cols.iter().map(|c| c.0.clone()).collect();
        let a = fit_scorecard(&view(&cols), &labels, &names, &ScorecardConfig::default()).unwrap();
        let b = fit_scorecard(&view(&cols), &labels, &names, &ScorecardConfig::default()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}
