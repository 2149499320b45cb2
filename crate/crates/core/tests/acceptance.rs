//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Run with `cargo test -p txkb --test acceptance`.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use txkb::context::{assemble_context, ContextConfig, ContextError, ContextStrategy, Shot, UserEvidence, MAX_FACTS, MAX_SHOTS};
use txkb::essence::{compute_essences, default_essence_specs, EssenceVector};
use txkb::eval::{f1, mcc, run_eval, score, ConfusionCounts, EvalError, EvalSpec, RunReport, ShotBudget};
use txkb::gateway::{rule_id_tokens, MockGateway, PredictedLabel};
use txkb::ingest::{assign_test_split, generate_synthetic, PlantSpec, Split, UserHistory};
use txkb::instruct::{generate_triplets, GenerationMode};
use txkb::kb::{build_kb, instantiate_facts, load_kb, save_kb, KbConfig, KnowledgeBase, TargetData, TargetSpec};
use txkb::pattern::SelectionStrategy;
use txkb::whitebox::{BinningConfig, FeatureWoE, Grade, Polarity, Supports};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_secs: f64, what: &str) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_secs, || format!("{what} took {:.2}s, limit {limit_secs}s", elapsed.as_secs_f64()))
}

const PLANT_SEED: u64 = 7;
const TEST_FRACTION: f64 = 0.25;

fn plant() -> PlantSpec {
    PlantSpec::churn(70, 0.1)
}

/// Planted histories with a held-out test split, and a KB fitted on the rest.
fn planted_split(seed: u64, strategy: SelectionStrategy) -> (Vec<UserHistory>, KnowledgeBase) {
    let mut hs = generate_synthetic(2000, seed, &plant()).unwrap();
    assign_test_split(&mut hs, TEST_FRACTION, seed);
    let fit: Vec<UserHistory> = hs.iter().filter(|h| h.split != Split::Test).cloned().collect();
    let t = TargetData::from_histories(TargetSpec::for_plant(&plant()), &fit, &[Split::Train]);
    let kb = build_kb(&fit, &default_essence_specs(), &strategy, &[t], &KbConfig::default(), None).unwrap();
    (hs, kb)
}

fn eval_spec(strategy: ContextStrategy) -> EvalSpec {
    EvalSpec {
        dataset: "synthetic".into(),
        target: "churn".into(),
        strategy,
        shots: ShotBudget::Count(0),
        seed: PLANT_SEED,
        context: ContextConfig::default(),
    }
}

// 1 ---------------------------------------------------------------------

fn oracle_woe(e: f64, n: f64, total_e: f64, total_n: f64, bins: f64) -> (f64, f64, f64) {
    let pe = (e + 0.5) / (total_e + 0.5 * bins);
    let pn = (n + 0.5) / (total_n + 0.5 * bins);
    (pe, pn, (pe / pn).ln())
}

fn in_bin(lower: Option<f64>, upper: Option<f64>, missing_bin: bool, v: Option<f64>) -> bool {
    match v {
        None => missing_bin,
        Some(x) => {
            !missing_bin && lower.map(|l| x > l).unwrap_or(true) && upper.map(|u| x <= u).unwrap_or(true)
        }
    }
}

fn woe_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut bins_checked, mut worst) = (0usize, 0.0f64);
    for d in 0..100 {
        let n = rng.random_range(20..=200);
        let features = rng.random_range(1..=4);
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        for f in 0..features {
            let missing_rate = [0.0, 0.1, 0.3][rng.random_range(0..3)];
            let discrete = rng.random_bool(0.3);
            let values: Vec<Option<f64>> = labels
                .iter()
                .map(|&l| {
                    if rng.random_bool(missing_rate) {
                        None
                    } else if discrete {
                        Some(rng.random_range(0..6) as f64)
                    } else {
                        Some(rng.random::<f64>() * 100.0 + if l { 15.0 } else { 0.0 })
                    }
                })
                .collect();
            let cfg = BinningConfig { min_samples: 10, ..Default::default() };
            let fw = FeatureWoE::fit(&format!("f{f}"), &values, &labels, &cfg).map_err(|e| format!("dataset {d}: {e}"))?;
            let total_e = labels.iter().filter(|&&l| l).count() as f64;
            let total_n = n as f64 - total_e;
            let k = fw.bins.len() as f64;
            let mut iv = 0.0;
            for b in &fw.bins {
                let (mut e, mut ne) = (0.0, 0.0);
                for (v, &l) in values.iter().zip(&labels) {
                    if in_bin(b.lower, b.upper, b.is_missing_bin, *v) {
                        if l {
                            e += 1.0
                        } else {
                            ne += 1.0
                        }
                    }
                }
                let (pe, pn, woe) = oracle_woe(e, ne, total_e, total_n, k);
                iv += (pe - pn) * woe;
                worst = worst.max((woe - b.woe).abs());
                ensure((woe - b.woe).abs() <= 1e-9, || format!("dataset {d} f{f}: woe {} vs oracle {woe}", b.woe))?;
                bins_checked += 1;
            }
            worst = worst.max((iv - fw.iv).abs());
            ensure((iv - fw.iv).abs() <= 1e-9, || format!("dataset {d} f{f}: iv {} vs oracle {iv}", fw.iv))?;
        }
    }
    within(start.elapsed(), 10.0, "100 datasets")?;
    Ok(format!("{bins_checked} bins, max |diff| {worst:.1e}, {:.2}s", start.elapsed().as_secs_f64()))
}

// 2 ---------------------------------------------------------------------

/// The activity threshold where target rules switch from churn to
/// counter-churn, with the grade of the rule just below it.
fn learned_threshold(kb: &KnowledgeBase) -> Option<(f64, Grade)> {
    let rules: Vec<_> = kb
        .edges
        .iter()
        .filter(|r| r.feature == "activity_period_days" && !r.condition.missing)
        .filter(|r| matches!(&r.supports, Supports::Target(s) if s == "churn"))
        .collect();
    rules.windows(2).find_map(|w| {
        (w[0].polarity == Polarity::Toward && w[1].polarity == Polarity::Away).then(|| (w[0].condition.upper.unwrap(), w[0].grade))
    })
}

fn planted_recovery() -> Outcome {
    let mut hits = 0;
    let mut report = Vec::new();
    let mut slowest = 0.0f64;
    for seed in 1..=10u64 {
        let start = Instant::now();
        let hs = generate_synthetic(2000, seed, &plant()).unwrap();
        let t = TargetData::from_histories(TargetSpec::for_plant(&plant()), &hs, &[Split::Train]);
        let kb = build_kb(&hs, &default_essence_specs(), &SelectionStrategy::Random { seed }, &[t], &KbConfig::default(), None)
            .unwrap();
        let found = learned_threshold(&kb);
        let elapsed = start.elapsed();
        slowest = slowest.max(elapsed.as_secs_f64());
        within(elapsed, 5.0, &format!("seed {seed}"))?;
        match found {
            Some((u, g)) if (65.0..=75.0).contains(&u) && g == Grade::Strong => {
                hits += 1;
                report.push(format!("{u}"));
            }
            Some((u, g)) => report.push(format!("{u}({g})!")),
            None => report.push("none!".into()),
        }
    }
    let detail = format!("{hits}/10 seeds in [65, 75] strong; thresholds {}; slowest seed {slowest:.2}s", report.join(" "));
    ensure(hits >= 9, || detail.clone())?;
    Ok(detail)
}

// 3 ---------------------------------------------------------------------

fn oracle_mcc(hs: &[UserHistory]) -> f64 {
    let pairs: Vec<(String, PredictedLabel)> = hs
        .iter()
        .filter(|h| h.split == Split::Test)
        .map(|h| {
            let span = h.transactions.last().map_or(0, |t| t.ts) as f64 / 86_400.0;
            let guess = if plant().predicate(span) { "churn" } else { "retain" };
            (h.label.clone().unwrap(), PredictedLabel::Class(guess.into()))
        })
        .collect();
    score(&pairs, &["churn".into(), "retain".into()], "churn").mcc
}

fn directional_ablation() -> Outcome {
    let start = Instant::now();
    let (hs, kb) = planted_split(PLANT_SEED, SelectionStrategy::Random { seed: PLANT_SEED });
    let (_, wwb) = planted_split(PLANT_SEED, SelectionStrategy::WithoutWhiteBox { seed: PLANT_SEED });
    let gw = MockGateway::policy();
    let kb_run = run_eval(&kb, &hs, &eval_spec(ContextStrategy::KbViaWb), &gw).unwrap();
    let zs_run = run_eval(&kb, &hs, &eval_spec(ContextStrategy::Zs), &gw).unwrap();
    let wwb_run = run_eval(&wwb, &hs, &eval_spec(ContextStrategy::KbViaWb), &gw).unwrap();
    let (k, z, w) = (kb_run.metrics.mcc, zs_run.metrics.mcc, wwb_run.metrics.mcc);
    let detail = format!(
        "KBviaWB {k:.4} (>= 0.8), ZS {z:.4} (|.| <= 0.1), WithoutWhiteBox {w:.4} (<= 0.1); planted rule itself scores {:.4} on this test split; {:.2}s",
        oracle_mcc(&hs),
        start.elapsed().as_secs_f64()
    );
    within(start.elapsed(), 60.0, "ablation")?;
    ensure(k >= 0.8 && z.abs() <= 0.1 && w <= 0.1, || detail.clone())?;
    Ok(detail)
}

// 4 ---------------------------------------------------------------------

fn kb_pool() -> Vec<(KnowledgeBase, Vec<UserHistory>)> {
    let mut pool = Vec::new();
    for seed in 0..6u64 {
        let hs = generate_synthetic(150, 100 + seed, &plant()).unwrap();
        let mut spec = TargetSpec::for_plant(&plant());
        let mut labels: HashMap<String, String> = hs.iter().map(|h| (h.user_id.clone(), h.label.clone().unwrap())).collect();
        if seed % 3 == 2 {
            // three-class variant keyed on transaction count
            spec = TargetSpec {
                id: "volume".into(),
                name: "volume".into(),
                description: "How busy is the account: low, mid or high volume?".into(),
                classes: vec!["low".into(), "mid".into(), "high".into()],
                positive_class: "high".into(),
            };
            labels = hs
                .iter()
                .map(|h| {
                    let c = match h.transactions.len() {
                        0..=30 => "low",
                        31..=60 => "mid",
                        _ => "high",
                    };
                    (h.user_id.clone(), c.to_string())
                })
                .collect();
        }
        let mut cfg = KbConfig::default();
        if seed % 2 == 0 {
            // every essence keeps its rules, so users fire more than 20 facts
            cfg.min_iv = 0.0;
            cfg.scorecard.wald_z = 0.0;
        }
        let strategy = if seed == 5 { SelectionStrategy::WithoutWhiteBox { seed } } else { SelectionStrategy::Random { seed } };
        let kb = build_kb(&hs, &default_essence_specs(), &strategy, &[TargetData { spec, labels }], &cfg, None).unwrap();
        pool.push((kb, hs));
    }
    pool
}

fn context_caps() -> Outcome {
    let start = Instant::now();
    let pool = kb_pool();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut max_facts_seen, mut capped, mut rejected) = (0usize, 0usize, 0usize);
    for draw in 0..10_000 {
        let (kb, hs) = &pool[rng.random_range(0..pool.len())];
        let target = &kb.targets[0].spec;
        let h = &hs[rng.random_range(0..hs.len())];
        let mut ev = compute_essences(h, &kb.essences).unwrap();
        if rng.random_bool(0.5) {
            // perturbed essence values, some missing
            let values: IndexMap<String, Option<f64>> = ev
                .values
                .keys()
                .map(|k| (k.clone(), (!rng.random_bool(0.15)).then(|| rng.random::<f64>() * 200.0)))
                .collect();
            ev = EssenceVector { user_id: ev.user_id.clone(), values };
        }
        let facts = instantiate_facts(kb, &ev).unwrap();
        let strategy = ContextStrategy::ALL[rng.random_range(0..ContextStrategy::ALL.len())];
        let n_shots = rng.random_range(0..=MAX_SHOTS + 4);
        let shots: Vec<Shot> = (0..n_shots)
            .map(|i| Shot {
                user_id: format!("s{i}"),
                lines: vec![format!("- shot line {}", rng.random_range(0..100))],
                label: target.classes[rng.random_range(0..target.classes.len())].clone(),
            })
            .collect();
        let cfg = ContextConfig { max_facts: rng.random_range(0..=40), ..Default::default() };
        let user = UserEvidence { user_id: &h.user_id, facts: &facts, history: Some(h), essences: Some(&ev) };
        let a = assemble_context(kb, target, &user, strategy, shots.clone(), Vec::new(), &cfg);
        let b = assemble_context(kb, target, &user, strategy, shots, Vec::new(), &cfg);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                ensure(a.rendered == b.rendered, || format!("draw {draw}: rendering differs between identical calls"))?;
                ensure(a.facts.len() <= MAX_FACTS && a.facts.len() <= cfg.max_facts, || {
                    format!("draw {draw}: {} facts with max_facts {}", a.facts.len(), cfg.max_facts)
                })?;
                ensure(a.shots.len() <= MAX_SHOTS, || format!("draw {draw}: {} shots", a.shots.len()))?;
                let listed = a.rendered.lines().filter(|l| l.starts_with("- [")).count();
                ensure(listed == a.facts.len(), || format!("draw {draw}: {listed} fact lines rendered, {} facts", a.facts.len()))?;
                ensure(a.facts.windows(2).all(|w| w[0].rank_cmp(&w[1]).is_lt()), || format!("draw {draw}: facts not strictly ordered"))?;
                max_facts_seen = max_facts_seen.max(a.facts.len());
                if a.facts.len() == MAX_FACTS {
                    capped += 1;
                }
            }
            (Err(ContextError::TooManyShots(n)), Err(_)) if n > MAX_SHOTS => rejected += 1,
            (a, _) => return Err(format!("draw {draw}: unexpected {:?}", a.err())),
        }
    }
    ensure(capped > 0, || "no draw reached the fact cap".into())?;
    Ok(format!(
        "10000 draws; max facts {max_facts_seen}, {capped} contexts at the 20-fact cap, {rejected} over-budget shot sets rejected; {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

// 5 ---------------------------------------------------------------------

fn metric_fidelity() -> Outcome {
    let c = |tp, fp, fn_, tn| ConfusionCounts { tp, fp, fn_, tn };
    ensure(mcc(&c(5, 0, 0, 5)) == 1.0, || "perfect MCC".into())?;
    ensure(mcc(&c(0, 5, 5, 0)) == -1.0, || "inverted MCC".into())?;
    ensure(mcc(&c(3, 1, 2, 4)) == 10.0 / 600f64.sqrt(), || format!("worked example gives {}", mcc(&c(3, 1, 2, 4))))?;
    ensure(f1(&c(3, 1, 2, 0)) == 6.0 / 9.0, || "F1 worked example".into())?;
    ensure(f1(&c(5, 0, 0, 5)) == 1.0 && f1(&c(0, 0, 0, 5)) == 0.0, || "F1 trivial cases".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let m = c(rng.random_range(0..500), rng.random_range(0..500), rng.random_range(0..500), rng.random_range(0..500));
        let (tp, fp, fn_, tn) = (m.tp as i128, m.fp as i128, m.fn_ as i128, m.tn as i128);
        let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        let want_mcc = if den == 0 { 0.0 } else { (tp * tn - fp * fn_) as f64 / (den as f64).sqrt() };
        let f1_den = 2 * tp + fp + fn_;
        let want_f1 = if f1_den == 0 { 0.0 } else { (2 * tp) as f64 / f1_den as f64 };
        let d = (mcc(&m) - want_mcc).abs().max((f1(&m) - want_f1).abs());
        worst = worst.max(d);
        ensure(d <= 1e-12, || format!("matrix {i} {m:?}: diff {d:e}"))?;
    }
    Ok(format!("3 MCC and 2 F1 worked examples exact; 1000 random matrices, max |diff| {worst:.1e}"))
}

// 6 ---------------------------------------------------------------------

fn rule_rendering() -> Outcome {
    let (_, kb) = planted_split(PLANT_SEED, SelectionStrategy::Random { seed: PLANT_SEED });
    let target = kb.target("churn").ok_or("no churn target")?;
    let top = kb.target_rules(target).next().ok_or("no target rules")?;
    let re = Regex::new(r"^IF activity_period_days <= \d+(\.\d+)? -> strong churn signal$").unwrap();
    ensure(re.is_match(&top.rendered_text), || format!("top rule `{}`", top.rendered_text))?;
    ensure(top.render() == top.rendered_text, || "rendered text does not regenerate".into())?;
    Ok(format!("top rule `{}`", top.rendered_text))
}

// 7 ---------------------------------------------------------------------

fn instruction_groundedness() -> Outcome {
    let (hs, kb) = planted_split(PLANT_SEED, SelectionStrategy::Random { seed: PLANT_SEED });
    let train: Vec<UserHistory> = hs.iter().filter(|h| h.split == Split::Train).cloned().collect();
    let report = generate_triplets(&kb, &train, "churn", GenerationMode::Template, &ContextConfig::default()).map_err(|e| e.to_string())?;
    let n = report.triplets.len();
    ensure(n >= 500, || format!("only {n} triplets"))?;
    let gold: HashMap<&str, &str> = train.iter().map(|h| (h.user_id.as_str(), h.label.as_deref().unwrap())).collect();
    let mut cited = 0;
    for t in &report.triplets {
        let g = gold[t.meta.user_id.as_str()];
        ensure(t.response.ends_with(&format!("ANSWER: {g}")), || format!("{}: response does not end with gold", t.meta.user_id))?;
        for id in rule_id_tokens(&t.response) {
            ensure(t.context.contains(&format!("[{id}]")) && t.meta.rule_ids.contains(&id), || {
                format!("{}: cites {id} outside its context", t.meta.user_id)
            })?;
            cited += 1;
        }
    }
    // adversarial LLM outputs: the first user cites a foreign id twice
    let churners: Vec<UserHistory> = train.iter().filter(|h| h.label.as_deref() == Some("churn")).take(3).cloned().collect();
    let gw = MockGateway::scripted([
        "Rule [r9999] applies.\nANSWER: churn",
        "Rule [r9999] still applies.\nANSWER: churn",
        "Looks stable.\nANSWER: retain",
        "Short span.\nANSWER: churn",
        "Short span.\nANSWER: churn",
    ]);
    let llm = generate_triplets(&kb, &churners, "churn", GenerationMode::Llm(&gw), &ContextConfig::default()).map_err(|e| e.to_string())?;
    ensure(llm.dropped.len() == 1 && llm.dropped[0].user_id == churners[0].user_id, || format!("drops {:?}", llm.dropped))?;
    ensure(llm.regenerated == 1 && llm.triplets.len() == 2, || format!("regenerated {} kept {}", llm.regenerated, llm.triplets.len()))?;
    Ok(format!(
        "{n} template triplets, all end with gold, {cited} citations all resolve; LLM mode dropped 1 foreign-id triplet (counted), regenerated 1"
    ))
}

// 8 ---------------------------------------------------------------------

fn pipeline_once() -> (KnowledgeBase, RunReport) {
    let (hs, kb) = planted_split(PLANT_SEED, SelectionStrategy::Random { seed: PLANT_SEED });
    let report = run_eval(&kb, &hs, &eval_spec(ContextStrategy::KbViaWb), &MockGateway::policy()).unwrap();
    (kb, report)
}

fn determinism() -> Outcome {
    let (kb1, r1) = pipeline_once();
    let (kb2, r2) = pipeline_once();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("kb.json");
    save_kb(&kb1, &path).map_err(|e| e.to_string())?;
    let loaded = load_kb(&path).map_err(|e| e.to_string())?;
    ensure(loaded == kb1, || "save -> load changed the knowledge base".into())?;
    ensure(loaded.to_json() == kb1.to_json(), || "reloaded KB serializes differently".into())?;
    ensure(kb1.to_json() == kb2.to_json(), || "rebuilt KB is not byte-identical".into())?;
    ensure(r1.metrics == r2.metrics && r1 == r2, || "rerun changed the run report".into())?;
    Ok(format!("KB round-trip equal, rebuild byte-identical ({} bytes), rerun metrics identical (mcc {:.4})", kb1.to_json().len(), r1.metrics.mcc))
}

// 9 ---------------------------------------------------------------------

fn anti_leakage() -> Outcome {
    let (hs, kb) = planted_split(3, SelectionStrategy::Random { seed: 3 });
    let mut cases = 0;

    // a KB-fitting user evaluated as a test user
    let mut leaked = hs.clone();
    let i = leaked.iter().position(|h| h.split == Split::Train).unwrap();
    leaked[i].split = Split::Test;
    let gw = MockGateway::scripted(Vec::<String>::new());
    let err = run_eval(&kb, &leaked, &eval_spec(ContextStrategy::KbViaWb), &gw);
    ensure(matches!(err, Err(EvalError::Leakage(_))) && gw.calls() == 0, || "fit/test overlap not rejected".into())?;
    cases += 1;

    // the same user in the shot pool and the test split
    let mut dup = hs.clone();
    let mut copy = hs.iter().find(|h| h.split == Split::Test).unwrap().clone();
    copy.split = Split::Train;
    dup.push(copy);
    for shots in [0, 4] {
        let spec = EvalSpec { shots: ShotBudget::Count(shots), ..eval_spec(ContextStrategy::KbViaWb) };
        let gw = MockGateway::scripted(Vec::<String>::new());
        let err = run_eval(&kb, &dup, &spec, &gw);
        ensure(matches!(err, Err(EvalError::Leakage(_))) && gw.calls() == 0, || format!("shot/test overlap with {shots} shots not rejected"))?;
        cases += 1;
    }
    Ok(format!("{cases} overlapping-id cases rejected before any gateway call"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("WoE/IV oracle equivalence", woe_oracle),
        ("planted-rule recovery", planted_recovery),
        ("directional ablation", directional_ablation),
        ("context caps and deterministic ordering", context_caps),
        ("metric fidelity", metric_fidelity),
        ("rule rendering fidelity", rule_rendering),
        ("instruction groundedness", instruction_groundedness),
        ("determinism and persistence", determinism),
        ("anti-leakage", anti_leakage),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!("criterion 10: not run (optional live-endpoint integration, see README)");
    if failed > 0 {
        println!("{failed} of 9 criteria failed");
        std::process::exit(1);
    }
}
