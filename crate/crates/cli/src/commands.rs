use std::collections::BTreeSet;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::{json, Value};
use txkb::context::{
    assemble_context, predict_once, sample_shots, shot_lines, ContextStrategy, PromptContext, Shot, UserEvidence,
};
use txkb::essence::{compute_essences, default_essence_specs, essence_specs_from_toml, EssenceMatrix, EssenceSpec};
use txkb::eval::{run_eval, EvalSpec, ShotBudget};
use txkb::gateway::Gateway;
use txkb::ingest::{
    assign_test_split, attach_labels, generate_synthetic, histories_to_jsonl, parse_transactions,
    read_histories_jsonl, DatasetAdapter, InputFormat, PlantSpec, Split, UserHistory,
};
use txkb::instruct::{export_dataset, generate_triplets, GenerationMode};
use txkb::kb::{build_kb, facts_to_jsonl, instantiate_facts, load_kb, save_kb, KnowledgeBase, TargetData, TargetEntry, TargetSpec};
use txkb::pattern::SelectionStrategy;
use txkb::util::derive_seed;
use txkb::whitebox::Supports;

use crate::config::{
    check_gateway, check_input, check_output, open_gateway, overlay, read_input, read_sidecar, require, write_output,
    write_sidecar, RunConfig,
};
use crate::error::{CliError, ErrorKind, Result};
use crate::Command;

const DEFAULT_TEST_FRACTION: f64 = 0.25;

pub fn run(command: Command, mut cfg: RunConfig) -> Result<()> {
    match command {
        Command::Synth(a) => {
            overlay(&mut cfg.seed, a.seed);
            overlay(&mut cfg.test_fraction, a.test_fraction);
            overlay(&mut cfg.paths.out, a.out);
            cfg.dataset.get_or_insert_with(|| "synthetic".into());
            synth(&cfg, a.users, &a.plant)
        }
        Command::Ingest(a) => {
            overlay(&mut cfg.paths.data, a.data);
            overlay(&mut cfg.paths.adapter, a.adapter);
            overlay(&mut cfg.paths.labels, a.labels);
            overlay(&mut cfg.paths.out, a.out);
            overlay(&mut cfg.seed, a.seed);
            overlay(&mut cfg.test_fraction, a.test_fraction);
            overlay(&mut cfg.target, a.target_name);
            ingest(&cfg, a.format.as_deref(), a.target_description)
        }
        Command::Essences(a) => {
            overlay(&mut cfg.paths.histories, a.histories);
            overlay(&mut cfg.paths.essences, a.essences);
            overlay(&mut cfg.paths.out, a.out);
            essences(&cfg)
        }
        Command::BuildKb(a) => {
            overlay(&mut cfg.paths.histories, a.histories);
            overlay(&mut cfg.paths.target_spec, a.target_spec);
            overlay(&mut cfg.paths.essences, a.essences);
            overlay(&mut cfg.paths.out, a.out);
            overlay(&mut cfg.selection, a.selection);
            overlay(&mut cfg.seed, a.seed);
            overlay(&mut cfg.gateway, a.gateway);
            build(&cfg)
        }
        Command::Rules(a) => {
            overlay(&mut cfg.paths.kb, a.kb);
            overlay(&mut cfg.target, a.target);
            rules(&cfg, a.pattern.as_deref())
        }
        Command::Facts(a) => {
            overlay(&mut cfg.paths.kb, a.kb);
            overlay(&mut cfg.paths.histories, a.histories);
            overlay(&mut cfg.paths.out, a.out);
            facts(&cfg, a.user.as_deref())
        }
        Command::Retrieve(a) => {
            overlay(&mut cfg.paths.kb, a.kb);
            overlay(&mut cfg.paths.histories, a.histories);
            overlay(&mut cfg.strategy, a.strategy);
            overlay(&mut cfg.target, a.target);
            overlay(&mut cfg.shots, a.shots);
            overlay(&mut cfg.seed, a.seed);
            retrieve(&cfg, &a.user)
        }
        Command::Predict(a) => {
            overlay(&mut cfg.paths.kb, a.kb);
            overlay(&mut cfg.paths.histories, a.histories);
            overlay(&mut cfg.strategy, a.strategy);
            overlay(&mut cfg.target, a.target);
            overlay(&mut cfg.gateway, a.gateway);
            predict(&cfg, &a.user)
        }
        Command::GenInstruct(a) => {
            overlay(&mut cfg.paths.kb, a.kb);
            overlay(&mut cfg.paths.histories, a.histories);
            overlay(&mut cfg.paths.out, a.out);
            overlay(&mut cfg.target, a.target);
            overlay(&mut cfg.gateway, a.gateway);
            gen_instruct(&cfg, &a.mode)
        }
        Command::Eval(a) => {
            overlay(&mut cfg.paths.kb, a.kb);
            overlay(&mut cfg.paths.histories, a.histories);
            overlay(&mut cfg.paths.out, a.out);
            overlay(&mut cfg.target, a.target);
            overlay(&mut cfg.strategy, a.strategy);
            overlay(&mut cfg.shots, a.shots);
            overlay(&mut cfg.seed, a.seed);
            overlay(&mut cfg.gateway, a.gateway);
            overlay(&mut cfg.dataset, a.dataset);
            eval(&cfg)
        }
    }
}

fn path_or(slot: &Option<PathBuf>, default: &str) -> PathBuf {
    slot.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn test_fraction(cfg: &RunConfig) -> Result<f64> {
    let f = cfg.test_fraction.unwrap_or(DEFAULT_TEST_FRACTION);
    if (0.0..1.0).contains(&f) {
        Ok(f)
    } else {
        Err(CliError::config(format!("test_fraction {f} outside [0, 1)")))
    }
}

fn load_histories(path: &Path) -> Result<Vec<UserHistory>> {
    let file = std::fs::File::open(path).map_err(|e| CliError::new(ErrorKind::MissingFile, format!("{}: {e}", path.display())))?;
    Ok(read_histories_jsonl(BufReader::new(file))?)
}

fn load_essence_specs(cfg: &RunConfig) -> Result<Vec<EssenceSpec>> {
    match &cfg.paths.essences {
        Some(p) => Ok(essence_specs_from_toml(&read_input(p)?)?),
        None => Ok(default_essence_specs()),
    }
}

fn parse_strategy(cfg: &RunConfig) -> Result<ContextStrategy> {
    ContextStrategy::from_str(cfg.strategy.as_deref().unwrap_or("kb")).map_err(|e| CliError::config(e.to_string()))
}

fn parse_shots(cfg: &RunConfig) -> Result<ShotBudget> {
    ShotBudget::from_str(cfg.shots.as_deref().unwrap_or("0")).map_err(CliError::config)
}

/// `<target>:activity<=<days>:noise<share>`
fn parse_plant(s: &str) -> Result<PlantSpec> {
    let bad = || CliError::config(format!("invalid plant `{s}` (expected e.g. churn:activity<=70:noise0.1)"));
    let parts: Vec<&str> = s.split(':').collect();
    let [target, rule, noise] = parts.as_slice() else { return Err(bad()) };
    let days: u32 = rule.strip_prefix("activity<=").and_then(|d| d.parse().ok()).ok_or_else(bad)?;
    let noise: f64 = noise.strip_prefix("noise").and_then(|n| n.parse().ok()).ok_or_else(bad)?;
    let mut plan = PlantSpec::churn(days, noise);
    if *target != "churn" {
        if target.is_empty() {
            return Err(bad());
        }
        plan.target = target.to_string();
        plan.positive_label = target.to_string();
        plan.negative_label = format!("not_{target}");
    }
    plan.validate()?;
    Ok(plan)
}

fn synth(cfg: &RunConfig, users: usize, plant: &str) -> Result<()> {
    let out = path_or(&cfg.paths.out, "histories.jsonl");
    check_output(&out)?;
    let plan = parse_plant(plant)?;
    let fraction = test_fraction(cfg)?;
    let mut hs = generate_synthetic(users, cfg.seed(), &plan)?;
    assign_test_split(&mut hs, fraction, cfg.seed());
    let target = TargetSpec::for_plant(&plan);
    let test = hs.iter().filter(|h| h.split == Split::Test).count();
    let positive = hs.iter().filter(|h| h.label.as_deref() == Some(plan.positive_label.as_str())).count();
    let summary = json!({
        "dataset": cfg.dataset,
        "users": hs.len(),
        "test_users": test,
        "positive_share": positive as f64 / hs.len().max(1) as f64,
        "plant": plan,
        "target": target,
    });
    write_output(&out, histories_to_jsonl(&hs).as_bytes(), "synth", cfg, &[], summary)?;
    println!("synth: users={} test={} positive={} out={}", hs.len(), test, positive, out.display());
    Ok(())
}

fn ingest(cfg: &RunConfig, format: Option<&str>, description: Option<String>) -> Result<()> {
    let data = require(&cfg.paths.data, "paths.data")?.clone();
    let adapter_ref = require(&cfg.paths.adapter, "paths.adapter")?;
    let out = path_or(&cfg.paths.out, "histories.jsonl");
    check_input(&data)?;
    if let Some(l) = &cfg.paths.labels {
        check_input(l)?;
    }
    check_output(&out)?;
    let adapter = match DatasetAdapter::builtin(adapter_ref) {
        Some(a) => a,
        None => DatasetAdapter::from_toml(&read_input(Path::new(adapter_ref))?)?,
    };
    let format = match format {
        Some("csv") => InputFormat::Delimited,
        Some("jsonl") => InputFormat::JsonLines,
        Some(f) => return Err(CliError::config(format!("unknown format `{f}` (expected csv or jsonl)"))),
        None if data.extension().is_some_and(|e| e == "jsonl" || e == "json") => InputFormat::JsonLines,
        None => InputFormat::Delimited,
    };
    let fraction = test_fraction(cfg)?;
    let text = read_input(&data)?;
    let mut outcome = parse_transactions(&text, format, &adapter)?;
    if let Some(l) = &cfg.paths.labels {
        attach_labels(&mut outcome.histories, &read_input(l)?, &adapter)?;
    }
    assign_test_split(&mut outcome.histories, fraction, cfg.seed());
    let hs = &outcome.histories;

    let classes: BTreeSet<&str> = hs.iter().filter_map(|h| h.label.as_deref()).collect();
    let target = if classes.len() >= 2 {
        let classes: Vec<String> = classes.iter().map(|c| c.to_string()).collect();
        let name = cfg.target.clone().unwrap_or_else(|| adapter.name.clone());
        let positive = adapter
            .positive_label
            .clone()
            .filter(|p| classes.contains(p))
            .unwrap_or_else(|| classes.last().expect("two classes").clone());
        let spec = TargetSpec {
            id: name.clone(),
            description: description.unwrap_or_else(|| format!("Predict the client's {name} label from their transactions.")),
            name,
            classes,
            positive_class: positive,
        };
        spec.validate()?;
        Some(spec)
    } else {
        None
    };
    let summary = json!({
        "dataset": cfg.dataset.clone().unwrap_or_else(|| adapter.name.clone()),
        "users": hs.len(),
        "total_rows": outcome.total_rows,
        "malformed_rows": outcome.row_errors.len(),
        "row_errors": outcome.row_errors.iter().take(20).collect::<Vec<_>>(),
        "target": target,
    });
    write_output(&out, histories_to_jsonl(hs).as_bytes(), "ingest", cfg, &[&data], summary)?;
    println!(
        "ingest: users={} rows={} malformed={} labeled={} out={}",
        hs.len(),
        outcome.total_rows,
        outcome.row_errors.len(),
        hs.iter().filter(|h| h.label.is_some()).count(),
        out.display()
    );
    Ok(())
}

fn essences(cfg: &RunConfig) -> Result<()> {
    let hist = path_or(&cfg.paths.histories, "histories.jsonl");
    let out = path_or(&cfg.paths.out, "essences.csv");
    check_input(&hist)?;
    check_output(&out)?;
    let specs = load_essence_specs(cfg)?;
    let hs = load_histories(&hist)?;
    let m = EssenceMatrix::compute(&hs, &specs)?;
    write_output(&out, m.to_csv().as_bytes(), "essences", cfg, &[&hist], json!({"users": m.rows.len(), "essences": m.names}))?;
    println!("essences: users={} columns={} out={}", m.rows.len(), m.names.len(), out.display());
    Ok(())
}

fn target_spec_for(cfg: &RunConfig, hist: &Path) -> Result<TargetSpec> {
    if let Some(p) = &cfg.paths.target_spec {
        let text = read_input(p)?;
        let spec: TargetSpec = if p.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
        } else {
            toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {}", p.display(), e.message())))?
        };
        spec.validate()?;
        return Ok(spec);
    }
    let recorded = read_sidecar(hist).and_then(|m| m.pointer("/summary/target").cloned()).filter(|v| !v.is_null());
    match recorded {
        Some(v) => serde_json::from_value(v).map_err(|e| CliError::new(ErrorKind::Schema, format!("recorded target spec: {e}"))),
        None => Err(CliError::config("no target spec: pass --target-spec or use histories written by synth/ingest")),
    }
}

fn selection(cfg: &RunConfig) -> Result<SelectionStrategy> {
    let seed = cfg.seed();
    match cfg.selection.as_deref().unwrap_or("random") {
        "random" => Ok(SelectionStrategy::Random { seed }),
        "llm" | "llm-guided" | "llm_guided" => Ok(SelectionStrategy::LlmGuided { seed, template: None }),
        "without-white-box" | "without_white_box" | "wwb" => Ok(SelectionStrategy::WithoutWhiteBox { seed }),
        s => Err(CliError::config(format!("unknown selection `{s}` (expected random, llm or without-white-box)"))),
    }
}

fn build(cfg: &RunConfig) -> Result<()> {
    let hist = path_or(&cfg.paths.histories, "histories.jsonl");
    let out = path_or(&cfg.paths.out, "kb.json");
    check_input(&hist)?;
    check_output(&out)?;
    let strategy = selection(cfg)?;
    let gateway: Option<Box<dyn Gateway>> = match strategy {
        SelectionStrategy::LlmGuided { .. } => {
            check_gateway(cfg)?;
            Some(open_gateway(cfg)?)
        }
        _ => None,
    };
    let specs = load_essence_specs(cfg)?;
    let target = target_spec_for(cfg, &hist)?;
    let hs = load_histories(&hist)?;
    // the test split never touches the knowledge base
    let fit: Vec<UserHistory> = hs.into_iter().filter(|h| h.split != Split::Test).collect();
    let data = TargetData::from_histories(target, &fit, &[Split::Train]);
    if data.labels.is_empty() {
        return Err(CliError::new(ErrorKind::Data, "no labeled train users to fit the target"));
    }
    let mut kb = build_kb(&fit, &specs, &strategy, &[data], &cfg.kb_config, gateway.as_deref())?;
    kb.meta.run_config = Some(cfg.to_json());
    save_kb(&kb, &out)?;
    let tops: Vec<Value> = kb
        .targets
        .iter()
        .map(|t| json!({"target": t.spec.id, "top_rule": kb.target_rules(t).next().map(|r| r.rendered_text.clone())}))
        .collect();
    let summary = json!({
        "essences": kb.essences.len(),
        "patterns": kb.patterns.len(),
        "rules": kb.edges.len(),
        "fit_users": kb.meta.fit_users.len(),
        "targets": tops,
        "warnings": kb.meta.warnings,
    });
    write_sidecar(&out, "build-kb", cfg, &[&hist], summary)?;
    println!(
        "build-kb: essences={} patterns={} rules={} fit_users={} out={}",
        kb.essences.len(),
        kb.patterns.len(),
        kb.edges.len(),
        kb.meta.fit_users.len(),
        out.display()
    );
    for t in &kb.targets {
        if let Some(r) = kb.target_rules(t).next() {
            println!("top rule ({}): {}", t.spec.id, r.rendered_text);
        }
    }
    Ok(())
}

fn open_kb(cfg: &RunConfig) -> Result<KnowledgeBase> {
    let path = path_or(&cfg.paths.kb, "kb.json");
    check_input(&path)?;
    Ok(load_kb(&path)?)
}

fn pick_target<'a>(kb: &'a KnowledgeBase, cfg: &RunConfig) -> Result<&'a TargetEntry> {
    match &cfg.target {
        Some(t) => kb.target(t).ok_or_else(|| CliError::config(format!("target `{t}` is not in the knowledge base"))),
        None => kb.targets.first().ok_or_else(|| CliError::new(ErrorKind::Data, "knowledge base has no targets")),
    }
}

fn rules(cfg: &RunConfig, pattern: Option<&str>) -> Result<()> {
    let kb = open_kb(cfg)?;
    let target = match &cfg.target {
        Some(_) => Some(pick_target(&kb, cfg)?),
        None => None,
    };
    if let Some(p) = pattern {
        if kb.pattern(p).is_none() {
            return Err(CliError::config(format!("pattern `{p}` is not in the knowledge base")));
        }
    }
    let signals: Vec<String> = target.map(|t| t.models.iter().map(|m| m.signal.clone()).collect()).unwrap_or_default();
    for r in &kb.edges {
        let keep = match (&r.supports, target, pattern) {
            (Supports::Target(s), Some(_), None) => signals.contains(s),
            (Supports::Pattern(p), None, Some(want)) => p == want,
            (_, None, None) => true,
            _ => false,
        };
        if keep {
            println!("[{}] {}", r.id, r.rendered_text);
        }
    }
    Ok(())
}

fn facts(cfg: &RunConfig, user: Option<&str>) -> Result<()> {
    let hist = path_or(&cfg.paths.histories, "histories.jsonl");
    check_input(&hist)?;
    if let Some(out) = &cfg.paths.out {
        check_output(out)?;
    }
    let kb = open_kb(cfg)?;
    let hs = load_histories(&hist)?;
    let chosen: Vec<&UserHistory> = match user {
        Some(u) => vec![find_user(&hs, u)?],
        None => hs.iter().collect(),
    };
    let mut text = String::new();
    let mut n = 0;
    for h in chosen {
        let ev = compute_essences(h, &kb.essences)?;
        let fs = instantiate_facts(&kb, &ev)?;
        n += fs.len();
        text.push_str(&facts_to_jsonl(&fs));
    }
    match &cfg.paths.out {
        Some(out) => {
            write_output(out, text.as_bytes(), "facts", cfg, &[&hist], json!({"facts": n}))?;
            println!("facts: {n} facts out={}", out.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn find_user<'a>(hs: &'a [UserHistory], user: &str) -> Result<&'a UserHistory> {
    hs.iter().find(|h| h.user_id == user).ok_or_else(|| CliError::new(ErrorKind::Data, format!("user `{user}` not found")))
}

/// Builds the prompt context for one user; never calls a model.
fn user_context(cfg: &RunConfig, kb: &KnowledgeBase, hs: &[UserHistory], user: &str) -> Result<PromptContext> {
    let entry = pick_target(kb, cfg)?;
    let strategy = parse_strategy(cfg)?;
    let n_shots = match parse_shots(cfg)? {
        ShotBudget::Count(n) => n,
        ShotBudget::Full => return Err(CliError::config("shots=full is only meaningful for eval")),
    };
    let h = find_user(hs, user)?;
    let ev = compute_essences(h, &kb.essences)?;
    let fs = instantiate_facts(kb, &ev)?;
    let pool: Vec<&UserHistory> =
        hs.iter().filter(|p| p.split == Split::Train && p.label.is_some() && p.user_id != user).collect();
    if n_shots > pool.len() {
        return Err(CliError::new(ErrorKind::Data, format!("{n_shots} shots requested but the pool has {}", pool.len())));
    }
    let labels: Vec<String> = pool.iter().map(|p| p.label.clone().expect("filtered")).collect();
    let picks = sample_shots(&labels, &entry.spec.classes, n_shots, derive_seed(cfg.seed(), &format!("retrieve/{n_shots}")));
    let mut shots = Vec::new();
    for i in picks {
        let p = pool[i];
        let pev = compute_essences(p, &kb.essences)?;
        let pfs = instantiate_facts(kb, &pev)?;
        let evidence = UserEvidence { user_id: &p.user_id, facts: &pfs, history: Some(p), essences: Some(&pev) };
        shots.push(Shot {
            user_id: p.user_id.clone(),
            lines: shot_lines(kb, &entry.spec, strategy, &evidence, &cfg.context),
            label: p.label.clone().expect("filtered"),
        });
    }
    let evidence = UserEvidence { user_id: &h.user_id, facts: &fs, history: Some(h), essences: Some(&ev) };
    Ok(assemble_context(kb, &entry.spec, &evidence, strategy, shots, Vec::new(), &cfg.context)?)
}

fn retrieve(cfg: &RunConfig, user: &str) -> Result<()> {
    let hist = path_or(&cfg.paths.histories, "histories.jsonl");
    check_input(&hist)?;
    let kb = open_kb(cfg)?;
    let hs = load_histories(&hist)?;
    let ctx = user_context(cfg, &kb, &hs, user)?;
    print!("{}", ctx.rendered);
    Ok(())
}

fn predict(cfg: &RunConfig, user: &str) -> Result<()> {
    let hist = path_or(&cfg.paths.histories, "histories.jsonl");
    check_input(&hist)?;
    check_gateway(cfg)?;
    let kb = open_kb(cfg)?;
    let hs = load_histories(&hist)?;
    let ctx = user_context(cfg, &kb, &hs, user)?;
    let gateway = open_gateway(cfg)?;
    let r = predict_once(gateway.as_ref(), &ctx)?;
    let out = json!({
        "user_id": user,
        "label": r.label,
        "rationale": r.rationale,
        "evidence": r.evidence,
        "flags": r.flags,
    });
    println!("{out}");
    Ok(())
}

fn gen_instruct(cfg: &RunConfig, mode: &str) -> Result<()> {
    let hist = path_or(&cfg.paths.histories, "histories.jsonl");
    let out = path_or(&cfg.paths.out, "triplets.jsonl");
    check_input(&hist)?;
    check_output(&out)?;
    let llm = match mode {
        "template" => false,
        "llm" => {
            check_gateway(cfg)?;
            true
        }
        m => return Err(CliError::config(format!("unknown mode `{m}` (expected template or llm)"))),
    };
    let kb = open_kb(cfg)?;
    let entry = pick_target(&kb, cfg)?;
    let hs = load_histories(&hist)?;
    // tuning data comes from the train split only
    let users: Vec<UserHistory> = hs.into_iter().filter(|h| h.split == Split::Train && h.label.is_some()).collect();
    let gateway = if llm { Some(open_gateway(cfg)?) } else { None };
    let gen_mode = match &gateway {
        Some(g) => GenerationMode::Llm(g.as_ref()),
        None => GenerationMode::Template,
    };
    let report = generate_triplets(&kb, &users, &entry.spec.id, gen_mode, &cfg.context)?;
    export_dataset(&report.triplets, &out)?;
    let summary = json!({
        "mode": mode,
        "triplets": report.triplets.len(),
        "regenerated": report.regenerated,
        "dropped": report.dropped.len(),
        "drops": report.dropped,
    });
    write_sidecar(&out, "gen-instruct", cfg, &[&hist], summary)?;
    println!(
        "gen-instruct: triplets={} regenerated={} dropped={} out={}",
        report.triplets.len(),
        report.regenerated,
        report.dropped.len(),
        out.display()
    );
    Ok(())
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let hist = path_or(&cfg.paths.histories, "histories.jsonl");
    check_input(&hist)?;
    if let Some(out) = &cfg.paths.out {
        check_output(out)?;
    }
    let shots = parse_shots(cfg)?;
    if shots != ShotBudget::Full {
        check_gateway(cfg)?;
    }
    let strategy = parse_strategy(cfg)?;
    let kb = open_kb(cfg)?;
    let entry = pick_target(&kb, cfg)?;
    let hs = load_histories(&hist)?;
    let dataset = cfg
        .dataset
        .clone()
        .or_else(|| read_sidecar(&hist).and_then(|m| m.pointer("/summary/dataset").and_then(|v| v.as_str().map(String::from))))
        .unwrap_or_else(|| "dataset".into());
    let spec = EvalSpec {
        dataset,
        target: entry.spec.id.clone(),
        strategy,
        shots,
        seed: cfg.seed(),
        context: cfg.context.clone(),
    };
    let gateway: Box<dyn Gateway> = match shots {
        ShotBudget::Full => Box::new(txkb::gateway::MockGateway::scripted(Vec::<String>::new())),
        _ => open_gateway(cfg)?,
    };
    let report = run_eval(&kb, &hs, &spec, gateway.as_ref())?;
    if let Some(out) = &cfg.paths.out {
        let kb_path = path_or(&cfg.paths.kb, "kb.json");
        write_output(out, report.to_json().as_bytes(), "eval", cfg, &[&hist, &kb_path], json!({"summary": report.summary_line()}))?;
    }
    println!("{}", report.summary_line());
    Ok(())
}
