//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails. Randomized inputs use fixed seeds.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use opentools::agents::{MemoryEntry, PolicyConfig, PolicyKind, RunStatus};
use opentools::community::{Decision, SubmissionContent};
use opentools::llm::{BackendRegistry, ScriptEntry};
use opentools::reliability::{
    accepted, cases_path, load_all_cases, load_profiles, run_round, suite_version, RoundError,
};
use opentools::runtime::{
    ApiBinding, EnvVars, InvokeContext, RawOutput, RetryPolicy, ToolBinding, ToolRegistry,
};
use opentools::schema::{validate_manifest_value, ParamType, ToolDescriptor};
use opentools::seed;
use opentools::store::{to_pretty, Batch, MemStorage, Store};
use opentools::stub::{StubRoute, StubServer};
use opentools::trace::{
    attribute_failures, deserialize_jsonl, serialize_jsonl, EventKind, FailureCounts,
};
use opentools::verification::{check_text, run_suite, CaseStatus, Expectation, TestCase, Verdict};
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestCaseError, TestRunner};
use rand::rngs::StdRng;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use serde_json::{json, Map, Value};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Box<dyn FnOnce() -> Outcome>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn args(v: Value) -> Map<String, Value> {
    v.as_object().cloned().expect("object")
}

fn program_manifest(name: &str) -> ToolDescriptor {
    validate_manifest_value(&json!({
        "name": name,
        "version": "1.0.0",
        "description": "Test probe that echoes behaviour chosen by its tag.",
        "category": "program",
        "arguments": [{"name": "tag", "type": "string", "required": true, "description": "Case tag"}],
        "output": {"kind": "text", "description": "Probe output"},
    }))
    .expect("probe manifest is valid")
}

fn register_program(
    registry: &ToolRegistry,
    name: &str,
    f: impl Fn(&Map<String, Value>) -> Result<RawOutput, String> + Send + Sync + 'static,
) {
    registry.add_function(name, Arc::new(f));
    registry
        .register(program_manifest(name), ToolBinding::program(name))
        .expect("probe registers");
}

fn tag(a: &Map<String, Value>) -> String {
    a.get("tag")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string()
}

fn probe_case(tool: &str, id: &str, tag_value: &str) -> TestCase {
    TestCase::new(
        id,
        tool,
        args(json!({"tag": tag_value})),
        Expectation::Exact {
            expected: "ok".into(),
        },
    )
}

fn mem_store() -> Store {
    Store::open(Arc::new(MemStorage::new())).expect("store opens")
}

fn write_cases(store: &Store, tool: &str, cases: &[TestCase]) {
    let mut batch = Batch::new();
    batch.write(cases_path(tool), to_pretty(&cases));
    store.commit(&batch).expect("cases written");
}

// ---------------------------------------------------------------------------
// Verifier oracle

/// Trailing-whitespace strip written without `trim_end`.
fn rstrip(s: &str) -> &str {
    let mut end = s.len();
    while let Some(c) = s[..end].chars().next_back() {
        if !c.is_whitespace() {
            break;
        }
        end -= c.len_utf8();
    }
    &s[..end]
}

fn oracle_exact(expected: &str, output: &str) -> bool {
    let (a, b): (Vec<char>, Vec<char>) = (
        rstrip(expected).chars().collect(),
        rstrip(output).chars().collect(),
    );
    a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x == y)
}

fn oracle_numeric(expected: f64, abs: Option<f64>, rel: Option<f64>, output: &str) -> bool {
    let Ok(got) = output.trim().parse::<f64>() else {
        return false;
    };
    let diff = if got > expected {
        got - expected
    } else {
        expected - got
    };
    let mag = if expected < 0.0 { -expected } else { expected };
    abs.is_some_and(|t| diff <= t) || rel.is_some_and(|t| diff <= t * mag)
}

#[derive(Clone, Copy)]
enum Atom {
    Lit(char),
    Any,
    Class(&'static [char]),
}

#[derive(Clone, Copy, PartialEq)]
enum Quant {
    One,
    Opt,
    Star,
    Plus,
}

impl Atom {
    fn matches(self, c: char) -> bool {
        match self {
            Atom::Lit(l) => l == c,
            Atom::Any => c != '\n',
            Atom::Class(set) => set.contains(&c),
        }
    }

    fn render(self) -> String {
        match self {
            Atom::Lit(l) => l.to_string(),
            Atom::Any => ".".into(),
            Atom::Class(set) => format!("[{}]", set.iter().collect::<String>()),
        }
    }
}

/// Backtracking full-match over a sequence of quantified atoms.
fn brute_match(atoms: &[(Atom, Quant)], s: &[char]) -> bool {
    let Some(&(atom, q)) = atoms.first() else {
        return s.is_empty();
    };
    let rest = &atoms[1..];
    let head = !s.is_empty() && atom.matches(s[0]);
    match q {
        Quant::One => head && brute_match(rest, &s[1..]),
        Quant::Opt => brute_match(rest, s) || (head && brute_match(rest, &s[1..])),
        Quant::Star => brute_match(rest, s) || (head && brute_match(atoms, &s[1..])),
        Quant::Plus => {
            let mut as_star = atoms.to_vec();
            as_star[0].1 = Quant::Star;
            head && brute_match(&as_star, &s[1..])
        }
    }
}

fn random_string(rng: &mut StdRng, alphabet: &[char], max_len: usize) -> String {
    let n = rng.random_range(0..=max_len);
    (0..n).map(|_| *alphabet.choose(rng).unwrap()).collect()
}

fn verifier_oracle() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x5EED_0001);
    let started = Instant::now();
    let mut counts = BTreeMap::<&str, (usize, usize)>::new();
    const WS: [&str; 5] = ["", " ", "\n", "\t ", "  \n"];
    for i in 0..1000 {
        let (expectation, output, want) = match i % 3 {
            0 => {
                let expected = random_string(&mut rng, &['a', 'b', 'Z', '1', ' ', 'é'], 6);
                let base = match rng.random_range(0..4) {
                    0 | 1 => expected.clone(),
                    2 => random_string(&mut rng, &['a', 'b', 'Z', '1', ' ', 'é'], 6),
                    _ => format!(" {expected}"),
                };
                let output = format!("{base}{}", WS.choose(&mut rng).unwrap());
                let expected_padded = format!("{expected}{}", WS.choose(&mut rng).unwrap());
                let want = oracle_exact(&expected_padded, &output);
                (
                    Expectation::Exact {
                        expected: expected_padded,
                    },
                    output,
                    want,
                )
            }
            1 => {
                let expected = rng.random_range(-1000.0..1000.0_f64);
                let abs: Option<f64> = rng.random_bool(0.6).then(|| rng.random_range(0.0..1.0));
                let rel: Option<f64> = rng.random_bool(0.5).then(|| rng.random_range(0.0..0.01));
                let scale = abs
                    .unwrap_or(0.0)
                    .max(rel.unwrap_or(0.0) * expected.abs())
                    .max(1e-9);
                let factor = *[0.0, 0.5, 0.999, 1.001, 2.0, 50.0]
                    .choose(&mut rng)
                    .unwrap();
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let got = expected + sign * factor * scale;
                let output = match rng.random_range(0..10) {
                    0 => "not a number".to_string(),
                    1 => String::new(),
                    2 => format!("  {got}\n"),
                    _ => format!("{got}"),
                };
                let want = oracle_numeric(expected, abs, rel, &output);
                (
                    Expectation::NumericTolerance {
                        expected,
                        abs_tol: abs,
                        rel_tol: rel,
                    },
                    output,
                    want,
                )
            }
            _ => {
                const AB: &[char] = &['a', 'b'];
                const BC: &[char] = &['b', 'c'];
                let n = rng.random_range(1..=4);
                let atoms: Vec<(Atom, Quant)> = (0..n)
                    .map(|_| {
                        let atom = match rng.random_range(0..4) {
                            0 => Atom::Any,
                            1 => Atom::Class(if rng.random_bool(0.5) { AB } else { BC }),
                            _ => Atom::Lit(*['a', 'b', 'c'].choose(&mut rng).unwrap()),
                        };
                        let q = *[Quant::One, Quant::One, Quant::Opt, Quant::Star, Quant::Plus]
                            .choose(&mut rng)
                            .unwrap();
                        (atom, q)
                    })
                    .collect();
                let suffix = |q: Quant| match q {
                    Quant::One => "",
                    Quant::Opt => "?",
                    Quant::Star => "*",
                    Quant::Plus => "+",
                };
                let mut pattern: String =
                    atoms.iter().map(|(a, q)| a.render() + suffix(*q)).collect();
                let invalid = rng.random_range(0..50) == 0;
                if invalid {
                    pattern.push('(');
                }
                let output = random_string(&mut rng, &['a', 'b', 'c', 'd'], 6);
                let chars: Vec<char> = output.chars().collect();
                let want = !invalid && brute_match(&atoms, &chars);
                (Expectation::Pattern { pattern }, output, want)
            }
        };
        let got = check_text(&expectation, &output).passed;
        if got != want {
            return Err(format!(
                "disagreement on {expectation:?} vs {output:?}: checker {got}, oracle {want}"
            ));
        }
        let c = counts.entry(expectation.kind()).or_default();
        c.0 += 1;
        c.1 += usize::from(want);
    }
    for (kind, (n, passed)) in &counts {
        ensure(*passed > 0 && passed < n, || {
            format!("{kind}: {passed}/{n} passing, both verdicts needed")
        })?;
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(5), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "1000/1000 agree (kind: total, passing) {counts:?} in {elapsed:.2?}"
    ))
}

// ---------------------------------------------------------------------------
// Suite accounting

fn accounting_registry() -> ToolRegistry {
    let registry = ToolRegistry::new();
    register_program(&registry, "probe", |a| match tag(a).as_str() {
        "pass" => Ok(RawOutput::Text("ok".into())),
        "fail" => Ok(RawOutput::Text("nope".into())),
        _ => Err("probe failure".into()),
    });
    registry
}

fn tagged_suite(tags: &[&str]) -> Vec<TestCase> {
    tags.iter()
        .enumerate()
        .map(|(i, t)| probe_case("probe", &format!("c{i}"), t))
        .collect()
}

fn seed_program_cases() -> Vec<TestCase> {
    let registry = seed::registry();
    let mut all = Vec::new();
    for name in seed::tool_names() {
        if registry.descriptor(name).unwrap().category.as_str() != "program" {
            continue;
        }
        let mut cases: Vec<TestCase> = serde_json::from_str(seed::tests(name).unwrap()).unwrap();
        for c in &mut cases {
            c.tool_name = name.to_string();
        }
        all.extend(cases);
    }
    all
}

fn suite_accounting() -> Outcome {
    let registry = accounting_registry();
    let ctx = InvokeContext::default();

    let mut fixed = vec!["pass"; 7];
    fixed.push("fail");
    fixed.extend(["error"; 2]);
    let s = run_suite(&registry, &ctx, &tagged_suite(&fixed), 4).summary;
    ensure((s.n_pass, s.n_fail, s.n_error) == (7, 1, 2), || {
        format!("7/1/2 counted as {s:?}")
    })?;
    ensure(
        s.accuracy.is_some_and(|a| (a - 0.875).abs() < 1e-12),
        || format!("accuracy {:?}", s.accuracy),
    )?;
    ensure(
        s.availability.is_some_and(|a| (a - 0.8).abs() < 1e-12),
        || format!("availability {:?}", s.availability),
    )?;

    let mut rng = StdRng::seed_from_u64(0x5EED_0002);
    for round in 0..100 {
        let n = rng.random_range(1..=40);
        let tags: Vec<&str> = (0..n)
            .map(|_| *["pass", "fail", "error"].choose(&mut rng).unwrap())
            .collect();
        let suite = tagged_suite(&tags);
        let one = run_suite(&registry, &ctx, &suite, 1);
        let eight = run_suite(&registry, &ctx, &suite, 8);
        let s = &one.summary;
        let (p, f, e) = ["pass", "fail", "error"]
            .map(|t| tags.iter().filter(|x| **x == t).count())
            .into();
        ensure((s.n_pass, s.n_fail, s.n_error) == (p, f, e), || {
            format!("suite {round}: {s:?} vs {p}/{f}/{e}")
        })?;
        ensure(s.n_pass + s.n_fail + s.n_error == n, || {
            format!("suite {round}: totals")
        })?;
        let acc = (p + f > 0).then(|| p as f64 / (p + f) as f64);
        ensure(s.accuracy == acc, || {
            format!("suite {round}: accuracy {:?} vs {acc:?}", s.accuracy)
        })?;
        ensure(s.availability == Some((p + f) as f64 / n as f64), || {
            format!("suite {round}: availability")
        })?;
        ensure(one.summary == eight.summary, || {
            format!("suite {round}: parallelism changed the summary")
        })?;
    }

    let seed_registry = seed::registry();
    let cases = seed_program_cases();
    let verdicts = |p| -> Vec<(String, Verdict)> {
        run_suite(&seed_registry, &ctx, &cases, p)
            .results
            .into_iter()
            .map(|r| (r.case_id, r.verdict))
            .collect()
    };
    let (one, eight) = (verdicts(1), verdicts(8));
    ensure(one == eight, || {
        "seed program suites differ between parallelism 1 and 8".into()
    })?;
    Ok(format!("7/1/2 -> 0.875/0.8; 100 random suites consistent; {} seed program cases identical at p=1,8", cases.len()))
}

// ---------------------------------------------------------------------------
// Regression drift

fn drift_run(
    n_cases: usize,
    flips: usize,
) -> Result<Vec<opentools::reliability::RegressionEvent>, String> {
    let broken = Arc::new(AtomicUsize::new(0));
    let registry = ToolRegistry::new();
    let b = broken.clone();
    register_program(&registry, "drifting", move |a| {
        let i: usize = tag(a).parse().unwrap();
        Ok(RawOutput::Text(
            if i < b.load(Ordering::SeqCst) {
                "drifted"
            } else {
                "ok"
            }
            .into(),
        ))
    });
    let store = mem_store();
    let cases: Vec<TestCase> = (0..n_cases)
        .map(|i| probe_case("drifting", &format!("d{i}"), &i.to_string()))
        .collect();
    write_cases(&store, "drifting", &cases);
    let ctx = InvokeContext::default();
    let first = run_round(&registry, &ctx, &store, 4, 0.1).map_err(|e| e.to_string())?;
    ensure(
        first.round.per_tool["drifting"].accuracy == Some(1.0),
        || "first round not at 1.0".into(),
    )?;
    broken.store(flips, Ordering::SeqCst);
    run_round(&registry, &ctx, &store, 4, 0.1).map_err(|e| e.to_string())?;
    let events: Vec<_> = load_profiles(&store)
        .map_err(|e| e.to_string())?
        .into_values()
        .flat_map(|p| p.regressions)
        .collect();
    Ok(events)
}

fn regression_drift() -> Outcome {
    let events = drift_run(50, 20)?;
    ensure(events.len() == 1, || {
        format!("expected one event, got {events:?}")
    })?;
    let drop = events[0].accuracy_drop;
    ensure((drop - 0.4).abs() <= 0.05, || format!("drop {drop}"))?;
    ensure((events[0].from_round, events[0].to_round) == (1, 2), || {
        format!("{:?}", events[0])
    })?;
    let small = drift_run(40, 2)?;
    ensure(small.is_empty(), || format!("0.05 drop raised {small:?}"))?;
    Ok(format!(
        "1.0->0.6 over 50 cases: 1 event, drop {drop:.3}; 0.05 drop: 0 events"
    ))
}

// ---------------------------------------------------------------------------
// Community lifecycle

#[derive(Debug, Clone)]
enum Op {
    Submit,
    Review { pick: usize, accept: bool },
    Round,
}

fn op_strategy() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => Just(Op::Submit),
        3 => (any::<usize>(), any::<bool>()).prop_map(|(pick, accept)| Op::Review { pick, accept }),
        2 => Just(Op::Round),
    ]
}

fn accepted_ids(store: &Store) -> BTreeSet<String> {
    load_all_cases(store)
        .unwrap()
        .values()
        .flat_map(|cases| accepted(cases).map(|c| c.id.clone()).collect::<Vec<_>>())
        .collect()
}

fn current_suite_version(store: &Store) -> String {
    let all = load_all_cases(store).unwrap();
    suite_version(all.values().flat_map(|cases| accepted(cases)))
}

fn lifecycle_sequence(ops: Vec<Op>) -> Result<(), TestCaseError> {
    let executed = Arc::new(Mutex::new(Vec::<String>::new()));
    let registry = ToolRegistry::new();
    let log = executed.clone();
    register_program(&registry, "counter", move |a| {
        log.lock().unwrap().push(tag(a));
        Ok(RawOutput::Text("ok".into()))
    });
    let store = mem_store();
    let ctx = InvokeContext::default();

    let mut model: Vec<(String, String, CaseStatus)> = Vec::new();
    let mut version = current_suite_version(&store);
    let mut last_round: Option<(BTreeSet<String>, String)> = None;
    for (step, op) in ops.into_iter().enumerate() {
        let before = accepted_ids(&store);
        match op {
            Op::Submit => {
                let case_id = format!("case-{step}");
                let sub = opentools::community::submit(
                    &store,
                    &registry,
                    SubmissionContent::TestCase(probe_case("counter", &case_id, &case_id)),
                    "alice",
                )
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
                model.push((sub.id, case_id, CaseStatus::Pending));
            }
            Op::Review { pick, accept } => {
                if model.is_empty() {
                    continue;
                }
                let i = pick % model.len();
                let decision = if accept {
                    Decision::Accept
                } else {
                    Decision::Reject
                };
                let result = opentools::community::review(
                    &store,
                    &registry,
                    &model[i].0,
                    decision,
                    "rev",
                    "r",
                );
                if model[i].2 == CaseStatus::Pending {
                    result.map_err(|e| TestCaseError::fail(e.to_string()))?;
                    model[i].2 = if accept {
                        CaseStatus::Accepted
                    } else {
                        CaseStatus::Rejected
                    };
                } else {
                    prop_assert!(result.is_err(), "second review of {} succeeded", model[i].0);
                }
            }
            Op::Round => {
                executed.lock().unwrap().clear();
                let expected: BTreeSet<String> = model
                    .iter()
                    .filter(|m| m.2 == CaseStatus::Accepted)
                    .map(|m| m.1.clone())
                    .collect();
                match run_round(&registry, &ctx, &store, 2, 0.1) {
                    Err(RoundError::NoCases) => prop_assert!(expected.is_empty()),
                    Err(e) => return Err(TestCaseError::fail(e.to_string())),
                    Ok(outcome) => {
                        let mut ran = executed.lock().unwrap().clone();
                        ran.sort();
                        prop_assert_eq!(ran, expected.iter().cloned().collect::<Vec<_>>());
                        if let Some((prev_set, prev_version)) = &last_round {
                            prop_assert_eq!(
                                *prev_set == expected,
                                *prev_version == outcome.round.suite_version
                            );
                        }
                        last_round = Some((expected, outcome.round.suite_version));
                    }
                }
            }
        }
        let after = accepted_ids(&store);
        let model_accepted: BTreeSet<String> = model
            .iter()
            .filter(|m| m.2 == CaseStatus::Accepted)
            .map(|m| m.1.clone())
            .collect();
        prop_assert_eq!(&after, &model_accepted);
        let new_version = current_suite_version(&store);
        prop_assert_eq!(before != after, version != new_version);
        version = new_version;
    }
    Ok(())
}

fn community_lifecycle() -> Outcome {
    let config = ProptestConfig {
        cases: 128,
        failure_persistence: None,
        ..ProptestConfig::default()
    };
    let mut runner = TestRunner::new_with_rng(
        config,
        proptest::test_runner::TestRng::deterministic_rng(
            proptest::test_runner::RngAlgorithm::ChaCha,
        ),
    );
    runner
        .run(
            &proptest::collection::vec(op_strategy(), 1..30),
            lifecycle_sequence,
        )
        .map_err(|e| e.to_string())?;
    Ok("128 random interleavings: only accepted cases executed; suite_version tracks the accepted set".into())
}

// ---------------------------------------------------------------------------
// Agent episodes

const TOOLBOX: &[&str] = &["calculator", "unit_converter"];

fn react_fixture() -> Result<(), String> {
    let registry = seed::registry();
    let (run, trace, _) = common::episode(
        &registry,
        common::script("react_168.json"),
        &PolicyConfig::new(PolicyKind::React),
        "What is 24 times 7?",
        &["calculator"],
    );
    ensure(run.answer == "168", || format!("answer {:?}", run.answer))?;
    ensure(run.status == RunStatus::Completed, || {
        format!("status {:?}", run.status)
    })?;
    ensure(trace.count(EventKind::ToolInvocation) == 1, || {
        "invocation count".into()
    })?;
    ensure(trace.failures().count() == 0, || {
        "failure events present".into()
    })
}

fn multi_memory(rng: &mut StdRng) -> Result<(), String> {
    let n = rng.random_range(1..=6);
    let subs: Vec<String> = (0..n).map(|i| format!("part {i}")).collect();
    let mut entries = vec![ScriptEntry::text(json!({"sub_problems": subs}).to_string())];
    let mut expected = Vec::new();
    for index in 0..n {
        let mut attempt = 0;
        loop {
            attempt += 1;
            let force_text = attempt == 4;
            let verdict = rng.random_bool(0.5);
            let verdict_entry =
                ScriptEntry::text(json!({"verified": verdict, "reason": "scripted"}).to_string());
            if force_text || rng.random_bool(0.3) {
                let text = format!("answer {index}.{attempt}");
                entries.push(ScriptEntry::text(text.clone()));
                entries.push(verdict_entry);
                if verdict {
                    expected.push(MemoryEntry {
                        sub_problem: index,
                        tool_name: None,
                        result: text,
                        verified: true,
                    });
                }
                break;
            }
            let (a, b) = (rng.random_range(2..50), rng.random_range(2..50));
            entries.push(ScriptEntry::call(
                "calculator",
                json!({"expression": format!("{a}*{b}")}),
            ));
            entries.push(verdict_entry);
            if verdict {
                expected.push(MemoryEntry {
                    sub_problem: index,
                    tool_name: Some("calculator".into()),
                    result: (a * b).to_string(),
                    verified: true,
                });
                break;
            }
        }
    }
    entries.push(ScriptEntry::text("FINAL ANSWER: composed"));
    let registry = seed::registry();
    let (run, trace, backend) = common::episode(
        &registry,
        entries,
        &PolicyConfig::new(PolicyKind::MultiAgent),
        "q",
        TOOLBOX,
    );
    ensure(backend.remaining() == 0, || {
        format!("{} scripted replies unused", backend.remaining())
    })?;
    let memory = run.memory.clone().unwrap_or_default();
    ensure(memory == expected, || {
        format!("memory {memory:?}\nexpected {expected:?}")
    })?;
    ensure(
        trace.count(EventKind::MemoryWrite) == expected.len(),
        || "memory_write count".into(),
    )
}

fn random_entry(rng: &mut StdRng) -> ScriptEntry {
    match rng.random_range(0..13) {
        0 => ScriptEntry::text("FINAL ANSWER: 42"),
        1 => ScriptEntry::text("thinking out loud"),
        2 => ScriptEntry::call("calculator", json!({"expression": "6*7"})),
        3 => ScriptEntry::call("calculator", json!({"expression": 6})),
        4 => ScriptEntry::call("ghost_tool", json!({})),
        5 => ScriptEntry::text(r#"{"sub_goal": "compute", "tool": "calculator"}"#),
        6 => ScriptEntry::text(r#"{"decision": "continue"}"#),
        7 => ScriptEntry::text(r#"{"decision": "stop"}"#),
        8 => ScriptEntry::text(r#"{"sub_problems": ["a", "b", "c", "d", "e", "f", "g", "h"]}"#),
        9 => ScriptEntry::text(r#"{"verified": true}"#),
        10 => ScriptEntry::text(r#"{"verified": false}"#),
        11 => ScriptEntry::text(r#"{"expression": "1+1"}"#),
        _ => ScriptEntry {
            error: Some("connection reset".into()),
            ..Default::default()
        },
    }
}

fn phase_steps(trace: &opentools::trace::ExecutionTrace, phase: &str) -> Vec<Value> {
    trace
        .events
        .iter()
        .filter(|e| {
            e.kind == EventKind::PolicyStep
                && e.payload.phase.as_deref() == Some(phase)
                && e.attribution.is_none()
        })
        .map(|e| e.payload.detail.clone().unwrap_or(Value::Null))
        .collect()
}

fn budget_soak(rng: &mut StdRng) -> Result<(), String> {
    let registry = seed::registry();
    for episode in 0..200 {
        let kind = *PolicyKind::ALL.choose(rng).unwrap();
        let max_steps = rng.random_range(1..=6);
        let sub_steps = rng.random_range(1..=4);
        let mut config = PolicyConfig::new(kind).with_max_steps(max_steps);
        config.sub_problem_steps = Some(sub_steps);
        let len = rng.random_range(0..=20);
        let entries: Vec<ScriptEntry> = (0..len).map(|_| random_entry(rng)).collect();
        let (run, trace, _) = common::episode(&registry, entries, &config, "q", TOOLBOX);
        let max = max_steps as usize;
        let used = match kind {
            PolicyKind::PromptingZeroShot | PolicyKind::PromptingCot => {
                phase_steps(&trace, "answer").len()
            }
            PolicyKind::React => phase_steps(&trace, "react").len(),
            PolicyKind::PlannerExecutor => phase_steps(&trace, "planner").len(),
            PolicyKind::MultiAgent => {
                let generator = phase_steps(&trace, "generator");
                let mut per: BTreeMap<u64, usize> = BTreeMap::new();
                for d in &generator {
                    *per.entry(d["sub_problem"].as_u64().unwrap()).or_default() += 1;
                }
                if let Some((sp, n)) = per.iter().find(|(_, n)| **n > sub_steps as usize) {
                    return Err(format!(
                        "episode {episode}: sub-problem {sp} used {n} > {sub_steps} steps"
                    ));
                }
                per.len()
            }
        };
        let limit = if kind.uses_tools() { max } else { 1 };
        ensure(used <= limit, || {
            format!("episode {episode} ({kind:?}): {used} steps > {limit}")
        })?;
        ensure(trace.finalized, || {
            format!("episode {episode}: trace not finalized")
        })?;
        let _ = run;
    }
    Ok(())
}

fn agent_episodes() -> Outcome {
    react_fixture()?;
    let mut rng = StdRng::seed_from_u64(0x5EED_0005);
    for i in 0..100 {
        multi_memory(&mut rng).map_err(|e| format!("multi script {i}: {e}"))?;
    }
    budget_soak(&mut rng)?;
    Ok("react 168 (1 invocation, 0 failures); 100 multi-agent memories exact; 200-episode soak within budgets".into())
}

// ---------------------------------------------------------------------------
// Trace attribution

#[derive(Debug, Clone, Copy)]
enum Fault {
    None,
    Validation,
    Unknown,
    Timeout,
    Execution,
}

fn trace_attribution() -> Outcome {
    let mut routes = BTreeMap::new();
    routes.insert("/slow".to_string(), StubRoute::text("late").with_delay(400));
    let stub = StubServer::start(routes).map_err(|e| e.to_string())?;

    let registry = seed::registry().with_retry_policy(RetryPolicy::immediate());
    register_program(&registry, "flaky", |_| Err("flaky tool crashed".into()));
    let mut api = ApiBinding::post(format!("{}/slow", stub.url()));
    api.timeout_ms = Some(50);
    api.max_retries = Some(0);
    let mut slow = program_manifest("slow_api");
    slow.category = opentools::schema::Category::Api;
    registry
        .register(slow, ToolBinding::Api(api))
        .map_err(|e| e.to_string())?;

    let mut rng = StdRng::seed_from_u64(0x5EED_0006);
    let toolbox = ["calculator", "flaky", "slow_api"];
    let faults = [
        Fault::None,
        Fault::Validation,
        Fault::Unknown,
        Fault::Timeout,
        Fault::Execution,
    ];
    let mut totals = (0, 0);
    for episode in 0..40 {
        let n = rng.random_range(1..=6);
        let mut entries = Vec::new();
        let mut expected: BTreeMap<String, FailureCounts> = BTreeMap::new();
        let (mut policy, mut tool) = (0, 0);
        for _ in 0..n {
            let fault = *faults.choose(&mut rng).unwrap();
            let (name, arguments) = match fault {
                Fault::None => ("calculator", json!({"expression": "2+3"})),
                Fault::Validation => ("calculator", json!({"expression": 5})),
                Fault::Unknown => ("ghost_tool", json!({"x": 1})),
                Fault::Timeout => ("slow_api", json!({"tag": "t"})),
                Fault::Execution => ("flaky", json!({"tag": "t"})),
            };
            entries.push(ScriptEntry::call(name, arguments));
            let bucket = expected.entry(name.to_string()).or_default();
            match fault {
                Fault::None => {}
                Fault::Validation | Fault::Unknown => {
                    bucket.policy_errors += 1;
                    policy += 1;
                }
                Fault::Timeout | Fault::Execution => {
                    bucket.tool_errors += 1;
                    tool += 1;
                }
            }
        }
        expected.retain(|_, c| c.policy_errors + c.tool_errors > 0);
        entries.push(ScriptEntry::text("FINAL ANSWER: done"));
        let config = PolicyConfig::new(PolicyKind::React).with_max_steps(n as u32 + 1);
        let (run, trace, _) = common::episode(&registry, entries, &config, "q", &toolbox);
        ensure(run.status == RunStatus::Completed, || {
            format!("episode {episode}: {:?}", run.status)
        })?;
        let summary = attribute_failures(&trace).map_err(|e| e.to_string())?;
        ensure(
            (summary.n_policy_errors, summary.n_tool_errors) == (policy, tool),
            || format!("episode {episode}: {summary:?} vs policy {policy} tool {tool}"),
        )?;
        ensure(summary.per_tool == expected, || {
            format!(
                "episode {episode}: per-tool {:?} vs {expected:?}",
                summary.per_tool
            )
        })?;
        let doc = serialize_jsonl(&trace).map_err(|e| e.to_string())?;
        let back = deserialize_jsonl(&doc).map_err(|e| e.to_string())?;
        ensure(back == trace, || {
            format!("episode {episode}: JSONL round trip changed the trace")
        })?;
        ensure(serialize_jsonl(&back).unwrap() == doc, || {
            "re-serialization differs".into()
        })?;
        totals.0 += policy;
        totals.1 += tool;
    }
    Ok(format!(
        "40 episodes, {} policy / {} tool errors attributed exactly; JSONL lossless",
        totals.0, totals.1
    ))
}

// ---------------------------------------------------------------------------
// End-to-end determinism

fn cli(dir: &Path, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_opentools"))
        .arg("--state-dir")
        .arg(dir)
        .args(args)
        .env_remove("OPENTOOLS_STUB_URL")
        .env_remove("OPENAI_API_KEY")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!(
            "{args:?} exited {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        )
    })?;
    Ok(out.stdout)
}

fn program_entries(report: &[u8]) -> Result<Vec<String>, String> {
    let doc: Value = serde_json::from_slice(report).map_err(|e| e.to_string())?;
    Ok(doc["tools"]
        .as_array()
        .ok_or("report has no tools")?
        .iter()
        .filter(|t| t["category"] == "program")
        .map(|t| serde_json::to_string(t).unwrap())
        .collect())
}

fn end_to_end_determinism() -> Outcome {
    let started = Instant::now();
    let registry = seed::registry();
    let categories: BTreeSet<&str> = registry
        .descriptors()
        .iter()
        .map(|d| d.category.as_str())
        .collect();
    ensure(registry.len() >= 10 && categories.len() == 3, || {
        format!("seed has {} tools in {categories:?}", registry.len())
    })?;

    let mut reports = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        cli(dir.path(), &["init"])?;
        cli(dir.path(), &["eval", "run", "--with-stub"])?;
        reports.push(cli(dir.path(), &["--format", "json", "report"])?);
    }
    let (a, b) = (program_entries(&reports[0])?, program_entries(&reports[1])?);
    ensure(!a.is_empty() && a == b, || {
        "program-tool report entries differ between runs".into()
    })?;
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(30), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "{} program tools byte-identical across two eval runs in {elapsed:.2?}",
        a.len()
    ))
}

// ---------------------------------------------------------------------------
// Service contract

fn random_args(rng: &mut StdRng, d: &ToolDescriptor) -> Map<String, Value> {
    let mut out = Map::new();
    if d.name == "calculator" {
        let ops = ["+", "-", "*", "/", "^", "%"];
        let expr = match rng.random_range(0..6) {
            0 => "2+".to_string(),
            1 => format!("{}/0", rng.random_range(0..9)),
            _ => format!(
                "{}{}{}",
                rng.random_range(0..100),
                ops.choose(rng).unwrap(),
                rng.random_range(1..20)
            ),
        };
        out.insert("expression".into(), json!(expr));
        return out;
    }
    for p in &d.arguments.parameters {
        if !p.required && rng.random_bool(0.5) {
            continue;
        }
        if rng.random_range(0..12) == 0 {
            continue; // occasionally drop an argument to exercise validation
        }
        let value = match (&p.allowed, p.ty) {
            (Some(allowed), _) if !allowed.is_empty() => allowed.choose(rng).unwrap().clone(),
            (_, ParamType::Integer) => json!(rng.random_range(-5..50)),
            (_, ParamType::Number) => json!(rng.random_range(-100.0..100.0_f64)),
            (_, ParamType::Boolean) => json!(rng.random_bool(0.5)),
            (_, ParamType::StringList) => json!(["a", "b"]),
            (_, ParamType::String) if p.name.contains("date") => json!(format!(
                "2024-0{}-1{}",
                rng.random_range(1..10),
                rng.random_range(0..10)
            )),
            _ => json!(random_string(rng, &['a', 'b', 'c', ' ', 'X'], 8)),
        };
        out.insert(p.name.clone(), value);
    }
    out
}

/// Observation or error document, minus timing.
fn comparable(v: Value) -> Value {
    let mut v = v;
    if let Some(o) = v.as_object_mut() {
        o.remove("latency_ms");
    }
    v
}

async fn service_contract() -> Outcome {
    use common::http::*;
    use opentools::service::{router, ServiceConfig};
    use opentools::workspace::{init_dir, Workspace};

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    init_dir(dir.path()).map_err(|e| e.to_string())?;
    let ws = Arc::new(
        Workspace::open_dir(dir.path(), BackendRegistry::new(), EnvVars::isolated())
            .map_err(|e| e.to_string())?,
    );
    let app = router(
        ws.clone(),
        ServiceConfig {
            auth_token: Some(TOKEN.into()),
            ..ServiceConfig::default()
        },
    );
    let hash = || ws.store().state_hash().unwrap();

    // Happy paths across the surface.
    let expect = |r: &Reply, status: u16, what: &str| {
        ensure(r.status.as_u16() == status, || {
            format!("{what}: {} {}", r.status, r.text())
        })
    };
    expect(&get(&app, "/v1/tools").await, 200, "list tools")?;
    expect(&get(&app, "/v1/tools/calculator").await, 200, "tool card")?;
    expect(
        &get(&app, "/v1/tools/calculator/reliability").await,
        200,
        "tool reliability",
    )?;
    let case = json!({"id": "svc-case", "tool": "string_transformer", "input": {"text": "abc", "operation": "upper"},
                      "expect": {"kind": "exact", "expected": "ABC"}});
    let sub = post(
        &app,
        "/v1/tests",
        &json!({"submitter": "ann", "case": case}),
    )
    .await;
    expect(&sub, 201, "submit")?;
    let sub_id = sub.json()["id"].as_str().unwrap().to_string();
    expect(
        &get(&app, "/v1/submissions?status=pending").await,
        200,
        "list submissions",
    )?;
    let review_uri = format!("/v1/submissions/{sub_id}/review");
    expect(
        &post_auth(
            &app,
            &review_uri,
            &json!({"decision": "accept", "reason": "good"}),
        )
        .await,
        200,
        "review",
    )?;
    let round = post_auth(&app, "/v1/eval/rounds", &json!({"parallelism": 2})).await;
    expect(&round, 201, "round")?;
    let round_id = round.json()["round_id"].clone();
    expect(
        &get(&app, &format!("/v1/eval/rounds/{round_id}")).await,
        200,
        "get round",
    )?;
    expect(&get(&app, "/v1/reports/latest").await, 200, "report")?;
    let run = post(
        &app,
        "/v1/agent/runs",
        &json!({"query": "24*7?", "policy_config": {"kind": "react", "backend_id": "mock"}, "tool_names": ["calculator"],
                "mock_script": common::script("react_168.json")}),
    )
    .await;
    expect(&run, 200, "agent run")?;
    let run = run.json();
    expect(
        &get(
            &app,
            &format!("/v1/agent/runs/{}", run["run_id"].as_str().unwrap()),
        )
        .await,
        200,
        "get run",
    )?;
    let trace_url = run["trace_url"].as_str().unwrap();
    expect(&get(&app, trace_url).await, 200, "trace")?;
    let trace_id = trace_url.rsplit('/').next().unwrap();
    let fb = post(
        &app,
        "/v1/feedback",
        &json!({"scope": "agent_response", "target_id": trace_id, "rating": "positive"}),
    )
    .await;
    expect(&fb, 201, "feedback")?;

    // Every failing mutation leaves the state hash unchanged.
    let failures: Vec<(&str, String, Option<Value>, bool, u16)> = vec![
        (
            "POST",
            "/v1/tests".into(),
            Some(
                json!({"case": {"id": "x", "tool": "nope", "input": {}, "expect": {"kind": "exact", "expected": ""}}}),
            ),
            false,
            400,
        ),
        (
            "POST",
            "/v1/tests".into(),
            Some(json!({"case": case})),
            false,
            400,
        ),
        (
            "POST",
            "/v1/tests".into(),
            Some(
                json!({"case": {"id": "bad id!", "tool": "calculator", "input": {"expression": "1"}, "expect": {"kind": "exact", "expected": "1"}}}),
            ),
            false,
            400,
        ),
        (
            "POST",
            "/v1/tests".into(),
            Some(
                json!({"case": {"id": "re", "tool": "calculator", "input": {"expression": "1"}, "expect": {"kind": "pattern", "pattern": "("}}}),
            ),
            false,
            400,
        ),
        (
            "POST",
            "/v1/tests".into(),
            Some(
                json!({"tool_manifest": {"manifest": {"name": ""}, "binding": {"kind": "program", "function": "calculator"}}}),
            ),
            false,
            400,
        ),
        ("POST", "/v1/tests".into(), None, false, 400),
        (
            "POST",
            review_uri.clone(),
            Some(json!({"decision": "reject", "reason": "late"})),
            true,
            409,
        ),
        (
            "POST",
            review_uri.clone(),
            Some(json!({"decision": "accept", "reason": "x"})),
            false,
            401,
        ),
        (
            "POST",
            "/v1/submissions/sub-999999/review".into(),
            Some(json!({"decision": "accept", "reason": "x"})),
            true,
            404,
        ),
        (
            "POST",
            review_uri.clone(),
            Some(json!({"decision": "maybe", "reason": "x"})),
            true,
            400,
        ),
        (
            "POST",
            "/v1/eval/rounds".into(),
            Some(json!({})),
            false,
            401,
        ),
        (
            "POST",
            "/v1/eval/rounds".into(),
            Some(json!({"parallelism": 0})),
            true,
            400,
        ),
        (
            "POST",
            "/v1/eval/rounds".into(),
            Some(json!({"threshold": 2.0})),
            true,
            400,
        ),
        (
            "POST",
            "/v1/agent/runs".into(),
            Some(json!({"query": "q", "policy_config": {"kind": "tree_of_thought"}})),
            false,
            400,
        ),
        (
            "POST",
            "/v1/agent/runs".into(),
            Some(
                json!({"query": "q", "policy_config": {"kind": "react", "backend_id": "nowhere"}}),
            ),
            false,
            400,
        ),
        (
            "POST",
            "/v1/agent/runs".into(),
            Some(
                json!({"query": "q", "policy_config": {"kind": "react", "backend_id": "mock"}, "tool_names": ["ghost"], "mock_script": []}),
            ),
            false,
            400,
        ),
        (
            "POST",
            "/v1/agent/runs".into(),
            Some(
                json!({"query": "q", "policy_config": {"kind": "react", "backend_id": "mock"}, "tool_names": ["calculator"], "selection": {"k": 0}, "mock_script": []}),
            ),
            false,
            400,
        ),
        (
            "POST",
            "/v1/feedback".into(),
            Some(
                json!({"scope": "agent_response", "target_id": "trace-999999", "rating": "negative"}),
            ),
            false,
            404,
        ),
        (
            "POST",
            "/v1/feedback".into(),
            Some(json!({"scope": "everything"})),
            false,
            400,
        ),
        (
            "POST",
            "/v1/tools/ghost/invoke".into(),
            Some(json!({})),
            false,
            404,
        ),
        (
            "POST",
            "/v1/tools/calculator/invoke".into(),
            Some(json!({"expression": 1})),
            false,
            400,
        ),
    ];
    for (method, uri, body, auth, status) in &failures {
        let before = hash();
        let text = body.as_ref().map(|b| b.to_string());
        let reply = call(
            &app,
            method,
            uri,
            text.as_deref().or(Some("{not json")),
            auth.then_some(TOKEN),
        )
        .await;
        ensure(reply.status.as_u16() == *status, || {
            format!("{method} {uri} {body:?}: {} {}", reply.status, reply.text())
        })?;
        let doc = reply.json();
        ensure(
            doc["code"].is_string() && doc["message"].is_string(),
            || format!("{uri}: not an error document: {doc}"),
        )?;
        ensure(hash() == before, || {
            format!("{method} {uri} {body:?} changed state")
        })?;
    }

    // Invoke endpoint agrees with direct runtime invocation.
    let mut rng = StdRng::seed_from_u64(0x5EED_0008);
    let programs: Vec<ToolDescriptor> = ws
        .tools()
        .into_iter()
        .filter(|d| d.category.as_str() == "program")
        .collect();
    let mut ok = 0;
    for i in 0..100 {
        let d = programs.choose(&mut rng).unwrap();
        let a = random_args(&mut rng, d);
        let direct = ws
            .registry()
            .invoke(ws.context(), &d.name, &a, &ws.budget())
            .unwrap();
        let reply = post(
            &app,
            &format!("/v1/tools/{}/invoke", d.name),
            &Value::Object(a.clone()),
        )
        .await;
        let doc = reply.json();
        match direct {
            Ok(obs) => {
                ok += 1;
                ensure(reply.status == 200, || {
                    format!("call {i} {}: {} {doc}", d.name, reply.status)
                })?;
                ensure(
                    comparable(doc) == comparable(serde_json::to_value(&obs).unwrap()),
                    || {
                        format!(
                            "call {i} {}: observation differs\n http   {}\n direct {}",
                            d.name,
                            reply.text(),
                            serde_json::to_string(&obs).unwrap()
                        )
                    },
                )?;
            }
            Err(err) => {
                ensure(reply.status.as_u16() >= 400, || {
                    format!("call {i} {}: expected failure", d.name)
                })?;
                ensure(doc["code"] == err.class.as_str(), || {
                    format!("call {i}: code {} vs {}", doc["code"], err.class.as_str())
                })?;
                ensure(
                    doc["tool_error"] == serde_json::to_value(&err).unwrap(),
                    || format!("call {i}: tool_error differs"),
                )?;
            }
        }
    }
    Ok(format!("14 endpoints exercised; {} failing mutations leave state unchanged; 100/100 invokes agree ({ok} ok)", failures.len()))
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .unwrap();
    let criteria: Vec<Criterion> = vec![
        ("verifier-oracle equivalence", Box::new(verifier_oracle)),
        ("suite accounting", Box::new(suite_accounting)),
        ("regression detection", Box::new(regression_drift)),
        ("community lifecycle", Box::new(community_lifecycle)),
        ("agent episodes", Box::new(agent_episodes)),
        ("trace attribution", Box::new(trace_attribution)),
        ("end-to-end determinism", Box::new(end_to_end_determinism)),
        (
            "service contract",
            Box::new(move || rt.block_on(service_contract())),
        ),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        match result {
            Ok(detail) => println!("PASS {name}: {detail} [{:.2?}]", started.elapsed()),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why} [{:.2?}]", started.elapsed());
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
