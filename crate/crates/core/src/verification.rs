//! Test cases, expectations and the checks that score tool outputs.

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::llm::{ChatMessage, ChatRequest};
use crate::runtime::{Budget, InvokeContext, Observation, ToolError, ToolRegistry};
use crate::schema::{validate_arguments, ToolDescriptor};
use crate::templates;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    #[default]
    Curated,
    Community,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseStatus {
    #[default]
    Pending,
    Accepted,
    Rejected,
}

impl CaseStatus {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pending" => Some(Self::Pending),
            "accepted" => Some(Self::Accepted),
            "rejected" => Some(Self::Rejected),
            _ => None,
        }
    }
}

/// What a correct output looks like. Tagged by `kind` on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Expectation {
    Exact {
        expected: String,
    },
    NumericTolerance {
        expected: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        abs_tol: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rel_tol: Option<f64>,
    },
    Pattern {
        pattern: String,
    },
    Property {
        predicate: String,
        #[serde(default, skip_serializing_if = "Map::is_empty")]
        params: Map<String, Value>,
    },
    Semantic {
        reference: String,
        /// Falls back to the context's default backend.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        judge_backend: Option<String>,
    },
}

/// The selectable check kinds, in display order.
pub const EXPECTATION_KINDS: [&str; 5] = [
    "exact",
    "numeric_tolerance",
    "pattern",
    "property",
    "semantic",
];

impl Expectation {
    pub fn kind(&self) -> &'static str {
        match self {
            Expectation::Exact { .. } => "exact",
            Expectation::NumericTolerance { .. } => "numeric_tolerance",
            Expectation::Pattern { .. } => "pattern",
            Expectation::Property { .. } => "property",
            Expectation::Semantic { .. } => "semantic",
        }
    }

    /// Static well-formedness: tolerances configured, regex compiles, predicate known.
    pub fn validate(&self) -> Result<(), String> {
        match self {
            Expectation::Exact { .. } | Expectation::Semantic { .. } => Ok(()),
            Expectation::NumericTolerance {
                expected,
                abs_tol,
                rel_tol,
            } => {
                if !expected.is_finite() {
                    return Err("expected value must be finite".into());
                }
                if abs_tol.is_none() && rel_tol.is_none() {
                    return Err("numeric_tolerance needs abs_tol or rel_tol".into());
                }
                for (name, tol) in [("abs_tol", abs_tol), ("rel_tol", rel_tol)] {
                    if let Some(t) = tol {
                        if !(t.is_finite() && *t >= 0.0) {
                            return Err(format!("{name} must be a non-negative number"));
                        }
                    }
                }
                Ok(())
            }
            Expectation::Pattern { pattern } => full_match_regex(pattern).map(|_| ()),
            Expectation::Property { predicate, params } => {
                predicate_check_params(predicate, params)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub id: String,
    /// Implied by the suite file name when stored under `tests/<tool>.json`.
    #[serde(rename = "tool", default)]
    pub tool_name: String,
    #[serde(rename = "input")]
    pub input_args: Map<String, Value>,
    #[serde(rename = "expect")]
    pub expectation: Expectation,
    #[serde(default)]
    pub origin: Origin,
    #[serde(default)]
    pub status: CaseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contributor: Option<String>,
    #[serde(default = "Utc::now")]
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

impl TestCase {
    pub fn new(
        id: impl Into<String>,
        tool_name: impl Into<String>,
        input_args: Map<String, Value>,
        expectation: Expectation,
    ) -> Self {
        Self {
            id: id.into(),
            tool_name: tool_name.into(),
            input_args,
            expectation,
            origin: Origin::Curated,
            status: CaseStatus::Accepted,
            contributor: None,
            created_at: Utc::now(),
            notes: None,
        }
    }

    /// Checks the case against its target tool. Returns every problem found.
    pub fn validate_against(&self, descriptor: &ToolDescriptor) -> Result<(), Vec<String>> {
        let mut problems = Vec::new();
        if let Err(f) = validate_arguments(descriptor, &self.input_args) {
            problems.extend(
                f.violations
                    .into_iter()
                    .map(|v| format!("input.{}: {}", v.parameter, v.reason)),
            );
        }
        if let Err(e) = self.expectation.validate() {
            problems.push(format!("expect: {e}"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolOutcome {
    Observation(Observation),
    Error(ToolError),
    /// The case names a tool the registry does not know.
    UnknownTool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub case_id: String,
    pub verdict: Verdict,
    pub detail: String,
    pub tool_outcome: ToolOutcome,
    pub checked_at: DateTime<Utc>,
}

/// Outcome of applying an expectation to an output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckOutcome {
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn pass(detail: impl Into<String>) -> Self {
        Self {
            passed: true,
            detail: detail.into(),
        }
    }

    fn fail(detail: impl Into<String>) -> Self {
        Self {
            passed: false,
            detail: detail.into(),
        }
    }
}

fn full_match_regex(pattern: &str) -> Result<Regex, String> {
    Regex::new(&format!("^(?:{pattern})$")).map_err(|e| format!("invalid pattern: {e}"))
}

/// Applies any non-semantic expectation to textual output.
pub fn check_text(expectation: &Expectation, output: &str) -> CheckOutcome {
    match expectation {
        Expectation::Exact { expected } => {
            let got = output.trim_end();
            if got == expected.trim_end() {
                CheckOutcome::pass("exact match")
            } else {
                CheckOutcome::fail(format!("expected {expected:?}, got {got:?}"))
            }
        }
        Expectation::NumericTolerance {
            expected,
            abs_tol,
            rel_tol,
        } => {
            if abs_tol.is_none() && rel_tol.is_none() {
                return CheckOutcome::fail("no tolerance configured");
            }
            let Ok(got) = output.trim().parse::<f64>() else {
                return CheckOutcome::fail(format!("output {:?} is not a number", output.trim()));
            };
            let diff = (got - expected).abs();
            let within_abs = abs_tol.is_some_and(|t| diff <= t);
            let within_rel = rel_tol.is_some_and(|t| diff <= t * expected.abs());
            if within_abs || within_rel {
                CheckOutcome::pass(format!("|{got} - {expected}| = {diff} within tolerance"))
            } else {
                CheckOutcome::fail(format!("|{got} - {expected}| = {diff} exceeds tolerance"))
            }
        }
        Expectation::Pattern { pattern } => match full_match_regex(pattern) {
            Ok(re) if re.is_match(output) => CheckOutcome::pass("pattern matched"),
            Ok(_) => CheckOutcome::fail(format!("{output:?} does not match /{pattern}/")),
            Err(e) => CheckOutcome::fail(e),
        },
        Expectation::Property { predicate, params } => {
            match evaluate_predicate(predicate, params, output) {
                Ok(true) => CheckOutcome::pass(format!("{predicate} holds")),
                Ok(false) => CheckOutcome::fail(format!("{predicate} does not hold")),
                Err(e) => CheckOutcome::fail(e),
            }
        }
        Expectation::Semantic { .. } => CheckOutcome::fail("semantic checks need a judge backend"),
    }
}

/// Applies an expectation to an observation. Semantic checks consult the judge backend.
pub fn check(expectation: &Expectation, output: &Observation, ctx: &InvokeContext) -> CheckOutcome {
    let text = output.text();
    match expectation {
        Expectation::Semantic {
            reference,
            judge_backend,
        } => judge(reference, &text, judge_backend.as_deref(), ctx),
        other => check_text(other, &text),
    }
}

fn judge(
    reference: &str,
    candidate: &str,
    backend: Option<&str>,
    ctx: &InvokeContext,
) -> CheckOutcome {
    let Some(backend_id) = backend.or(ctx.default_backend.as_deref()) else {
        return CheckOutcome::fail("no judge backend configured");
    };
    let prompt = templates::render(
        templates::bundled("judge_semantic").expect("bundled judge template"),
        &[("reference", reference), ("candidate", candidate)],
    );
    let request = ChatRequest::new(backend_id, vec![ChatMessage::user(prompt)]);
    match ctx.backends.complete(&request) {
        Ok(resp) => {
            let verdict = resp.content.trim().to_ascii_uppercase();
            if verdict.starts_with("NOT_EQUIVALENT") || verdict.starts_with("NOT EQUIVALENT") {
                CheckOutcome::fail("judge: not equivalent")
            } else if verdict.starts_with("EQUIVALENT") {
                CheckOutcome::pass("judge: equivalent")
            } else {
                CheckOutcome::fail(format!(
                    "judge gave an unrecognized verdict {:?}",
                    resp.content
                ))
            }
        }
        Err(e) => CheckOutcome::fail(format!("judge backend failed: {e}")),
    }
}

/// Names of the property predicates available to test cases.
pub const PREDICATES: [&str; 8] = [
    "is_valid_json",
    "is_json_object",
    "is_number",
    "non_empty",
    "length_between",
    "contains_all",
    "contains_none",
    "json_field_equals",
];

fn param<'a>(params: &'a Map<String, Value>, key: &str) -> Result<&'a Value, String> {
    params
        .get(key)
        .ok_or_else(|| format!("predicate parameter {key:?} is missing"))
}

fn string_list(params: &Map<String, Value>, key: &str) -> Result<Vec<String>, String> {
    param(params, key)?
        .as_array()
        .and_then(|a| a.iter().map(|v| v.as_str().map(str::to_string)).collect())
        .ok_or_else(|| format!("predicate parameter {key:?} must be a list of strings"))
}

fn predicate_check_params(predicate: &str, params: &Map<String, Value>) -> Result<(), String> {
    match predicate {
        "is_valid_json" | "is_json_object" | "is_number" | "non_empty" => Ok(()),
        "length_between" => {
            let min = params
                .get("min")
                .map(|v| v.as_u64().ok_or("min must be a non-negative integer"));
            let max = params
                .get("max")
                .map(|v| v.as_u64().ok_or("max must be a non-negative integer"));
            if min.is_none() && max.is_none() {
                return Err("length_between needs min or max".into());
            }
            let (min, max) = (min.transpose()?, max.transpose()?);
            if let (Some(lo), Some(hi)) = (min, max) {
                if lo > hi {
                    return Err("length_between min exceeds max".into());
                }
            }
            Ok(())
        }
        "contains_all" | "contains_none" => string_list(params, "values").map(|_| ()),
        "json_field_equals" => {
            param(params, "field")?
                .as_str()
                .ok_or("field must be a string")?;
            param(params, "value")?;
            Ok(())
        }
        other => Err(format!("unknown predicate {other:?}")),
    }
}

fn evaluate_predicate(
    predicate: &str,
    params: &Map<String, Value>,
    output: &str,
) -> Result<bool, String> {
    predicate_check_params(predicate, params)?;
    Ok(match predicate {
        "is_valid_json" => serde_json::from_str::<Value>(output).is_ok(),
        "is_json_object" => matches!(serde_json::from_str::<Value>(output), Ok(Value::Object(_))),
        "is_number" => output.trim().parse::<f64>().is_ok_and(f64::is_finite),
        "non_empty" => !output.trim().is_empty(),
        "length_between" => {
            let n = output.chars().count() as u64;
            let min = params.get("min").and_then(Value::as_u64).unwrap_or(0);
            let max = params
                .get("max")
                .and_then(Value::as_u64)
                .unwrap_or(u64::MAX);
            (min..=max).contains(&n)
        }
        "contains_all" => string_list(params, "values")?
            .iter()
            .all(|v| output.contains(v.as_str())),
        "contains_none" => !string_list(params, "values")?
            .iter()
            .any(|v| output.contains(v.as_str())),
        "json_field_equals" => {
            let field = params["field"].as_str().unwrap_or_default();
            serde_json::from_str::<Value>(output)
                .ok()
                .and_then(|doc| doc.get(field).cloned())
                .is_some_and(|v| v == params["value"])
        }
        _ => unreachable!("checked above"),
    })
}

/// Invokes the case's tool under the default budget and scores the result.
pub fn run_case(registry: &ToolRegistry, ctx: &InvokeContext, case: &TestCase) -> CheckResult {
    let finish = |verdict, detail: String, tool_outcome| CheckResult {
        case_id: case.id.clone(),
        verdict,
        detail,
        tool_outcome,
        checked_at: Utc::now(),
    };
    match registry.invoke(ctx, &case.tool_name, &case.input_args, &Budget::default()) {
        Err(unknown) => finish(
            Verdict::Error,
            unknown.to_string(),
            ToolOutcome::UnknownTool(case.tool_name.clone()),
        ),
        Ok(Err(err)) => finish(Verdict::Error, err.to_string(), ToolOutcome::Error(err)),
        Ok(Ok(obs)) => {
            let outcome = check(&case.expectation, &obs, ctx);
            let verdict = if outcome.passed {
                Verdict::Pass
            } else {
                Verdict::Fail
            };
            finish(verdict, outcome.detail, ToolOutcome::Observation(obs))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub n_pass: usize,
    pub n_fail: usize,
    pub n_error: usize,
    /// n_pass / (n_pass + n_fail); absent when no case produced an observation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// (n_pass + n_fail) / total; absent for an empty suite.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub availability: Option<f64>,
}

impl SuiteSummary {
    pub fn from_verdicts(verdicts: impl IntoIterator<Item = Verdict>) -> Self {
        let mut s = Self::default();
        for v in verdicts {
            match v {
                Verdict::Pass => s.n_pass += 1,
                Verdict::Fail => s.n_fail += 1,
                Verdict::Error => s.n_error += 1,
            }
        }
        let ran = s.n_pass + s.n_fail;
        let total = ran + s.n_error;
        s.accuracy = (ran > 0).then(|| s.n_pass as f64 / ran as f64);
        s.availability = (total > 0).then(|| ran as f64 / total as f64);
        s
    }

    pub fn total(&self) -> usize {
        self.n_pass + self.n_fail + self.n_error
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRun {
    pub results: Vec<CheckResult>,
    pub summary: SuiteSummary,
}

/// Runs cases on up to `parallelism` threads. Results keep input order.
pub fn run_suite(
    registry: &ToolRegistry,
    ctx: &InvokeContext,
    suite: &[TestCase],
    parallelism: usize,
) -> SuiteRun {
    let parallelism = parallelism.max(1);
    let results: Vec<CheckResult> = if parallelism == 1 || suite.len() <= 1 {
        suite.iter().map(|c| run_case(registry, ctx, c)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .expect("thread pool");
        pool.install(|| {
            suite
                .par_iter()
                .map(|c| run_case(registry, ctx, c))
                .collect()
        })
    };
    let summary = SuiteSummary::from_verdicts(results.iter().map(|r| r.verdict));
    SuiteRun { results, summary }
}
