//! Evaluation rounds, reliability profiles, regression detection and reports.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::runtime::{InvokeContext, ToolRegistry};
use crate::schema::{
    canonical_json, canonical_serialize, AccuracySummary, Category, ToolDescriptor,
};
use crate::store::{to_pretty, Batch, Store, StoreError};
use crate::verification::{run_suite, CaseStatus, CheckResult, SuiteSummary, TestCase};

pub const DEFAULT_REGRESSION_THRESHOLD: f64 = 0.1;

pub const ROUNDS_LOG: &str = "state/rounds.jsonl";

pub fn cases_path(tool: &str) -> String {
    format!("tests/{tool}.json")
}

pub fn profile_path(tool: &str) -> String {
    format!("state/profiles/{tool}.json")
}

pub fn checks_path(round_id: u64) -> String {
    format!("state/checks/round-{round_id}.json")
}

pub fn manifest_path(tool: &str) -> String {
    format!("tools/{tool}.json")
}

/// All cases stored for one tool, any status.
pub fn load_cases(store: &Store, tool: &str) -> Result<Vec<TestCase>, StoreError> {
    let mut cases: Vec<TestCase> = store.read_json(&cases_path(tool))?.unwrap_or_default();
    for c in &mut cases {
        if c.tool_name.is_empty() {
            c.tool_name = tool.to_string();
        }
    }
    Ok(cases)
}

/// Every stored case, grouped by tool in name order.
pub fn load_all_cases(store: &Store) -> Result<BTreeMap<String, Vec<TestCase>>, StoreError> {
    let mut out = BTreeMap::new();
    for file in store.list("tests")? {
        if let Some(tool) = file.strip_suffix(".json") {
            out.insert(tool.to_string(), load_cases(store, tool)?);
        }
    }
    Ok(out)
}

pub fn accepted(cases: &[TestCase]) -> impl Iterator<Item = &TestCase> {
    cases.iter().filter(|c| c.status == CaseStatus::Accepted)
}

/// Content hash of an accepted case set. Only identity, input and expectation count.
pub fn suite_version<'a>(cases: impl IntoIterator<Item = &'a TestCase>) -> String {
    let mut keyed: Vec<(String, Vec<u8>)> = cases
        .into_iter()
        .filter(|c| c.status == CaseStatus::Accepted)
        .map(|c| {
            let doc = serde_json::json!({
                "tool": c.tool_name,
                "id": c.id,
                "input": c.input_args,
                "expect": c.expectation,
            });
            (
                (format!("{}\u{0}{}", c.tool_name, c.id)),
                canonical_json(&doc),
            )
        })
        .collect();
    keyed.sort();
    let mut hasher = Sha256::new();
    for (_, bytes) in keyed {
        hasher.update(&bytes);
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRound {
    pub round_id: u64,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub suite_version: String,
    /// Suite hash per tool.
    pub tool_suite_versions: BTreeMap<String, String>,
    pub per_tool: BTreeMap<String, SuiteSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub round_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub availability: Option<f64>,
    pub n_cases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionEvent {
    pub from_round: u64,
    pub to_round: u64,
    pub accuracy_drop: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityProfile {
    pub tool_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current_availability: Option<f64>,
    pub history: Vec<HistoryEntry>,
    pub regressions: Vec<RegressionEvent>,
}

impl ReliabilityProfile {
    pub fn new(tool_name: impl Into<String>) -> Self {
        Self {
            tool_name: tool_name.into(),
            current_accuracy: None,
            current_availability: None,
            history: Vec::new(),
            regressions: Vec::new(),
        }
    }

    /// Regressions that end at the most recent round of this profile.
    pub fn open_regressions(&self) -> Vec<RegressionEvent> {
        let Some(last) = self.history.last() else {
            return Vec::new();
        };
        self.regressions
            .iter()
            .filter(|r| r.to_round == last.round_id)
            .cloned()
            .collect()
    }
}

/// An event for each consecutive pair of rounds with known accuracy whose drop exceeds
/// the threshold. Rounds without accuracy are skipped.
pub fn detect_regression(history: &[HistoryEntry], threshold: f64) -> Vec<RegressionEvent> {
    let mut events = Vec::new();
    let mut prev: Option<(u64, f64)> = None;
    for entry in history {
        let Some(acc) = entry.accuracy else { continue };
        if let Some((from, prev_acc)) = prev {
            let drop = prev_acc - acc;
            if drop > threshold {
                events.push(RegressionEvent {
                    from_round: from,
                    to_round: entry.round_id,
                    accuracy_drop: drop,
                    threshold,
                });
            }
        }
        prev = Some((entry.round_id, acc));
    }
    events
}

pub fn load_rounds(store: &Store) -> Result<Vec<EvaluationRound>, StoreError> {
    store.read_jsonl(ROUNDS_LOG)
}

pub fn load_round(store: &Store, round_id: u64) -> Result<Option<EvaluationRound>, StoreError> {
    Ok(load_rounds(store)?
        .into_iter()
        .find(|r| r.round_id == round_id))
}

pub fn latest_round(store: &Store) -> Result<Option<EvaluationRound>, StoreError> {
    Ok(load_rounds(store)?.pop())
}

pub fn load_profile(store: &Store, tool: &str) -> Result<Option<ReliabilityProfile>, StoreError> {
    store.read_json(&profile_path(tool))
}

pub fn load_profiles(store: &Store) -> Result<BTreeMap<String, ReliabilityProfile>, StoreError> {
    let mut out = BTreeMap::new();
    for file in store.list("state/profiles")? {
        if let Some(tool) = file.strip_suffix(".json") {
            if let Some(p) = load_profile(store, tool)? {
                out.insert(tool.to_string(), p);
            }
        }
    }
    Ok(out)
}

/// Persisted check result, addressable as `r<round>/<case_id>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub check_id: String,
    pub tool_name: String,
    pub case: TestCase,
    pub result: CheckResult,
}

pub fn check_id(round_id: u64, case_id: &str) -> String {
    format!("r{round_id}/{case_id}")
}

pub fn load_checks(store: &Store, round_id: u64) -> Result<Vec<CheckRecord>, StoreError> {
    Ok(store.read_json(&checks_path(round_id))?.unwrap_or_default())
}

pub fn find_check(store: &Store, id: &str) -> Result<Option<CheckRecord>, StoreError> {
    let Some(round_id) = id
        .strip_prefix('r')
        .and_then(|rest| rest.split_once('/'))
        .and_then(|(n, _)| n.parse::<u64>().ok())
    else {
        return Ok(None);
    };
    Ok(load_checks(store, round_id)?
        .into_iter()
        .find(|c| c.check_id == id))
}

#[derive(Debug, thiserror::Error)]
pub enum RoundError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("no accepted test cases to evaluate")]
    NoCases,
    #[error("regression threshold must lie in (0, 1], got {0}")]
    BadThreshold(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub round: EvaluationRound,
    pub checks: Vec<CheckRecord>,
}

/// Runs every accepted suite, then persists the round, profiles, check results and
/// refreshed accuracy summaries in one atomic commit. On any storage failure nothing
/// is visible and the registry is left untouched.
pub fn run_round(
    registry: &ToolRegistry,
    ctx: &InvokeContext,
    store: &Store,
    parallelism: usize,
    threshold: f64,
) -> Result<RoundOutcome, RoundError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(RoundError::BadThreshold(threshold));
    }
    let _guard = store.lock();
    let started_at = Utc::now();

    let all = load_all_cases(store)?;
    let suites: BTreeMap<String, Vec<TestCase>> = all
        .into_iter()
        .map(|(tool, cases)| (tool, accepted(&cases).cloned().collect::<Vec<_>>()))
        .filter(|(_, cases)| !cases.is_empty())
        .collect();
    if suites.is_empty() {
        return Err(RoundError::NoCases);
    }

    let flat: Vec<TestCase> = suites.values().flatten().cloned().collect();
    let run = run_suite(registry, ctx, &flat, parallelism);
    let finished_at = Utc::now();

    let previous = load_rounds(store)?;
    let round_id = previous.last().map_or(1, |r| r.round_id + 1);

    let mut per_tool = BTreeMap::new();
    let mut tool_suite_versions = BTreeMap::new();
    let mut checks = Vec::with_capacity(flat.len());
    let mut offset = 0;
    for (tool, cases) in &suites {
        let results = &run.results[offset..offset + cases.len()];
        offset += cases.len();
        per_tool.insert(
            tool.clone(),
            SuiteSummary::from_verdicts(results.iter().map(|r| r.verdict)),
        );
        tool_suite_versions.insert(tool.clone(), suite_version(cases));
        for (case, result) in cases.iter().zip(results) {
            checks.push(CheckRecord {
                check_id: check_id(round_id, &case.id),
                tool_name: tool.clone(),
                case: case.clone(),
                result: result.clone(),
            });
        }
    }

    let round = EvaluationRound {
        round_id,
        started_at,
        finished_at,
        suite_version: suite_version(&flat),
        tool_suite_versions,
        per_tool,
    };

    let mut batch = Batch::new();
    batch.write(ROUNDS_LOG, store.appended(ROUNDS_LOG, &round)?);
    batch.write(checks_path(round_id), to_pretty(&checks));

    let mut refreshed = Vec::new();
    for (tool, summary) in &round.per_tool {
        let mut profile =
            load_profile(store, tool)?.unwrap_or_else(|| ReliabilityProfile::new(tool));
        profile.history.push(HistoryEntry {
            round_id,
            accuracy: summary.accuracy,
            availability: summary.availability,
            n_cases: summary.total(),
        });
        profile.current_accuracy = summary.accuracy;
        profile.current_availability = summary.availability;
        profile.regressions = detect_regression(&profile.history, threshold);
        batch.write(profile_path(tool), to_pretty(&profile));

        let accuracy_summary = summary.accuracy.map(|accuracy| AccuracySummary {
            accuracy,
            suite_size: summary.total() as u32,
            evaluated_at: finished_at,
        });
        if let Some(mut descriptor) = registry.descriptor(tool) {
            descriptor.accuracy_summary = accuracy_summary.clone();
            let bytes = canonical_serialize(&descriptor);
            batch.write(
                manifest_path(tool),
                String::from_utf8(bytes).expect("canonical JSON is UTF-8"),
            );
            refreshed.push((tool.clone(), accuracy_summary));
        }
    }

    store.commit(&batch)?;
    for (tool, summary) in refreshed {
        // The tool was present when the batch was built; a concurrent removal is benign.
        let _ = registry.set_accuracy_summary(&tool, summary);
    }
    Ok(RoundOutcome { round, checks })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolReport {
    pub name: String,
    pub category: Category,
    /// "evaluated" or "unevaluated".
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub availability: Option<f64>,
    pub suite_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suite_version: Option<String>,
    pub history: Vec<HistoryEntry>,
    pub open_regressions: Vec<RegressionEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suite_version: Option<String>,
    pub tools: Vec<ToolReport>,
}

impl ReliabilityReport {
    /// The canonical document bytes (pretty JSON, LF-terminated).
    pub fn to_bytes(&self) -> Vec<u8> {
        to_pretty(self).into_bytes()
    }

    pub fn tool(&self, name: &str) -> Option<&ToolReport> {
        self.tools.iter().find(|t| t.name == name)
    }
}

/// Deterministic report: no wall-clock fields, tools in name order.
pub fn generate_report(
    descriptors: &[ToolDescriptor],
    profiles: &BTreeMap<String, ReliabilityProfile>,
    round: Option<&EvaluationRound>,
) -> ReliabilityReport {
    let mut sorted: Vec<&ToolDescriptor> = descriptors.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let tools = sorted
        .into_iter()
        .map(|d| {
            let profile = profiles.get(&d.name);
            let history = profile.map(|p| p.history.clone()).unwrap_or_default();
            let evaluated = profile.is_some_and(|p| p.current_accuracy.is_some());
            ToolReport {
                name: d.name.clone(),
                category: d.category,
                status: if evaluated {
                    "evaluated"
                } else {
                    "unevaluated"
                }
                .to_string(),
                accuracy: profile.and_then(|p| p.current_accuracy),
                availability: profile.and_then(|p| p.current_availability),
                suite_size: history.last().map_or(0, |h| h.n_cases),
                suite_version: round.and_then(|r| r.tool_suite_versions.get(&d.name).cloned()),
                open_regressions: profile
                    .map(ReliabilityProfile::open_regressions)
                    .unwrap_or_default(),
                history,
            }
        })
        .collect();
    ReliabilityReport {
        round_id: round.map(|r| r.round_id),
        suite_version: round.map(|r| r.suite_version.clone()),
        tools,
    }
}
