//! Execution traces: append-only, sequence-numbered event logs with failure attribution.
//!
//! A trace is serialized as JSONL: one header object, then one event per line.
//! Equality between traces ignores timestamps so scripted runs can be compared.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::runtime::{ErrorClass, ToolError};

/// Outputs above this size are stored as a digest plus a sidecar blob.
pub const INLINE_OUTPUT_LIMIT: usize = 4 * 1024;

const FORMAT: &str = "opentools-trace/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    PolicyStep,
    ToolValidation,
    ToolInvocation,
    ToolResult,
    ToolError,
    BackendCall,
    MemoryWrite,
    VerifierDecision,
    Warning,
    FinalAnswer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribution {
    /// Tool-use failure: the policy chose or called the tool wrongly.
    PolicyError,
    /// Intrinsic failure of the tool itself.
    ToolError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureClass {
    Validation,
    UnknownTool,
    /// Backend output the policy could not parse, after the corrective re-prompt.
    MalformedOutput,
    Execution,
    Timeout,
    RateLimited,
    Unavailable,
    ContractViolation,
}

impl FailureClass {
    pub fn attribution(self) -> Attribution {
        match self {
            FailureClass::Validation
            | FailureClass::UnknownTool
            | FailureClass::MalformedOutput => Attribution::PolicyError,
            _ => Attribution::ToolError,
        }
    }
}

impl From<ErrorClass> for FailureClass {
    fn from(c: ErrorClass) -> Self {
        match c {
            ErrorClass::Validation => FailureClass::Validation,
            ErrorClass::Execution => FailureClass::Execution,
            ErrorClass::Timeout => FailureClass::Timeout,
            ErrorClass::RateLimited => FailureClass::RateLimited,
            ErrorClass::Unavailable => FailureClass::Unavailable,
            ErrorClass::ContractViolation => FailureClass::ContractViolation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputDigest {
    pub sha256: String,
    pub bytes: usize,
    /// Sidecar path relative to the trace's directory.
    pub blob_ref: String,
}

/// Kind-specific event data. Only the fields relevant to the event are set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EventPayload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arguments: Option<Map<String, Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_digest: Option<OutputDigest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_class: Option<FailureClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sub_problem: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tools: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ok: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt_count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<Value>,
}

impl EventPayload {
    pub fn phase(phase: impl Into<String>) -> Self {
        Self {
            phase: Some(phase.into()),
            ..Default::default()
        }
    }

    pub fn tool(tool: impl Into<String>) -> Self {
        Self {
            tool: Some(tool.into()),
            ..Default::default()
        }
    }

    pub fn message(mut self, message: impl Into<String>) -> Self {
        self.message = Some(message.into());
        self
    }

    pub fn ok(mut self, ok: bool) -> Self {
        self.ok = Some(ok);
        self
    }

    pub fn sub_problem(mut self, index: usize) -> Self {
        self.sub_problem = Some(index);
        self
    }

    pub fn detail(mut self, detail: Value) -> Self {
        self.detail = Some(detail);
        self
    }
}

/// An event before it is sequenced into a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct NewEvent {
    pub kind: EventKind,
    pub payload: EventPayload,
    pub attribution: Option<Attribution>,
}

impl NewEvent {
    pub fn new(kind: EventKind, payload: EventPayload) -> Self {
        Self {
            kind,
            payload,
            attribution: None,
        }
    }

    /// A failure event; attribution follows from the class.
    pub fn failure(kind: EventKind, class: FailureClass, mut payload: EventPayload) -> Self {
        payload.failure_class = Some(class);
        payload.ok = Some(false);
        Self {
            kind,
            payload,
            attribution: Some(class.attribution()),
        }
    }

    pub fn tool_error(error: &ToolError) -> Self {
        let mut payload = EventPayload::tool(&error.tool_name).message(&error.message);
        payload.attempt_count = Some(error.attempt_count);
        Self::failure(EventKind::ToolError, error.class.into(), payload)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    pub kind: EventKind,
    pub payload: EventPayload,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribution: Option<Attribution>,
}

impl PartialEq for TraceEvent {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq
            && self.kind == other.kind
            && self.payload == other.payload
            && self.attribution == other.attribution
    }
}

impl TraceEvent {
    pub fn is_failure(&self) -> bool {
        self.attribution.is_some()
    }

    /// Failures plus unattributed errors such as failed backend calls.
    pub fn is_error(&self) -> bool {
        self.is_failure() || self.payload.ok == Some(false)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TraceError {
    #[error("trace {0} is finalized; events can no longer be appended")]
    Finalized(String),
    #[error("trace {0} is not finalized")]
    NotFinalized(String),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub trace_id: String,
    pub run_id: String,
    pub created_at: DateTime<Utc>,
    pub finalized: bool,
    pub events: Vec<TraceEvent>,
    /// Large outputs keyed by blob_ref. Written next to the JSONL file.
    #[serde(skip)]
    pub sidecars: BTreeMap<String, String>,
}

impl PartialEq for ExecutionTrace {
    fn eq(&self, other: &Self) -> bool {
        self.trace_id == other.trace_id
            && self.run_id == other.run_id
            && self.finalized == other.finalized
            && self.events == other.events
    }
}

impl ExecutionTrace {
    pub fn new(trace_id: impl Into<String>, run_id: impl Into<String>) -> Self {
        Self {
            trace_id: trace_id.into(),
            run_id: run_id.into(),
            created_at: Utc::now(),
            finalized: false,
            events: Vec::new(),
            sidecars: BTreeMap::new(),
        }
    }

    /// Appends with the next sequence number (starting at 1).
    pub fn append(&mut self, event: NewEvent) -> Result<u64, TraceError> {
        if self.finalized {
            return Err(TraceError::Finalized(self.trace_id.clone()));
        }
        let seq = self.events.len() as u64 + 1;
        self.events.push(TraceEvent {
            seq,
            timestamp: Utc::now(),
            kind: event.kind,
            payload: event.payload,
            attribution: event.attribution,
        });
        Ok(seq)
    }

    pub fn finalize(&mut self) {
        self.finalized = true;
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn failures(&self) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(|e| e.is_failure())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FailureCounts {
    pub policy_errors: usize,
    pub tool_errors: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FailureSummary {
    pub n_policy_errors: usize,
    pub n_tool_errors: usize,
    pub per_tool: BTreeMap<String, FailureCounts>,
}

/// Counts failures by attribution, overall and per tool.
pub fn attribute_failures(trace: &ExecutionTrace) -> Result<FailureSummary, TraceError> {
    if !trace.finalized {
        return Err(TraceError::NotFinalized(trace.trace_id.clone()));
    }
    let mut summary = FailureSummary::default();
    for event in trace.failures() {
        let attribution = event.attribution.expect("failures are attributed");
        let bucket = event
            .payload
            .tool
            .as_ref()
            .map(|t| summary.per_tool.entry(t.clone()).or_default());
        match attribution {
            Attribution::PolicyError => {
                summary.n_policy_errors += 1;
                if let Some(b) = bucket {
                    b.policy_errors += 1;
                }
            }
            Attribution::ToolError => {
                summary.n_tool_errors += 1;
                if let Some(b) = bucket {
                    b.tool_errors += 1;
                }
            }
        }
    }
    Ok(summary)
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    trace_id: String,
    run_id: String,
    created_at: DateTime<Utc>,
}

/// One header line plus one line per event, LF-terminated.
pub fn serialize_jsonl(trace: &ExecutionTrace) -> Result<String, TraceError> {
    if !trace.finalized {
        return Err(TraceError::NotFinalized(trace.trace_id.clone()));
    }
    let header = Header {
        format: FORMAT.to_string(),
        trace_id: trace.trace_id.clone(),
        run_id: trace.run_id.clone(),
        created_at: trace.created_at,
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for event in &trace.events {
        out.push_str(&serde_json::to_string(event).expect("event serializes"));
        out.push('\n');
    }
    Ok(out)
}

pub fn deserialize_jsonl(doc: &str) -> Result<ExecutionTrace, TraceError> {
    let mut lines = doc.lines().enumerate();
    let (_, first) = lines.next().ok_or(TraceError::Malformed {
        line: 1,
        message: "empty document".into(),
    })?;
    let header: Header = serde_json::from_str(first).map_err(|e| TraceError::Malformed {
        line: 1,
        message: format!("bad header: {e}"),
    })?;
    if header.format != FORMAT {
        return Err(TraceError::Malformed {
            line: 1,
            message: format!("unsupported format {}", header.format),
        });
    }
    let mut trace = ExecutionTrace::new(header.trace_id, header.run_id);
    trace.created_at = header.created_at;
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let event: TraceEvent = serde_json::from_str(line).map_err(|e| TraceError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        let expected = trace.events.len() as u64 + 1;
        if event.seq != expected {
            return Err(TraceError::Malformed {
                line: line_no,
                message: format!("expected seq {expected}, found {}", event.seq),
            });
        }
        if event.attribution.is_some() != event.payload.failure_class.is_some() {
            return Err(TraceError::Malformed {
                line: line_no,
                message: "attribution and failure class must appear together".into(),
            });
        }
        if let (Some(a), Some(c)) = (event.attribution, event.payload.failure_class) {
            if c.attribution() != a {
                return Err(TraceError::Malformed {
                    line: line_no,
                    message: format!("failure class {c:?} cannot be attributed {a:?}"),
                });
            }
        }
        trace.events.push(event);
    }
    trace.finalize();
    Ok(trace)
}

/// Shared, thread-safe handle to a trace being written by one run.
#[derive(Debug, Clone)]
pub struct TraceRecorder {
    inner: Arc<Mutex<ExecutionTrace>>,
}

impl TraceRecorder {
    pub fn new(trace_id: impl Into<String>, run_id: impl Into<String>) -> Self {
        Self {
            inner: Arc::new(Mutex::new(ExecutionTrace::new(trace_id, run_id))),
        }
    }

    pub fn append(&self, event: NewEvent) -> Result<u64, TraceError> {
        self.inner.lock().unwrap().append(event)
    }

    /// Appends, ignoring the finalized error. Policies call this while they own the trace.
    pub fn record(&self, event: NewEvent) {
        if let Err(e) = self.append(event) {
            tracing::warn!(error = %e, "dropping trace event");
        }
    }

    /// Inline output, or a digest with the content moved to a sidecar.
    pub fn output_payload(&self, value: &Value) -> (Option<Value>, Option<OutputDigest>) {
        let text = match value {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        if text.len() <= INLINE_OUTPUT_LIMIT {
            return (Some(value.clone()), None);
        }
        let sha = hex::encode(Sha256::digest(text.as_bytes()));
        let blob_ref = format!("blobs/{sha}");
        let digest = OutputDigest {
            sha256: sha,
            bytes: text.len(),
            blob_ref: blob_ref.clone(),
        };
        self.inner.lock().unwrap().sidecars.insert(blob_ref, text);
        (None, Some(digest))
    }

    pub fn snapshot(&self) -> ExecutionTrace {
        self.inner.lock().unwrap().clone()
    }

    pub fn finalize(&self) -> ExecutionTrace {
        let mut guard = self.inner.lock().unwrap();
        guard.finalize();
        guard.clone()
    }

    pub fn trace_id(&self) -> String {
        self.inner.lock().unwrap().trace_id.clone()
    }
}
