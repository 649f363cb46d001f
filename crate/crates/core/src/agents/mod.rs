//! Agent policies: (query, toolbox, policy) -> (answer, trace).

mod memory;
mod multi;
mod planner;
mod prompting;
mod react;
pub mod select;

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::llm::{project_tool_declarations, BackendError, ChatMessage, ChatRequest, ChatResponse};
use crate::runtime::{Budget, InvokeContext, Observation, ToolError, ToolRegistry};
use crate::schema::{validate_arguments, ToolDescriptor};
use crate::templates::Templates;
use crate::trace::{
    EventKind, EventPayload, ExecutionTrace, FailureClass, NewEvent, TraceRecorder,
};

pub use memory::{MemoryEntry, SharedMemory};
pub use select::{select_tools, SelectError, SelectRequest, Selection, SelectionMode};

pub const FINAL_ANSWER: &str = "FINAL ANSWER:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    PromptingZeroShot,
    PromptingCot,
    React,
    PlannerExecutor,
    MultiAgent,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::PromptingZeroShot,
        PolicyKind::PromptingCot,
        PolicyKind::React,
        PolicyKind::PlannerExecutor,
        PolicyKind::MultiAgent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::PromptingZeroShot => "prompting_zero_shot",
            PolicyKind::PromptingCot => "prompting_cot",
            PolicyKind::React => "react",
            PolicyKind::PlannerExecutor => "planner_executor",
            PolicyKind::MultiAgent => "multi_agent",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    pub fn uses_tools(self) -> bool {
        !matches!(
            self,
            PolicyKind::PromptingZeroShot | PolicyKind::PromptingCot
        )
    }

    fn default_max_steps(self) -> u32 {
        match self {
            PolicyKind::PromptingZeroShot | PolicyKind::PromptingCot => 1,
            _ => 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifierMode {
    /// Structured yes/no call to the backend.
    #[default]
    Backend,
    /// Accepts any non-empty result; no backend call.
    RuleBased,
}

pub const DEFAULT_SUB_PROBLEM_STEPS: u32 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// ReAct iterations, planner iterations, or sub-problems processed (multi_agent).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u32>,
    #[serde(default = "default_backend")]
    pub backend_id: String,
    #[serde(default)]
    pub reliability_routing: bool,
    /// Template overrides by template id.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub templates: BTreeMap<String, String>,
    /// Generator steps per sub-problem (multi_agent).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sub_problem_steps: Option<u32>,
    #[serde(default)]
    pub verifier: VerifierMode,
}

fn default_backend() -> String {
    "default".into()
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            max_steps: None,
            backend_id: default_backend(),
            reliability_routing: false,
            templates: BTreeMap::new(),
            sub_problem_steps: None,
            verifier: VerifierMode::Backend,
        }
    }

    pub fn with_backend(mut self, id: impl Into<String>) -> Self {
        self.backend_id = id.into();
        self
    }

    pub fn with_max_steps(mut self, n: u32) -> Self {
        self.max_steps = Some(n);
        self
    }

    pub fn steps(&self) -> u32 {
        self.max_steps
            .unwrap_or_else(|| self.kind.default_max_steps())
    }

    pub fn sub_steps(&self) -> u32 {
        self.sub_problem_steps.unwrap_or(DEFAULT_SUB_PROBLEM_STEPS)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_steps == Some(0) {
            return Err("max_steps must be at least 1".into());
        }
        if self.sub_problem_steps == Some(0) {
            return Err("sub_problem_steps must be at least 1".into());
        }
        for id in self.templates.keys() {
            if crate::templates::bundled(id).is_none() {
                return Err(format!("unknown template id {id:?}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    StepBudgetExhausted,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRun {
    pub run_id: String,
    pub query: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub files: Vec<String>,
    pub toolbox: Vec<String>,
    pub policy: PolicyConfig,
    pub answer: String,
    pub trace_ref: String,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory: Option<Vec<MemoryEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
}

/// What a policy needs from the outside world.
#[derive(Clone, Copy)]
pub struct AgentEnv<'a> {
    pub registry: &'a ToolRegistry,
    pub ctx: &'a InvokeContext,
    pub budget: Budget,
}

impl<'a> AgentEnv<'a> {
    pub fn new(registry: &'a ToolRegistry, ctx: &'a InvokeContext) -> Self {
        Self {
            registry,
            ctx,
            budget: Budget::default(),
        }
    }
}

/// One agent task.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Task {
    pub query: String,
    pub files: Vec<String>,
    pub toolbox: Vec<String>,
}

impl Task {
    pub fn new(query: impl Into<String>, toolbox: Vec<String>) -> Self {
        Self {
            query: query.into(),
            files: Vec::new(),
            toolbox,
        }
    }

    fn prompt(&self) -> String {
        if self.files.is_empty() {
            self.query.clone()
        } else {
            format!(
                "{}\n\nAttached files: {}",
                self.query,
                self.files.join(", ")
            )
        }
    }
}

/// Result of one policy execution, before it is wrapped into an [`AgentRun`].
#[derive(Debug, Clone, PartialEq, Default)]
pub(crate) struct PolicyOutcome {
    pub answer: String,
    pub status: Option<RunStatus>,
    pub memory: Option<Vec<MemoryEntry>>,
    pub summary: Option<String>,
    pub error: Option<String>,
}

impl PolicyOutcome {
    fn completed(answer: String) -> Self {
        Self {
            answer,
            status: Some(RunStatus::Completed),
            ..Default::default()
        }
    }

    fn failed(error: &BackendError) -> Self {
        Self {
            status: Some(RunStatus::Failed),
            error: Some(error.to_string()),
            ..Default::default()
        }
    }
}

/// Text after the last `FINAL ANSWER:` sentinel, else the whole content, trimmed.
pub fn extract_final_answer(content: &str) -> String {
    match content.rfind(FINAL_ANSWER) {
        Some(i) => content[i + FINAL_ANSWER.len()..]
            .lines()
            .next()
            .unwrap_or_default()
            .trim()
            .to_string(),
        None => content.trim().to_string(),
    }
}

/// First balanced `{...}` JSON object inside free text.
pub(crate) fn parse_json_object(text: &str) -> Option<Map<String, Value>> {
    let trimmed = text.trim();
    if let Ok(Value::Object(m)) = serde_json::from_str(trimmed) {
        return Some(m);
    }
    let bytes = text.as_bytes();
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_str {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return match serde_json::from_str(&text[start..=i]) {
                        Ok(Value::Object(m)) => Some(m),
                        _ => None,
                    };
                }
            }
            _ => {}
        }
    }
    None
}

/// Why a tool call made by a policy did not produce an observation.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum CallFailure {
    UnknownTool(String),
    Tool(ToolError),
}

impl CallFailure {
    /// The observation text fed back to the policy.
    pub fn feedback(&self) -> String {
        match self {
            CallFailure::UnknownTool(name) => format!(
                "ERROR (unknown_tool): \"{name}\" is not an available tool. Choose one of the listed tools."
            ),
            CallFailure::Tool(e) => format!("ERROR ({}): {}", e.class, e.message),
        }
    }

    pub fn is_validation(&self) -> bool {
        matches!(self, CallFailure::Tool(e) if e.class == crate::runtime::ErrorClass::Validation)
    }
}

/// Shared machinery for one run: traced backend calls and traced tool invocations.
pub(crate) struct Session<'a> {
    pub env: AgentEnv<'a>,
    pub rec: TraceRecorder,
    pub config: &'a PolicyConfig,
    pub templates: Templates,
    pub task: &'a Task,
    /// Descriptors of the toolbox, in toolbox order.
    pub tools: Vec<ToolDescriptor>,
}

impl<'a> Session<'a> {
    pub fn tool_listing(&self) -> String {
        if self.tools.is_empty() {
            return "(none)".into();
        }
        self.tools
            .iter()
            .map(|d| format!("- {}: {}", d.name, d.description))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn step(&self, phase: &str, detail: Value) {
        self.rec.record(NewEvent::new(
            EventKind::PolicyStep,
            EventPayload::phase(phase).detail(detail),
        ));
    }

    /// One backend call, recorded as a backend_call event either way.
    pub fn chat(
        &self,
        phase: &str,
        messages: Vec<ChatMessage>,
        with_tools: bool,
    ) -> Result<ChatResponse, BackendError> {
        let mut request = ChatRequest::new(&self.config.backend_id, messages);
        if with_tools {
            request = request.with_tools(project_tool_declarations(&self.tools));
        }
        let result = self.env.ctx.backends.complete(&request);
        let mut payload = EventPayload::phase(phase);
        match &result {
            Ok(resp) => {
                payload.ok = Some(true);
                let mut detail = json!({
                    "content": resp.content,
                    "usage": resp.usage,
                });
                if let Some(call) = &resp.tool_call {
                    detail["tool_call"] =
                        json!({"name": call.tool_name, "arguments": call.arguments});
                }
                payload.detail = Some(detail);
            }
            Err(e) => {
                payload.ok = Some(false);
                payload.message = Some(e.to_string());
            }
        }
        self.rec
            .record(NewEvent::new(EventKind::BackendCall, payload));
        result
    }

    /// A corrective re-prompt after an unparseable structured reply.
    pub fn chat_with_correction<T>(
        &self,
        phase: &str,
        mut messages: Vec<ChatMessage>,
        instruction: &str,
        parse: impl Fn(&str) -> Option<T>,
    ) -> Result<Option<T>, BackendError> {
        let first = self.chat(phase, messages.clone(), false)?;
        if let Some(v) = parse(&first.content) {
            return Ok(Some(v));
        }
        messages.push(ChatMessage::assistant(first.content));
        messages.push(ChatMessage::user(format!(
            "Your previous reply could not be parsed. {instruction}"
        )));
        let second = self.chat(phase, messages, false)?;
        if let Some(v) = parse(&second.content) {
            return Ok(Some(v));
        }
        self.rec.record(NewEvent::failure(
            EventKind::PolicyStep,
            FailureClass::MalformedOutput,
            EventPayload::phase(phase).message(format!(
                "unparseable {phase} output after one corrective re-prompt: {:?}",
                second.content
            )),
        ));
        Ok(None)
    }

    /// Routes a policy's tool call through the runtime with a full
    /// validation / invocation / outcome record.
    pub fn invoke(
        &self,
        tool: &str,
        args: &Map<String, Value>,
        sub_problem: Option<usize>,
    ) -> Result<Observation, CallFailure> {
        let with_sub = |mut p: EventPayload| {
            p.sub_problem = sub_problem;
            p
        };
        let Some(descriptor) = self.tools.iter().find(|d| d.name == tool) else {
            let mut payload = with_sub(EventPayload::tool(tool));
            payload.arguments = Some(args.clone());
            payload.message = Some(format!("\"{tool}\" is not in the toolbox"));
            self.rec.record(NewEvent::failure(
                EventKind::ToolError,
                FailureClass::UnknownTool,
                payload,
            ));
            return Err(CallFailure::UnknownTool(tool.to_string()));
        };

        let mut validation = with_sub(EventPayload::tool(tool));
        validation.arguments = Some(args.clone());
        match validate_arguments(descriptor, args) {
            Ok(()) => validation.ok = Some(true),
            Err(f) => {
                validation.ok = Some(false);
                validation.message = Some(f.to_string());
            }
        }
        self.rec
            .record(NewEvent::new(EventKind::ToolValidation, validation));

        let mut invocation = with_sub(EventPayload::tool(tool));
        invocation.arguments = Some(args.clone());
        self.rec
            .record(NewEvent::new(EventKind::ToolInvocation, invocation));

        let outcome = match self
            .env
            .registry
            .invoke(self.env.ctx, tool, args, &self.env.budget)
        {
            Ok(outcome) => outcome,
            // The registry lost the tool after the toolbox was resolved.
            Err(unknown) => Err(ToolError {
                class: crate::runtime::ErrorClass::Unavailable,
                message: unknown.to_string(),
                tool_name: tool.to_string(),
                attempt_count: 0,
            }),
        };
        match outcome {
            Ok(obs) => {
                let mut payload = with_sub(EventPayload::tool(tool)).ok(true);
                let (inline, digest) = self.rec.output_payload(&obs.output_value);
                payload.output = inline;
                payload.output_digest = digest;
                payload.attempt_count = Some(obs.attempt_count);
                self.rec
                    .record(NewEvent::new(EventKind::ToolResult, payload));
                Ok(obs)
            }
            Err(err) => {
                let mut event = NewEvent::tool_error(&err);
                event.payload.arguments = Some(args.clone());
                event.payload.sub_problem = sub_problem;
                self.rec.record(event);
                Err(CallFailure::Tool(err))
            }
        }
    }
}

/// Runs one policy end to end. The returned trace is finalized.
pub fn run_agent(
    env: AgentEnv<'_>,
    task: &Task,
    config: &PolicyConfig,
    run_id: &str,
    trace_id: &str,
) -> (AgentRun, ExecutionTrace) {
    run_agent_with(
        env,
        task,
        config,
        run_id,
        TraceRecorder::new(trace_id, run_id),
    )
}

/// Like [`run_agent`], continuing a recorder that may already hold events
/// (for example a tool-selection step).
pub fn run_agent_with(
    env: AgentEnv<'_>,
    task: &Task,
    config: &PolicyConfig,
    run_id: &str,
    rec: TraceRecorder,
) -> (AgentRun, ExecutionTrace) {
    let started_at = Utc::now();
    let toolbox: Vec<String> = if config.kind.uses_tools() {
        task.toolbox.clone()
    } else {
        Vec::new()
    };
    let tools: Vec<ToolDescriptor> = toolbox
        .iter()
        .filter_map(|n| env.registry.descriptor(n))
        .collect();
    let session = Session {
        env,
        rec: rec.clone(),
        config,
        templates: Templates::new(config.templates.clone()),
        task,
        tools,
    };
    session.step(
        "start",
        json!({"policy": config.kind.as_str(), "toolbox": toolbox, "max_steps": config.steps()}),
    );

    let outcome = match config.validate() {
        Err(e) => PolicyOutcome {
            status: Some(RunStatus::Failed),
            error: Some(e),
            ..Default::default()
        },
        Ok(()) => match config.kind {
            PolicyKind::PromptingZeroShot | PolicyKind::PromptingCot => prompting::run(&session),
            PolicyKind::React => react::run(&session),
            PolicyKind::PlannerExecutor => planner::run(&session),
            PolicyKind::MultiAgent => multi::run(&session),
        },
    };
    let status = outcome.status.unwrap_or(RunStatus::Completed);
    if status != RunStatus::Failed {
        rec.record(NewEvent::new(
            EventKind::FinalAnswer,
            EventPayload::default()
                .message(&outcome.answer)
                .detail(json!({"status": status})),
        ));
    }
    let trace = rec.finalize();
    let run = AgentRun {
        run_id: run_id.to_string(),
        query: task.query.clone(),
        files: task.files.clone(),
        toolbox,
        policy: config.clone(),
        answer: outcome.answer,
        trace_ref: trace.trace_id.clone(),
        status,
        memory: outcome.memory,
        summary: outcome.summary,
        error: outcome.error,
        started_at,
        finished_at: Utc::now(),
    };
    (run, trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn final_answer_extraction() {
        assert_eq!(extract_final_answer("FINAL ANSWER: 42"), "42");
        assert_eq!(
            extract_final_answer("think...\nFINAL ANSWER:  168 \n"),
            "168"
        );
        assert_eq!(extract_final_answer("just this\n"), "just this");
        assert_eq!(
            extract_final_answer("FINAL ANSWER: 1\nFINAL ANSWER: 2"),
            "2"
        );
    }

    #[test]
    fn json_object_in_prose() {
        let m = parse_json_object("Sure: {\"tool\": \"calculator\", \"sub_goal\": \"a {b}\"} done")
            .unwrap();
        assert_eq!(m["tool"], "calculator");
        assert!(parse_json_object("no json").is_none());
        assert!(parse_json_object("{broken").is_none());
    }

    #[test]
    fn policy_config_wire() {
        let c: PolicyConfig =
            serde_json::from_value(json!({"kind": "react", "backend_id": "mock"})).unwrap();
        assert_eq!((c.kind, c.steps()), (PolicyKind::React, 10));
        assert!(serde_json::from_value::<PolicyConfig>(json!({"kind": "tree_search"})).is_err());
        assert!(PolicyConfig::new(PolicyKind::React)
            .with_max_steps(0)
            .validate()
            .is_err());
    }
}
