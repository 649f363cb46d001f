//! A state directory opened for use: store, tool registry and backends together.
//!
//! Both front ends (CLI and HTTP service) go through this type, so they share
//! one implementation of every workflow.

use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::agents::{
    run_agent_with, select_tools, AgentEnv, AgentRun, PolicyConfig, SelectError, SelectRequest,
    SelectionMode, Task,
};
use crate::community::{
    self, CommunityError, Decision, FeedbackRecord, Submission, SubmissionContent,
};
use crate::llm::{BackendRegistry, ScriptEntry, ScriptedBackend};
use crate::reliability::ReliabilityReport;
use crate::reliability::{
    self, find_check, generate_report, RoundError, RoundOutcome, ToolReport,
    DEFAULT_REGRESSION_THRESHOLD,
};
use crate::runtime::{
    Budget, EnvVars, InvokeContext, Observation, ToolBinding, ToolError, ToolRegistry, UnknownTool,
};
use crate::schema::{validate_manifest, ToolDescriptor};
use crate::store::{
    is_safe_id, run_path, trace_path, Batch, FsStorage, Storage, Store, StoreError,
};
use crate::trace::{deserialize_jsonl, serialize_jsonl, ExecutionTrace, TraceRecorder};
use crate::verification::{CaseStatus, TestCase, Verdict};

/// Backend id a per-request mock script is registered under.
pub const MOCK_BACKEND: &str = "mock";

#[derive(Debug, thiserror::Error)]
pub enum WorkspaceError {
    #[error("{0} is not an initialized state directory (run `opentools init`)")]
    NotInitialized(String),
    #[error("invalid request: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("{0} not found")]
    NotFound(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Community(#[from] CommunityError),
    #[error(transparent)]
    Round(#[from] RoundError),
    #[error(transparent)]
    Select(#[from] SelectError),
}

impl WorkspaceError {
    fn invalid(message: impl Into<String>) -> Self {
        WorkspaceError::Invalid(vec![message.into()])
    }
}

/// Optional tool retrieval before an agent run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSpec {
    pub k: usize,
    #[serde(default)]
    pub mode: SelectionMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentRequest {
    pub query: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub files: Vec<String>,
    #[serde(alias = "policy")]
    pub policy_config: PolicyConfig,
    /// Toolbox; defaults to every registered tool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionSpec>,
    /// Scripted replies served as backend [`MOCK_BACKEND`] for this run only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_script: Option<Vec<ScriptEntry>>,
}

impl AgentRequest {
    pub fn new(query: impl Into<String>, policy_config: PolicyConfig) -> Self {
        Self {
            query: query.into(),
            files: Vec::new(),
            policy_config,
            tool_names: None,
            selection: None,
            mock_script: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackReceipt {
    pub submission: Submission,
    /// A draft test case when the feedback points at a failed check or a trace with a tool call.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draft_case: Option<TestCase>,
}

pub struct Workspace {
    store: Store,
    registry: ToolRegistry,
    ctx: InvokeContext,
    budget: Budget,
    next_run: Mutex<u64>,
}

impl std::fmt::Debug for Workspace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Workspace")
            .field("tools", &self.registry.names())
            .field("backends", &self.ctx.backends)
            .finish()
    }
}

/// Creates the layout and installs the seed toolbox unless tools already exist.
/// Returns whether anything was written.
pub fn init(storage: Arc<dyn Storage>) -> Result<bool, StoreError> {
    let store = Store::open(storage)?;
    if !store.list("tools")?.is_empty() {
        return Ok(false);
    }
    crate::seed::install(&store)?;
    Ok(true)
}

pub fn init_dir(dir: &Path) -> Result<bool, StoreError> {
    std::fs::create_dir_all(dir)?;
    init(Arc::new(FsStorage::new(dir)))
}

fn load_registry(store: &Store) -> Result<ToolRegistry, StoreError> {
    let registry = ToolRegistry::new();
    for file in store.list("tools")? {
        let Some(name) = file.strip_suffix(".json") else {
            continue;
        };
        let path = format!("tools/{file}");
        let raw = store.read_string(&path)?.unwrap_or_default();
        let descriptor =
            validate_manifest(raw.as_bytes()).map_err(|e| StoreError::corrupt(&path, e))?;
        if descriptor.name != name {
            return Err(StoreError::corrupt(
                &path,
                format!("manifest names tool {:?}", descriptor.name),
            ));
        }
        let binding_path = format!("bindings/{file}");
        let binding: ToolBinding = store
            .read_json(&binding_path)?
            .ok_or_else(|| StoreError::corrupt(&binding_path, "missing binding"))?;
        registry
            .register(descriptor, binding)
            .map_err(|e| StoreError::corrupt(&path, e))?;
    }
    Ok(registry)
}

fn id_number(file: &str, prefix: &str) -> Option<u64> {
    file.strip_prefix(prefix)?
        .strip_suffix(".json")?
        .parse()
        .ok()
}

impl Workspace {
    /// Opens initialized state, replaying any interrupted commit first.
    pub fn open(
        storage: Arc<dyn Storage>,
        backends: BackendRegistry,
        env: EnvVars,
    ) -> Result<Self, WorkspaceError> {
        let store = Store::open(storage)?;
        if store.list("tools")?.is_empty() {
            return Err(WorkspaceError::NotInitialized("state".into()));
        }
        let registry = load_registry(&store)?;
        let last_run = store
            .list("state/runs")?
            .iter()
            .filter_map(|f| id_number(f, "run-"))
            .max()
            .unwrap_or(0);
        let mut ctx = InvokeContext::new(backends, env);
        if ctx.backends.get("default").is_some() {
            ctx.default_backend = Some("default".into());
        }
        Ok(Self {
            store,
            registry,
            ctx,
            budget: Budget::default(),
            next_run: Mutex::new(last_run + 1),
        })
    }

    pub fn open_dir(
        dir: &Path,
        backends: BackendRegistry,
        env: EnvVars,
    ) -> Result<Self, WorkspaceError> {
        if !dir.join("tools").is_dir() {
            return Err(WorkspaceError::NotInitialized(dir.display().to_string()));
        }
        Self::open(Arc::new(FsStorage::new(dir)), backends, env)
    }

    pub fn with_budget(mut self, budget: Budget) -> Self {
        self.budget = budget;
        self
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn registry(&self) -> &ToolRegistry {
        &self.registry
    }

    pub fn context(&self) -> &InvokeContext {
        &self.ctx
    }

    pub fn budget(&self) -> Budget {
        self.budget
    }

    pub fn tools(&self) -> Vec<ToolDescriptor> {
        self.registry.descriptors()
    }

    pub fn tool(&self, name: &str) -> Option<ToolDescriptor> {
        self.registry.descriptor(name)
    }

    pub fn invoke(
        &self,
        name: &str,
        args: &Map<String, Value>,
    ) -> Result<Result<Observation, ToolError>, UnknownTool> {
        self.registry.invoke(&self.ctx, name, args, &self.budget)
    }

    pub fn run_round(&self, parallelism: usize) -> Result<RoundOutcome, WorkspaceError> {
        self.run_round_with(parallelism, DEFAULT_REGRESSION_THRESHOLD)
    }

    pub fn run_round_with(
        &self,
        parallelism: usize,
        threshold: f64,
    ) -> Result<RoundOutcome, WorkspaceError> {
        if parallelism == 0 {
            return Err(WorkspaceError::invalid("parallelism must be at least 1"));
        }
        Ok(reliability::run_round(
            &self.registry,
            &self.ctx,
            &self.store,
            parallelism,
            threshold,
        )?)
    }

    pub fn round(
        &self,
        round_id: u64,
    ) -> Result<Option<reliability::EvaluationRound>, WorkspaceError> {
        Ok(reliability::load_round(&self.store, round_id)?)
    }

    pub fn report(&self) -> Result<ReliabilityReport, WorkspaceError> {
        let profiles = reliability::load_profiles(&self.store)?;
        let round = reliability::latest_round(&self.store)?;
        Ok(generate_report(&self.tools(), &profiles, round.as_ref()))
    }

    pub fn tool_report(&self, name: &str) -> Result<ToolReport, WorkspaceError> {
        self.report()?
            .tool(name)
            .cloned()
            .ok_or_else(|| WorkspaceError::NotFound(format!("tool {name:?}")))
    }

    pub fn submit(
        &self,
        content: SubmissionContent,
        submitter: &str,
    ) -> Result<Submission, WorkspaceError> {
        Ok(community::submit(
            &self.store,
            &self.registry,
            content,
            submitter,
        )?)
    }

    pub fn submissions(
        &self,
        status: Option<CaseStatus>,
    ) -> Result<Vec<Submission>, WorkspaceError> {
        Ok(community::list_submissions(&self.store, status)?)
    }

    pub fn review(
        &self,
        id: &str,
        decision: Decision,
        reviewer: &str,
        reason: &str,
    ) -> Result<Submission, WorkspaceError> {
        Ok(community::review(
            &self.store,
            &self.registry,
            id,
            decision,
            reviewer,
            reason,
        )?)
    }

    /// Queues feedback; negative feedback on a failure also yields a draft test case.
    pub fn feedback(
        &self,
        record: FeedbackRecord,
        submitter: &str,
    ) -> Result<FeedbackReceipt, WorkspaceError> {
        let submission = self.submit(SubmissionContent::Feedback(record.clone()), submitter)?;
        let draft_case = if record.rating == community::Rating::Negative
            && self.is_failure_target(&record.target_id)?
        {
            community::promote_feedback_to_case(
                &self.store,
                &record,
                &format!("fb-{}", submission.id),
            )
            .ok()
        } else {
            None
        };
        Ok(FeedbackReceipt {
            submission,
            draft_case,
        })
    }

    fn is_failure_target(&self, id: &str) -> Result<bool, WorkspaceError> {
        if let Some(check) = find_check(&self.store, id)? {
            return Ok(check.result.verdict != Verdict::Pass);
        }
        Ok(match self.trace(id) {
            Ok(trace) => trace.failures().next().is_some(),
            Err(_) => false,
        })
    }

    pub fn run(&self, run_id: &str) -> Result<AgentRun, WorkspaceError> {
        if !is_safe_id(run_id) {
            return Err(WorkspaceError::NotFound(format!("run {run_id:?}")));
        }
        self.store
            .read_json(&run_path(run_id))?
            .ok_or_else(|| WorkspaceError::NotFound(format!("run {run_id:?}")))
    }

    pub fn trace_text(&self, trace_id: &str) -> Result<String, WorkspaceError> {
        if !is_safe_id(trace_id) {
            return Err(WorkspaceError::NotFound(format!("trace {trace_id:?}")));
        }
        self.store
            .read_string(&trace_path(trace_id))?
            .ok_or_else(|| WorkspaceError::NotFound(format!("trace {trace_id:?}")))
    }

    pub fn trace(&self, trace_id: &str) -> Result<ExecutionTrace, WorkspaceError> {
        let text = self.trace_text(trace_id)?;
        deserialize_jsonl(&text).map_err(|e| StoreError::corrupt(&trace_path(trace_id), e).into())
    }

    fn resolve_toolbox(
        &self,
        names: Option<&[String]>,
    ) -> Result<Vec<ToolDescriptor>, WorkspaceError> {
        let Some(names) = names else {
            return Ok(self.tools());
        };
        let mut out = Vec::with_capacity(names.len());
        let mut problems = Vec::new();
        for name in names {
            match self.registry.descriptor(name) {
                Some(d) if !out.iter().any(|o: &ToolDescriptor| o.name == d.name) => out.push(d),
                Some(_) => problems.push(format!("tool_names: {name:?} is listed twice")),
                None => problems.push(format!("tool_names: unknown tool {name:?}")),
            }
        }
        if problems.is_empty() {
            Ok(out)
        } else {
            Err(WorkspaceError::Invalid(problems))
        }
    }

    /// Runs an agent and persists the run record and its trace in one commit.
    /// A backend failure is not an error here: the run comes back with status `failed`.
    pub fn run_agent(&self, request: &AgentRequest) -> Result<AgentRun, WorkspaceError> {
        let config = &request.policy_config;
        config.validate().map_err(WorkspaceError::invalid)?;
        if request.query.trim().is_empty() {
            return Err(WorkspaceError::invalid("query must not be empty"));
        }
        let candidates = self.resolve_toolbox(request.tool_names.as_deref())?;

        let mut ctx = self.ctx.clone();
        if let Some(script) = &request.mock_script {
            ctx.backends
                .insert(MOCK_BACKEND, Arc::new(ScriptedBackend::new(script.clone())));
        }
        if ctx.backends.get(&config.backend_id).is_none() {
            return Err(WorkspaceError::invalid(format!(
                "policy_config.backend_id: no backend named {:?} is configured",
                config.backend_id
            )));
        }

        let (run_id, trace_id) = {
            let mut next = self.next_run.lock().unwrap();
            let n = *next;
            *next += 1;
            (format!("run-{n:06}"), format!("trace-{n:06}"))
        };
        let rec = TraceRecorder::new(&trace_id, &run_id);
        let toolbox = match (&request.selection, config.kind.uses_tools()) {
            (Some(spec), true) => {
                let selection = select_tools(
                    &candidates,
                    &ctx,
                    Some(&rec),
                    &SelectRequest {
                        query: &request.query,
                        k: spec.k,
                        mode: spec.mode,
                        reliability_routing: config.reliability_routing,
                        backend_id: &config.backend_id,
                    },
                )?;
                selection.tools
            }
            _ => candidates.into_iter().map(|d| d.name).collect(),
        };

        let task = Task {
            query: request.query.clone(),
            files: request.files.clone(),
            toolbox,
        };
        let env = AgentEnv {
            registry: &self.registry,
            ctx: &ctx,
            budget: self.budget,
        };
        let (run, trace) = run_agent_with(env, &task, config, &run_id, rec);
        self.persist(&run, &trace)?;
        Ok(run)
    }

    fn persist(&self, run: &AgentRun, trace: &ExecutionTrace) -> Result<(), WorkspaceError> {
        let mut batch = Batch::new();
        let jsonl = serialize_jsonl(trace)
            .map_err(|e| StoreError::corrupt(&trace_path(&trace.trace_id), e))?;
        batch.write(trace_path(&trace.trace_id), jsonl);
        for (blob_ref, text) in &trace.sidecars {
            batch.write(format!("state/traces/{blob_ref}"), text.clone());
        }
        batch.write(run_path(&run.run_id), crate::store::to_pretty(run));
        self.store.commit(&batch)?;
        Ok(())
    }
}
