//! Tool registry and execution manager.
//!
//! [`ToolRegistry::invoke`] validates arguments, runs the tool's binding with
//! timeout and retry, classifies failures, and checks the output contract.
//! Each call ends in exactly one of [`Observation`] or [`ToolError`].

mod builtins;
pub mod calc;
mod http;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{mpsc, Arc, OnceLock, RwLock};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::llm::{BackendError, BackendRegistry, ChatMessage, ChatRequest, Decoding};
use crate::schema::{validate_arguments, AccuracySummary, Category, OutputKind, ToolDescriptor};

pub use http::{ApiBinding, HttpMethod};

pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;
pub const DEFAULT_MAX_RETRIES: u32 = 2;

/// Signature of a program-binding function.
pub type ProgramFn = Arc<dyn Fn(&Map<String, Value>) -> Result<RawOutput, String> + Send + Sync>;

/// What a binding hands back before contract checking.
#[derive(Debug, Clone, PartialEq)]
pub enum RawOutput {
    Text(String),
    Json(Value),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramBinding {
    /// Name of a registered program function.
    pub function: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBinding {
    /// User-message template with `{argument}` placeholders.
    pub template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    /// Falls back to the caller's default backend when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_id: Option<String>,
    #[serde(default)]
    pub decoding: Decoding,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_retries: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ToolBinding {
    Program(ProgramBinding),
    Api(ApiBinding),
    Prompt(PromptBinding),
}

impl ToolBinding {
    pub fn program(function: impl Into<String>) -> Self {
        ToolBinding::Program(ProgramBinding {
            function: function.into(),
        })
    }

    pub fn category(&self) -> Category {
        match self {
            ToolBinding::Program(_) => Category::Program,
            ToolBinding::Api(_) => Category::Api,
            ToolBinding::Prompt(_) => Category::Prompting,
        }
    }

    fn limits(&self) -> (Option<u64>, Option<u32>) {
        match self {
            ToolBinding::Program(_) => (None, None),
            ToolBinding::Api(a) => (a.timeout_ms, a.max_retries),
            ToolBinding::Prompt(p) => (p.timeout_ms, p.max_retries),
        }
    }
}

/// Per-call limits. Unset fields fall back to the binding, then to the defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Budget {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_retries: Option<u32>,
}

impl Budget {
    pub fn new(timeout_ms: u64, max_retries: u32) -> Self {
        Self {
            timeout_ms: Some(timeout_ms),
            max_retries: Some(max_retries),
        }
    }
}

/// Exponential backoff with symmetric jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base_ms: u64,
    pub factor: f64,
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base_ms: 250,
            factor: 2.0,
            jitter: 0.2,
        }
    }
}

impl RetryPolicy {
    /// No waiting between attempts.
    pub fn immediate() -> Self {
        Self {
            base_ms: 0,
            factor: 1.0,
            jitter: 0.0,
        }
    }

    /// Delay before retry number `retry` (1-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let nominal = self.base_ms as f64 * self.factor.powi(retry.saturating_sub(1) as i32);
        let scale = if self.jitter > 0.0 {
            1.0 + rand::rng().random_range(-self.jitter..=self.jitter)
        } else {
            1.0
        };
        Duration::from_secs_f64((nominal * scale).max(0.0) / 1000.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    Validation,
    Execution,
    Timeout,
    RateLimited,
    Unavailable,
    ContractViolation,
}

impl ErrorClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::Validation => "validation",
            ErrorClass::Execution => "execution",
            ErrorClass::Timeout => "timeout",
            ErrorClass::RateLimited => "rate_limited",
            ErrorClass::Unavailable => "unavailable",
            ErrorClass::ContractViolation => "contract_violation",
        }
    }

    pub fn is_retryable(self) -> bool {
        matches!(
            self,
            ErrorClass::Timeout | ErrorClass::RateLimited | ErrorClass::Unavailable
        )
    }
}

impl fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("{tool_name}: {class} error after {attempt_count} attempt(s): {message}")]
pub struct ToolError {
    pub class: ErrorClass,
    pub message: String,
    pub tool_name: String,
    pub attempt_count: u32,
}

/// Successful tool result handed back to a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub tool_name: String,
    pub arguments: Map<String, Value>,
    pub output_kind: OutputKind,
    /// text and file-reference are strings, number is a number, json-object an object.
    pub output_value: Value,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

impl Observation {
    /// Textual form used by checks and prompts.
    pub fn text(&self) -> String {
        render_text(&self.output_value)
    }
}

pub(crate) fn render_text(value: &Value) -> String {
    match value {
        Value::String(s) => s.clone(),
        Value::Number(n) => match n.as_f64() {
            Some(x) if n.is_f64() => calc::format_number(x),
            _ => n.to_string(),
        },
        other => other.to_string(),
    }
}

pub type InvokeOutcome = Result<Observation, ToolError>;

/// Routing failure: the caller asked for a tool that is not registered.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown tool \"{0}\"")]
pub struct UnknownTool(pub String);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegistryError {
    #[error("a tool named \"{0}\" is already registered")]
    DuplicateName(String),
    #[error("tool \"{name}\" has category {category} but a {binding} binding")]
    BindingMismatch {
        name: String,
        category: Category,
        binding: Category,
    },
    #[error("tool \"{name}\" binds unknown program function \"{function}\"")]
    UnknownFunction { name: String, function: String },
    #[error("unknown tool \"{0}\"")]
    UnknownTool(String),
}

/// Environment lookups for `${VAR}` placeholders: explicit overrides first,
/// then (optionally) the process environment.
#[derive(Debug, Clone, Default)]
pub struct EnvVars {
    overrides: BTreeMap<String, String>,
    inherit: bool,
}

impl EnvVars {
    pub fn process() -> Self {
        Self {
            overrides: BTreeMap::new(),
            inherit: true,
        }
    }

    pub fn isolated() -> Self {
        Self::default()
    }

    pub fn set(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.overrides.insert(key.into(), value.into());
        self
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.overrides.get(key).cloned().or_else(|| {
            if self.inherit {
                std::env::var(key).ok()
            } else {
                None
            }
        })
    }
}

/// Everything an invocation needs beyond the registry itself.
#[derive(Debug, Clone, Default)]
pub struct InvokeContext {
    pub backends: BackendRegistry,
    pub env: EnvVars,
    /// Backend used by prompt bindings that do not name one.
    pub default_backend: Option<String>,
}

impl InvokeContext {
    pub fn new(backends: BackendRegistry, env: EnvVars) -> Self {
        Self {
            backends,
            env,
            default_backend: None,
        }
    }

    pub fn with_default_backend(mut self, id: impl Into<String>) -> Self {
        self.default_backend = Some(id.into());
        self
    }
}

#[derive(Debug, Clone)]
pub struct RegistryEntry {
    pub descriptor: ToolDescriptor,
    pub binding: ToolBinding,
}

/// Registered tools. Lookups and invocations run concurrently; registration takes
/// the writer lock.
pub struct ToolRegistry {
    entries: RwLock<BTreeMap<String, Arc<RegistryEntry>>>,
    functions: RwLock<BTreeMap<String, ProgramFn>>,
    retry: RetryPolicy,
    // Built lazily: blocking clients cannot be constructed inside an async runtime.
    http: OnceLock<reqwest::blocking::Client>,
}

impl Default for ToolRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for ToolRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ToolRegistry")
            .field("tools", &self.names())
            .field("retry", &self.retry)
            .finish()
    }
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self {
            entries: RwLock::new(BTreeMap::new()),
            functions: RwLock::new(builtins::builtin_functions()),
            retry: RetryPolicy::default(),
            http: OnceLock::new(),
        }
    }

    pub fn with_retry_policy(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        self.retry
    }

    /// Adds a program function that program bindings can reference.
    pub fn add_function(&self, name: impl Into<String>, f: ProgramFn) {
        self.functions.write().unwrap().insert(name.into(), f);
    }

    pub fn register(
        &self,
        descriptor: ToolDescriptor,
        binding: ToolBinding,
    ) -> Result<(), RegistryError> {
        if binding.category() != descriptor.category {
            return Err(RegistryError::BindingMismatch {
                name: descriptor.name,
                category: descriptor.category,
                binding: binding.category(),
            });
        }
        if let ToolBinding::Program(p) = &binding {
            if !self.functions.read().unwrap().contains_key(&p.function) {
                return Err(RegistryError::UnknownFunction {
                    name: descriptor.name,
                    function: p.function.clone(),
                });
            }
        }
        let mut entries = self.entries.write().unwrap();
        if entries.contains_key(&descriptor.name) {
            return Err(RegistryError::DuplicateName(descriptor.name));
        }
        entries.insert(
            descriptor.name.clone(),
            Arc::new(RegistryEntry {
                descriptor,
                binding,
            }),
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.read().unwrap().keys().cloned().collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.read().unwrap().contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Option<Arc<RegistryEntry>> {
        self.entries.read().unwrap().get(name).cloned()
    }

    pub fn descriptor(&self, name: &str) -> Option<ToolDescriptor> {
        self.entry(name).map(|e| e.descriptor.clone())
    }

    /// Descriptors in name order.
    pub fn descriptors(&self) -> Vec<ToolDescriptor> {
        self.entries
            .read()
            .unwrap()
            .values()
            .map(|e| e.descriptor.clone())
            .collect()
    }

    pub fn set_accuracy_summary(
        &self,
        name: &str,
        summary: Option<AccuracySummary>,
    ) -> Result<(), RegistryError> {
        let mut entries = self.entries.write().unwrap();
        let entry = entries
            .get_mut(name)
            .ok_or_else(|| RegistryError::UnknownTool(name.to_string()))?;
        let mut updated = (**entry).clone();
        updated.descriptor.accuracy_summary = summary;
        *entry = Arc::new(updated);
        Ok(())
    }

    /// Runs one tool call end to end.
    pub fn invoke(
        &self,
        ctx: &InvokeContext,
        tool_name: &str,
        args: &Map<String, Value>,
        budget: &Budget,
    ) -> Result<InvokeOutcome, UnknownTool> {
        let entry = self
            .entry(tool_name)
            .ok_or_else(|| UnknownTool(tool_name.to_string()))?;
        let started = Instant::now();
        let descriptor = &entry.descriptor;

        if let Err(failure) = validate_arguments(descriptor, args) {
            return Ok(Err(ToolError {
                class: ErrorClass::Validation,
                message: failure.to_string(),
                tool_name: tool_name.to_string(),
                attempt_count: 0,
            }));
        }

        // Configuration faults would fail identically on every retry.
        if let Err((class, message)) = preflight(&entry.binding, ctx) {
            return Ok(Err(ToolError {
                class,
                message,
                tool_name: tool_name.to_string(),
                attempt_count: 1,
            }));
        }

        let (bind_timeout, bind_retries) = entry.binding.limits();
        let timeout = Duration::from_millis(
            budget
                .timeout_ms
                .or(bind_timeout)
                .unwrap_or(DEFAULT_TIMEOUT_MS),
        );
        let max_retries = budget
            .max_retries
            .or(bind_retries)
            .unwrap_or(DEFAULT_MAX_RETRIES);

        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let result = self.attempt(&entry, ctx, args, timeout);
            let err = match result {
                Ok(raw) => {
                    return Ok(match check_output_contract(descriptor, raw) {
                        Ok(value) => Ok(Observation {
                            tool_name: tool_name.to_string(),
                            arguments: args.clone(),
                            output_kind: descriptor.output.kind,
                            output_value: value,
                            latency_ms: started.elapsed().as_millis() as u64,
                            attempt_count: attempt,
                        }),
                        Err(violation) => Err(ToolError {
                            class: ErrorClass::ContractViolation,
                            message: violation.0,
                            tool_name: tool_name.to_string(),
                            attempt_count: attempt,
                        }),
                    });
                }
                Err(e) => e,
            };
            if err.0.is_retryable() && attempt <= max_retries {
                tracing::debug!(tool = tool_name, attempt, class = %err.0, "retrying tool call");
                std::thread::sleep(self.retry.delay(attempt));
                continue;
            }
            return Ok(Err(ToolError {
                class: err.0,
                message: err.1,
                tool_name: tool_name.to_string(),
                attempt_count: attempt,
            }));
        }
    }

    fn attempt(
        &self,
        entry: &RegistryEntry,
        ctx: &InvokeContext,
        args: &Map<String, Value>,
        timeout: Duration,
    ) -> Result<RawOutput, (ErrorClass, String)> {
        match &entry.binding {
            ToolBinding::Program(p) => {
                let f = self
                    .functions
                    .read()
                    .unwrap()
                    .get(&p.function)
                    .cloned()
                    .ok_or_else(|| {
                        (
                            ErrorClass::Unavailable,
                            format!("program function {} is gone", p.function),
                        )
                    })?;
                f(args).map_err(|msg| (ErrorClass::Execution, msg))
            }
            ToolBinding::Api(api) => {
                let client = self.http.get_or_init(reqwest::blocking::Client::new);
                http::call(client, api, &ctx.env, args, timeout)
            }
            ToolBinding::Prompt(prompt) => run_prompt(prompt, ctx, args, timeout),
        }
    }
}

fn prompt_backend_id(binding: &PromptBinding, ctx: &InvokeContext) -> String {
    binding
        .backend_id
        .clone()
        .or_else(|| ctx.default_backend.clone())
        .unwrap_or_else(|| "default".to_string())
}

fn preflight(binding: &ToolBinding, ctx: &InvokeContext) -> Result<(), (ErrorClass, String)> {
    match binding {
        ToolBinding::Program(_) => Ok(()),
        ToolBinding::Api(api) => {
            http::resolve_env(&api.url, &ctx.env)?;
            for template in api.headers.values() {
                http::resolve_env(template, &ctx.env)?;
            }
            Ok(())
        }
        ToolBinding::Prompt(prompt) => {
            let id = prompt_backend_id(prompt, ctx);
            match ctx.backends.get(&id) {
                Some(_) => Ok(()),
                None => Err((
                    ErrorClass::Unavailable,
                    format!("backend \"{id}\" is not configured"),
                )),
            }
        }
    }
}

fn run_prompt(
    binding: &PromptBinding,
    ctx: &InvokeContext,
    args: &Map<String, Value>,
    timeout: Duration,
) -> Result<RawOutput, (ErrorClass, String)> {
    let backend_id = prompt_backend_id(binding, ctx);
    let backend = ctx.backends.get(&backend_id).ok_or_else(|| {
        (
            ErrorClass::Unavailable,
            format!("backend \"{backend_id}\" is not configured"),
        )
    })?;

    let mut messages = Vec::new();
    if let Some(system) = &binding.system {
        messages.push(ChatMessage::system(system.clone()));
    }
    messages.push(ChatMessage::user(crate::templates::render_args(
        &binding.template,
        args,
    )));
    let mut request = ChatRequest::new(backend_id, messages);
    request.decoding = binding.decoding.clone();

    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let _ = tx.send(backend.complete(&request));
    });
    match rx.recv_timeout(timeout) {
        Ok(Ok(resp)) => Ok(RawOutput::Text(resp.content)),
        Ok(Err(e)) => Err(classify_backend_error(&e)),
        Err(_) => Err((
            ErrorClass::Timeout,
            format!("backend did not answer within {timeout:?}"),
        )),
    }
}

fn classify_backend_error(e: &BackendError) -> (ErrorClass, String) {
    let class = match e {
        BackendError::Timeout => ErrorClass::Timeout,
        BackendError::Status { status: 429, .. } => ErrorClass::RateLimited,
        BackendError::Status { status, .. } if *status >= 500 => ErrorClass::Unavailable,
        BackendError::Status { .. } | BackendError::Protocol(_) => ErrorClass::Execution,
        BackendError::Network(_)
        | BackendError::UnknownBackend(_)
        | BackendError::Exhausted { .. } => ErrorClass::Unavailable,
    };
    (class, e.to_string())
}

/// Output that does not satisfy the contract's kind.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("contract violation: {0}")]
pub struct ContractViolation(pub String);

/// Coerces a binding's raw output into the contract's kind.
pub fn check_output_contract(
    descriptor: &ToolDescriptor,
    raw: RawOutput,
) -> Result<Value, ContractViolation> {
    let kind = descriptor.output.kind;
    match (kind, raw) {
        (OutputKind::Text, RawOutput::Text(s)) => Ok(Value::String(s)),
        (OutputKind::Text, RawOutput::Json(v)) => Ok(Value::String(render_text(&v))),
        (OutputKind::Number, RawOutput::Text(s)) => parse_number(&s),
        (OutputKind::Number, RawOutput::Json(Value::String(s))) => parse_number(&s),
        (OutputKind::Number, RawOutput::Json(v @ Value::Number(_))) => Ok(v),
        (OutputKind::Number, RawOutput::Json(v)) => {
            Err(ContractViolation(format!("expected a number, got {v}")))
        }
        (OutputKind::JsonObject, RawOutput::Text(s)) => match serde_json::from_str::<Value>(&s) {
            Ok(v @ Value::Object(_)) => Ok(v),
            Ok(_) => Err(ContractViolation(
                "expected a JSON object, got another JSON value".into(),
            )),
            Err(e) => Err(ContractViolation(format!("expected a JSON object: {e}"))),
        },
        (OutputKind::JsonObject, RawOutput::Json(v @ Value::Object(_))) => Ok(v),
        (OutputKind::JsonObject, RawOutput::Json(v)) => Err(ContractViolation(format!(
            "expected a JSON object, got {v}"
        ))),
        (OutputKind::FileReference, RawOutput::Text(s))
        | (OutputKind::FileReference, RawOutput::Json(Value::String(s))) => {
            let s = s.trim().to_string();
            if s.is_empty() {
                Err(ContractViolation("empty file reference".into()))
            } else {
                Ok(Value::String(s))
            }
        }
        (OutputKind::FileReference, RawOutput::Json(v)) => Err(ContractViolation(format!(
            "expected a file reference, got {v}"
        ))),
    }
}

fn parse_number(s: &str) -> Result<Value, ContractViolation> {
    let trimmed = s.trim();
    trimmed
        .parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .and_then(serde_json::Number::from_f64)
        .map(Value::Number)
        .ok_or_else(|| ContractViolation(format!("expected a number, got \"{trimmed}\"")))
}
