//! Chat-completion backends: an OpenAI-compatible HTTP client and a scripted mock.
//!
//! Prompting tools, agent policies and the semantic judge all talk to a
//! [`Backend`] through [`ChatRequest`] / [`ChatResponse`]. Backends are looked up
//! by id in a [`BackendRegistry`].

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::schema::{ArgumentSchema, NumericRange, ParamType, ParameterSpec, ToolDescriptor};

pub const ENV_BASE_URL: &str = "LLM_BASE_URL";
pub const ENV_API_KEY: &str = "LLM_API_KEY";
pub const ENV_MODEL: &str = "LLM_MODEL";

const DEFAULT_MODEL: &str = "gpt-4o-mini";
const DEFAULT_HTTP_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(rename = "name")]
    pub tool_name: String,
    #[serde(default)]
    pub arguments: Map<String, Value>,
}

impl ToolCall {
    pub fn new(tool_name: impl Into<String>, arguments: Value) -> Self {
        Self {
            id: None,
            tool_name: tool_name.into(),
            arguments: arguments.as_object().cloned().unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
    /// Set on assistant messages that requested a tool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call: Option<ToolCall>,
    /// Set on tool-role messages answering a call.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
            tool_call: None,
            tool_call_id: None,
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    #[serde(default)]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub backend_id: String,
    pub messages: Vec<ChatMessage>,
    #[serde(default)]
    pub decoding: Decoding,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_declarations: Vec<FunctionDeclaration>,
}

impl ChatRequest {
    pub fn new(backend_id: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            backend_id: backend_id.into(),
            messages,
            decoding: Decoding::default(),
            tool_declarations: Vec::new(),
        }
    }

    pub fn with_tools(mut self, declarations: Vec<FunctionDeclaration>) -> Self {
        self.tool_declarations = declarations;
        self
    }

    fn check(&self) -> Result<(), BackendError> {
        match self.messages.first() {
            None => Err(BackendError::Protocol("request has no messages".into())),
            Some(m) if !matches!(m.role, Role::System | Role::User) => Err(BackendError::Protocol(
                "first message must be system or user".into(),
            )),
            Some(_) => Ok(()),
        }
    }

    /// All message contents joined by newlines; used by the mock's request predicates.
    pub fn transcript(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    #[serde(default)]
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call: Option<ToolCall>,
    #[serde(default)]
    pub usage: Usage,
    #[serde(default)]
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("unknown backend \"{0}\"")]
    UnknownBackend(String),
    #[error("network failure: {0}")]
    Network(String),
    #[error("backend request timed out")]
    Timeout,
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("scripted backend exhausted after {calls} call(s)")]
    Exhausted { calls: usize },
    #[error("protocol error: {0}")]
    Protocol(String),
}

pub trait Backend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

/// Backends addressable by id. Cloning shares the underlying backends.
#[derive(Clone, Default)]
pub struct BackendRegistry {
    backends: BTreeMap<String, Arc<dyn Backend>>,
}

impl std::fmt::Debug for BackendRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.backends.keys()).finish()
    }
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `openai` (and `default`) when `LLM_BASE_URL` is set.
    pub fn from_env() -> Self {
        let mut reg = Self::new();
        if let Some(backend) = OpenAiBackend::from_env() {
            let backend: Arc<dyn Backend> = Arc::new(backend);
            reg.insert("openai", backend.clone());
            reg.insert("default", backend);
        }
        reg
    }

    pub fn insert(&mut self, id: impl Into<String>, backend: Arc<dyn Backend>) {
        self.backends.insert(id.into(), backend);
    }

    pub fn with(mut self, id: impl Into<String>, backend: Arc<dyn Backend>) -> Self {
        self.insert(id, backend);
        self
    }

    pub fn get(&self, id: &str) -> Option<Arc<dyn Backend>> {
        self.backends.get(id).cloned()
    }

    pub fn ids(&self) -> Vec<String> {
        self.backends.keys().cloned().collect()
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let backend = self
            .get(&request.backend_id)
            .ok_or_else(|| BackendError::UnknownBackend(request.backend_id.clone()))?;
        backend.complete(request)
    }
}

// ---------------------------------------------------------------------------
// OpenAI-compatible HTTP backend

pub struct OpenAiBackend {
    base_url: String,
    api_key: Option<String>,
    model: String,
    client: OnceLock<reqwest::blocking::Client>,
}

impl OpenAiBackend {
    pub fn new(base_url: &str, api_key: Option<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
            model: model.into(),
            client: OnceLock::new(),
        }
    }

    pub fn from_env() -> Option<Self> {
        let base = std::env::var(ENV_BASE_URL).ok().filter(|s| !s.is_empty())?;
        let key = std::env::var(ENV_API_KEY).ok().filter(|s| !s.is_empty());
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| DEFAULT_MODEL.to_string());
        Some(Self::new(&base, key, model))
    }

    fn endpoint(&self) -> String {
        if self.base_url.ends_with("/v1") {
            format!("{}/chat/completions", self.base_url)
        } else {
            format!("{}/v1/chat/completions", self.base_url)
        }
    }

    /// The chat-completions request body for `request`.
    pub fn request_body(&self, request: &ChatRequest) -> Value {
        let messages: Vec<Value> = request.messages.iter().map(wire_message).collect();
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": request.decoding.temperature,
        });
        if let Some(max) = request.decoding.max_tokens {
            body["max_tokens"] = json!(max);
        }
        if !request.tool_declarations.is_empty() {
            body["tools"] = Value::Array(
                request
                    .tool_declarations
                    .iter()
                    .map(FunctionDeclaration::to_wire)
                    .collect(),
            );
        }
        body
    }
}

fn wire_message(m: &ChatMessage) -> Value {
    let role = match m.role {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
        Role::Tool => "tool",
    };
    let mut out = json!({"role": role, "content": m.content});
    if let Some(call) = &m.tool_call {
        out["tool_calls"] = json!([{
            "id": call.id.clone().unwrap_or_else(|| "call_0".into()),
            "type": "function",
            "function": {
                "name": call.tool_name,
                "arguments": Value::Object(call.arguments.clone()).to_string(),
            }
        }]);
    }
    if let Some(id) = &m.tool_call_id {
        out["tool_call_id"] = json!(id);
    }
    out
}

/// Maps the first choice of a chat-completions response body.
pub fn parse_completion(body: &Value) -> Result<ChatResponse, BackendError> {
    let message = body
        .pointer("/choices/0/message")
        .ok_or_else(|| BackendError::Protocol("response has no choices[0].message".into()))?;
    let content = message
        .get("content")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let tool_call = match message.pointer("/tool_calls/0") {
        None => None,
        Some(call) => {
            let name = call
                .pointer("/function/name")
                .and_then(Value::as_str)
                .ok_or_else(|| BackendError::Protocol("tool call without function name".into()))?;
            let arguments = match call.pointer("/function/arguments") {
                Some(Value::String(s)) if s.trim().is_empty() => Map::new(),
                Some(Value::String(s)) => match serde_json::from_str::<Value>(s) {
                    Ok(Value::Object(m)) => m,
                    _ => {
                        return Err(BackendError::Protocol(format!(
                            "tool call arguments are not a JSON object: {s}"
                        )))
                    }
                },
                Some(Value::Object(m)) => m.clone(),
                _ => Map::new(),
            };
            Some(ToolCall {
                id: call.get("id").and_then(Value::as_str).map(str::to_string),
                tool_name: name.to_string(),
                arguments,
            })
        }
    };
    let usage = Usage {
        prompt_tokens: body
            .pointer("/usage/prompt_tokens")
            .and_then(Value::as_u64)
            .unwrap_or(0),
        completion_tokens: body
            .pointer("/usage/completion_tokens")
            .and_then(Value::as_u64)
            .unwrap_or(0),
    };
    Ok(ChatResponse {
        content,
        tool_call,
        usage,
        latency_ms: 0,
    })
}

impl Backend for OpenAiBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.check()?;
        let started = Instant::now();
        let client = self.client.get_or_init(|| {
            reqwest::blocking::Client::builder()
                .timeout(DEFAULT_HTTP_TIMEOUT)
                .build()
                .expect("http client")
        });
        let mut req = client
            .post(self.endpoint())
            .json(&self.request_body(request));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Network(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| BackendError::Network(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Status {
                status: status.as_u16(),
                body: text,
            });
        }
        let body: Value = serde_json::from_str(&text)
            .map_err(|e| BackendError::Protocol(format!("invalid JSON body: {e}")))?;
        let mut parsed = parse_completion(&body)?;
        parsed.latency_ms = started.elapsed().as_millis() as u64;
        Ok(parsed)
    }
}

// ---------------------------------------------------------------------------
// Scripted mock

/// One canned reply. `when_contains` restricts which requests it may answer.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call: Option<ToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub when_contains: Option<String>,
    /// Simulated transport failure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ScriptEntry {
    pub fn text(content: impl Into<String>) -> Self {
        Self {
            content: Some(content.into()),
            ..Default::default()
        }
    }

    pub fn call(tool_name: &str, arguments: Value) -> Self {
        Self {
            tool_call: Some(ToolCall::new(tool_name, arguments)),
            ..Default::default()
        }
    }

    pub fn failure(message: impl Into<String>) -> Self {
        Self {
            error: Some(message.into()),
            ..Default::default()
        }
    }

    pub fn when(mut self, needle: impl Into<String>) -> Self {
        self.when_contains = Some(needle.into());
        self
    }

    fn matches(&self, request: &ChatRequest) -> bool {
        self.when_contains
            .as_deref()
            .is_none_or(|needle| request.transcript().contains(needle))
    }
}

/// JSON fixture: either `{"responses": [...]}` or a bare array of entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub responses: Vec<ScriptEntry>,
}

impl MockScript {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Either {
            Wrapped { responses: Vec<ScriptEntry> },
            Bare(Vec<ScriptEntry>),
        }
        Ok(match serde_json::from_str::<Either>(text)? {
            Either::Wrapped { responses } | Either::Bare(responses) => MockScript { responses },
        })
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

#[derive(Default)]
struct ScriptState {
    remaining: VecDeque<ScriptEntry>,
    captured: Vec<ChatRequest>,
}

/// Deterministic backend that replays a script. Calls observe a total order.
#[derive(Default)]
pub struct ScriptedBackend {
    state: Mutex<ScriptState>,
}

impl ScriptedBackend {
    pub fn new(entries: impl IntoIterator<Item = ScriptEntry>) -> Self {
        Self {
            state: Mutex::new(ScriptState {
                remaining: entries.into_iter().collect(),
                captured: Vec::new(),
            }),
        }
    }

    pub fn from_script(script: MockScript) -> Self {
        Self::new(script.responses)
    }

    pub fn texts<S: Into<String>>(texts: impl IntoIterator<Item = S>) -> Self {
        Self::new(texts.into_iter().map(ScriptEntry::text))
    }

    /// Every request received so far, in call order.
    pub fn captured(&self) -> Vec<ChatRequest> {
        self.state.lock().unwrap().captured.clone()
    }

    pub fn remaining(&self) -> usize {
        self.state.lock().unwrap().remaining.len()
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.check()?;
        let mut state = self.state.lock().unwrap();
        state.captured.push(request.clone());
        let calls = state.captured.len();
        let pos = state.remaining.iter().position(|e| e.matches(request));
        let entry = pos
            .and_then(|i| state.remaining.remove(i))
            .ok_or(BackendError::Exhausted { calls })?;
        if let Some(msg) = entry.error {
            return Err(BackendError::Network(msg));
        }
        let content = entry.content.unwrap_or_default();
        let prompt_tokens = request.transcript().split_whitespace().count() as u64;
        let completion_tokens = content.split_whitespace().count() as u64;
        Ok(ChatResponse {
            content,
            tool_call: entry.tool_call,
            usage: Usage {
                prompt_tokens,
                completion_tokens,
            },
            latency_ms: 0,
        })
    }
}

// ---------------------------------------------------------------------------
// Function-call declarations

/// A tool projected into the function-calling wire shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionDeclaration {
    pub name: String,
    pub description: String,
    /// JSON-Schema object describing the arguments.
    pub parameters: Value,
}

impl FunctionDeclaration {
    /// `{"type": "function", "function": {...}}` as used in the `tools` array.
    pub fn to_wire(&self) -> Value {
        json!({"type": "function", "function": self})
    }
}

/// Projects descriptors into function-call declarations, preserving required flags,
/// enums, ranges and declaration order.
pub fn project_tool_declarations<'a>(
    descriptors: impl IntoIterator<Item = &'a ToolDescriptor>,
) -> Vec<FunctionDeclaration> {
    descriptors.into_iter().map(project_one).collect()
}

fn project_one(d: &ToolDescriptor) -> FunctionDeclaration {
    let mut properties = Map::new();
    for p in &d.arguments.parameters {
        let mut prop = Map::new();
        match p.ty {
            ParamType::String => {
                prop.insert("type".into(), json!("string"));
            }
            ParamType::Integer => {
                prop.insert("type".into(), json!("integer"));
            }
            ParamType::Number => {
                prop.insert("type".into(), json!("number"));
            }
            ParamType::Boolean => {
                prop.insert("type".into(), json!("boolean"));
            }
            ParamType::StringList => {
                prop.insert("type".into(), json!("array"));
                prop.insert("items".into(), json!({"type": "string"}));
            }
            ParamType::FileReference => {
                prop.insert("type".into(), json!("string"));
                prop.insert("format".into(), json!("file-reference"));
            }
        }
        prop.insert("description".into(), json!(p.description));
        if let Some(values) = &p.allowed {
            prop.insert("enum".into(), Value::Array(values.clone()));
        }
        if let Some(range) = &p.range {
            if let Some(min) = range.min {
                prop.insert("minimum".into(), json!(min));
            }
            if let Some(max) = range.max {
                prop.insert("maximum".into(), json!(max));
            }
        }
        properties.insert(p.name.clone(), Value::Object(prop));
    }
    let required: Vec<&str> = d.arguments.required().map(|p| p.name.as_str()).collect();
    let order: Vec<&str> = d
        .arguments
        .parameters
        .iter()
        .map(|p| p.name.as_str())
        .collect();
    FunctionDeclaration {
        name: d.name.clone(),
        description: d.description.clone(),
        parameters: json!({
            "type": "object",
            "properties": properties,
            "required": required,
            "propertyOrdering": order,
            "additionalProperties": false,
        }),
    }
}

/// Inverse of the projection: rebuilds the argument schema from a declaration.
pub fn declaration_to_schema(decl: &FunctionDeclaration) -> Result<ArgumentSchema, String> {
    let params = &decl.parameters;
    let properties = params
        .get("properties")
        .and_then(Value::as_object)
        .ok_or("declaration has no properties object")?;
    let required: Vec<&str> = params
        .get("required")
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(Value::as_str).collect())
        .unwrap_or_default();
    let order: Vec<String> = match params.get("propertyOrdering").and_then(Value::as_array) {
        Some(a) => a
            .iter()
            .filter_map(Value::as_str)
            .map(str::to_string)
            .collect(),
        None => properties.keys().cloned().collect(),
    };
    let mut out = Vec::with_capacity(order.len());
    for name in order {
        let prop = properties
            .get(&name)
            .ok_or_else(|| format!("ordering names unknown property {name}"))?;
        let ty = match (
            prop.get("type").and_then(Value::as_str),
            prop.get("format").and_then(Value::as_str),
        ) {
            (Some("string"), Some("file-reference")) => ParamType::FileReference,
            (Some("string"), _) => ParamType::String,
            (Some("integer"), _) => ParamType::Integer,
            (Some("number"), _) => ParamType::Number,
            (Some("boolean"), _) => ParamType::Boolean,
            (Some("array"), _) => ParamType::StringList,
            (other, _) => return Err(format!("unsupported property type {other:?}")),
        };
        let min = prop.get("minimum").and_then(Value::as_f64);
        let max = prop.get("maximum").and_then(Value::as_f64);
        out.push(ParameterSpec {
            required: required.contains(&name.as_str()),
            name,
            ty,
            description: prop
                .get("description")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string(),
            allowed: prop.get("enum").and_then(Value::as_array).cloned(),
            range: (min.is_some() || max.is_some()).then_some(NumericRange { min, max }),
        });
    }
    Ok(ArgumentSchema::new(out))
}
