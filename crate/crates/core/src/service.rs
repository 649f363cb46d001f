//! REST front end over a [`Workspace`].
//!
//! Handlers hand the synchronous core to the blocking pool. Review and
//! round-trigger endpoints require the bearer token when one is configured.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::agents::RunStatus;
use crate::community::{
    CommunityError, Decision, FeedbackRecord, SubmissionContent, ToolContribution,
};
use crate::reliability::{load_checks, RoundError, DEFAULT_REGRESSION_THRESHOLD};
use crate::runtime::{ErrorClass, ToolError};
use crate::store::StoreError;
use crate::verification::{CaseStatus, TestCase};
use crate::workspace::{AgentRequest, Workspace, WorkspaceError};

pub const DEFAULT_RUN_CEILING: Duration = Duration::from_secs(120);

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub auth_token: Option<String>,
    /// Wall-clock ceiling for one synchronous agent run.
    pub run_ceiling: Duration,
    pub default_parallelism: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            auth_token: None,
            run_ceiling: DEFAULT_RUN_CEILING,
            default_parallelism: 4,
        }
    }
}

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_error: Option<ToolError>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub details: Option<Value>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status: status.as_u16(),
            code: code.into(),
            message: message.into(),
            violations: Vec::new(),
            tool_error: None,
            details: None,
        }
    }

    fn with_violations(mut self, violations: Vec<String>) -> Self {
        self.violations = violations;
        self
    }

    fn bad_request(message: impl Into<String>) -> Self {
        let message = message.into();
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", message.clone())
            .with_violations(vec![message])
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

fn store_error(e: &StoreError) -> ApiError {
    match e {
        StoreError::Corrupt { .. } => ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "state_corrupt",
            e.to_string(),
        ),
        StoreError::Io(_) => ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "storage_error",
            e.to_string(),
        ),
    }
}

impl From<WorkspaceError> for ApiError {
    fn from(e: WorkspaceError) -> Self {
        use StatusCode as S;
        match &e {
            WorkspaceError::NotInitialized(_) => {
                ApiError::new(S::INTERNAL_SERVER_ERROR, "not_initialized", e.to_string())
            }
            WorkspaceError::Invalid(v) => {
                ApiError::new(S::BAD_REQUEST, "invalid_request", e.to_string())
                    .with_violations(v.clone())
            }
            WorkspaceError::NotFound(_) => ApiError::new(S::NOT_FOUND, "not_found", e.to_string()),
            WorkspaceError::Store(s) => store_error(s),
            WorkspaceError::Select(_) => ApiError::bad_request(e.to_string()),
            WorkspaceError::Round(r) => match r {
                RoundError::NoCases => ApiError::new(S::CONFLICT, "no_cases", e.to_string()),
                RoundError::BadThreshold(_) => ApiError::bad_request(e.to_string()),
                RoundError::Store(s) => store_error(s),
            },
            WorkspaceError::Community(c) => match c {
                CommunityError::Invalid(v) => {
                    ApiError::new(S::BAD_REQUEST, "invalid_submission", e.to_string())
                        .with_violations(v.clone())
                }
                CommunityError::UnknownTool(t) => {
                    ApiError::new(S::BAD_REQUEST, "unknown_tool", e.to_string())
                        .with_violations(vec![format!("tool: unknown tool {t:?}")])
                }
                CommunityError::UnknownTarget(_) => {
                    ApiError::new(S::NOT_FOUND, "unknown_target", e.to_string())
                }
                CommunityError::NotFound(_) => {
                    ApiError::new(S::NOT_FOUND, "not_found", e.to_string())
                }
                CommunityError::Conflict { .. } => {
                    ApiError::new(S::CONFLICT, "already_reviewed", e.to_string())
                }
                CommunityError::Registry(_) => ApiError::bad_request(e.to_string()),
                CommunityError::Store(s) => store_error(s),
            },
        }
    }
}

type ApiResult = Result<Response, ApiError>;

struct AppState {
    ws: Arc<Workspace>,
    config: ServiceConfig,
}

type Shared = State<Arc<AppState>>;

/// Runs blocking core work off the async executor.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> T + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| {
        ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "internal",
            format!("worker failed: {e}"),
        )
    })
}

#[allow(clippy::result_large_err)]
fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let body: &[u8] = if body.iter().all(u8::is_ascii_whitespace) {
        b"{}"
    } else {
        body
    };
    serde_json::from_slice(body)
        .map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

#[allow(clippy::result_large_err)]
fn authorize(state: &AppState, headers: &HeaderMap) -> Result<(), ApiError> {
    let Some(token) = &state.config.auth_token else {
        return Ok(());
    };
    let presented = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if presented == Some(token.as_str()) {
        Ok(())
    } else {
        Err(ApiError::new(
            StatusCode::UNAUTHORIZED,
            "unauthorized",
            "this endpoint requires a valid bearer token",
        ))
    }
}

fn json_response(status: StatusCode, value: &impl Serialize) -> Response {
    (
        status,
        Json(serde_json::to_value(value).expect("response serializes")),
    )
        .into_response()
}

pub fn router(ws: Arc<Workspace>, config: ServiceConfig) -> Router {
    let state = Arc::new(AppState { ws, config });
    Router::new()
        .route("/v1/tools", get(list_tools))
        .route("/v1/tools/{name}", get(get_tool))
        .route("/v1/tools/{name}/invoke", post(invoke_tool))
        .route("/v1/tools/{name}/reliability", get(tool_reliability))
        .route("/v1/tests", post(submit_test))
        .route("/v1/submissions", get(list_submissions))
        .route("/v1/submissions/{id}/review", post(review_submission))
        .route("/v1/eval/rounds", post(trigger_round))
        .route("/v1/eval/rounds/{id}", get(get_round))
        .route("/v1/reports/latest", get(latest_report))
        .route("/v1/agent/runs", post(start_run))
        .route("/v1/agent/runs/{id}", get(get_run))
        .route("/v1/traces/{id}", get(get_trace))
        .route("/v1/feedback", post(submit_feedback))
        .fallback(|| async {
            ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
        })
        .with_state(state)
}

async fn list_tools(State(s): Shared) -> Response {
    json_response(StatusCode::OK, &s.ws.tools())
}

async fn get_tool(State(s): Shared, Path(name): Path<String>) -> ApiResult {
    let tool = s.ws.tool(&name).ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "unknown_tool",
            format!("no tool named {name:?}"),
        )
    })?;
    Ok(json_response(StatusCode::OK, &tool))
}

/// Status for a tool failure; the body carries the full [`ToolError`].
fn tool_error_status(class: ErrorClass) -> StatusCode {
    match class {
        ErrorClass::Validation => StatusCode::BAD_REQUEST,
        ErrorClass::Timeout => StatusCode::GATEWAY_TIMEOUT,
        ErrorClass::RateLimited => StatusCode::TOO_MANY_REQUESTS,
        ErrorClass::Unavailable => StatusCode::SERVICE_UNAVAILABLE,
        ErrorClass::Execution | ErrorClass::ContractViolation => StatusCode::BAD_GATEWAY,
    }
}

async fn invoke_tool(State(s): Shared, Path(name): Path<String>, body: Bytes) -> ApiResult {
    let args: Map<String, Value> = parse_body(&body)?;
    let ws = s.ws.clone();
    let outcome = blocking(move || ws.invoke(&name, &args)).await?;
    match outcome {
        Err(unknown) => Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "unknown_tool",
            unknown.to_string(),
        )),
        Ok(Ok(observation)) => Ok(json_response(StatusCode::OK, &observation)),
        Ok(Err(err)) => {
            let mut api = ApiError::new(
                tool_error_status(err.class),
                err.class.as_str(),
                err.to_string(),
            );
            if err.class == ErrorClass::Validation {
                api.violations = vec![err.message.clone()];
            }
            api.tool_error = Some(err);
            Err(api)
        }
    }
}

async fn tool_reliability(State(s): Shared, Path(name): Path<String>) -> ApiResult {
    let ws = s.ws.clone();
    let report = blocking(move || ws.tool_report(&name)).await??;
    Ok(json_response(StatusCode::OK, &report))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TestSubmission {
    #[serde(default)]
    submitter: Option<String>,
    #[serde(default)]
    case: Option<Value>,
    #[serde(default)]
    tool_manifest: Option<Value>,
}

fn submitter(name: Option<String>) -> String {
    name.filter(|n| !n.trim().is_empty())
        .unwrap_or_else(|| "anonymous".into())
}

async fn submit_test(State(s): Shared, body: Bytes) -> ApiResult {
    let req: TestSubmission = parse_body(&body)?;
    let content = match (req.case, req.tool_manifest) {
        (Some(case), None) => {
            SubmissionContent::TestCase(serde_json::from_value::<TestCase>(case).map_err(|e| {
                ApiError::new(
                    StatusCode::BAD_REQUEST,
                    "invalid_submission",
                    "test case is malformed",
                )
                .with_violations(vec![format!("case: {e}")])
            })?)
        }
        (None, Some(manifest)) => SubmissionContent::ToolManifest(
            serde_json::from_value::<ToolContribution>(manifest).map_err(|e| {
                ApiError::new(
                    StatusCode::BAD_REQUEST,
                    "invalid_submission",
                    "tool contribution is malformed",
                )
                .with_violations(vec![format!("tool_manifest: {e}")])
            })?,
        ),
        _ => {
            return Err(ApiError::bad_request(
                "provide exactly one of \"case\" or \"tool_manifest\"",
            ))
        }
    };
    let who = submitter(req.submitter);
    let ws = s.ws.clone();
    let submission = blocking(move || ws.submit(content, &who)).await??;
    Ok(json_response(StatusCode::CREATED, &submission))
}

#[derive(Deserialize)]
struct SubmissionQuery {
    status: Option<String>,
}

async fn list_submissions(State(s): Shared, Query(q): Query<SubmissionQuery>) -> ApiResult {
    let status = match q.status.as_deref() {
        None | Some("all") => None,
        Some(raw) => Some(
            CaseStatus::parse(raw)
                .ok_or_else(|| ApiError::bad_request(format!("status: unknown value {raw:?}")))?,
        ),
    };
    let ws = s.ws.clone();
    let list = blocking(move || ws.submissions(status)).await??;
    Ok(json_response(StatusCode::OK, &list))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReviewRequest {
    decision: Decision,
    #[serde(default)]
    reviewer: Option<String>,
    #[serde(default)]
    reason: String,
}

async fn review_submission(
    State(s): Shared,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult {
    authorize(&s, &headers)?;
    let req: ReviewRequest = parse_body(&body)?;
    let ws = s.ws.clone();
    let reviewer = submitter(req.reviewer);
    let sub = blocking(move || ws.review(&id, req.decision, &reviewer, &req.reason)).await??;
    Ok(json_response(StatusCode::OK, &sub))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RoundRequest {
    #[serde(default)]
    parallelism: Option<usize>,
    #[serde(default)]
    threshold: Option<f64>,
}

async fn trigger_round(State(s): Shared, headers: HeaderMap, body: Bytes) -> ApiResult {
    authorize(&s, &headers)?;
    let req: RoundRequest = parse_body(&body)?;
    let parallelism = req.parallelism.unwrap_or(s.config.default_parallelism);
    let threshold = req.threshold.unwrap_or(DEFAULT_REGRESSION_THRESHOLD);
    let ws = s.ws.clone();
    let outcome = blocking(move || ws.run_round_with(parallelism, threshold)).await??;
    Ok(json_response(StatusCode::CREATED, &outcome.round))
}

async fn get_round(State(s): Shared, Path(id): Path<String>) -> ApiResult {
    let round_id: u64 = id.parse().map_err(|_| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "not_found",
            format!("round {id:?} not found"),
        )
    })?;
    let ws = s.ws.clone();
    let (round, checks) = blocking(move || -> Result<_, WorkspaceError> {
        let round = ws
            .round(round_id)?
            .ok_or_else(|| WorkspaceError::NotFound(format!("round {round_id}")))?;
        let checks = load_checks(ws.store(), round_id)?;
        Ok((round, checks))
    })
    .await??;
    Ok(json_response(
        StatusCode::OK,
        &json!({"round": round, "checks": checks}),
    ))
}

async fn latest_report(State(s): Shared) -> ApiResult {
    let ws = s.ws.clone();
    let report = blocking(move || ws.report()).await??;
    Ok((
        [(header::CONTENT_TYPE, "application/json")],
        report.to_bytes(),
    )
        .into_response())
}

#[derive(Serialize)]
struct RunResponse<'a> {
    run_id: &'a str,
    answer: &'a str,
    status: RunStatus,
    trace_url: String,
}

fn trace_url(trace_id: &str) -> String {
    format!("/v1/traces/{trace_id}")
}

async fn start_run(State(s): Shared, body: Bytes) -> ApiResult {
    let req: AgentRequest = parse_body(&body)?;
    let ws = s.ws.clone();
    let task = blocking(move || ws.run_agent(&req));
    let run = match tokio::time::timeout(s.config.run_ceiling, task).await {
        Err(_) => {
            return Err(ApiError::new(
                StatusCode::GATEWAY_TIMEOUT,
                "run_timeout",
                format!(
                    "agent run exceeded the {} s ceiling",
                    s.config.run_ceiling.as_secs()
                ),
            ))
        }
        Ok(result) => result??,
    };
    let url = trace_url(&run.trace_ref);
    if run.status == RunStatus::Failed {
        let mut err = ApiError::new(
            StatusCode::BAD_GATEWAY,
            "backend_unavailable",
            run.error
                .clone()
                .unwrap_or_else(|| "the backend call failed".into()),
        );
        err.details = Some(json!({"run_id": run.run_id, "status": run.status, "trace_url": url}));
        return Err(err);
    }
    Ok(json_response(
        StatusCode::OK,
        &RunResponse {
            run_id: &run.run_id,
            answer: &run.answer,
            status: run.status,
            trace_url: url,
        },
    ))
}

async fn get_run(State(s): Shared, Path(id): Path<String>) -> ApiResult {
    let ws = s.ws.clone();
    let run = blocking(move || ws.run(&id)).await??;
    Ok(json_response(StatusCode::OK, &run))
}

async fn get_trace(State(s): Shared, Path(id): Path<String>) -> ApiResult {
    let ws = s.ws.clone();
    let text = blocking(move || ws.trace_text(&id)).await??;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], text).into_response())
}

async fn submit_feedback(State(s): Shared, body: Bytes) -> ApiResult {
    let mut doc: Map<String, Value> = parse_body(&body)?;
    let who = match doc.remove("submitter") {
        Some(Value::String(name)) => Some(name),
        _ => None,
    };
    let record: FeedbackRecord = serde_json::from_value(Value::Object(doc))
        .map_err(|e| ApiError::bad_request(format!("feedback is malformed: {e}")))?;
    let who = submitter(who);
    let ws = s.ws.clone();
    let receipt = blocking(move || ws.feedback(record, &who)).await??;
    Ok(json_response(StatusCode::CREATED, &receipt))
}

/// Binds and serves until ctrl-c. In-flight requests finish before shutdown.
pub async fn serve(
    ws: Arc<Workspace>,
    config: ServiceConfig,
    addr: SocketAddr,
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, router(ws, config))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        })
        .await
}
