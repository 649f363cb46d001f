#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use opentools::agents::{run_agent, AgentEnv, AgentRun, PolicyConfig, Task};
use opentools::llm::{BackendRegistry, MockScript, ScriptEntry, ScriptedBackend};
use opentools::runtime::{EnvVars, InvokeContext, ToolRegistry};
use opentools::trace::ExecutionTrace;

pub fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

pub fn script(name: &str) -> Vec<ScriptEntry> {
    MockScript::load(&fixture(name))
        .expect("fixture loads")
        .responses
}

pub fn context(backend: Arc<ScriptedBackend>) -> InvokeContext {
    InvokeContext::new(
        BackendRegistry::new().with("default", backend),
        EnvVars::isolated(),
    )
}

/// Runs one policy against the seed registry with a scripted backend.
pub fn episode(
    registry: &ToolRegistry,
    entries: Vec<ScriptEntry>,
    config: &PolicyConfig,
    query: &str,
    toolbox: &[&str],
) -> (AgentRun, ExecutionTrace, Arc<ScriptedBackend>) {
    let backend = Arc::new(ScriptedBackend::new(entries));
    let ctx = context(backend.clone());
    let task = Task::new(query, toolbox.iter().map(|s| s.to_string()).collect());
    let (run, trace) = run_agent(
        AgentEnv::new(registry, &ctx),
        &task,
        config,
        "run-test",
        "trace-test",
    );
    (run, trace, backend)
}

pub mod http {
    use std::sync::Arc;

    use axum::body::Body;
    use axum::http::{Request, StatusCode};
    use axum::Router;
    use http_body_util::BodyExt;
    use opentools::llm::BackendRegistry;
    use opentools::runtime::EnvVars;
    use opentools::service::{router, ServiceConfig};
    use opentools::store::{MemStorage, Storage};
    use opentools::workspace::{init, Workspace};
    use serde_json::Value;
    use tower::ServiceExt;

    pub const TOKEN: &str = "s3cret";

    /// A fresh seeded in-memory workspace.
    pub fn workspace(backends: BackendRegistry, env: EnvVars) -> Arc<Workspace> {
        let storage: Arc<dyn Storage> = Arc::new(MemStorage::new());
        init(storage.clone()).unwrap();
        Arc::new(Workspace::open(storage, backends, env).unwrap())
    }

    pub fn app(ws: &Arc<Workspace>, auth: bool) -> Router {
        let config = ServiceConfig {
            auth_token: auth.then(|| TOKEN.to_string()),
            ..ServiceConfig::default()
        };
        router(ws.clone(), config)
    }

    pub struct Reply {
        pub status: StatusCode,
        pub body: Vec<u8>,
    }

    impl Reply {
        pub fn json(&self) -> Value {
            serde_json::from_slice(&self.body).unwrap_or_else(|e| {
                panic!("not JSON ({e}): {}", String::from_utf8_lossy(&self.body))
            })
        }

        pub fn text(&self) -> String {
            String::from_utf8(self.body.clone()).unwrap()
        }
    }

    pub async fn call(
        app: &Router,
        method: &str,
        uri: &str,
        body: Option<&str>,
        token: Option<&str>,
    ) -> Reply {
        let mut req = Request::builder().method(method).uri(uri);
        if body.is_some() {
            req = req.header("content-type", "application/json");
        }
        if let Some(t) = token {
            req = req.header("authorization", format!("Bearer {t}"));
        }
        let req = req
            .body(Body::from(body.unwrap_or("").to_string()))
            .unwrap();
        let resp = app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let body = resp
            .into_body()
            .collect()
            .await
            .unwrap()
            .to_bytes()
            .to_vec();
        Reply { status, body }
    }

    pub async fn get(app: &Router, uri: &str) -> Reply {
        call(app, "GET", uri, None, None).await
    }

    pub async fn post(app: &Router, uri: &str, body: &Value) -> Reply {
        call(app, "POST", uri, Some(&body.to_string()), None).await
    }

    pub async fn post_auth(app: &Router, uri: &str, body: &Value) -> Reply {
        call(app, "POST", uri, Some(&body.to_string()), Some(TOKEN)).await
    }

    /// Non-2xx bodies must be ApiError documents.
    pub fn assert_api_error(reply: &Reply, status: u16) -> Value {
        assert_eq!(
            reply.status.as_u16(),
            status,
            "body: {}",
            String::from_utf8_lossy(&reply.body)
        );
        let v = reply.json();
        assert!(
            v["code"].is_string() && v["message"].is_string(),
            "not an ApiError: {v}"
        );
        v
    }
}
