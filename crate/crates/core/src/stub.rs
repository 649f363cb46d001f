//! A small configurable HTTP server standing in for external APIs and LLM endpoints.
//!
//! Each route (keyed by path) returns a canned status and body after an optional delay.
//! A route may instead look its body up in a table keyed by a rendering of the request
//! arguments (query pairs and JSON body fields), which lets one route act like a
//! deterministic lookup service.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Router;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use tokio::sync::oneshot;

use crate::templates::render_args;

/// Environment variable the seed API bindings use for the stub's base URL.
pub const STUB_URL_VAR: &str = "OPENTOOLS_STUB_URL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubRoute {
    #[serde(default = "ok_status")]
    pub status: u16,
    #[serde(default)]
    pub body: String,
    #[serde(default)]
    pub delay_ms: u64,
    #[serde(default = "text_plain")]
    pub content_type: String,
    /// Template over request arguments, e.g. `{base}/{quote}`, selecting a body from `table`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub table: BTreeMap<String, String>,
}

fn ok_status() -> u16 {
    200
}

fn text_plain() -> String {
    "text/plain; charset=utf-8".into()
}

impl StubRoute {
    pub fn text(body: impl Into<String>) -> Self {
        Self {
            status: 200,
            body: body.into(),
            delay_ms: 0,
            content_type: text_plain(),
            key: None,
            table: BTreeMap::new(),
        }
    }

    pub fn json(body: &Value) -> Self {
        Self {
            content_type: "application/json".into(),
            ..Self::text(body.to_string())
        }
    }

    pub fn status(status: u16, body: impl Into<String>) -> Self {
        Self {
            status,
            ..Self::text(body)
        }
    }

    pub fn lookup<K: Into<String>, V: Into<String>>(
        key: impl Into<String>,
        table: impl IntoIterator<Item = (K, V)>,
    ) -> Self {
        Self {
            key: Some(key.into()),
            table: table
                .into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
            ..Self::text("")
        }
    }

    pub fn with_delay(mut self, delay_ms: u64) -> Self {
        self.delay_ms = delay_ms;
        self
    }

    pub fn with_content_type(mut self, content_type: impl Into<String>) -> Self {
        self.content_type = content_type.into();
        self
    }
}

#[derive(Debug, Default)]
struct StubState {
    routes: BTreeMap<String, StubRoute>,
    hits: BTreeMap<String, usize>,
}

/// Running stub server. Shuts down when dropped.
pub struct StubServer {
    addr: SocketAddr,
    state: Arc<Mutex<StubState>>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl std::fmt::Debug for StubServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StubServer")
            .field("addr", &self.addr)
            .finish()
    }
}

impl StubServer {
    /// Binds an ephemeral localhost port and serves on a background thread.
    pub fn start(routes: BTreeMap<String, StubRoute>) -> std::io::Result<Self> {
        let state = Arc::new(Mutex::new(StubState {
            routes,
            hits: BTreeMap::new(),
        }));
        let listener = std::net::TcpListener::bind("127.0.0.1:0")?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let app = Router::new().fallback(handle).with_state(state.clone());
        let thread = std::thread::Builder::new()
            .name("stub-server".into())
            .spawn(move || {
                let rt = tokio::runtime::Builder::new_multi_thread()
                    .worker_threads(2)
                    .enable_all()
                    .build()
                    .expect("stub runtime");
                rt.block_on(async move {
                    let listener =
                        tokio::net::TcpListener::from_std(listener).expect("stub listener");
                    let _ = axum::serve(listener, app)
                        .with_graceful_shutdown(async {
                            let _ = rx.await;
                        })
                        .await;
                });
            })?;
        Ok(Self {
            addr,
            state,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    /// Starts with [`seed_routes`].
    pub fn start_seeded() -> std::io::Result<Self> {
        Self::start(seed_routes())
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn set_route(&self, path: impl Into<String>, route: StubRoute) {
        self.state.lock().unwrap().routes.insert(path.into(), route);
    }

    pub fn route(&self, path: &str) -> Option<StubRoute> {
        self.state.lock().unwrap().routes.get(path).cloned()
    }

    pub fn hits(&self, path: &str) -> usize {
        self.state
            .lock()
            .unwrap()
            .hits
            .get(path)
            .copied()
            .unwrap_or(0)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn request_args(uri: &Uri, body: &[u8]) -> Map<String, Value> {
    let mut args = Map::new();
    if let Some(q) = uri.query() {
        for pair in q.split('&').filter(|p| !p.is_empty()) {
            let (k, v) = pair.split_once('=').unwrap_or((pair, ""));
            args.insert(decode(k), Value::String(decode(v)));
        }
    }
    if let Ok(Value::Object(map)) = serde_json::from_slice::<Value>(body) {
        args.extend(map);
    }
    args
}

fn decode(s: &str) -> String {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'+' => out.push(b' '),
            b'%' if i + 2 < bytes.len() => {
                match std::str::from_utf8(&bytes[i + 1..i + 3])
                    .ok()
                    .and_then(|h| u8::from_str_radix(h, 16).ok())
                {
                    Some(b) => {
                        out.push(b);
                        i += 2;
                    }
                    None => out.push(b'%'),
                }
            }
            b => out.push(b),
        }
        i += 1;
    }
    String::from_utf8_lossy(&out).into_owned()
}

async fn handle(
    State(state): State<Arc<Mutex<StubState>>>,
    uri: Uri,
    _headers: HeaderMap,
    body: Bytes,
) -> Response {
    let path = uri.path().to_string();
    let route = {
        let mut s = state.lock().unwrap();
        *s.hits.entry(path.clone()).or_default() += 1;
        s.routes.get(&path).cloned()
    };
    let Some(route) = route else {
        return (StatusCode::NOT_FOUND, format!("no stub route for {path}")).into_response();
    };
    if route.delay_ms > 0 {
        tokio::time::sleep(Duration::from_millis(route.delay_ms)).await;
    }
    let (status, text) = match &route.key {
        None => (route.status, route.body.clone()),
        Some(template) => {
            let key = render_args(template, &request_args(&uri, &body));
            match route.table.get(&key) {
                Some(hit) => (route.status, hit.clone()),
                None => (404, format!("no entry for {key:?}")),
            }
        }
    };
    let status = StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, [(header::CONTENT_TYPE, route.content_type)], text).into_response()
}

/// An OpenAI-style completion body with the given assistant content.
pub fn completion_body(content: &str) -> Value {
    json!({
        "id": "stub-completion",
        "object": "chat.completion",
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": content},
            "finish_reason": "stop"
        }],
        "usage": {"prompt_tokens": 12, "completion_tokens": 3, "total_tokens": 15}
    })
}

/// Routes backing the seed API tools, plus a canned chat completion.
pub fn seed_routes() -> BTreeMap<String, StubRoute> {
    let mut r = BTreeMap::new();
    r.insert(
        "/fetch".into(),
        StubRoute::lookup(
            "{url}",
            [
                (
                    "https://example.org/",
                    "Example Domain. This domain is for use in illustrative examples.",
                ),
                ("https://example.org/status", "ok"),
            ],
        ),
    );
    r.insert(
        "/wiki".into(),
        StubRoute::lookup(
            "{title}",
            [
                ("Rust (programming language)", "Rust is a general-purpose programming language emphasizing performance, type safety and concurrency."),
                ("Maze", "A maze is a path or collection of paths, typically from an entrance to a goal."),
            ],
        ),
    );
    r.insert(
        "/dictionary".into(),
        StubRoute::lookup(
            "{word}",
            [
                (
                    "reliable",
                    "consistently good in quality or performance; able to be trusted",
                ),
                ("regression", "a return to a former or less developed state"),
            ],
        ),
    );
    r.insert(
        "/exchange".into(),
        StubRoute::lookup(
            "{base}/{quote}",
            [
                ("USD/EUR", "0.92"),
                ("EUR/USD", "1.087"),
                ("GBP/USD", "1.27"),
            ],
        ),
    );
    r.insert(
        "/weather".into(),
        StubRoute::lookup(
            "{city}",
            [
                (
                    "Paris",
                    r#"{"city":"Paris","condition":"cloudy","temperature_c":14}"#,
                ),
                (
                    "Cairo",
                    r#"{"city":"Cairo","condition":"sunny","temperature_c":31}"#,
                ),
            ],
        )
        .with_content_type("application/json"),
    );
    r.insert(
        "/geocode".into(),
        StubRoute::lookup(
            "{place}",
            [
                ("Eiffel Tower", r#"{"lat":48.8584,"lon":2.2945}"#),
                ("Sydney Opera House", r#"{"lat":-33.8568,"lon":151.2153}"#),
            ],
        )
        .with_content_type("application/json"),
    );
    r.insert(
        "/v1/chat/completions".into(),
        StubRoute::json(&completion_body("stub completion")),
    );
    r
}
