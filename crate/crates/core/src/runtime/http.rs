//! API bindings: one HTTP request per attempt, classified into error classes.

use std::collections::BTreeMap;
use std::sync::LazyLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{render_text, EnvVars, ErrorClass, RawOutput};

static ENV_PLACEHOLDER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}").unwrap());

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum HttpMethod {
    Get,
    #[default]
    Post,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiBinding {
    /// Endpoint URL; may contain `${VAR}` placeholders.
    pub url: String,
    #[serde(default)]
    pub method: HttpMethod,
    /// Header templates; values may contain `${VAR}` placeholders.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub headers: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_retries: Option<u32>,
}

impl ApiBinding {
    pub fn post(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            method: HttpMethod::Post,
            headers: BTreeMap::new(),
            timeout_ms: None,
            max_retries: None,
        }
    }
}

/// Replaces every `${VAR}`; a missing variable is an environment fault.
pub(crate) fn resolve_env(template: &str, env: &EnvVars) -> Result<String, (ErrorClass, String)> {
    let mut missing = None;
    let out = ENV_PLACEHOLDER.replace_all(template, |caps: &regex::Captures<'_>| {
        let var = &caps[1];
        env.get(var).unwrap_or_else(|| {
            missing.get_or_insert_with(|| var.to_string());
            String::new()
        })
    });
    match missing {
        Some(var) => Err((
            ErrorClass::Unavailable,
            format!("environment variable {var} is not set"),
        )),
        None => Ok(out.into_owned()),
    }
}

pub(crate) fn call(
    client: &reqwest::blocking::Client,
    binding: &ApiBinding,
    env: &EnvVars,
    args: &Map<String, Value>,
    timeout: Duration,
) -> Result<RawOutput, (ErrorClass, String)> {
    let url = resolve_env(&binding.url, env)?;
    let mut req = match binding.method {
        HttpMethod::Post => client.post(&url).json(&Value::Object(args.clone())),
        HttpMethod::Get => {
            let mut parsed = reqwest::Url::parse(&url).map_err(|e| {
                (
                    ErrorClass::Execution,
                    format!("bad endpoint url {url}: {e}"),
                )
            })?;
            {
                let mut pairs = parsed.query_pairs_mut();
                for (k, v) in args {
                    pairs.append_pair(k, &render_text(v));
                }
            }
            client.get(parsed)
        }
    };
    for (name, template) in &binding.headers {
        req = req.header(name.as_str(), resolve_env(template, env)?);
    }
    let resp = req.timeout(timeout).send().map_err(|e| {
        if e.is_timeout() {
            (
                ErrorClass::Timeout,
                format!("request timed out after {timeout:?}"),
            )
        } else if e.is_connect() {
            (ErrorClass::Unavailable, format!("connection failed: {e}"))
        } else {
            (ErrorClass::Unavailable, format!("request failed: {e}"))
        }
    })?;
    let status = resp.status().as_u16();
    let body = resp.text().map_err(|e| {
        if e.is_timeout() {
            (
                ErrorClass::Timeout,
                format!("reading body timed out after {timeout:?}"),
            )
        } else {
            (
                ErrorClass::Execution,
                format!("unreadable response body: {e}"),
            )
        }
    })?;
    match status {
        200..=299 => Ok(RawOutput::Text(body)),
        429 => Err((
            ErrorClass::RateLimited,
            format!("HTTP 429: {}", snippet(&body)),
        )),
        408 | 504 => Err((
            ErrorClass::Timeout,
            format!("HTTP {status}: {}", snippet(&body)),
        )),
        500..=599 => Err((
            ErrorClass::Unavailable,
            format!("HTTP {status}: {}", snippet(&body)),
        )),
        _ => Err((
            ErrorClass::Execution,
            format!("HTTP {status}: {}", snippet(&body)),
        )),
    }
}

fn snippet(body: &str) -> &str {
    match body.char_indices().nth(200) {
        Some((i, _)) => &body[..i],
        None => body,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_placeholders() {
        let env = EnvVars::isolated().set("HOST", "http://x").set("KEY", "k1");
        assert_eq!(
            resolve_env("${HOST}/a?k=${KEY}", &env).unwrap(),
            "http://x/a?k=k1"
        );
        let err = resolve_env("${HOST}/${NOPE}", &env).unwrap_err();
        assert_eq!(err.0, ErrorClass::Unavailable);
        assert!(err.1.contains("NOPE"));
    }

    #[test]
    fn binding_serde_shape() {
        let b: ApiBinding = serde_json::from_str(
            r#"{"url":"${S}/fetch","headers":{"Authorization":"Bearer ${TOKEN}"}}"#,
        )
        .unwrap();
        assert_eq!(b.method, HttpMethod::Post);
        assert_eq!(b.headers["Authorization"], "Bearer ${TOKEN}");
    }
}
