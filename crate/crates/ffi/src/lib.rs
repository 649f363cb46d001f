//! C ABI over the opentools workspace.
//!
//! Every function returns an [`OtStatus`]. Documents cross the boundary as
//! NUL-terminated UTF-8 JSON strings; strings handed out must be released with
//! [`ot_string_free`]. After a non-OK status, [`ot_last_error`] describes the
//! failure on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use opentools::community::CommunityError;
use opentools::llm::BackendRegistry;
use opentools::reliability::RoundError;
use opentools::runtime::EnvVars;
use opentools::schema::validate_manifest;
use opentools::store::StoreError;
use opentools::workspace::{self, AgentRequest, Workspace, WorkspaceError};
use serde_json::{Map, Value};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OtStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidJson = 3,
    /// Request, manifest or submission rejected; see the last error.
    Validation = 4,
    NotFound = 5,
    NotInitialized = 6,
    /// The tool ran and failed; the output document is the tool error.
    ToolError = 7,
    /// The agent run failed (backend unavailable); the output document is the run.
    RunFailed = 8,
    StateCorrupt = 9,
    Io = 10,
    Panic = 11,
}

/// Opaque handle to an opened state directory.
pub struct OtWorkspace {
    inner: Workspace,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("NUL bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Fail(OtStatus, String);

impl Fail {
    fn new(status: OtStatus, message: impl Into<String>) -> Self {
        Fail(status, message.into())
    }
}

fn store_status(e: &StoreError) -> OtStatus {
    match e {
        StoreError::Corrupt { .. } => OtStatus::StateCorrupt,
        StoreError::Io(_) => OtStatus::Io,
    }
}

impl From<WorkspaceError> for Fail {
    fn from(e: WorkspaceError) -> Self {
        let status = match &e {
            WorkspaceError::NotInitialized(_) => OtStatus::NotInitialized,
            WorkspaceError::NotFound(_) => OtStatus::NotFound,
            WorkspaceError::Store(s)
            | WorkspaceError::Round(RoundError::Store(s))
            | WorkspaceError::Community(CommunityError::Store(s)) => store_status(s),
            WorkspaceError::Community(
                CommunityError::NotFound(_) | CommunityError::UnknownTarget(_),
            ) => OtStatus::NotFound,
            _ => OtStatus::Validation,
        };
        Fail(status, e.to_string())
    }
}

/// Runs `f`, converting errors and panics into a status plus the last error.
fn guard(f: impl FnOnce() -> Result<OtStatus, Fail>) -> OtStatus {
    clear_last_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(status)) => status,
        Ok(Err(Fail(status, message))) => {
            set_last_error(&message);
            status
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("internal panic: {message}"));
            OtStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::new(OtStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::new(OtStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

/// # Safety
/// `p` must be null or point to a live handle from [`ot_open`].
unsafe fn ws_arg<'a>(p: *const OtWorkspace) -> Result<&'a Workspace, Fail> {
    p.as_ref()
        .map(|w| &w.inner)
        .ok_or_else(|| Fail::new(OtStatus::NullArgument, "workspace handle is null"))
}

/// # Safety
/// `out` must be null or writable.
unsafe fn out_arg<'a>(out: *mut *mut c_char) -> Result<&'a mut *mut c_char, Fail> {
    let out = out
        .as_mut()
        .ok_or_else(|| Fail::new(OtStatus::NullArgument, "output pointer is null"))?;
    *out = ptr::null_mut();
    Ok(out)
}

fn to_c(text: String) -> *mut c_char {
    CString::new(text.replace('\0', "\\u0000"))
        .expect("NUL bytes escaped")
        .into_raw()
}

fn json_out(out: &mut *mut c_char, value: &impl serde::Serialize) {
    *out = to_c(serde_json::to_string(value).expect("document serializes"));
}

/// Library version as a static string. Never free it.
#[no_mangle]
pub extern "C" fn ot_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread. Never free it.
#[no_mangle]
pub extern "C" fn ot_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned through an output parameter. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ot_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates the state layout with the seed toolbox. `created` (optional)
/// reports whether anything was written.
///
/// # Safety
/// `state_dir` must be a NUL-terminated string; `created` null or writable.
#[no_mangle]
pub unsafe extern "C" fn ot_init(state_dir: *const c_char, created: *mut bool) -> OtStatus {
    guard(|| {
        let dir = str_arg(state_dir, "state_dir")?;
        let made = workspace::init_dir(Path::new(dir))
            .map_err(|e| Fail::new(store_status(&e), e.to_string()))?;
        if let Some(c) = created.as_mut() {
            *c = made;
        }
        Ok(OtStatus::Ok)
    })
}

/// Opens an initialized state directory. LLM backends come from the
/// environment; agent requests may carry their own `mock_script`.
///
/// # Safety
/// `state_dir` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ot_open(state_dir: *const c_char, out: *mut *mut OtWorkspace) -> OtStatus {
    guard(|| {
        let out = out
            .as_mut()
            .ok_or_else(|| Fail::new(OtStatus::NullArgument, "output pointer is null"))?;
        *out = ptr::null_mut();
        let dir = str_arg(state_dir, "state_dir")?;
        let inner = Workspace::open_dir(
            Path::new(dir),
            BackendRegistry::from_env(),
            EnvVars::process(),
        )?;
        *out = Box::into_raw(Box::new(OtWorkspace { inner }));
        Ok(OtStatus::Ok)
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `ws` must come from [`ot_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ot_close(ws: *mut OtWorkspace) {
    if !ws.is_null() {
        drop(Box::from_raw(ws));
    }
}

/// Registered tool descriptors as a JSON array.
///
/// # Safety
/// `ws` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ot_tools(ws: *const OtWorkspace, out: *mut *mut c_char) -> OtStatus {
    guard(|| {
        let ws = ws_arg(ws)?;
        let out = out_arg(out)?;
        json_out(out, &ws.tools());
        Ok(OtStatus::Ok)
    })
}

/// Validates a manifest document. On success `out` holds the descriptor; on
/// [`OtStatus::Validation`] it holds the violations array.
///
/// # Safety
/// `manifest_json` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ot_validate_manifest(
    manifest_json: *const c_char,
    out: *mut *mut c_char,
) -> OtStatus {
    guard(|| {
        let raw = str_arg(manifest_json, "manifest_json")?;
        let out = out_arg(out)?;
        match validate_manifest(raw.as_bytes()) {
            Ok(descriptor) => {
                json_out(out, &descriptor);
                Ok(OtStatus::Ok)
            }
            Err(e) => {
                json_out(out, &e.violations());
                Err(Fail::new(OtStatus::Validation, e.to_string()))
            }
        }
    })
}

/// Invokes a tool with a JSON object of arguments. `out` holds the
/// observation on success, the tool error on [`OtStatus::ToolError`].
///
/// # Safety
/// String arguments must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ot_invoke(
    ws: *const OtWorkspace,
    tool: *const c_char,
    args_json: *const c_char,
    out: *mut *mut c_char,
) -> OtStatus {
    guard(|| {
        let ws = ws_arg(ws)?;
        let tool = str_arg(tool, "tool")?;
        let args: Map<String, Value> = serde_json::from_str(str_arg(args_json, "args_json")?)
            .map_err(|e| Fail::new(OtStatus::InvalidJson, format!("args_json: {e}")))?;
        let out = out_arg(out)?;
        match ws.invoke(tool, &args) {
            Err(unknown) => Err(Fail::new(OtStatus::NotFound, unknown.to_string())),
            Ok(Ok(observation)) => {
                json_out(out, &observation);
                Ok(OtStatus::Ok)
            }
            Ok(Err(err)) => {
                json_out(out, &err);
                Err(Fail::new(OtStatus::ToolError, err.to_string()))
            }
        }
    })
}

/// Runs one evaluation round; `out` holds the round document.
///
/// # Safety
/// `ws` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ot_eval_run(
    ws: *const OtWorkspace,
    parallelism: u32,
    out: *mut *mut c_char,
) -> OtStatus {
    guard(|| {
        let ws = ws_arg(ws)?;
        let out = out_arg(out)?;
        let outcome = ws.run_round(parallelism as usize)?;
        json_out(out, &outcome.round);
        Ok(OtStatus::Ok)
    })
}

/// The current reliability report.
///
/// # Safety
/// `ws` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ot_report(ws: *const OtWorkspace, out: *mut *mut c_char) -> OtStatus {
    guard(|| {
        let ws = ws_arg(ws)?;
        let out = out_arg(out)?;
        let bytes = ws.report()?.to_bytes();
        *out = to_c(String::from_utf8(bytes).expect("report is UTF-8"));
        Ok(OtStatus::Ok)
    })
}

/// Runs an agent from a request document (`query`, `policy_config`, optional
/// `tool_names`, `selection`, `mock_script`). `out` holds the persisted run,
/// also on [`OtStatus::RunFailed`].
///
/// # Safety
/// `request_json` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ot_agent_run(
    ws: *const OtWorkspace,
    request_json: *const c_char,
    out: *mut *mut c_char,
) -> OtStatus {
    guard(|| {
        let ws = ws_arg(ws)?;
        let request: AgentRequest = serde_json::from_str(str_arg(request_json, "request_json")?)
            .map_err(|e| Fail::new(OtStatus::InvalidJson, format!("request_json: {e}")))?;
        let out = out_arg(out)?;
        let run = ws.run_agent(&request)?;
        json_out(out, &run);
        if run.status == opentools::agents::RunStatus::Failed {
            return Err(Fail::new(
                OtStatus::RunFailed,
                run.error.unwrap_or_else(|| "agent run failed".into()),
            ));
        }
        Ok(OtStatus::Ok)
    })
}

/// A persisted trace as JSONL.
///
/// # Safety
/// `trace_id` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ot_trace(
    ws: *const OtWorkspace,
    trace_id: *const c_char,
    out: *mut *mut c_char,
) -> OtStatus {
    guard(|| {
        let ws = ws_arg(ws)?;
        let id = str_arg(trace_id, "trace_id")?;
        let out = out_arg(out)?;
        *out = to_c(ws.trace_text(id)?);
        Ok(OtStatus::Ok)
    })
}
