//! Community contributions: submissions, reviewer decisions, feedback and the audit log.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::reliability::{cases_path, find_check, load_cases, manifest_path};
use crate::runtime::{RegistryError, ToolBinding, ToolRegistry};
use crate::schema::{canonical_serialize, validate_manifest_value};
use crate::store::{
    is_safe_id, submission_path, to_pretty, trace_path, Batch, Store, StoreError, AUDIT_LOG,
};
use crate::trace::{deserialize_jsonl, EventKind};
use crate::verification::{CaseStatus, Expectation, Origin, TestCase};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubmissionKind {
    TestCase,
    ToolManifest,
    Feedback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackScope {
    ToolOutput,
    AgentResponse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rating {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackRecord {
    pub scope: FeedbackScope,
    /// A trace id or a check id (`r<round>/<case_id>`).
    pub target_id: String,
    pub rating: Rating,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
}

/// A proposed tool: its manifest document plus how to run it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolContribution {
    pub manifest: Value,
    pub binding: ToolBinding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum SubmissionContent {
    TestCase(TestCase),
    ToolManifest(ToolContribution),
    Feedback(FeedbackRecord),
}

impl SubmissionContent {
    pub fn kind(&self) -> SubmissionKind {
        match self {
            SubmissionContent::TestCase(_) => SubmissionKind::TestCase,
            SubmissionContent::ToolManifest(_) => SubmissionKind::ToolManifest,
            SubmissionContent::Feedback(_) => SubmissionKind::Feedback,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Review {
    pub reviewer: String,
    pub decided_at: DateTime<Utc>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub id: String,
    #[serde(flatten)]
    pub content: SubmissionContent,
    pub submitter: String,
    pub submitted_at: DateTime<Utc>,
    pub status: CaseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub review: Option<Review>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub submission_id: String,
    pub kind: SubmissionKind,
    pub decision: Decision,
    pub reviewer: String,
    pub reason: String,
    pub decided_at: DateTime<Utc>,
}

#[derive(Debug, thiserror::Error)]
pub enum CommunityError {
    #[error("submission rejected: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("unknown tool \"{0}\"")]
    UnknownTool(String),
    #[error("feedback target \"{0}\" does not exist")]
    UnknownTarget(String),
    #[error("submission \"{0}\" not found")]
    NotFound(String),
    #[error("submission {id} was already {status:?}")]
    Conflict { id: String, status: CaseStatus },
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

fn next_submission_id(store: &Store) -> Result<String, StoreError> {
    let n = store
        .list("state/submissions")?
        .iter()
        .filter_map(|f| {
            f.strip_prefix("sub-")?
                .strip_suffix(".json")?
                .parse::<u64>()
                .ok()
        })
        .max()
        .unwrap_or(0);
    Ok(format!("sub-{:06}", n + 1))
}

fn pending_case_ids(store: &Store, tool: &str) -> Result<Vec<String>, StoreError> {
    Ok(list_submissions(store, Some(CaseStatus::Pending))?
        .into_iter()
        .filter_map(|s| match s.content {
            SubmissionContent::TestCase(c) if c.tool_name == tool => Some(c.id),
            _ => None,
        })
        .collect())
}

/// Whether a trace or persisted check result with this id exists.
pub fn target_exists(store: &Store, target_id: &str) -> Result<bool, StoreError> {
    if is_safe_id(target_id) && store.exists(&trace_path(target_id))? {
        return Ok(true);
    }
    Ok(find_check(store, target_id)?.is_some())
}

/// Pre-validates and queues a contribution as pending. Invalid payloads never enter the queue.
pub fn submit(
    store: &Store,
    registry: &ToolRegistry,
    content: SubmissionContent,
    submitter: &str,
) -> Result<Submission, CommunityError> {
    let _guard = store.lock();
    let content = match content {
        SubmissionContent::TestCase(mut case) => {
            let descriptor = registry
                .descriptor(&case.tool_name)
                .ok_or_else(|| CommunityError::UnknownTool(case.tool_name.clone()))?;
            let mut problems = match case.validate_against(&descriptor) {
                Ok(()) => Vec::new(),
                Err(p) => p,
            };
            if !is_safe_id(&case.id) {
                problems.push(format!(
                    "id: {:?} must be non-empty and use only letters, digits, '-', '_' or '.'",
                    case.id
                ));
            } else if load_cases(store, &case.tool_name)?
                .iter()
                .any(|c| c.id == case.id)
                || pending_case_ids(store, &case.tool_name)?.contains(&case.id)
            {
                problems.push(format!(
                    "id: a case named {:?} already exists for {}",
                    case.id, case.tool_name
                ));
            }
            if !problems.is_empty() {
                return Err(CommunityError::Invalid(problems));
            }
            case.origin = Origin::Community;
            case.status = CaseStatus::Pending;
            case.contributor = Some(submitter.to_string());
            case.created_at = Utc::now();
            SubmissionContent::TestCase(case)
        }
        SubmissionContent::ToolManifest(contribution) => {
            let descriptor = validate_manifest_value(&contribution.manifest).map_err(|e| {
                CommunityError::Invalid(e.violations().iter().map(|v| v.to_string()).collect())
            })?;
            let mut problems = Vec::new();
            if registry.contains(&descriptor.name) {
                problems.push(format!(
                    "name: a tool named {:?} is already registered",
                    descriptor.name
                ));
            }
            if contribution.binding.category() != descriptor.category {
                problems.push(format!(
                    "binding: a {} tool needs a matching binding, got {}",
                    descriptor.category,
                    contribution.binding.category()
                ));
            }
            if !problems.is_empty() {
                return Err(CommunityError::Invalid(problems));
            }
            SubmissionContent::ToolManifest(contribution)
        }
        SubmissionContent::Feedback(record) => {
            if !target_exists(store, &record.target_id)? {
                return Err(CommunityError::UnknownTarget(record.target_id));
            }
            SubmissionContent::Feedback(record)
        }
    };
    let submission = Submission {
        id: next_submission_id(store)?,
        content,
        submitter: submitter.to_string(),
        submitted_at: Utc::now(),
        status: CaseStatus::Pending,
        review: None,
    };
    store
        .storage()
        .write(
            &submission_path(&submission.id),
            to_pretty(&submission).as_bytes(),
        )
        .map_err(StoreError::from)?;
    Ok(submission)
}

pub fn load_submission(store: &Store, id: &str) -> Result<Option<Submission>, StoreError> {
    if !is_safe_id(id) {
        return Ok(None);
    }
    store.read_json(&submission_path(id))
}

/// Submissions in id order, optionally filtered by status.
pub fn list_submissions(
    store: &Store,
    status: Option<CaseStatus>,
) -> Result<Vec<Submission>, StoreError> {
    let mut out = Vec::new();
    for file in store.list("state/submissions")? {
        if let Some(id) = file.strip_suffix(".json") {
            if let Some(s) = load_submission(store, id)? {
                if status.is_none_or(|st| st == s.status) {
                    out.push(s);
                }
            }
        }
    }
    Ok(out)
}

pub fn load_audit(store: &Store) -> Result<Vec<AuditRecord>, StoreError> {
    store.read_jsonl(AUDIT_LOG)
}

/// Decides a pending submission exactly once. Accepted test cases join their tool's
/// suite; accepted manifests are registered and evaluable in the next round.
pub fn review(
    store: &Store,
    registry: &ToolRegistry,
    id: &str,
    decision: Decision,
    reviewer: &str,
    reason: &str,
) -> Result<Submission, CommunityError> {
    let _guard = store.lock();
    let mut sub =
        load_submission(store, id)?.ok_or_else(|| CommunityError::NotFound(id.to_string()))?;
    if sub.status != CaseStatus::Pending {
        return Err(CommunityError::Conflict {
            id: id.to_string(),
            status: sub.status,
        });
    }
    let decided_at = Utc::now();
    let status = match decision {
        Decision::Accept => CaseStatus::Accepted,
        Decision::Reject => CaseStatus::Rejected,
    };
    sub.status = status;
    sub.review = Some(Review {
        reviewer: reviewer.to_string(),
        decided_at,
        reason: reason.to_string(),
    });

    let mut batch = Batch::new();
    let mut to_register = None;
    match &mut sub.content {
        SubmissionContent::TestCase(case) => {
            case.status = status;
            if decision == Decision::Reject {
                case.notes = Some(format!("rejected by {reviewer}: {reason}"));
            }
            // Rejected cases are kept alongside accepted ones; only accepted cases run.
            let mut cases = load_cases(store, &case.tool_name)?;
            cases.push(case.clone());
            batch.write(cases_path(&case.tool_name), to_pretty(&cases));
        }
        SubmissionContent::ToolManifest(contribution) if decision == Decision::Accept => {
            let descriptor = validate_manifest_value(&contribution.manifest).map_err(|e| {
                CommunityError::Invalid(e.violations().iter().map(|v| v.to_string()).collect())
            })?;
            if registry.contains(&descriptor.name) {
                return Err(RegistryError::DuplicateName(descriptor.name).into());
            }
            let name = descriptor.name.clone();
            batch.write(
                manifest_path(&name),
                String::from_utf8(canonical_serialize(&descriptor))
                    .expect("canonical JSON is UTF-8"),
            );
            batch.write(
                format!("bindings/{name}.json"),
                to_pretty(&contribution.binding),
            );
            if !store.exists(&cases_path(&name))? {
                batch.write(cases_path(&name), "[]\n");
            }
            to_register = Some((descriptor, contribution.binding.clone()));
        }
        SubmissionContent::ToolManifest(_) | SubmissionContent::Feedback(_) => {}
    }
    batch.write(submission_path(id), to_pretty(&sub));
    batch.write(
        AUDIT_LOG,
        store.appended(
            AUDIT_LOG,
            &AuditRecord {
                submission_id: id.to_string(),
                kind: sub.content.kind(),
                decision,
                reviewer: reviewer.to_string(),
                reason: reason.to_string(),
                decided_at,
            },
        )?,
    );

    if let Some((descriptor, binding)) = &to_register {
        // Dry run so an unregistrable tool is refused before anything is written.
        let probe = ToolRegistry::new();
        probe.register(descriptor.clone(), binding.clone())?;
    }
    store.commit(&batch)?;
    if let Some((descriptor, binding)) = to_register {
        registry.register(descriptor, binding)?;
    }
    Ok(sub)
}

/// Turns feedback on an observed failure into a draft community test case.
/// The draft is returned, not submitted; the contributor edits the expectation.
pub fn promote_feedback_to_case(
    store: &Store,
    feedback: &FeedbackRecord,
    case_id: &str,
) -> Result<TestCase, CommunityError> {
    let target = &feedback.target_id;
    let notes = Some(format!("promoted from feedback on {target}"));
    if let Some(check) = find_check(store, target)? {
        let mut case = check.case.clone();
        case.id = case_id.to_string();
        case.origin = Origin::Community;
        case.status = CaseStatus::Pending;
        case.contributor = None;
        case.created_at = Utc::now();
        case.notes = notes;
        return Ok(case);
    }
    if is_safe_id(target) {
        if let Some(text) = store.read_string(&trace_path(target))? {
            let trace = deserialize_jsonl(&text)
                .map_err(|e| StoreError::corrupt(&trace_path(target), e))?;
            // Prefer the last failing call, else the last call.
            let calls: Vec<_> = trace
                .events
                .iter()
                .filter(|e| e.kind == EventKind::ToolInvocation || e.kind == EventKind::ToolError)
                .filter(|e| e.payload.tool.is_some() && e.payload.arguments.is_some())
                .collect();
            let pick = calls
                .iter()
                .rev()
                .find(|e| e.kind == EventKind::ToolError)
                .or(calls.last());
            if let Some(event) = pick {
                let mut case = TestCase::new(
                    case_id,
                    event.payload.tool.clone().unwrap_or_default(),
                    event.payload.arguments.clone().unwrap_or_default(),
                    Expectation::Property {
                        predicate: "non_empty".into(),
                        params: Default::default(),
                    },
                );
                case.origin = Origin::Community;
                case.status = CaseStatus::Pending;
                case.notes = notes;
                return Ok(case);
            }
            return Err(CommunityError::Invalid(vec![format!(
                "trace {target} contains no tool call to promote"
            )]));
        }
    }
    Err(CommunityError::UnknownTarget(target.clone()))
}
