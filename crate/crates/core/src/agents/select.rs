//! Greedy top-k tool selection with an optional reliability tie-break.
//!
//! Scores are normalized by the best score before ranking, so only relative
//! relevance matters. With reliability routing on, tools within
//! [`NEAR_TIE_EPSILON`] of a cluster's best score are reordered by current
//! accuracy (unevaluated tools last). This heuristic is one choice among many
//! and is meant to be replaced if a better combination rule is needed.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::llm::{ChatMessage, ChatRequest};
use crate::runtime::InvokeContext;
use crate::schema::ToolDescriptor;
use crate::templates::Templates;
use crate::trace::{EventKind, EventPayload, NewEvent, TraceRecorder};

pub const NEAR_TIE_EPSILON: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    Lexical,
    LlmRanked,
}

impl SelectionMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lexical" => Some(Self::Lexical),
            "llm_ranked" => Some(Self::LlmRanked),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub tools: Vec<String>,
    /// Normalized relevance of every candidate, in ranked order.
    pub scores: Vec<(String, f64)>,
    pub mode: SelectionMode,
    /// True when llm_ranked fell back to lexical scoring.
    #[serde(default)]
    pub fell_back: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelectError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("k = {k} exceeds the {available} candidate tools")]
    TooLarge { k: usize, available: usize },
}

/// A candidate for ranking: raw relevance (any non-negative scale) and current accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub name: String,
    pub score: f64,
    pub accuracy: Option<f64>,
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "how", "in", "is", "it", "me",
    "of", "on", "or", "the", "this", "to", "what", "which", "with",
];

/// Crude suffix stripping so "converts", "converter" and "convert" meet.
fn stem(word: &str) -> String {
    for suffix in ["ing", "ers", "er", "ed", "es", "s"] {
        if let Some(base) = word.strip_suffix(suffix) {
            if base.chars().count() >= 3 && !(suffix == "s" && base.ends_with('s')) {
                return base.to_string();
            }
        }
    }
    word.to_string()
}

fn tokens(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .map(|t| stem(&t))
        .collect()
}

/// Number of distinct query tokens found in the tool's name, description or tags.
pub fn lexical_score(query: &str, tool: &ToolDescriptor) -> f64 {
    let mut doc = tokens(&tool.name);
    doc.extend(tokens(&tool.description));
    for tag in &tool.tags {
        doc.extend(tokens(tag));
    }
    tokens(query).intersection(&doc).count() as f64
}

/// Orders candidates by normalized score (name breaks exact ties), then, with
/// routing, reorders each near-tie cluster by accuracy.
pub fn rank(candidates: &[Candidate], reliability_routing: bool) -> Vec<(String, f64)> {
    let max = candidates.iter().map(|c| c.score).fold(0.0_f64, f64::max);
    let mut scored: Vec<(&Candidate, f64)> = candidates
        .iter()
        .map(|c| (c, if max > 0.0 { c.score / max } else { 0.0 }))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.name.cmp(&b.0.name)));
    if reliability_routing {
        let mut out = Vec::with_capacity(scored.len());
        let mut i = 0;
        while i < scored.len() {
            let head = scored[i].1;
            let mut j = i;
            while j < scored.len() && head - scored[j].1 <= NEAR_TIE_EPSILON + 1e-12 {
                j += 1;
            }
            let mut cluster = scored[i..j].to_vec();
            cluster.sort_by(|a, b| {
                let acc = |c: &Candidate| c.accuracy.unwrap_or(-1.0);
                acc(b.0)
                    .total_cmp(&acc(a.0))
                    .then_with(|| b.1.total_cmp(&a.1))
                    .then_with(|| a.0.name.cmp(&b.0.name))
            });
            out.extend(cluster);
            i = j;
        }
        scored = out;
    }
    scored
        .into_iter()
        .map(|(c, s)| (c.name.clone(), s))
        .collect()
}

fn parse_rank(text: &str) -> Option<f64> {
    let digits: String = text
        .trim()
        .chars()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(|c| c.is_ascii_digit())
        .collect();
    let n: u32 = digits.parse().ok()?;
    (n <= 10).then_some(n as f64)
}

pub struct SelectRequest<'a> {
    pub query: &'a str,
    pub k: usize,
    pub mode: SelectionMode,
    pub reliability_routing: bool,
    pub backend_id: &'a str,
}

/// Picks the `k` most relevant of the candidate tools. Records a `select` policy
/// step (and backend calls, in llm_ranked mode) when a recorder is given.
pub fn select_tools(
    descriptors: &[ToolDescriptor],
    ctx: &InvokeContext,
    rec: Option<&TraceRecorder>,
    req: &SelectRequest<'_>,
) -> Result<Selection, SelectError> {
    if req.k == 0 {
        return Err(SelectError::ZeroK);
    }
    if req.k > descriptors.len() {
        return Err(SelectError::TooLarge {
            k: req.k,
            available: descriptors.len(),
        });
    }
    let record = |e: NewEvent| {
        if let Some(r) = rec {
            r.record(e);
        }
    };
    let lexical = |d: &ToolDescriptor| lexical_score(req.query, d);

    let mut fell_back = false;
    let scores: Vec<f64> = match req.mode {
        SelectionMode::Lexical => descriptors.iter().map(lexical).collect(),
        SelectionMode::LlmRanked => {
            let templates = Templates::default();
            let mut out = Vec::with_capacity(descriptors.len());
            for d in descriptors {
                let prompt = templates.render(
                    "tool_rank",
                    &[
                        ("query", req.query),
                        ("tool", &d.name),
                        ("description", &d.description),
                    ],
                );
                let request = ChatRequest::new(req.backend_id, vec![ChatMessage::user(prompt)]);
                match ctx.backends.complete(&request) {
                    Ok(resp) => {
                        record(NewEvent::new(
                            EventKind::BackendCall,
                            EventPayload::phase("select")
                                .ok(true)
                                .detail(json!({"tool": d.name, "content": resp.content})),
                        ));
                        out.push(parse_rank(&resp.content).unwrap_or(0.0));
                    }
                    Err(e) => {
                        record(NewEvent::new(
                            EventKind::BackendCall,
                            EventPayload::phase("select")
                                .ok(false)
                                .message(e.to_string()),
                        ));
                        record(NewEvent::new(
                            EventKind::Warning,
                            EventPayload::phase("select").message(format!(
                                "llm_ranked selection failed ({e}); using lexical scores"
                            )),
                        ));
                        fell_back = true;
                        break;
                    }
                }
            }
            if fell_back {
                descriptors.iter().map(lexical).collect()
            } else {
                out
            }
        }
    };

    let candidates: Vec<Candidate> = descriptors
        .iter()
        .zip(scores)
        .map(|(d, score)| Candidate {
            name: d.name.clone(),
            score,
            accuracy: d.accuracy_summary.as_ref().map(|a| a.accuracy),
        })
        .collect();
    let ranked = rank(&candidates, req.reliability_routing);
    let tools: Vec<String> = ranked.iter().take(req.k).map(|(n, _)| n.clone()).collect();
    record(NewEvent::new(
        EventKind::PolicyStep,
        EventPayload::phase("select").detail(json!({
            "k": req.k,
            "mode": req.mode,
            "reliability_routing": req.reliability_routing,
            "selected": tools,
        })),
    ));
    Ok(Selection {
        tools,
        scores: ranked,
        mode: req.mode,
        fell_back,
    })
}
