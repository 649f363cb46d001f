//! Hierarchical planner / generator / verifier / composer policy with a guarded shared memory.

use serde_json::{json, Value};

use super::{
    extract_final_answer, parse_json_object, PolicyOutcome, RunStatus, Session, SharedMemory,
    VerifierMode, FINAL_ANSWER,
};
use crate::llm::{BackendError, ChatMessage, Role, ToolCall};
use crate::trace::{EventKind, EventPayload, NewEvent};

fn parse_sub_problems(text: &str) -> Option<Vec<String>> {
    let obj = parse_json_object(text)?;
    obj.get("sub_problems")?
        .as_array()?
        .iter()
        .map(|v| v.as_str().map(|s| s.trim().to_string()))
        .collect::<Option<Vec<_>>>()
        .map(|v| v.into_iter().filter(|s| !s.is_empty()).collect())
}

fn parse_verified(text: &str) -> Option<(bool, String)> {
    let obj = parse_json_object(text)?;
    let verified = obj.get("verified")?.as_bool()?;
    let reason = obj
        .get("reason")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    Some((verified, reason))
}

/// Verifier judgement on one candidate result; unparseable replies count as rejection.
fn verify(
    s: &Session<'_>,
    index: usize,
    sub_problem: &str,
    tool: Option<&str>,
    result: &str,
) -> Result<bool, BackendError> {
    let (verified, reason) = match s.config.verifier {
        VerifierMode::RuleBased => {
            let ok = !result.trim().is_empty() && !result.starts_with("ERROR (");
            (ok, "rule-based check".to_string())
        }
        VerifierMode::Backend => {
            let prompt = s.templates.render(
                "multi_verifier",
                &[
                    ("sub_problem", sub_problem),
                    ("tool", tool.unwrap_or("(none)")),
                    ("result", result),
                ],
            );
            s.chat_with_correction(
                "verifier",
                vec![ChatMessage::user(prompt)],
                "Reply with ONLY a JSON object {\"verified\": true | false, \"reason\": \"...\"}.",
                parse_verified,
            )?
            .unwrap_or((false, "unparseable verifier output".to_string()))
        }
    };
    let mut payload = EventPayload::phase("verifier")
        .ok(verified)
        .message(reason)
        .sub_problem(index);
    payload.tool = tool.map(str::to_string);
    s.rec
        .record(NewEvent::new(EventKind::VerifierDecision, payload));
    Ok(verified)
}

/// Generator mini-loop for one sub-problem. Returns once a result is stored,
/// the generator gives a plain-text result, or the step budget runs out.
fn solve(
    s: &Session<'_>,
    memory: &mut SharedMemory,
    index: usize,
    sub_problems: &[String],
    query: &str,
) -> Result<(), BackendError> {
    let sub_problem = &sub_problems[index];
    let prompt = s.templates.render(
        "multi_generator",
        &[
            ("query", query),
            ("sub_problem", sub_problem),
            ("memory", &memory.render(sub_problems)),
            ("tools", &s.tool_listing()),
        ],
    );
    let mut messages = vec![ChatMessage::user(prompt)];
    for step in 1..=s.config.sub_steps() {
        s.step("generator", json!({"sub_problem": index, "step": step}));
        let resp = s.chat("generator", messages.clone(), true)?;
        let Some(call) = resp.tool_call else {
            let result = extract_final_answer(&resp.content);
            if verify(s, index, sub_problem, None, &result)? {
                store(s, memory, index, None, result);
            }
            return Ok(());
        };
        let call_id = call
            .id
            .clone()
            .unwrap_or_else(|| format!("call-{}-{step}", index + 1));
        let mut assistant = ChatMessage::assistant(resp.content);
        assistant.tool_call = Some(ToolCall {
            id: Some(call_id.clone()),
            ..call.clone()
        });
        messages.push(assistant);

        let feedback = match s.invoke(&call.tool_name, &call.arguments, Some(index)) {
            Ok(obs) => {
                let result = obs.text();
                if verify(s, index, sub_problem, Some(&call.tool_name), &result)? {
                    store(s, memory, index, Some(call.tool_name.clone()), result);
                    return Ok(());
                }
                format!(
                    "{result}\n(The verifier rejected this result for the current sub-problem.)"
                )
            }
            Err(failure) => failure.feedback(),
        };
        let mut tool_msg = ChatMessage::new(Role::Tool, feedback);
        tool_msg.tool_call_id = Some(call_id);
        messages.push(tool_msg);
    }
    Ok(())
}

fn store(
    s: &Session<'_>,
    memory: &mut SharedMemory,
    index: usize,
    tool: Option<String>,
    result: String,
) {
    let mut payload = EventPayload::phase("memory")
        .sub_problem(index)
        .message(&result);
    payload.tool = tool.clone();
    if memory.write(index, tool, result, true) {
        s.rec.record(NewEvent::new(EventKind::MemoryWrite, payload));
    }
}

pub(super) fn run(s: &Session<'_>) -> PolicyOutcome {
    let query = s.task.prompt();
    s.step("planner", json!({}));
    let prompt = s.templates.render(
        "multi_planner",
        &[("query", &query), ("tools", &s.tool_listing())],
    );
    let sub_problems = match s.chat_with_correction(
        "planner",
        vec![ChatMessage::user(prompt)],
        "Reply with ONLY a JSON object {\"sub_problems\": [\"...\"]}.",
        parse_sub_problems,
    ) {
        Ok(p) => p.unwrap_or_default(),
        Err(e) => return PolicyOutcome::failed(&e),
    };
    s.step("decomposition", json!({"sub_problems": sub_problems}));

    let mut memory = SharedMemory::new();
    let budget = s.config.steps() as usize;
    for index in 0..sub_problems.len().min(budget) {
        if let Err(e) = solve(s, &mut memory, index, &sub_problems, &query) {
            return PolicyOutcome::failed(&e);
        }
    }

    let gaps: Vec<usize> = (0..sub_problems.len())
        .filter(|i| !memory.has(*i))
        .collect();
    for &i in &gaps {
        s.rec.record(NewEvent::new(
            EventKind::Warning,
            EventPayload::phase("composer")
                .sub_problem(i)
                .message(format!("no validated result for sub-problem {}", i + 1)),
        ));
    }
    let gap_text = if gaps.is_empty() {
        "(none)".to_string()
    } else {
        gaps.iter()
            .map(|&i| format!("[{}] {}", i + 1, sub_problems[i]))
            .collect::<Vec<_>>()
            .join("\n")
    };

    s.step(
        "composer",
        json!({"memory_entries": memory.len(), "gaps": gaps}),
    );
    let prompt = s.templates.render(
        "multi_composer",
        &[
            ("query", &query),
            ("memory", &memory.render(&sub_problems)),
            ("gaps", &gap_text),
        ],
    );
    let resp = match s.chat("composer", vec![ChatMessage::user(prompt)], false) {
        Ok(r) => r,
        Err(e) => return PolicyOutcome::failed(&e),
    };
    let summary = match resp.content.rfind(FINAL_ANSWER) {
        Some(i) => resp.content[..i].trim().to_string(),
        None => String::new(),
    };
    let status = if sub_problems.len() > budget {
        RunStatus::StepBudgetExhausted
    } else {
        RunStatus::Completed
    };
    PolicyOutcome {
        answer: extract_final_answer(&resp.content),
        status: Some(status),
        memory: Some(memory.into_entries()),
        summary: (!summary.is_empty()).then_some(summary),
        error: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decomposition_parsing() {
        assert_eq!(
            parse_sub_problems(r#"{"sub_problems": ["a", " b ", ""]}"#),
            Some(vec!["a".to_string(), "b".to_string()])
        );
        assert_eq!(parse_sub_problems(r#"{"sub_problems": []}"#), Some(vec![]));
        assert_eq!(parse_sub_problems(r#"{"sub_problems": [1]}"#), None);
        assert_eq!(
            parse_verified(r#"{"verified": false, "reason": "off"}"#),
            Some((false, "off".into()))
        );
    }
}
