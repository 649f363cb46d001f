//! Reason-and-act loop: each step either calls one tool or answers.

use serde_json::json;

use super::{extract_final_answer, PolicyOutcome, RunStatus, Session, FINAL_ANSWER};
use crate::llm::{ChatMessage, Role};

pub(super) fn run(s: &Session<'_>) -> PolicyOutcome {
    let system = s
        .templates
        .render("react_system", &[("tools", &s.tool_listing())]);
    let mut messages = vec![
        ChatMessage::system(system.trim_end()),
        ChatMessage::user(s.task.prompt()),
    ];
    let mut last_observation: Option<String> = None;
    let mut last_thought: Option<String> = None;

    for step in 1..=s.config.steps() {
        s.step("react", json!({"step": step}));
        let resp = match s.chat("react", messages.clone(), true) {
            Ok(r) => r,
            Err(e) => return PolicyOutcome::failed(&e),
        };
        let Some(call) = resp.tool_call else {
            return PolicyOutcome::completed(extract_final_answer(&resp.content));
        };
        if !resp.content.trim().is_empty() {
            last_thought = Some(resp.content.clone());
        }
        let call_id = call.id.clone().unwrap_or_else(|| format!("call-{step}"));
        let mut assistant = ChatMessage::assistant(resp.content);
        assistant.tool_call = Some(crate::llm::ToolCall {
            id: Some(call_id.clone()),
            ..call.clone()
        });
        messages.push(assistant);

        let observation = match s.invoke(&call.tool_name, &call.arguments, None) {
            Ok(obs) => obs.text(),
            Err(failure) => failure.feedback(),
        };
        last_observation = Some(observation.clone());
        let mut tool_msg = ChatMessage::new(Role::Tool, observation);
        tool_msg.tool_call_id = Some(call_id);
        messages.push(tool_msg);
    }

    // Budget spent without a final answer: fall back to whatever the policy last produced.
    let answer = match (&last_thought, &last_observation) {
        (Some(t), _) if t.contains(FINAL_ANSWER) => extract_final_answer(t),
        (_, Some(o)) if !o.starts_with("ERROR (") => o.trim().to_string(),
        _ => String::new(),
    };
    PolicyOutcome {
        answer,
        status: Some(RunStatus::StepBudgetExhausted),
        ..Default::default()
    }
}
