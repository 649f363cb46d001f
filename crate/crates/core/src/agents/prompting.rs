//! Direct prompting without tools (zero-shot and chain-of-thought).

use serde_json::json;

use super::{extract_final_answer, PolicyKind, PolicyOutcome, Session};
use crate::llm::ChatMessage;

pub(super) fn run(s: &Session<'_>) -> PolicyOutcome {
    let mut user = s.task.prompt();
    if s.config.kind == PolicyKind::PromptingCot {
        user = format!(
            "{user}\n\n{}",
            s.templates.get("cot_instruction").trim_end()
        );
    }
    let messages = vec![
        ChatMessage::system(s.templates.get("zero_shot_system").trim_end()),
        ChatMessage::user(user),
    ];
    s.step("answer", json!({"step": 1}));
    match s.chat("answer", messages, false) {
        Ok(resp) => PolicyOutcome::completed(extract_final_answer(&resp.content)),
        Err(e) => PolicyOutcome::failed(&e),
    }
}
