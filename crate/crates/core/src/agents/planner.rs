//! Planner / executor / verifier loop followed by a composer call.

use serde_json::{json, Map, Value};

use super::{extract_final_answer, parse_json_object, PolicyOutcome, RunStatus, Session};
use crate::llm::{BackendError, ChatMessage};
use crate::trace::{EventKind, EventPayload, NewEvent};

enum Plan {
    Stop,
    Step { sub_goal: String, tool: String },
}

fn parse_plan(text: &str) -> Option<Plan> {
    let t = text.trim();
    if t.trim_matches(|c: char| !c.is_ascii_alphabetic())
        .eq_ignore_ascii_case("stop")
    {
        return Some(Plan::Stop);
    }
    let obj = parse_json_object(t)?;
    if obj.get("stop").and_then(Value::as_bool) == Some(true) {
        return Some(Plan::Stop);
    }
    let tool = obj.get("tool")?.as_str()?.trim().to_string();
    if tool.eq_ignore_ascii_case("stop") {
        return Some(Plan::Stop);
    }
    let sub_goal = obj
        .get("sub_goal")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    Some(Plan::Step { sub_goal, tool })
}

fn parse_decision(text: &str) -> Option<bool> {
    let obj = parse_json_object(text)?;
    match obj
        .get("decision")?
        .as_str()?
        .trim()
        .to_ascii_lowercase()
        .as_str()
    {
        "stop" => Some(true),
        "continue" => Some(false),
        _ => None,
    }
}

pub(super) fn run(s: &Session<'_>) -> PolicyOutcome {
    let query = s.task.prompt();
    let tools = s.tool_listing();
    let mut context: Vec<String> = Vec::new();
    let render_context = |c: &[String]| {
        if c.is_empty() {
            "(nothing yet)".to_string()
        } else {
            c.join("\n")
        }
    };
    let mut finished = false;

    for step in 1..=s.config.steps() {
        // (1) planner
        s.step("planner", json!({"step": step}));
        let prompt = s.templates.render(
            "planner_next_step",
            &[
                ("query", &query),
                ("tools", &tools),
                ("context", &render_context(&context)),
            ],
        );
        let plan = match s.chat_with_correction(
            "planner",
            vec![ChatMessage::user(prompt)],
            "Reply with ONLY a JSON object {\"sub_goal\": \"...\", \"tool\": \"<tool name>\"} or the word STOP.",
            parse_plan,
        ) {
            Ok(p) => p,
            Err(e) => return PolicyOutcome::failed(&e),
        };
        let (sub_goal, tool) = match plan {
            None => {
                context.push(format!("Step {step}: the plan could not be parsed."));
                (String::new(), String::new())
            }
            Some(Plan::Stop) => {
                finished = true;
                break;
            }
            Some(Plan::Step { sub_goal, tool }) => (sub_goal, tool),
        };

        // (2) executor, (3) invocation
        if !tool.is_empty() {
            let result = execute(s, step, &sub_goal, &tool, &render_context(&context));
            let result = match result {
                Ok(r) => r,
                Err(e) => return PolicyOutcome::failed(&e),
            };
            context.push(format!("Step {step}: {sub_goal} [{tool}] -> {result}"));
        }

        // (4) verifier
        s.step("verifier", json!({"step": step}));
        let prompt = s.templates.render(
            "verifier_continue",
            &[("query", &query), ("context", &render_context(&context))],
        );
        let stop = match s.chat_with_correction(
            "verifier",
            vec![ChatMessage::user(prompt)],
            "Reply with ONLY a JSON object {\"decision\": \"stop\" | \"continue\"}.",
            parse_decision,
        ) {
            Ok(d) => d,
            Err(e) => return PolicyOutcome::failed(&e),
        };
        let stop = stop.unwrap_or(false);
        s.rec.record(NewEvent::new(
            EventKind::VerifierDecision,
            EventPayload::phase("verifier")
                .ok(stop)
                .detail(json!({"decision": if stop { "stop" } else { "continue" }})),
        ));
        if stop {
            finished = true;
            break;
        }
    }

    s.step("composer", json!({}));
    let prompt = s.templates.render(
        "composer",
        &[("query", &query), ("context", &render_context(&context))],
    );
    match s.chat("composer", vec![ChatMessage::user(prompt)], false) {
        Ok(resp) => PolicyOutcome {
            answer: extract_final_answer(&resp.content),
            status: Some(if finished {
                RunStatus::Completed
            } else {
                RunStatus::StepBudgetExhausted
            }),
            ..Default::default()
        },
        Err(e) => PolicyOutcome::failed(&e),
    }
}

/// Executor phase: arguments for the planned tool (one retry on schema
/// failure), then the traced invocation. Returns the text fed back to the planner.
fn execute(
    s: &Session<'_>,
    step: u32,
    sub_goal: &str,
    tool: &str,
    context: &str,
) -> Result<String, BackendError> {
    Ok(match s.tools.iter().find(|d| d.name == tool) {
        None => {
            let failure = s
                .invoke(tool, &Map::new(), None)
                .expect_err("tool is not in the toolbox");
            failure.feedback()
        }
        Some(descriptor) => {
            s.step("executor", json!({"step": step, "tool": tool}));
            let schema = serde_json::to_string(&descriptor.arguments).expect("schema serializes");
            let prompt = s.templates.render(
                "executor_arguments",
                &[
                    ("sub_goal", sub_goal),
                    ("tool", tool),
                    ("tool_description", &descriptor.description),
                    ("schema", &schema),
                    ("context", context),
                ],
            );
            let mut messages = vec![ChatMessage::user(prompt)];
            let mut outcome = None;
            for attempt in 1..=2 {
                let args = s.chat_with_correction(
                    "executor",
                    messages.clone(),
                    "Reply with ONLY the JSON object of arguments.",
                    parse_json_object,
                )?;
                let Some(args) = args else {
                    outcome = Some("ERROR (malformed_output): no usable arguments".to_string());
                    break;
                };
                match s.invoke(tool, &args, None) {
                    Ok(obs) => {
                        outcome = Some(obs.text());
                        break;
                    }
                    Err(f) if f.is_validation() && attempt == 1 => {
                        messages.push(ChatMessage::assistant(Value::Object(args).to_string()));
                        messages.push(ChatMessage::user(format!(
                            "{}\nCorrect the arguments and reply with ONLY the JSON object.",
                            f.feedback()
                        )));
                    }
                    Err(f) if f.is_validation() => {
                        s.rec.record(NewEvent::new(
                            EventKind::PolicyStep,
                            EventPayload::phase("executor")
                                .ok(false)
                                .message("arguments failed schema validation twice; step abandoned")
                                .detail(json!({"step": step, "tool": tool, "failed": true})),
                        ));
                        outcome = Some(f.feedback());
                    }
                    Err(f) => {
                        outcome = Some(f.feedback());
                        break;
                    }
                }
            }
            outcome.unwrap_or_default()
        }
    })
}
