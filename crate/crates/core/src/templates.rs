//! Versioned prompt template assets and `{placeholder}` substitution.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;
use serde_json::{Map, Value};

use crate::runtime::render_text;

/// Bumped whenever any bundled template text changes.
pub const TEMPLATE_VERSION: &str = "v1";

static PLACEHOLDER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").unwrap());

macro_rules! assets {
    ($($id:literal),* $(,)?) => {
        &[$(($id, include_str!(concat!("../templates/", $id, ".txt")))),*]
    };
}

static BUNDLED: &[(&str, &str)] = assets![
    "zero_shot_system",
    "cot_instruction",
    "react_system",
    "planner_next_step",
    "executor_arguments",
    "verifier_continue",
    "composer",
    "multi_planner",
    "multi_generator",
    "multi_verifier",
    "multi_composer",
    "judge_semantic",
    "tool_rank",
];

/// Bundled template text by id.
pub fn bundled(id: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(k, _)| *k == id).map(|(_, v)| *v)
}

pub fn bundled_ids() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(k, _)| *k)
}

/// Template lookup with per-run overrides taking precedence over bundled assets.
#[derive(Debug, Clone, Default)]
pub struct Templates {
    overrides: BTreeMap<String, String>,
}

impl Templates {
    pub fn new(overrides: BTreeMap<String, String>) -> Self {
        Self { overrides }
    }

    pub fn get(&self, id: &str) -> &str {
        self.overrides
            .get(id)
            .map(String::as_str)
            .or_else(|| bundled(id))
            .unwrap_or_else(|| panic!("no template named {id}"))
    }

    pub fn render(&self, id: &str, vars: &[(&str, &str)]) -> String {
        render(self.get(id), vars)
    }
}

/// Substitutes `{name}` for each known variable; anything else is left verbatim.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    PLACEHOLDER
        .replace_all(template, |caps: &regex::Captures<'_>| {
            let key = &caps[1];
            vars.iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| v.to_string())
                .unwrap_or_else(|| caps[0].to_string())
        })
        .into_owned()
}

/// Renders a template against tool arguments (strings raw, other values as JSON).
pub fn render_args(template: &str, args: &Map<String, Value>) -> String {
    let owned: Vec<(String, String)> = args
        .iter()
        .map(|(k, v)| (k.clone(), render_text(v)))
        .collect();
    let vars: Vec<(&str, &str)> = owned
        .iter()
        .map(|(k, v)| (k.as_str(), v.as_str()))
        .collect();
    render(template, &vars)
}
