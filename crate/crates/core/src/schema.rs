//! Standardized tool interface: manifests, argument schemas, output contracts.
//!
//! A manifest is a UTF-8 JSON document with top-level keys `name`, `version`,
//! `description`, `category`, `arguments`, `output`, and optionally `tags` and
//! `accuracy_summary`. [`validate_manifest`] reports every violation it finds
//! rather than stopping at the first one, and [`canonical_serialize`] produces
//! the bit-exact form (sorted keys, compact, LF-terminated).

use std::collections::BTreeSet;
use std::fmt;
use std::sync::LazyLock;

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

static NAME_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[a-z0-9_]+$").unwrap());
static VERSION_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^(0|[1-9]\d*)\.(0|[1-9]\d*)\.(0|[1-9]\d*)(-[0-9A-Za-z.-]+)?(\+[0-9A-Za-z.-]+)?$")
        .unwrap()
});

const TOP_LEVEL_KEYS: &[&str] = &[
    "name",
    "version",
    "description",
    "category",
    "arguments",
    "output",
    "tags",
    "accuracy_summary",
];

/// Tool taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    /// Deterministic local computation.
    Program,
    /// Wraps an external HTTP service.
    Api,
    /// LLM-mediated function driven by a fixed prompt template.
    Prompting,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Program, Category::Api, Category::Prompting];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Program => "program",
            Category::Api => "api",
            Category::Prompting => "prompting",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamType {
    #[serde(rename = "string")]
    String,
    #[serde(rename = "integer")]
    Integer,
    #[serde(rename = "number")]
    Number,
    #[serde(rename = "boolean")]
    Boolean,
    #[serde(rename = "string-list")]
    StringList,
    #[serde(rename = "file-reference")]
    FileReference,
}

impl ParamType {
    const ALL: [ParamType; 6] = [
        ParamType::String,
        ParamType::Integer,
        ParamType::Number,
        ParamType::Boolean,
        ParamType::StringList,
        ParamType::FileReference,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamType::String => "string",
            ParamType::Integer => "integer",
            ParamType::Number => "number",
            ParamType::Boolean => "boolean",
            ParamType::StringList => "string-list",
            ParamType::FileReference => "file-reference",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }

    fn is_numeric(self) -> bool {
        matches!(self, ParamType::Integer | ParamType::Number)
    }

    /// Whether `value` has this semantic type. `number` accepts integers, not the reverse.
    pub fn accepts(self, value: &Value) -> bool {
        match self {
            ParamType::String => value.is_string(),
            ParamType::Integer => value.is_i64() || value.is_u64(),
            ParamType::Number => value.is_number(),
            ParamType::Boolean => value.is_boolean(),
            ParamType::StringList => value
                .as_array()
                .is_some_and(|items| items.iter().all(Value::is_string)),
            ParamType::FileReference => value.as_str().is_some_and(|s| !s.is_empty()),
        }
    }
}

impl fmt::Display for ParamType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Inclusive numeric bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericRange {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
}

impl NumericRange {
    pub fn contains(&self, x: f64) -> bool {
        self.min.is_none_or(|m| x >= m) && self.max.is_none_or(|m| x <= m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ParamType,
    #[serde(default)]
    pub required: bool,
    #[serde(default)]
    pub description: String,
    #[serde(rename = "enum", default, skip_serializing_if = "Option::is_none")]
    pub allowed: Option<Vec<Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<NumericRange>,
}

impl ParameterSpec {
    pub fn new(name: impl Into<String>, ty: ParamType, required: bool) -> Self {
        Self {
            name: name.into(),
            ty,
            required,
            description: String::new(),
            allowed: None,
            range: None,
        }
    }

    pub fn with_description(mut self, description: impl Into<String>) -> Self {
        self.description = description.into();
        self
    }

    pub fn with_enum(mut self, values: Vec<Value>) -> Self {
        self.allowed = Some(values);
        self
    }

    pub fn with_range(mut self, min: Option<f64>, max: Option<f64>) -> Self {
        self.range = Some(NumericRange { min, max });
        self
    }
}

/// Ordered parameter list. Serialized as a bare JSON array.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ArgumentSchema {
    pub parameters: Vec<ParameterSpec>,
}

impl ArgumentSchema {
    pub fn new(parameters: Vec<ParameterSpec>) -> Self {
        Self { parameters }
    }

    pub fn get(&self, name: &str) -> Option<&ParameterSpec> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn required(&self) -> impl Iterator<Item = &ParameterSpec> {
        self.parameters.iter().filter(|p| p.required)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OutputKind {
    #[serde(rename = "text")]
    Text,
    #[serde(rename = "number")]
    Number,
    #[serde(rename = "json-object")]
    JsonObject,
    #[serde(rename = "file-reference")]
    FileReference,
}

impl OutputKind {
    const ALL: [OutputKind; 4] = [
        OutputKind::Text,
        OutputKind::Number,
        OutputKind::JsonObject,
        OutputKind::FileReference,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OutputKind::Text => "text",
            OutputKind::Number => "number",
            OutputKind::JsonObject => "json-object",
            OutputKind::FileReference => "file-reference",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for OutputKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What a tool promises to return. Only `kind` is enforced; `fields` are hints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputContract {
    pub kind: OutputKind,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fields: Option<Vec<String>>,
}

impl OutputContract {
    pub fn new(kind: OutputKind) -> Self {
        Self {
            kind,
            description: String::new(),
            fields: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub accuracy: f64,
    pub suite_size: u32,
    pub evaluated_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolDescriptor {
    pub name: String,
    pub version: String,
    pub description: String,
    pub category: Category,
    pub arguments: ArgumentSchema,
    pub output: OutputContract,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy_summary: Option<AccuracySummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
}

/// One problem found in a manifest, located by a dotted path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl Violation {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("manifest is not valid JSON: {0}")]
    Parse(String),
    #[error("manifest has {} violation(s): {}", .0.len(), join_violations(.0))]
    Invalid(Vec<Violation>),
}

impl ManifestError {
    pub fn violations(&self) -> Vec<Violation> {
        match self {
            ManifestError::Parse(msg) => vec![Violation::new("$", msg.clone())],
            ManifestError::Invalid(v) => v.clone(),
        }
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(Violation::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// Parses and validates a raw manifest document.
pub fn validate_manifest(raw: &[u8]) -> Result<ToolDescriptor, ManifestError> {
    let doc: Value =
        serde_json::from_slice(raw).map_err(|e| ManifestError::Parse(e.to_string()))?;
    validate_manifest_value(&doc)
}

/// Same as [`validate_manifest`] for an already-parsed document.
pub fn validate_manifest_value(doc: &Value) -> Result<ToolDescriptor, ManifestError> {
    let Some(obj) = doc.as_object() else {
        return Err(ManifestError::Invalid(vec![Violation::new(
            "$",
            "manifest must be a JSON object",
        )]));
    };
    let mut v = Vec::new();

    for key in obj.keys() {
        if !TOP_LEVEL_KEYS.contains(&key.as_str()) {
            v.push(Violation::new(key.clone(), "unknown top-level key"));
        }
    }

    let name = required_str(obj, "name", &mut v);
    if let Some(name) = &name {
        if !NAME_RE.is_match(name) {
            v.push(Violation::new("name", "name must match [a-z0-9_]+"));
        }
    }
    let version = required_str(obj, "version", &mut v);
    if let Some(version) = &version {
        if !VERSION_RE.is_match(version) {
            v.push(Violation::new(
                "version",
                "malformed version (expected semantic version)",
            ));
        }
    }
    let description = required_str(obj, "description", &mut v);
    let category = required_str(obj, "category", &mut v).and_then(|c| {
        let parsed = Category::parse(&c);
        if parsed.is_none() {
            v.push(Violation::new(
                "category",
                format!("unknown category \"{c}\" (expected program, api or prompting)"),
            ));
        }
        parsed
    });

    let arguments = match obj.get("arguments") {
        None => {
            v.push(Violation::new("arguments", "missing required field"));
            None
        }
        Some(raw) => parse_arguments(raw, &mut v),
    };
    let output = match obj.get("output") {
        None => {
            v.push(Violation::new("output", "missing required field"));
            None
        }
        Some(raw) => parse_output(raw, &mut v),
    };

    let tags = match obj.get("tags") {
        None => Some(Vec::new()),
        Some(Value::Array(items)) => {
            let mut tags = Vec::with_capacity(items.len());
            for (i, t) in items.iter().enumerate() {
                match t.as_str() {
                    Some(s) => tags.push(s.to_string()),
                    None => v.push(Violation::new(format!("tags[{i}]"), "tag must be a string")),
                }
            }
            Some(tags)
        }
        Some(_) => {
            v.push(Violation::new("tags", "tags must be an array of strings"));
            None
        }
    };

    let accuracy_summary = match obj.get("accuracy_summary") {
        None | Some(Value::Null) => Some(None),
        Some(raw) => parse_accuracy(raw, &mut v).map(Some),
    };

    if !v.is_empty() {
        return Err(ManifestError::Invalid(v));
    }
    // Every branch that yields None also pushed a violation.
    Ok(ToolDescriptor {
        name: name.unwrap(),
        version: version.unwrap(),
        description: description.unwrap(),
        category: category.unwrap(),
        arguments: arguments.unwrap(),
        output: output.unwrap(),
        accuracy_summary: accuracy_summary.unwrap(),
        tags: tags.unwrap(),
    })
}

fn required_str(obj: &Map<String, Value>, key: &str, v: &mut Vec<Violation>) -> Option<String> {
    match obj.get(key) {
        None => {
            v.push(Violation::new(key, "missing required field"));
            None
        }
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => {
            v.push(Violation::new(key, "must be a string"));
            None
        }
    }
}

fn parse_arguments(raw: &Value, v: &mut Vec<Violation>) -> Option<ArgumentSchema> {
    let Some(items) = raw.as_array() else {
        v.push(Violation::new(
            "arguments",
            "arguments must be an array of parameter objects",
        ));
        return None;
    };
    let before = v.len();
    let mut seen = BTreeSet::new();
    let mut params = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let path = format!("arguments[{i}]");
        let Some(p) = item.as_object() else {
            v.push(Violation::new(path, "parameter must be an object"));
            continue;
        };
        for key in p.keys() {
            if !["name", "type", "required", "description", "enum", "range"].contains(&key.as_str())
            {
                v.push(Violation::new(
                    format!("{path}.{key}"),
                    "unknown parameter key",
                ));
            }
        }
        let name = match p.get("name").and_then(Value::as_str) {
            Some(n) if !n.is_empty() => {
                if !seen.insert(n.to_string()) {
                    v.push(Violation::new(
                        format!("{path}.name"),
                        format!("duplicate parameter name \"{n}\""),
                    ));
                }
                Some(n.to_string())
            }
            _ => {
                v.push(Violation::new(
                    format!("{path}.name"),
                    "parameter name must be a non-empty string",
                ));
                None
            }
        };
        let ty = match p.get("type").and_then(Value::as_str) {
            Some(t) => {
                let parsed = ParamType::parse(t);
                if parsed.is_none() {
                    v.push(Violation::new(
                        format!("{path}.type"),
                        format!("unknown parameter type \"{t}\""),
                    ));
                }
                parsed
            }
            None => {
                v.push(Violation::new(
                    format!("{path}.type"),
                    "missing parameter type",
                ));
                None
            }
        };
        let required = match p.get("required") {
            None => false,
            Some(Value::Bool(b)) => *b,
            Some(_) => {
                v.push(Violation::new(
                    format!("{path}.required"),
                    "required must be a boolean",
                ));
                false
            }
        };
        let description = match p.get("description") {
            None => String::new(),
            Some(Value::String(s)) => s.clone(),
            Some(_) => {
                v.push(Violation::new(
                    format!("{path}.description"),
                    "description must be a string",
                ));
                String::new()
            }
        };
        let allowed = match p.get("enum") {
            None | Some(Value::Null) => None,
            Some(Value::Array(values)) => {
                if values.is_empty() {
                    v.push(Violation::new(
                        format!("{path}.enum"),
                        "enum must be non-empty",
                    ));
                }
                if let Some(ty) = ty {
                    for (j, ev) in values.iter().enumerate() {
                        if !ty.accepts(ev) {
                            v.push(Violation::new(
                                format!("{path}.enum[{j}]"),
                                format!("enum value is not of type {ty}"),
                            ));
                        }
                    }
                }
                Some(values.clone())
            }
            Some(_) => {
                v.push(Violation::new(
                    format!("{path}.enum"),
                    "enum must be an array",
                ));
                None
            }
        };
        let range = match p.get("range") {
            None | Some(Value::Null) => None,
            Some(raw) => match serde_json::from_value::<NumericRange>(raw.clone()) {
                Ok(r) => {
                    if ty.is_some_and(|t| !t.is_numeric()) {
                        v.push(Violation::new(
                            format!("{path}.range"),
                            "range only applies to integer or number",
                        ));
                    }
                    if r.min.is_none() && r.max.is_none() {
                        v.push(Violation::new(
                            format!("{path}.range"),
                            "range needs min or max",
                        ));
                    }
                    if let (Some(lo), Some(hi)) = (r.min, r.max) {
                        if lo > hi {
                            v.push(Violation::new(
                                format!("{path}.range"),
                                "range min exceeds max",
                            ));
                        }
                    }
                    Some(r)
                }
                Err(e) => {
                    v.push(Violation::new(
                        format!("{path}.range"),
                        format!("malformed range: {e}"),
                    ));
                    None
                }
            },
        };
        if let (Some(name), Some(ty)) = (name, ty) {
            params.push(ParameterSpec {
                name,
                ty,
                required,
                description,
                allowed,
                range,
            });
        }
    }
    (v.len() == before).then(|| ArgumentSchema::new(params))
}

fn parse_output(raw: &Value, v: &mut Vec<Violation>) -> Option<OutputContract> {
    let Some(o) = raw.as_object() else {
        v.push(Violation::new("output", "output must be an object"));
        return None;
    };
    let before = v.len();
    for key in o.keys() {
        if !["kind", "description", "fields"].contains(&key.as_str()) {
            v.push(Violation::new(
                format!("output.{key}"),
                "unknown output key",
            ));
        }
    }
    let kind = match o.get("kind").and_then(Value::as_str) {
        Some(k) => {
            let parsed = OutputKind::parse(k);
            if parsed.is_none() {
                v.push(Violation::new(
                    "output.kind",
                    format!("unknown output kind \"{k}\""),
                ));
            }
            parsed
        }
        None => {
            v.push(Violation::new("output.kind", "missing output kind"));
            None
        }
    };
    let description = match o.get("description") {
        None => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => {
            v.push(Violation::new(
                "output.description",
                "description must be a string",
            ));
            String::new()
        }
    };
    let fields = match o.get("fields") {
        None | Some(Value::Null) => None,
        Some(Value::Array(items)) if items.iter().all(Value::is_string) => Some(
            items
                .iter()
                .filter_map(|s| s.as_str().map(str::to_string))
                .collect(),
        ),
        Some(_) => {
            v.push(Violation::new(
                "output.fields",
                "fields must be an array of strings",
            ));
            None
        }
    };
    if v.len() != before {
        return None;
    }
    Some(OutputContract {
        kind: kind?,
        description,
        fields,
    })
}

fn parse_accuracy(raw: &Value, v: &mut Vec<Violation>) -> Option<AccuracySummary> {
    match serde_json::from_value::<AccuracySummary>(raw.clone()) {
        Ok(s) => {
            let mut ok = true;
            if !(0.0..=1.0).contains(&s.accuracy) {
                v.push(Violation::new(
                    "accuracy_summary.accuracy",
                    "accuracy must lie in [0,1]",
                ));
                ok = false;
            }
            if s.suite_size < 1 {
                v.push(Violation::new(
                    "accuracy_summary.suite_size",
                    "suite size must be at least 1",
                ));
                ok = false;
            }
            ok.then_some(s)
        }
        Err(e) => {
            v.push(Violation::new(
                "accuracy_summary",
                format!("malformed accuracy summary: {e}"),
            ));
            None
        }
    }
}

/// Deterministic encoding: sorted keys, no insignificant whitespace, trailing LF.
pub fn canonical_serialize(descriptor: &ToolDescriptor) -> Vec<u8> {
    canonical_json(descriptor)
}

/// Canonical bytes of any serializable value (sorted keys, compact, trailing LF).
pub(crate) fn canonical_json<T: Serialize>(value: &T) -> Vec<u8> {
    // serde_json::Map is a BTreeMap here, so keys come out sorted.
    let tree = serde_json::to_value(value).expect("serializable value");
    let mut out = serde_json::to_vec(&tree).expect("value serializes");
    out.push(b'\n');
    out
}

/// One failed argument constraint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgViolation {
    pub parameter: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationFailure {
    pub violations: Vec<ArgViolation>,
}

impl fmt::Display for ValidationFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .violations
            .iter()
            .map(|v| format!("{}: {}", v.parameter, v.reason))
            .collect();
        f.write_str(&parts.join("; "))
    }
}

/// Strict argument check: required present, types and constraints hold, no unknown keys.
pub fn validate_arguments(
    descriptor: &ToolDescriptor,
    args: &Map<String, Value>,
) -> Result<(), ValidationFailure> {
    let schema = &descriptor.arguments;
    let mut violations = Vec::new();
    let mut push = |parameter: &str, reason: String| {
        violations.push(ArgViolation {
            parameter: parameter.to_string(),
            reason,
        })
    };

    for spec in &schema.parameters {
        let Some(value) = args.get(&spec.name) else {
            if spec.required {
                push(&spec.name, "missing required parameter".into());
            }
            continue;
        };
        if !spec.ty.accepts(value) {
            push(
                &spec.name,
                format!("expected {}, got {}", spec.ty, json_type_name(value)),
            );
            continue;
        }
        if let Some(allowed) = &spec.allowed {
            if !allowed.iter().any(|a| a == value) {
                push(&spec.name, format!("value {value} not in allowed set"));
            }
        }
        if let (Some(range), Some(x)) = (&spec.range, value.as_f64()) {
            if !range.contains(x) {
                let lo = range.min.map_or("-inf".to_string(), |m| m.to_string());
                let hi = range.max.map_or("inf".to_string(), |m| m.to_string());
                push(&spec.name, format!("value {x} outside range [{lo}, {hi}]"));
            }
        }
    }
    for key in args.keys() {
        if schema.get(key).is_none() {
            push(key, "unknown parameter".into());
        }
    }

    if violations.is_empty() {
        Ok(())
    } else {
        Err(ValidationFailure { violations })
    }
}

pub(crate) fn json_type_name(value: &Value) -> &'static str {
    match value {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(n) if n.is_f64() => "number",
        Value::Number(_) => "integer",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn calculator_manifest() -> Value {
        json!({
            "name": "calculator",
            "version": "1.0.0",
            "description": "Evaluates arithmetic expressions",
            "category": "program",
            "arguments": [{"name": "expression", "type": "string", "required": true}],
            "output": {"kind": "text"}
        })
    }

    fn range_tool() -> ToolDescriptor {
        let mut m = calculator_manifest();
        m["arguments"] = json!([{"name": "n", "type": "integer", "required": true, "range": {"min": 1, "max": 10}}]);
        validate_manifest_value(&m).unwrap()
    }

    #[test]
    fn minimal_manifest_is_valid() {
        let d = validate_manifest(calculator_manifest().to_string().as_bytes()).unwrap();
        assert_eq!(d.name, "calculator");
        assert_eq!(d.category, Category::Program);
        assert_eq!(d.arguments.parameters.len(), 1);
        assert!(d.arguments.parameters[0].required);
        assert_eq!(d.output.kind, OutputKind::Text);
    }

    #[test]
    fn missing_output_yields_single_violation() {
        let mut m = calculator_manifest();
        m.as_object_mut().unwrap().remove("output");
        let violations = validate_manifest_value(&m).unwrap_err().violations();
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].path, "output");
    }

    #[test]
    fn unknown_category_is_reported() {
        let mut m = calculator_manifest();
        m["category"] = json!("ml-model");
        let violations = validate_manifest_value(&m).unwrap_err().violations();
        assert_eq!(violations.len(), 1);
        assert!(violations[0].message.contains("unknown category"));
    }

    #[test]
    fn violations_are_exhaustive() {
        let m = json!({
            "name": "Bad Name",
            "version": "v1",
            "description": "x",
            "category": "ml-model",
            "arguments": [
                {"name": "a", "type": "string"},
                {"name": "a", "type": "integer"}
            ],
            "output": {"kind": "table"}
        });
        let violations = validate_manifest_value(&m).unwrap_err().violations();
        let paths: Vec<&str> = violations.iter().map(|v| v.path.as_str()).collect();
        assert!(paths.contains(&"name"));
        assert!(paths.contains(&"version"));
        assert!(paths.contains(&"category"));
        assert!(paths.contains(&"arguments[1].name"));
        assert!(paths.contains(&"output.kind"));
    }

    #[test]
    fn parse_failure_is_distinct() {
        assert!(matches!(
            validate_manifest(b"{not json"),
            Err(ManifestError::Parse(_))
        ));
    }

    #[test]
    fn enum_must_be_nonempty_and_typed() {
        let mut m = calculator_manifest();
        m["arguments"] = json!([
            {"name": "a", "type": "string", "enum": []},
            {"name": "b", "type": "integer", "enum": [1, "two"]}
        ]);
        let violations = validate_manifest_value(&m).unwrap_err().violations();
        assert_eq!(violations.len(), 2);
        assert_eq!(violations[1].path, "arguments[1].enum[1]");
    }

    #[test]
    fn arguments_valid_and_missing() {
        let d = validate_manifest_value(&calculator_manifest()).unwrap();
        let ok = json!({"expression": "2+2"});
        assert!(validate_arguments(&d, ok.as_object().unwrap()).is_ok());
        let err = validate_arguments(&d, &Map::new()).unwrap_err();
        assert_eq!(err.violations.len(), 1);
        assert_eq!(err.violations[0].parameter, "expression");
        assert!(err.violations[0].reason.contains("missing"));
    }

    #[test]
    fn range_violation() {
        let d = range_tool();
        let err = validate_arguments(&d, json!({"n": 42}).as_object().unwrap()).unwrap_err();
        assert_eq!(err.violations[0].parameter, "n");
        assert!(err.violations[0].reason.contains("outside range"));
        assert!(validate_arguments(&d, json!({"n": 10}).as_object().unwrap()).is_ok());
    }

    #[test]
    fn unknown_keys_rejected() {
        let d = validate_manifest_value(&calculator_manifest()).unwrap();
        let err = validate_arguments(
            &d,
            json!({"expression": "1", "extra": true})
                .as_object()
                .unwrap(),
        )
        .unwrap_err();
        assert_eq!(err.violations[0].parameter, "extra");
    }

    #[test]
    fn number_widening_is_one_way() {
        assert!(ParamType::Number.accepts(&json!(3)));
        assert!(ParamType::Number.accepts(&json!(3.5)));
        assert!(!ParamType::Integer.accepts(&json!(3.5)));
        assert!(!ParamType::Integer.accepts(&json!(3.0)));
        assert!(ParamType::StringList.accepts(&json!(["a", "b"])));
        assert!(!ParamType::StringList.accepts(&json!(["a", 1])));
        assert!(!ParamType::FileReference.accepts(&json!("")));
    }

    #[test]
    fn canonical_form_is_sorted_compact_lf() {
        let d = validate_manifest_value(&calculator_manifest()).unwrap();
        let bytes = canonical_serialize(&d);
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.ends_with("}\n"));
        assert!(!text.trim_end().contains('\n'));
        assert!(!text.contains(": "));
        assert!(text.starts_with("{\"arguments\":"));
        assert_eq!(validate_manifest(&bytes).unwrap(), d);
    }

    #[test]
    fn key_order_in_source_does_not_affect_canonical_bytes() {
        let a = r#"{"name":"t","version":"0.1.0","description":"d","category":"api",
            "arguments":[{"name":"q","type":"string","required":true,"description":"query"},
                         {"type":"integer","name":"n","range":{"max":5,"min":1}}],
            "output":{"kind":"json-object","fields":["x"]},"tags":["web"]}"#;
        let b = r#"{"tags":["web"],"output":{"fields":["x"],"kind":"json-object"},
            "arguments":[{"description":"query","required":true,"type":"string","name":"q"},
                         {"range":{"min":1,"max":5},"name":"n","type":"integer"}],
            "category":"api","description":"d","version":"0.1.0","name":"t"}"#;
        let da = validate_manifest(a.as_bytes()).unwrap();
        let db = validate_manifest(b.as_bytes()).unwrap();
        assert_eq!(canonical_serialize(&da), canonical_serialize(&db));
    }
}
