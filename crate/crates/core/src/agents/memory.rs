use serde::{Deserialize, Serialize};

/// A validated intermediate result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    /// Index of the sub-problem in the planner's decomposition.
    pub sub_problem: usize,
    /// None for results the generator produced without a tool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_name: Option<String>,
    pub result: String,
    pub verified: bool,
}

/// Per-run memory that only ever holds verifier-approved results.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SharedMemory {
    entries: Vec<MemoryEntry>,
}

impl SharedMemory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores the result only when the verifier approved it. Returns whether it was stored.
    pub fn write(
        &mut self,
        sub_problem: usize,
        tool_name: Option<String>,
        result: String,
        verified: bool,
    ) -> bool {
        if !verified {
            return false;
        }
        self.entries.push(MemoryEntry {
            sub_problem,
            tool_name,
            result,
            verified: true,
        });
        true
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn has(&self, sub_problem: usize) -> bool {
        self.entries.iter().any(|e| e.sub_problem == sub_problem)
    }

    pub fn render(&self, sub_problems: &[String]) -> String {
        if self.entries.is_empty() {
            return "(empty)".into();
        }
        self.entries
            .iter()
            .map(|e| {
                let title = sub_problems
                    .get(e.sub_problem)
                    .map(String::as_str)
                    .unwrap_or("?");
                match &e.tool_name {
                    Some(t) => format!("[{}] {title} ({t}): {}", e.sub_problem + 1, e.result),
                    None => format!("[{}] {title}: {}", e.sub_problem + 1, e.result),
                }
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn into_entries(self) -> Vec<MemoryEntry> {
        self.entries
    }
}
