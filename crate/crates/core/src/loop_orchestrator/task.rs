use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const MIN_CONTEXT_CHARS: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        })
    }
}

/// A natural-language task: instruction plus the context needed to set up
/// and evaluate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    #[serde(alias = "task_instruction")]
    pub instruction: String,
    pub context: String,
    pub difficulty: Difficulty,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TaskError {
    #[error("task id '{0}' does not match <domain>_<topic>_<3 digits>")]
    BadId(String),
    #[error("task {task_id}: instruction is empty")]
    EmptyInstruction { task_id: String },
    #[error("task {task_id}: context has {chars} characters, at least {MIN_CONTEXT_CHARS} required")]
    ShortContext { task_id: String, chars: usize },
    #[error("task id '{0}' appears more than once")]
    Duplicate(String),
}

fn id_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[A-Za-z0-9]+(_[A-Za-z0-9]+)+_[0-9]{3}$").expect("valid regex"))
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), TaskError> {
        if !id_pattern().is_match(&self.task_id) {
            return Err(TaskError::BadId(self.task_id.clone()));
        }
        if self.instruction.trim().is_empty() {
            return Err(TaskError::EmptyInstruction { task_id: self.task_id.clone() });
        }
        let chars = self.context.chars().count();
        if chars < MIN_CONTEXT_CHARS {
            return Err(TaskError::ShortContext { task_id: self.task_id.clone(), chars });
        }
        Ok(())
    }

    /// `(domain, topic)` from the task id: the first segment and the
    /// segments between it and the numeric suffix.
    pub fn taxonomy(&self) -> (String, String) {
        let parts: Vec<&str> = self.task_id.split('_').collect();
        match parts.as_slice() {
            [domain, middle @ .., _number] if !middle.is_empty() => (domain.to_string(), middle.join("_")),
            _ => (self.task_id.clone(), String::new()),
        }
    }

    /// The view of the task handed to both agents: no metadata.
    pub fn task_config(&self) -> Value {
        serde_json::json!({
            "task_id": self.task_id,
            "task_instruction": self.instruction,
            "context": self.context,
            "difficulty": self.difficulty,
        })
    }
}

/// Validates every task and rejects duplicate ids.
pub fn validate_batch(tasks: &[TaskSpec]) -> Result<(), TaskError> {
    let mut seen = BTreeSet::new();
    for task in tasks {
        task.validate()?;
        if !seen.insert(task.task_id.as_str()) {
            return Err(TaskError::Duplicate(task.task_id.clone()));
        }
    }
    Ok(())
}
