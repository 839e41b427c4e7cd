use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use super::barrier::{GOLDEN_PATCH_FILE, INITIAL_SETUP_FILE, REVIEW_FILE, REWARD_FILE, TASK_CONFIG};
use super::{LoopOutcome, TaskSpec};

pub const CONFIG_FILE: &str = "config.json";
pub const META_FILE: &str = "meta.json";

/// The seven entries of an emitted bundle, sorted.
pub const BUNDLE_FILES: [&str; 7] =
    [REVIEW_FILE, CONFIG_FILE, GOLDEN_PATCH_FILE, INITIAL_SETUP_FILE, META_FILE, REWARD_FILE, TASK_CONFIG];

pub const DEFAULT_OBSERVATION_TYPE: &str = "screenshot";
pub const DEFAULT_STEP_BUDGET: u64 = 100;
pub const DEFAULT_VM_IMAGE: &str = "local-sandbox";

/// Metadata keys consumed by the bundle; everything else is passed through
/// into `config.json` untouched.
const CONSUMED_KEYS: &[&str] = &["vm_image", "snapshot", "observation_type", "step_budget", "source_pass", "taxonomy"];

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("only accepted outcomes can be emitted")]
    NotAccepted,
    #[error("bundle {0} already exists")]
    Exists(PathBuf),
    #[error("failed to write bundle: {0}")]
    Io(#[from] io::Error),
}

/// Writes `<out_root>/final/<task_id>/`. Refuses to overwrite.
pub fn emit_bundle(outcome: &LoopOutcome, out_root: &Path) -> Result<PathBuf, BundleError> {
    let LoopOutcome::Accepted { task, tuple, review_text, rounds_used, .. } = outcome else {
        return Err(BundleError::NotAccepted);
    };
    let final_dir = out_root.join("final");
    let dest = final_dir.join(&task.task_id);
    if dest.exists() {
        return Err(BundleError::Exists(dest));
    }
    fs::create_dir_all(&final_dir)?;
    // Build next to the destination and rename, so a partial bundle never
    // appears under the final name.
    let staging = tempfile::Builder::new().prefix(&format!(".{}-", task.task_id)).tempdir_in(&final_dir)?;
    let dir = staging.path();
    fs::copy(&tuple.initial_setup, dir.join(INITIAL_SETUP_FILE))?;
    fs::copy(&tuple.golden_patch, dir.join(GOLDEN_PATCH_FILE))?;
    fs::copy(&tuple.reward, dir.join(REWARD_FILE))?;
    fs::write(dir.join(REVIEW_FILE), review_text)?;
    write_json(&dir.join(TASK_CONFIG), &task.task_config())?;
    write_json(&dir.join(CONFIG_FILE), &config_json(task))?;
    write_json(&dir.join(META_FILE), &meta_json(task, *rounds_used))?;

    let staged = staging.keep();
    if let Err(e) = fs::rename(&staged, &dest) {
        let _ = fs::remove_dir_all(&staged);
        return Err(if dest.exists() { BundleError::Exists(dest) } else { e.into() });
    }
    Ok(dest)
}

fn write_json(path: &Path, value: &Value) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}

/// Evaluator-facing task description.
pub fn config_json(task: &TaskSpec) -> Value {
    let (domain, _) = task.taxonomy();
    let meta = &task.metadata;
    let mut config = Map::new();
    for (key, value) in meta {
        if !CONSUMED_KEYS.contains(&key.as_str()) {
            config.insert(key.clone(), value.clone());
        }
    }
    let text = |key: &str, default: &str| meta.get(key).cloned().unwrap_or_else(|| Value::String(default.into()));
    config.insert("id".into(), json!(task.task_id));
    config.insert("instruction".into(), json!(task.instruction));
    config.insert("vm_image".into(), text("vm_image", DEFAULT_VM_IMAGE));
    config.insert("snapshot".into(), text("snapshot", &domain));
    config.insert("observation_type".into(), text("observation_type", DEFAULT_OBSERVATION_TYPE));
    config.insert("step_budget".into(), meta.get("step_budget").cloned().unwrap_or_else(|| json!(DEFAULT_STEP_BUDGET)));
    config.insert("config".into(), json!([{ "type": "execute", "parameters": { "script": INITIAL_SETUP_FILE } }]));
    config.insert(
        "evaluator".into(),
        json!({
            "entry_points": [{ "script": REWARD_FILE, "output": "REWARD: <score in [0, 1]>" }],
            "expected": { "script": GOLDEN_PATCH_FILE },
        }),
    );
    Value::Object(config)
}

pub fn meta_json(task: &TaskSpec, rounds_used: u32) -> Value {
    let (domain, topic) = task.taxonomy();
    json!({
        "task_id": task.task_id,
        "domain": domain,
        "topic": topic,
        "difficulty": task.difficulty,
        "source_pass": task.metadata.get("source_pass").cloned().unwrap_or(Value::Null),
        "taxonomy": task.metadata.get("taxonomy").cloned().unwrap_or_else(|| json!({})),
        "rounds_used": rounds_used,
    })
}
