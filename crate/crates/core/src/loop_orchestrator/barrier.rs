//! Information-barrier checks on the discriminator sandbox.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;

pub const TASK_CONFIG: &str = "task_config.json";
pub const ENV_CONFIG_INITIAL: &str = "env_config_initial.json";
pub const ENV_CONFIG_GOLDEN: &str = "env_config_golden.json";
pub const REVIEW_FILE: &str = "REVIEW.md";
pub const REWARD_FILE: &str = "reward.py";
pub const INITIAL_SETUP_FILE: &str = "initial_setup.py";
pub const GOLDEN_PATCH_FILE: &str = "golden_patch.py";

const REQUIRED: [&str; 3] = [TASK_CONFIG, ENV_CONFIG_INITIAL, ENV_CONFIG_GOLDEN];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BarrierStage {
    /// Before the discriminator runs: only the seeded inputs may exist.
    Pre,
    /// After it ran: seeded inputs plus its outputs.
    Post,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BarrierViolation {
    Unexpected {
        name: String,
    },
    Missing {
        name: String,
    },
    /// A sandbox file is byte-identical to a generator script.
    Leak {
        name: String,
        source: PathBuf,
    },
    Unreadable {
        name: String,
        message: String,
    },
}

impl fmt::Display for BarrierViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BarrierViolation::Unexpected { name } => write!(f, "unexpected entry '{name}' in sandbox"),
            BarrierViolation::Missing { name } => write!(f, "required file '{name}' missing from sandbox"),
            BarrierViolation::Leak { name, source } => {
                write!(f, "sandbox file '{name}' is a copy of generator script {}", source.display())
            }
            BarrierViolation::Unreadable { name, message } => write!(f, "cannot inspect '{name}': {message}"),
        }
    }
}

/// Compares the sandbox listing with the allowed set for `stage`.
pub fn enforce_barrier(sandbox: &Path, stage: BarrierStage) -> Vec<BarrierViolation> {
    let entries = match listing(sandbox) {
        Ok(entries) => entries,
        Err(e) => {
            return vec![BarrierViolation::Unreadable { name: sandbox.display().to_string(), message: e.to_string() }]
        }
    };
    let allowed = |name: &str, is_file: bool| {
        is_file
            && (REQUIRED.contains(&name) || name == REVIEW_FILE || (stage == BarrierStage::Post && name == REWARD_FILE))
    };
    let mut violations: Vec<BarrierViolation> = entries
        .iter()
        .filter(|(name, is_file)| !allowed(name, *is_file))
        .map(|(name, _)| BarrierViolation::Unexpected { name: name.clone() })
        .collect();
    for name in REQUIRED {
        if !entries.iter().any(|(n, is_file)| n == name && *is_file) {
            violations.push(BarrierViolation::Missing { name: name.into() });
        }
    }
    violations
}

/// Files in the sandbox whose bytes equal one of `generator_scripts`.
pub fn content_leaks(sandbox: &Path, generator_scripts: &[&Path]) -> Vec<BarrierViolation> {
    let secrets: Vec<(PathBuf, Vec<u8>)> =
        generator_scripts.iter().filter_map(|p| fs::read(p).ok().map(|bytes| (p.to_path_buf(), bytes))).collect();
    let mut out = Vec::new();
    let mut stack = vec![sandbox.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let Ok(read) = fs::read_dir(&dir) else { continue };
        for entry in read.flatten() {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let Ok(bytes) = fs::read(&path) else { continue };
            if let Some((source, _)) = secrets.iter().find(|(_, secret)| *secret == bytes) {
                let name = path.strip_prefix(sandbox).unwrap_or(&path).display().to_string();
                out.push(BarrierViolation::Leak { name, source: source.clone() });
            }
        }
    }
    out.sort_by_key(|v| v.to_string());
    out
}

fn listing(dir: &Path) -> io::Result<Vec<(String, bool)>> {
    let mut entries = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        // Symlinks are reported as unexpected even if they point at files.
        let is_file = entry.file_type()?.is_file();
        entries.push((name, is_file));
    }
    entries.sort();
    Ok(entries)
}
