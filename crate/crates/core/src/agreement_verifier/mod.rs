//! The five agreement conditions over a candidate (setup, golden patch,
//! reward) tuple, and the REVIEW document that carries the verdict.

mod review;

use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::pattern_scanner::{Finding, Scanner, ScannerConfig};
use crate::reward_harness::{
    evaluate_reward, run_script, EnvironmentHandle, ExecutionResult, RewardError, DEFAULT_REWARD_TIMEOUT,
    DEFAULT_SETUP_TIMEOUT,
};

pub use review::{parse_review, render_review, ReviewParseError};

/// Golden reward must be 1.0 within this tolerance.
pub const GOLDEN_TOLERANCE: f64 = 1e-9;

const STDERR_TAIL: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ConditionId {
    C1,
    C2,
    C3,
    C4,
    C5,
}

impl ConditionId {
    pub const ALL: [ConditionId; 5] =
        [ConditionId::C1, ConditionId::C2, ConditionId::C3, ConditionId::C4, ConditionId::C5];

    pub fn as_str(self) -> &'static str {
        match self {
            ConditionId::C1 => "C1",
            ConditionId::C2 => "C2",
            ConditionId::C3 => "C3",
            ConditionId::C4 => "C4",
            ConditionId::C5 => "C5",
        }
    }

    /// Row key in the REVIEW agreement table.
    pub fn table_key(self) -> &'static str {
        match self {
            ConditionId::C1 => "C1_initial_executes",
            ConditionId::C2 => "C2_golden_executes",
            ConditionId::C3 => "C3_golden_reward_eq_1",
            ConditionId::C4 => "C4_initial_reward_eq_0",
            ConditionId::C5 => "C5_no_forbidden_pattern",
        }
    }
}

impl fmt::Display for ConditionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ConditionId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ConditionId::ALL.into_iter().find(|c| c.as_str() == s).ok_or_else(|| format!("unknown condition '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub id: ConditionId,
    pub passed: bool,
    pub evidence: String,
    /// Reward observed for C3/C4 when the evaluation produced one.
    pub observed: Option<f64>,
    /// First matched pattern for C5.
    pub matched_pattern: Option<String>,
}

impl ConditionResult {
    fn new(id: ConditionId, passed: bool, evidence: impl Into<String>) -> Self {
        ConditionResult { id, passed, evidence: evidence.into(), observed: None, matched_pattern: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub failing_conditions: Vec<ConditionId>,
    pub setup_issues: Vec<String>,
    pub recommended_action: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub verdict: Verdict,
    /// Always C1..C5, in order.
    pub conditions: Vec<ConditionResult>,
    pub feedback: Feedback,
}

impl AgreementReport {
    /// Derives verdict and feedback from the condition results.
    pub fn from_conditions(conditions: Vec<ConditionResult>) -> Self {
        let failing: Vec<&ConditionResult> = conditions.iter().filter(|c| !c.passed).collect();
        let verdict = if failing.is_empty() && conditions.len() == ConditionId::ALL.len() {
            Verdict::Pass
        } else {
            Verdict::Fail
        };
        let setup_issues: Vec<String> = failing.iter().filter_map(|c| issue(c)).collect();
        let recommended_action = if failing.is_empty() {
            "No issues found.".to_string()
        } else {
            let list: Vec<String> = failing.iter().map(|c| format!("{} ({})", c.id, c.evidence)).collect();
            format!("Address the failing conditions before resubmitting: {}.", list.join("; "))
        };
        AgreementReport {
            verdict,
            feedback: Feedback {
                failing_conditions: failing.iter().map(|c| c.id).collect(),
                setup_issues,
                recommended_action,
            },
            conditions,
        }
    }

    pub fn condition(&self, id: ConditionId) -> Option<&ConditionResult> {
        self.conditions.iter().find(|c| c.id == id)
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

fn issue(condition: &ConditionResult) -> Option<String> {
    let observed = condition.observed.map(|v| format!(" (observed {v})")).unwrap_or_default();
    let text = match condition.id {
        ConditionId::C1 => "Make initial_setup.py run to completion with exit code 0".to_string(),
        ConditionId::C2 => "Make golden_patch.py run to completion with exit code 0".to_string(),
        ConditionId::C3 if condition.evidence == SKIPPED_SETUP => return None,
        ConditionId::C4 if condition.evidence == SKIPPED_SETUP => return None,
        ConditionId::C3 => format!("Make the golden state score exactly 1.0{observed}"),
        ConditionId::C4 => format!("Make the initial state score 0.0{observed}"),
        ConditionId::C5 => match &condition.matched_pattern {
            Some(pattern) => format!("Remove the forbidden pattern {pattern} from reward.py"),
            None => "Make reward.py readable and free of forbidden patterns".to_string(),
        },
    };
    Some(text)
}

const SKIPPED_SETUP: &str = "setup failed";
const SKIPPED_SCAN: &str = "not evaluated: reward script failed the static scan";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateTuple {
    pub task_id: String,
    pub initial_setup: PathBuf,
    pub golden_patch: PathBuf,
    pub reward: PathBuf,
}

impl CandidateTuple {
    /// Problems with the tuple itself: unreadable or aliased paths.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let paths =
            [("initial_setup", &self.initial_setup), ("golden_patch", &self.golden_patch), ("reward", &self.reward)];
        for (name, path) in paths {
            if !path.is_file() {
                out.push(format!("{name} script {} is not a readable file", path.display()));
            }
        }
        let canon: Vec<PathBuf> =
            paths.iter().map(|(_, p)| p.canonicalize().unwrap_or_else(|_| p.to_path_buf())).collect();
        if canon[0] == canon[1] || canon[0] == canon[2] || canon[1] == canon[2] {
            out.push("tuple scripts must be distinct files".to_string());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifierConfig {
    #[serde(with = "secs")]
    pub setup_timeout: Duration,
    #[serde(with = "secs")]
    pub reward_timeout: Duration,
    /// C4 passes iff the initial reward is at most this.
    pub init_epsilon: f64,
    pub scanner: ScannerConfig,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        VerifierConfig {
            setup_timeout: DEFAULT_SETUP_TIMEOUT,
            reward_timeout: DEFAULT_REWARD_TIMEOUT,
            init_epsilon: 0.0,
            scanner: ScannerConfig::default(),
        }
    }
}

mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

/// Runs C5, then C1/C2, then C3/C4. Never fails: every problem becomes a
/// failed condition with evidence.
pub fn verify(
    tuple: &CandidateTuple,
    env_init: &EnvironmentHandle,
    env_gold: &EnvironmentHandle,
    config: &VerifierConfig,
) -> AgreementReport {
    let c5 = scan_condition(tuple, config);
    let scan_ok = c5.passed;

    let shared_root = env_init.root == env_gold.root;
    let mut c1 = setup_condition(ConditionId::C1, env_init, &tuple.initial_setup, config.setup_timeout);
    let mut c2 = setup_condition(ConditionId::C2, env_gold, &tuple.golden_patch, config.setup_timeout);
    if shared_root {
        for c in [&mut c1, &mut c2] {
            c.passed = false;
            c.evidence = "initial and golden environments share a working root".to_string();
        }
    }

    let c3 = if !c2.passed {
        ConditionResult::new(ConditionId::C3, false, SKIPPED_SETUP)
    } else if !scan_ok {
        ConditionResult::new(ConditionId::C3, false, SKIPPED_SCAN)
    } else {
        reward_condition(ConditionId::C3, env_gold, tuple, config, |s| (s - 1.0).abs() <= GOLDEN_TOLERANCE)
    };
    let c4 = if !c1.passed {
        ConditionResult::new(ConditionId::C4, false, SKIPPED_SETUP)
    } else if !scan_ok {
        ConditionResult::new(ConditionId::C4, false, SKIPPED_SCAN)
    } else {
        let eps = config.init_epsilon;
        reward_condition(ConditionId::C4, env_init, tuple, config, move |s| s <= eps)
    };

    AgreementReport::from_conditions(vec![c1, c2, c3, c4, c5])
}

fn scan_condition(tuple: &CandidateTuple, config: &VerifierConfig) -> ConditionResult {
    let id = ConditionId::C5;
    let scanner = match Scanner::new(&config.scanner) {
        Ok(s) => s,
        Err(e) => return ConditionResult::new(id, false, format!("scanner configuration invalid: {e}")),
    };
    let source = match fs::read_to_string(&tuple.reward) {
        Ok(s) => s,
        Err(e) => return ConditionResult::new(id, false, format!("cannot read {}: {e}", tuple.reward.display())),
    };
    let findings = scanner.scan(&source);
    if findings.is_empty() {
        return ConditionResult::new(id, true, "Clean");
    }
    let mut result =
        ConditionResult::new(id, false, findings.iter().map(describe_finding).collect::<Vec<_>>().join("; "));
    result.matched_pattern = Some(match findings[0].pattern {
        Some(p) => p.as_str().to_string(),
        None => crate::pattern_scanner::PARSE_ERROR.to_string(),
    });
    result
}

fn describe_finding(f: &Finding) -> String {
    let name = f.pattern.map_or(crate::pattern_scanner::PARSE_ERROR, |p| p.as_str());
    format!("{name} at line {}: {}", f.line, f.excerpt)
}

fn setup_condition(
    id: ConditionId,
    env: &EnvironmentHandle,
    script: &std::path::Path,
    timeout: Duration,
) -> ConditionResult {
    match run_script(env, script, timeout) {
        Ok(raw) if raw.succeeded() => ConditionResult::new(id, true, format!("exit 0 in {:.2}s", raw.duration)),
        Ok(raw) if raw.timed_out => ConditionResult::new(id, false, format!("timed out after {:.1}s", raw.duration)),
        Ok(raw) => ConditionResult::new(id, false, format!("exit {}{}", raw.exit_code, stderr_tail(&raw))),
        Err(e) => ConditionResult::new(id, false, e.to_string()),
    }
}

fn reward_condition(
    id: ConditionId,
    env: &EnvironmentHandle,
    tuple: &CandidateTuple,
    config: &VerifierConfig,
    accept: impl Fn(f64) -> bool,
) -> ConditionResult {
    match evaluate_reward(env, &tuple.reward, config.reward_timeout) {
        Ok(outcome) => {
            let mut result = ConditionResult::new(id, accept(outcome.score), format!("Score: {}", outcome.score));
            result.observed = Some(outcome.score);
            result
        }
        Err(RewardError::OutOfRange { value, .. }) => {
            let mut result = ConditionResult::new(id, false, format!("reward {value} is outside [0, 1]"));
            result.observed = Some(value);
            result
        }
        Err(e) => {
            let tail = e.raw().map(stderr_tail).unwrap_or_default();
            ConditionResult::new(id, false, format!("{e}{tail}"))
        }
    }
}

fn stderr_tail(raw: &ExecutionResult) -> String {
    let trimmed = raw.stderr.trim();
    if trimmed.is_empty() {
        return String::new();
    }
    let count = trimmed.chars().count();
    let tail: String = trimmed.chars().skip(count.saturating_sub(STDERR_TAIL)).collect();
    format!(": {}", tail.replace('\n', " | "))
}
