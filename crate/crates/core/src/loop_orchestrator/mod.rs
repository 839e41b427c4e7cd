//! Generator/discriminator rounds behind an information barrier.
//!
//! Layout under the output root:
//!
//! ```text
//! adversarial/<task_id>/               generator workdir (persists across rounds)
//! reward_sandbox/<task_id>/round_<k>/  discriminator workdir, fresh each round
//! envs/<task_id>/round_<k>/{probe,verify}/{init,gold}   local environments
//! final/<task_id>/                     accepted bundle
//! ```
//!
//! Each round the generator writes `initial_setup.py` and `golden_patch.py`.
//! Those scripts are applied to a probe environment pair that both agents
//! may inspect through the env configs; the discriminator then writes
//! `reward.py` and the tuple is verified on a second, untouched pair.

mod barrier;
mod bundle;
mod task;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::agreement_verifier::{
    render_review, verify, AgreementReport, CandidateTuple, ConditionId, ConditionResult, VerifierConfig,
};
use crate::reward_harness::{run_command, run_script, EnvironmentHandle, ExecutionResult, DEFAULT_PASSTHROUGH};

pub use barrier::{
    content_leaks, enforce_barrier, BarrierStage, BarrierViolation, ENV_CONFIG_GOLDEN, ENV_CONFIG_INITIAL,
    GOLDEN_PATCH_FILE, INITIAL_SETUP_FILE, REVIEW_FILE, REWARD_FILE, TASK_CONFIG,
};
pub use bundle::{
    config_json, emit_bundle, meta_json, BundleError, BUNDLE_FILES, CONFIG_FILE, DEFAULT_OBSERVATION_TYPE,
    DEFAULT_STEP_BUDGET, META_FILE,
};
pub use task::{validate_batch, Difficulty, TaskError, TaskSpec, MIN_CONTEXT_CHARS};

pub const DEFAULT_ROUNDS: u32 = 5;
pub const DEFAULT_AGENT_TIMEOUT: Duration = Duration::from_secs(3600);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentRole {
    Generator,
    Discriminator,
}

impl AgentRole {
    fn as_str(self) -> &'static str {
        match self {
            AgentRole::Generator => "generator",
            AgentRole::Discriminator => "discriminator",
        }
    }
}

/// An external agent command. Placeholders: `{workdir}`, `{round}`, `{task_id}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentInvocation {
    pub role: AgentRole,
    pub command: Vec<String>,
    #[serde(default = "default_agent_timeout", with = "secs")]
    pub timeout: Duration,
    /// Extra variables for the agent process.
    #[serde(default)]
    pub env: BTreeMap<String, String>,
}

fn default_agent_timeout() -> Duration {
    DEFAULT_AGENT_TIMEOUT
}

mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Duration::try_from_secs_f64(f64::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

impl AgentInvocation {
    pub fn new(role: AgentRole, command: impl IntoIterator<Item = impl Into<String>>) -> Self {
        AgentInvocation {
            role,
            command: command.into_iter().map(Into::into).collect(),
            timeout: DEFAULT_AGENT_TIMEOUT,
            env: BTreeMap::new(),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn run(&self, workdir: &Path, round: u32, task_id: &str) -> Result<ExecutionResult, String> {
        let workdir_text = workdir.display().to_string();
        let argv: Vec<String> = self
            .command
            .iter()
            .map(|part| {
                part.replace("{workdir}", &workdir_text)
                    .replace("{round}", &round.to_string())
                    .replace("{task_id}", task_id)
            })
            .collect();
        let mut env = self.env.clone();
        env.insert("GYMSMITH_ROLE".into(), self.role.as_str().into());
        env.insert("GYMSMITH_ROUND".into(), round.to_string());
        env.insert("GYMSMITH_TASK_ID".into(), task_id.into());
        env.insert("GYMSMITH_WORKDIR".into(), workdir_text);
        let passthrough: Vec<String> = DEFAULT_PASSTHROUGH.iter().map(|s| s.to_string()).collect();
        run_command(&argv, workdir, &env, &passthrough, self.timeout).map_err(|e| e.to_string())
    }
}

/// A fresh pair of environments with disjoint roots.
#[derive(Debug, Clone)]
pub struct EnvPair {
    pub initial: EnvironmentHandle,
    pub golden: EnvironmentHandle,
}

/// Source of environments. `purpose` distinguishes the pair the agents may
/// inspect (`"probe"`) from the pair used for verification (`"verify"`).
pub trait EnvironmentFactory: Send + Sync {
    fn provision(&self, task_id: &str, round: u32, purpose: &str) -> io::Result<EnvPair>;
}

/// Local directories standing in for VMs.
#[derive(Debug, Clone)]
pub struct LocalSandboxFactory {
    pub base: PathBuf,
    pub interpreter: Vec<String>,
}

impl LocalSandboxFactory {
    pub fn new(base: impl Into<PathBuf>) -> Self {
        LocalSandboxFactory { base: base.into(), interpreter: vec!["python3".into(), "{script}".into()] }
    }
}

impl EnvironmentFactory for LocalSandboxFactory {
    fn provision(&self, task_id: &str, round: u32, purpose: &str) -> io::Result<EnvPair> {
        let dir = self.base.join(task_id).join(format!("round_{round}")).join(purpose);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        let make = |name: &str| -> io::Result<EnvironmentHandle> {
            Ok(EnvironmentHandle::local_sandbox(dir.join(name))?.with_interpreter(self.interpreter.clone()))
        };
        Ok(EnvPair { initial: make("init")?, golden: make("gold")? })
    }
}

#[derive(Debug, Clone)]
pub struct LoopConfig {
    pub rounds: u32,
    pub out_root: PathBuf,
    pub verifier: VerifierConfig,
}

impl LoopConfig {
    pub fn new(out_root: impl Into<PathBuf>) -> Self {
        LoopConfig { rounds: DEFAULT_ROUNDS, out_root: out_root.into(), verifier: VerifierConfig::default() }
    }

    pub fn generator_workdir(&self, task_id: &str) -> PathBuf {
        self.out_root.join("adversarial").join(task_id)
    }

    pub fn sandbox(&self, task_id: &str, round: u32) -> PathBuf {
        self.out_root.join("reward_sandbox").join(task_id).join(format!("round_{round}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: u32,
    pub report: AgreementReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum LoopOutcome {
    Accepted {
        task: TaskSpec,
        tuple: CandidateTuple,
        report: AgreementReport,
        review_text: String,
        rounds_used: u32,
        history: Vec<RoundRecord>,
    },
    Rejected {
        task_id: String,
        reason: String,
        last_report: AgreementReport,
        rounds_used: u32,
        history: Vec<RoundRecord>,
    },
}

impl LoopOutcome {
    pub fn rounds_used(&self) -> u32 {
        match self {
            LoopOutcome::Accepted { rounds_used, .. } | LoopOutcome::Rejected { rounds_used, .. } => *rounds_used,
        }
    }

    pub fn is_accepted(&self) -> bool {
        matches!(self, LoopOutcome::Accepted { .. })
    }

    pub fn history(&self) -> &[RoundRecord] {
        match self {
            LoopOutcome::Accepted { history, .. } | LoopOutcome::Rejected { history, .. } => history,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("round limit must be at least 1")]
    NoRounds,
    #[error("agent roles are swapped: expected {expected:?}")]
    WrongRole { expected: AgentRole },
    #[error("sandbox for round {round} breaks the information barrier: {violations:?}")]
    Barrier { round: u32, violations: Vec<BarrierViolation> },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Runs up to `config.rounds` rounds; stops at the first PASS.
pub fn run_loop(
    task: &TaskSpec,
    gen: &AgentInvocation,
    disc: &AgentInvocation,
    envs: &dyn EnvironmentFactory,
    config: &LoopConfig,
) -> Result<LoopOutcome, OrchestratorError> {
    task.validate()?;
    if config.rounds == 0 {
        return Err(OrchestratorError::NoRounds);
    }
    if gen.role != AgentRole::Generator {
        return Err(OrchestratorError::WrongRole { expected: AgentRole::Generator });
    }
    if disc.role != AgentRole::Discriminator {
        return Err(OrchestratorError::WrongRole { expected: AgentRole::Discriminator });
    }

    let gen_dir = config.generator_workdir(&task.task_id);
    fs::create_dir_all(&gen_dir)?;
    write_json(&gen_dir.join(TASK_CONFIG), &task.task_config())?;
    // Stale output from an earlier run must not count as this run's work.
    for name in [REVIEW_FILE, REWARD_FILE] {
        remove_if_present(&gen_dir.join(name))?;
    }

    let mut history = Vec::new();
    let mut previous_review: Option<String> = None;
    for round in 1..=config.rounds {
        let (report, tuple) = run_round(task, gen, disc, envs, config, round, previous_review.as_deref())?;
        let review_text = render_review(&report);
        let sandbox = config.sandbox(&task.task_id, round);
        fs::create_dir_all(&sandbox)?;
        fs::write(sandbox.join(REVIEW_FILE), &review_text)?;
        history.push(RoundRecord { round, report: report.clone() });

        if report.passed() {
            let tuple = tuple.expect("a passing round has a complete tuple");
            let kept_reward = gen_dir.join(REWARD_FILE);
            fs::copy(&tuple.reward, &kept_reward)?;
            fs::write(gen_dir.join(REVIEW_FILE), &review_text)?;
            return Ok(LoopOutcome::Accepted {
                task: task.clone(),
                tuple: CandidateTuple { reward: kept_reward, ..tuple },
                report,
                review_text,
                rounds_used: round,
                history,
            });
        }
        previous_review = Some(review_text);
    }

    let last_report = history.last().expect("at least one round").report.clone();
    let failing: Vec<String> =
        last_report.conditions.iter().filter(|c| !c.passed).map(|c| format!("{} ({})", c.id, c.evidence)).collect();
    Ok(LoopOutcome::Rejected {
        task_id: task.task_id.clone(),
        reason: format!("no agreement after {} rounds; final round failed {}", config.rounds, failing.join("; ")),
        last_report,
        rounds_used: config.rounds,
        history,
    })
}

fn run_round(
    task: &TaskSpec,
    gen: &AgentInvocation,
    disc: &AgentInvocation,
    envs: &dyn EnvironmentFactory,
    config: &LoopConfig,
    round: u32,
    previous_review: Option<&str>,
) -> Result<(AgreementReport, Option<CandidateTuple>), OrchestratorError> {
    let gen_dir = config.generator_workdir(&task.task_id);
    let probe = envs.provision(&task.task_id, round, "probe")?;
    write_json(&gen_dir.join(ENV_CONFIG_INITIAL), &env_config("initial", &probe.initial))?;
    write_json(&gen_dir.join(ENV_CONFIG_GOLDEN), &env_config("golden", &probe.golden))?;
    if let Some(review) = previous_review {
        fs::write(gen_dir.join(REVIEW_FILE), review)?;
    }

    // (i) generator
    let gen_result = gen.run(&gen_dir, round, &task.task_id);
    let initial_setup = gen_dir.join(INITIAL_SETUP_FILE);
    let golden_patch = gen_dir.join(GOLDEN_PATCH_FILE);
    let mut missing = Vec::new();
    if let Some(problem) = agent_problem(&gen_result) {
        missing.push(format!("generator failed: {problem}"));
    }
    for path in [&initial_setup, &golden_patch] {
        if !path.is_file() {
            missing.push(format!("generator did not produce {}", file_name(path)));
        }
    }
    if !missing.is_empty() {
        return Ok((synthesized(&missing, AgentRole::Generator), None));
    }

    // The probe pair shows both agents what the scripts produce.
    let _ = run_script(&probe.initial, &initial_setup, config.verifier.setup_timeout);
    let _ = run_script(&probe.golden, &golden_patch, config.verifier.setup_timeout);

    // (ii) discriminator, in a sandbox holding only the allowed inputs
    let sandbox = config.sandbox(&task.task_id, round);
    if sandbox.exists() {
        fs::remove_dir_all(&sandbox)?;
    }
    fs::create_dir_all(&sandbox)?;
    write_json(&sandbox.join(TASK_CONFIG), &task.task_config())?;
    write_json(&sandbox.join(ENV_CONFIG_INITIAL), &env_config("initial", &probe.initial))?;
    write_json(&sandbox.join(ENV_CONFIG_GOLDEN), &env_config("golden", &probe.golden))?;
    if let Some(review) = previous_review {
        fs::write(sandbox.join(REVIEW_FILE), review)?;
    }
    let mut violations = enforce_barrier(&sandbox, BarrierStage::Pre);
    violations.extend(content_leaks(&sandbox, &[initial_setup.as_path(), golden_patch.as_path()]));
    if !violations.is_empty() {
        return Err(OrchestratorError::Barrier { round, violations });
    }

    let disc_result = disc.run(&sandbox, round, &task.task_id);
    let reward = sandbox.join(REWARD_FILE);
    let mut problems = Vec::new();
    if let Some(problem) = agent_problem(&disc_result) {
        problems.push(format!("discriminator failed: {problem}"));
    }
    if !reward.is_file() {
        problems.push(format!("discriminator did not produce {REWARD_FILE}"));
    }
    problems.extend(enforce_barrier(&sandbox, BarrierStage::Post).iter().map(|v| v.to_string()));
    if !problems.is_empty() {
        return Ok((synthesized(&problems, AgentRole::Discriminator), None));
    }

    // (iii) verification on an untouched pair
    let fresh = envs.provision(&task.task_id, round, "verify")?;
    let tuple = CandidateTuple { task_id: task.task_id.clone(), initial_setup, golden_patch, reward };
    let report = verify(&tuple, &fresh.initial, &fresh.golden, &config.verifier);
    Ok((report, Some(tuple)))
}

fn agent_problem(result: &Result<ExecutionResult, String>) -> Option<String> {
    match result {
        Ok(r) if r.succeeded() => None,
        Ok(r) if r.timed_out => Some(format!("timed out after {:.1}s", r.duration)),
        Ok(r) => Some(format!("exit {}", r.exit_code)),
        Err(e) => Some(e.clone()),
    }
}

/// FAIL report for a round that never reached verification.
fn synthesized(problems: &[String], culprit: AgentRole) -> AgreementReport {
    let summary = problems.join("; ");
    let (setup_evidence, scan_evidence) = match culprit {
        AgentRole::Generator => (summary.clone(), "not evaluated: no reward script this round".to_string()),
        AgentRole::Discriminator => ("not evaluated: reward stage failed".to_string(), summary.clone()),
    };
    let failed = |id: ConditionId, evidence: &str| ConditionResult {
        id,
        passed: false,
        evidence: evidence.to_string(),
        observed: None,
        matched_pattern: None,
    };
    let mut report = AgreementReport::from_conditions(vec![
        failed(ConditionId::C1, &setup_evidence),
        failed(ConditionId::C2, &setup_evidence),
        failed(ConditionId::C3, "setup failed"),
        failed(ConditionId::C4, "setup failed"),
        failed(ConditionId::C5, &scan_evidence),
    ]);
    report.feedback.setup_issues = problems.to_vec();
    report.feedback.recommended_action = format!("The round did not reach verification: {summary}.");
    report
}

fn env_config(role: &str, env: &EnvironmentHandle) -> serde_json::Value {
    json!({
        "role": role,
        "adapter": env.kind,
        "root": env.root,
        "sid_file": env.sid_file,
        "session_id": env.session_id(),
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}

fn remove_if_present(path: &Path) -> io::Result<()> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
        _ => Ok(()),
    }
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}
