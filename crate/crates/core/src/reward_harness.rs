//! Script execution against environments and the reward output protocol.
//!
//! A script runs under the handle's interpreter template with the handle's
//! root as working directory and a scrubbed environment. Timeouts kill the
//! whole process group and are reported in the result rather than raised.
//! Reward scripts must end their output with a `REWARD: <x>` line.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Mutex, OnceLock};
use std::thread;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use wait_timeout::ChildExt;

use crate::session_store::SessionId;

pub const DEFAULT_SETUP_TIMEOUT: Duration = Duration::from_secs(600);
pub const DEFAULT_REWARD_TIMEOUT: Duration = Duration::from_secs(300);
/// Exit code recorded for a run that hit its timeout.
pub const TIMEOUT_EXIT_CODE: i32 = 124;
/// Environment variable naming the session-id handoff file.
pub const SID_FILE_VAR: &str = "TASK_SID_FILE";
pub const DEFAULT_SID_FILE_NAME: &str = ".task_sid";
pub const DEFAULT_PASSTHROUGH: &[&str] = &["PATH", "HOME", "LANG", "LC_ALL", "TMPDIR", "PYTHONPATH", "SYSTEMROOT"];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("script not found: {0}")]
    MissingScript(PathBuf),
    #[error("empty interpreter template")]
    EmptyTemplate,
    #[error("failed to spawn {program}: {source}")]
    Spawn {
        program: String,
        #[source]
        source: io::Error,
    },
    #[error("i/o error while running script: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdapterKind {
    /// A directory on this machine stands in for a VM.
    LocalSandbox,
    /// Scripts are shipped to `target` by the interpreter template (e.g. over ssh).
    RemoteCommand { target: String },
}

/// Where and how scripts run. Placeholders in the interpreter template:
/// `{script}`, `{root}` and `{target}`.
#[derive(Debug, Clone)]
pub struct EnvironmentHandle {
    pub kind: AdapterKind,
    pub root: PathBuf,
    pub env: BTreeMap<String, String>,
    pub passthrough: Vec<String>,
    pub interpreter: Vec<String>,
    pub sid_file: Option<PathBuf>,
    busy: Arc<Mutex<()>>,
}

impl EnvironmentHandle {
    pub fn new(kind: AdapterKind, root: impl Into<PathBuf>) -> Self {
        EnvironmentHandle {
            kind,
            root: root.into(),
            env: BTreeMap::new(),
            passthrough: DEFAULT_PASSTHROUGH.iter().map(|s| s.to_string()).collect(),
            interpreter: vec!["python3".into(), "{script}".into()],
            sid_file: None,
            busy: Arc::new(Mutex::new(())),
        }
    }

    /// Creates `root` and writes a fresh sid into its handoff file.
    pub fn local_sandbox(root: impl Into<PathBuf>) -> io::Result<Self> {
        let mut handle = EnvironmentHandle::new(AdapterKind::LocalSandbox, root);
        fs::create_dir_all(&handle.root)?;
        handle.root = handle.root.canonicalize()?;
        let sid_file = handle.root.join(DEFAULT_SID_FILE_NAME);
        fs::write(&sid_file, SessionId::generate().as_str())?;
        handle.set_sid_file(sid_file);
        Ok(handle)
    }

    pub fn with_interpreter<I, S>(mut self, template: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.interpreter = template.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_env(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.env.insert(key.into(), value.into());
        self
    }

    pub fn set_sid_file(&mut self, path: PathBuf) {
        self.env.insert(SID_FILE_VAR.into(), path.display().to_string());
        self.sid_file = Some(path);
    }

    pub fn session_id(&self) -> Option<String> {
        let path = self.sid_file.as_ref()?;
        fs::read_to_string(path).ok().map(|s| s.trim().to_owned())
    }

    fn command_line(&self, script: &Path) -> Result<Vec<String>, HarnessError> {
        let target = match &self.kind {
            AdapterKind::RemoteCommand { target } => target.as_str(),
            AdapterKind::LocalSandbox => "",
        };
        let script = script.display().to_string();
        let root = self.root.display().to_string();
        let argv: Vec<String> = self
            .interpreter
            .iter()
            .map(|part| part.replace("{script}", &script).replace("{root}", &root).replace("{target}", target))
            .collect();
        if argv.is_empty() {
            return Err(HarnessError::EmptyTemplate);
        }
        Ok(argv)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
    /// Wall-clock seconds.
    pub duration: f64,
    pub timed_out: bool,
}

impl ExecutionResult {
    pub fn succeeded(&self) -> bool {
        self.exit_code == 0 && !self.timed_out
    }
}

/// Runs an argv with cwd, environment and a deadline. Shared by script
/// execution and agent invocation.
pub fn run_command(
    argv: &[String],
    cwd: &Path,
    env: &BTreeMap<String, String>,
    passthrough: &[String],
    timeout: Duration,
) -> Result<ExecutionResult, HarnessError> {
    let (program, args) = argv.split_first().ok_or(HarnessError::EmptyTemplate)?;
    let mut command = Command::new(program);
    command.args(args).current_dir(cwd).env_clear().stdin(Stdio::null()).stdout(Stdio::piped()).stderr(Stdio::piped());
    for key in passthrough {
        if let Some(value) = std::env::var_os(key) {
            command.env(key, value);
        }
    }
    command.envs(env);
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        command.process_group(0);
    }

    let started = Instant::now();
    let mut child = command.spawn().map_err(|source| HarnessError::Spawn { program: program.clone(), source })?;
    let stdout = drain(child.stdout.take());
    let stderr = drain(child.stderr.take());

    let (status, timed_out) = match child.wait_timeout(timeout)? {
        Some(status) => (status, false),
        None => {
            kill_tree(&mut child);
            (child.wait()?, true)
        }
    };
    let duration = started.elapsed().as_secs_f64();
    let exit_code = if timed_out { TIMEOUT_EXIT_CODE } else { exit_code(status) };
    Ok(ExecutionResult {
        exit_code,
        stdout: stdout.join().unwrap_or_default(),
        stderr: stderr.join().unwrap_or_default(),
        duration,
        timed_out,
    })
}

fn drain<R: Read + Send + 'static>(pipe: Option<R>) -> thread::JoinHandle<String> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(mut pipe) = pipe {
            let _ = pipe.read_to_end(&mut buf);
        }
        String::from_utf8_lossy(&buf).into_owned()
    })
}

#[cfg(unix)]
fn kill_tree(child: &mut Child) {
    // The child leads its own process group, so this reaches grandchildren too.
    let pgid = child.id() as libc::pid_t;
    unsafe {
        libc::kill(-pgid, libc::SIGKILL);
    }
    let _ = child.kill();
}

#[cfg(not(unix))]
fn kill_tree(child: &mut Child) {
    let _ = child.kill();
}

fn exit_code(status: std::process::ExitStatus) -> i32 {
    #[cfg(unix)]
    {
        use std::os::unix::process::ExitStatusExt;
        if let Some(signal) = status.signal() {
            return 128 + signal;
        }
    }
    status.code().unwrap_or(-1)
}

pub fn run_script(env: &EnvironmentHandle, script: &Path, timeout: Duration) -> Result<ExecutionResult, HarnessError> {
    let script = script
        .canonicalize()
        .ok()
        .filter(|p| p.is_file())
        .ok_or_else(|| HarnessError::MissingScript(script.to_path_buf()))?;
    let argv = env.command_line(&script)?;
    let _guard = env.busy.lock().unwrap_or_else(|e| e.into_inner());
    run_command(&argv, &env.root, &env.env, &env.passthrough, timeout)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardOutcome {
    pub score: f64,
    pub raw: ExecutionResult,
}

#[derive(Debug, Error)]
pub enum RewardError {
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("reward script timed out after {:.1}s", .0.duration)]
    TimedOut(ExecutionResult),
    #[error("reward script exited with code {}", .0.exit_code)]
    Crashed(ExecutionResult),
    #[error("no REWARD line in reward script output")]
    NoRewardLine(ExecutionResult),
    #[error("reward {value} is outside [0, 1]")]
    OutOfRange { value: f64, raw: ExecutionResult },
}

impl RewardError {
    pub fn raw(&self) -> Option<&ExecutionResult> {
        match self {
            RewardError::Harness(_) => None,
            RewardError::TimedOut(r) | RewardError::Crashed(r) | RewardError::NoRewardLine(r) => Some(r),
            RewardError::OutOfRange { raw, .. } => Some(raw),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum RewardParseError {
    #[error("no REWARD line")]
    NoRewardLine,
    #[error("reward {0} is outside [0, 1]")]
    OutOfRange(f64),
}

fn reward_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^REWARD:\s*([0-9]*\.?[0-9]+)\s*$").expect("valid regex"))
}

/// Extracts the score from the last `REWARD:` line of `stdout`.
pub fn parse_reward(stdout: &str) -> Result<f64, RewardParseError> {
    let value = stdout
        .lines()
        .rev()
        .find_map(|line| reward_line().captures(line).map(|c| c[1].to_owned()))
        .ok_or(RewardParseError::NoRewardLine)?;
    let value: f64 = value.parse().map_err(|_| RewardParseError::NoRewardLine)?;
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(RewardParseError::OutOfRange(value))
    }
}

pub fn evaluate_reward(
    env: &EnvironmentHandle,
    reward_script: &Path,
    timeout: Duration,
) -> Result<RewardOutcome, RewardError> {
    let raw = run_script(env, reward_script, timeout)?;
    if raw.timed_out {
        return Err(RewardError::TimedOut(raw));
    }
    if raw.exit_code != 0 {
        return Err(RewardError::Crashed(raw));
    }
    match parse_reward(&raw.stdout) {
        Ok(score) => Ok(RewardOutcome { score, raw }),
        Err(RewardParseError::NoRewardLine) => Err(RewardError::NoRewardLine(raw)),
        Err(RewardParseError::OutOfRange(value)) => Err(RewardError::OutOfRange { value, raw }),
    }
}
