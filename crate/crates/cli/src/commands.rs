use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, SystemTime};

use anyhow::Context;
use clap::Args;
use gymsmith_core::agreement_verifier::{render_review, verify, CandidateTuple, VerifierConfig};
use gymsmith_core::diff_engine::compute_diff;
use gymsmith_core::gspo_kernel::{gradient_check, gspo_objective, GroupConfig, RolloutStat};
use gymsmith_core::loop_orchestrator::{
    emit_bundle, run_loop, AgentInvocation, AgentRole, EnvironmentFactory, LocalSandboxFactory, LoopConfig,
    LoopOutcome, TaskSpec,
};
use gymsmith_core::pattern_scanner::Scanner;
use gymsmith_core::session_store::StoreConfig;
use gymsmith_core::state_document::StateValue;
use gymsmith_core::traj_slicer::{proportional_counter, slice_trajectory, to_jsonl, Trajectory, DEFAULT_INTERVAL};
use gymsmith_server::AppState;
use serde_json::{json, Value};

use crate::config::GlobalConfig;
use crate::usage;

const FAILURE: u8 = 1;

fn print_json(value: &Value) -> anyhow::Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn read_input(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display())).map_err(usage)
}

fn exit(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(FAILURE)
    }
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// JSON file with the default seed state.
    #[arg(long, value_name = "FILE")]
    pub seed: Option<PathBuf>,
}

pub fn serve(cfg: &GlobalConfig, args: &ServeArgs) -> anyhow::Result<ExitCode> {
    let seed = match &args.seed {
        Some(path) => StateValue::from_json_str(&read_input(path)?)
            .with_context(|| format!("invalid seed {}", path.display()))
            .map_err(usage)?,
        None => StateValue::empty_record(),
    };
    let store = StoreConfig { ttl: cfg.ttl, upload_quota: cfg.upload_quota, seed };
    tracing::info!(ttl_secs = cfg.ttl.as_secs(), mask = ?cfg.mask_patterns, quota = cfg.upload_quota, "configuration");
    let state = AppState::with_system_clock(store, cfg.mask.clone());
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = gymsmith_server::bind(cfg.addr).await.with_context(|| format!("cannot bind {}", cfg.addr))?;
        println!("{}", json!({ "listening": listener.local_addr()?.to_string() }));
        gymsmith_server::serve(listener, state, cfg.gc_interval, gymsmith_server::shutdown_signal()).await?;
        Ok(ExitCode::SUCCESS)
    })
}

#[derive(Debug, Args)]
pub struct DiffArgs {
    /// Initial snapshot (JSON).
    pub initial: PathBuf,
    /// Current snapshot (JSON).
    pub current: PathBuf,
    /// Exit 1 when the diff is not empty.
    #[arg(long)]
    pub expect_empty: bool,
}

pub fn diff(cfg: &GlobalConfig, args: &DiffArgs) -> anyhow::Result<ExitCode> {
    let load = |path: &Path| -> anyhow::Result<StateValue> {
        StateValue::from_json_str(&read_input(path)?)
            .with_context(|| format!("invalid state {}", path.display()))
            .map_err(usage)
    };
    let report = compute_diff(&load(&args.initial)?, &load(&args.current)?, &cfg.mask);
    print_json(&report.to_json_value())?;
    Ok(exit(!(args.expect_empty && !report.is_empty())))
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    /// Reward script to scan.
    pub path: PathBuf,
}

pub fn scan(cfg: &GlobalConfig, args: &ScanArgs) -> anyhow::Result<ExitCode> {
    let source = read_input(&args.path)?;
    let scanner = Scanner::new(&cfg.scanner).map_err(|e| usage(anyhow::anyhow!(e)))?;
    let findings = scanner.scan(&source);
    print_json(&json!({
        "path": args.path.display().to_string(),
        "clean": findings.is_empty(),
        "findings": findings,
    }))?;
    Ok(exit(findings.is_empty()))
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_name = "FILE")]
    pub initial_setup: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub golden_patch: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub reward: PathBuf,
    #[arg(long, default_value = "verify")]
    pub task_id: String,
    /// Where to create the two sandboxes. A temporary directory by default.
    #[arg(long, value_name = "DIR")]
    pub workdir: Option<PathBuf>,
    /// Print the report as JSON instead of the REVIEW document.
    #[arg(long)]
    pub json: bool,
}

fn verifier_config(cfg: &GlobalConfig) -> VerifierConfig {
    VerifierConfig {
        setup_timeout: cfg.setup_timeout,
        reward_timeout: cfg.reward_timeout,
        init_epsilon: cfg.init_epsilon,
        scanner: cfg.scanner.clone(),
    }
}

pub fn verify_cmd(cfg: &GlobalConfig, args: &VerifyArgs) -> anyhow::Result<ExitCode> {
    let id_ok =
        !args.task_id.is_empty() && args.task_id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-');
    if !id_ok {
        return Err(usage(anyhow::anyhow!("task id {:?} must match [A-Za-z0-9_-]+", args.task_id)));
    }
    for path in [&args.initial_setup, &args.golden_patch, &args.reward] {
        if !path.is_file() {
            return Err(usage(anyhow::anyhow!("no such script: {}", path.display())));
        }
    }
    let scratch;
    let base = match &args.workdir {
        Some(dir) => dir.clone(),
        None => {
            scratch = tempfile::tempdir()?;
            scratch.path().to_path_buf()
        }
    };
    let factory = LocalSandboxFactory { base, interpreter: cfg.interpreter.clone() };
    let pair = factory.provision(&args.task_id, 1, "verify")?;
    let tuple = CandidateTuple {
        task_id: args.task_id.clone(),
        initial_setup: args.initial_setup.clone(),
        golden_patch: args.golden_patch.clone(),
        reward: args.reward.clone(),
    };
    let report = verify(&tuple, &pair.initial, &pair.golden, &verifier_config(cfg));
    if args.json {
        print_json(&serde_json::to_value(&report)?)?;
    } else {
        print!("{}", render_review(&report));
    }
    Ok(exit(report.passed()))
}

#[derive(Debug, Args)]
pub struct OrchestrateArgs {
    /// Task specification (JSON).
    #[arg(long, value_name = "FILE")]
    pub task: PathBuf,
    /// Generator command line; `{workdir}`, `{round}` and `{task_id}` are substituted.
    #[arg(long, value_name = "CMD")]
    pub generator: Option<String>,
    /// Discriminator command line, same placeholders.
    #[arg(long, value_name = "CMD")]
    pub discriminator: Option<String>,
    /// Per-invocation agent timeout in seconds.
    #[arg(long, value_name = "SECS")]
    pub agent_timeout: Option<f64>,
}

fn agent_command(role: &str, flag: &Option<String>, file: &Option<Vec<String>>) -> anyhow::Result<Vec<String>> {
    let command = match (flag, file) {
        (Some(line), _) => {
            shlex::split(line).ok_or_else(|| usage(anyhow::anyhow!("cannot parse {role} command {line:?}")))?
        }
        (None, Some(argv)) => argv.clone(),
        (None, None) => return Err(usage(anyhow::anyhow!("no {role} command given"))),
    };
    if command.is_empty() {
        return Err(usage(anyhow::anyhow!("{role} command is empty")));
    }
    Ok(command)
}

pub fn orchestrate(cfg: &GlobalConfig, args: &OrchestrateArgs) -> anyhow::Result<ExitCode> {
    let task: TaskSpec = serde_json::from_str(&read_input(&args.task)?)
        .with_context(|| format!("invalid task {}", args.task.display()))
        .map_err(usage)?;
    task.validate().map_err(|e| usage(anyhow::anyhow!(e)))?;
    let timeout = match args.agent_timeout {
        Some(secs) => Duration::try_from_secs_f64(secs)
            .ok()
            .filter(|d| !d.is_zero())
            .ok_or_else(|| usage(anyhow::anyhow!("agent-timeout must be positive")))?,
        None => cfg.agent_timeout,
    };
    let generator =
        AgentInvocation::new(AgentRole::Generator, agent_command("generator", &args.generator, &cfg.generator)?)
            .with_timeout(timeout);
    let discriminator = AgentInvocation::new(
        AgentRole::Discriminator,
        agent_command("discriminator", &args.discriminator, &cfg.discriminator)?,
    )
    .with_timeout(timeout);
    let factory = LocalSandboxFactory { base: cfg.out.join("envs"), interpreter: cfg.interpreter.clone() };
    let config = LoopConfig { rounds: cfg.rounds, out_root: cfg.out.clone(), verifier: verifier_config(cfg) };
    let outcome = run_loop(&task, &generator, &discriminator, &factory, &config)?;
    let history: Vec<Value> = outcome
        .history()
        .iter()
        .map(|r| {
            json!({
                "round": r.round,
                "verdict": r.report.verdict,
                "failing_conditions": r.report.feedback.failing_conditions,
            })
        })
        .collect();
    let summary = match &outcome {
        LoopOutcome::Accepted { .. } => {
            let bundle = emit_bundle(&outcome, &cfg.out)?;
            json!({
                "task_id": task.task_id,
                "accepted": true,
                "rounds_used": outcome.rounds_used(),
                "bundle": bundle.display().to_string(),
                "history": history,
            })
        }
        LoopOutcome::Rejected { reason, .. } => json!({
            "task_id": task.task_id,
            "accepted": false,
            "rounds_used": outcome.rounds_used(),
            "bundle": null,
            "reason": reason,
            "history": history,
        }),
    };
    print_json(&summary)?;
    Ok(exit(outcome.is_accepted()))
}

#[derive(Debug, Args)]
pub struct SliceArgs {
    /// Trajectory (JSON).
    pub trajectory: PathBuf,
    /// Turn-pairs between consecutive slices.
    #[arg(long, default_value_t = DEFAULT_INTERVAL)]
    pub interval: usize,
    /// Token budget per slice.
    #[arg(long, default_value_t = 144_000)]
    pub budget: usize,
    /// Characters per text token for the built-in counter.
    #[arg(long, default_value_t = 4)]
    pub chars_per_token: usize,
    /// Tokens charged per image.
    #[arg(long, default_value_t = 1_024)]
    pub image_tokens: usize,
}

pub fn slice(args: &SliceArgs) -> anyhow::Result<ExitCode> {
    let trajectory: Trajectory = serde_json::from_str(&read_input(&args.trajectory)?)
        .with_context(|| format!("invalid trajectory {}", args.trajectory.display()))
        .map_err(usage)?;
    let counter = proportional_counter(args.chars_per_token, args.image_tokens);
    let slices =
        slice_trajectory(&trajectory, args.interval, args.budget, counter).map_err(|e| usage(anyhow::anyhow!(e)))?;
    io::stdout().lock().write_all(to_jsonl(&slices).as_bytes())?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Args)]
pub struct GspoCheckArgs {
    /// JSON lines, one group (an array of rollouts) per line.
    pub groups: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    pub clip: f64,
    #[arg(long, default_value_t = 0.0)]
    pub kl_coefficient: f64,
    #[arg(long)]
    pub divide_by_std: bool,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub delta: f64,
    /// Largest acceptable relative gradient error.
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
}

pub fn gspo_check(args: &GspoCheckArgs) -> anyhow::Result<ExitCode> {
    let file = fs::File::open(&args.groups)
        .with_context(|| format!("cannot read {}", args.groups.display()))
        .map_err(usage)?;
    let mut all_ok = true;
    let mut out = io::stdout().lock();
    for (index, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let group: Vec<RolloutStat> =
            serde_json::from_str(&line).with_context(|| format!("line {}: invalid group", index + 1)).map_err(usage)?;
        let cfg = GroupConfig {
            group_size: group.len(),
            clip: args.clip,
            kl_coefficient: args.kl_coefficient,
            divide_by_std: args.divide_by_std,
        };
        let bad_group = |e| usage(anyhow::anyhow!("line {}: {e}", index + 1));
        let objective = gspo_objective(&group, &cfg).map_err(bad_group)?;
        let check = gradient_check(&group, &cfg, args.delta).map_err(bad_group)?;
        let ok = check.max_relative_error <= args.tolerance;
        all_ok &= ok;
        let record = json!({
            "line": index + 1,
            "value": objective.value,
            "per_rollout": objective.per_rollout,
            "max_relative_error": check.max_relative_error,
            "shifted": check.shifted,
            "ok": ok,
        });
        serde_json::to_writer(&mut out, &record)?;
        writeln!(out)?;
    }
    Ok(exit(all_ok))
}

#[derive(Debug, Args)]
pub struct GcArgs {
    /// Report what would be removed without removing it.
    #[arg(long)]
    pub dry_run: bool,
}

/// Newest modification time anywhere under `path`.
fn last_touched(path: &Path) -> io::Result<SystemTime> {
    let mut newest = fs::symlink_metadata(path)?.modified()?;
    if path.is_dir() {
        for entry in fs::read_dir(path)? {
            newest = newest.max(last_touched(&entry?.path())?);
        }
    }
    Ok(newest)
}

/// Removes provisioned sandbox pairs under `<out>/envs` idle for longer than the TTL.
pub fn gc(cfg: &GlobalConfig, args: &GcArgs) -> anyhow::Result<ExitCode> {
    let envs = cfg.out.join("envs");
    let now = SystemTime::now();
    let mut removed = Vec::new();
    let mut kept = 0usize;
    if envs.is_dir() {
        let mut pairs = Vec::new();
        for task in fs::read_dir(&envs)? {
            let task = task?.path();
            if !task.is_dir() {
                continue;
            }
            for round in fs::read_dir(&task)? {
                let round = round?.path();
                if !round.is_dir() {
                    continue;
                }
                for purpose in fs::read_dir(&round)? {
                    let purpose = purpose?.path();
                    if purpose.is_dir() {
                        pairs.push(purpose);
                    }
                }
            }
        }
        pairs.sort();
        for pair in pairs {
            let idle = now.duration_since(last_touched(&pair)?).unwrap_or_default();
            if idle > cfg.ttl {
                if !args.dry_run {
                    fs::remove_dir_all(&pair)?;
                }
                removed.push(pair.display().to_string());
            } else {
                kept += 1;
            }
        }
    }
    print_json(&json!({ "removed": removed, "kept": kept, "dry_run": args.dry_run }))?;
    Ok(ExitCode::SUCCESS)
}
