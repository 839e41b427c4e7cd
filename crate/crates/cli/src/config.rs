//! Layered configuration: flag, then `GYMSMITH_*` variable, then config file,
//! then built-in default.

use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use clap::Args;
use gymsmith_core::diff_engine::{VolatileMask, DEFAULT_MASK};
use gymsmith_core::loop_orchestrator::{DEFAULT_AGENT_TIMEOUT, DEFAULT_ROUNDS};
use gymsmith_core::pattern_scanner::{Scanner, ScannerConfig};
use gymsmith_core::reward_harness::{DEFAULT_REWARD_TIMEOUT, DEFAULT_SETUP_TIMEOUT};
use gymsmith_core::session_store::{DEFAULT_TTL, DEFAULT_UPLOAD_QUOTA};
use gymsmith_server::{DEFAULT_GC_INTERVAL, DEFAULT_PORT};
use serde::Deserialize;

use crate::usage;

pub const DEFAULT_OUT: &str = "gymsmith-out";

/// Options shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML configuration file.
    #[arg(long, global = true, env = "GYMSMITH_CONFIG", value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "GYMSMITH_PORT")]
    pub port: Option<u16>,
    #[arg(long, global = true, env = "GYMSMITH_BIND", value_name = "ADDR")]
    pub bind: Option<IpAddr>,
    /// Session idle TTL in seconds.
    #[arg(long, global = true, env = "GYMSMITH_TTL", value_name = "SECS")]
    pub ttl: Option<u64>,
    /// Volatile key-path patterns masked before diffing (repeatable or comma-separated).
    #[arg(long, global = true, env = "GYMSMITH_MASK", value_delimiter = ',', value_name = "PATTERN")]
    pub mask: Option<Vec<String>>,
    /// Maximum generator/discriminator rounds.
    #[arg(long, global = true, env = "GYMSMITH_ROUNDS")]
    pub rounds: Option<u32>,
    #[arg(long, global = true, env = "GYMSMITH_TIMEOUT_SETUP", value_name = "SECS")]
    pub timeout_setup: Option<f64>,
    #[arg(long, global = true, env = "GYMSMITH_TIMEOUT_REWARD", value_name = "SECS")]
    pub timeout_reward: Option<f64>,
    /// Output root for loop artifacts and bundles.
    #[arg(long, global = true, env = "GYMSMITH_OUT", value_name = "DIR")]
    pub out: Option<PathBuf>,
}

/// Contents of the TOML file. Every key is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub port: Option<u16>,
    pub bind: Option<IpAddr>,
    pub ttl: Option<u64>,
    pub mask: Option<Vec<String>>,
    pub rounds: Option<u32>,
    pub timeout_setup: Option<f64>,
    pub timeout_reward: Option<f64>,
    pub out: Option<PathBuf>,
    pub upload_quota: Option<usize>,
    pub gc_interval: Option<u64>,
    pub init_epsilon: Option<f64>,
    pub agent_timeout: Option<f64>,
    pub interpreter: Option<Vec<String>>,
    pub generator: Option<Vec<String>>,
    pub discriminator: Option<Vec<String>>,
    pub scanner: Option<ScannerConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))
            .map_err(usage)?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display())).map_err(usage)
    }
}

#[derive(Debug, Clone)]
pub struct GlobalConfig {
    pub addr: SocketAddr,
    pub ttl: Duration,
    pub mask: VolatileMask,
    pub mask_patterns: Vec<String>,
    pub rounds: u32,
    pub setup_timeout: Duration,
    pub reward_timeout: Duration,
    pub out: PathBuf,
    pub upload_quota: usize,
    pub gc_interval: Duration,
    pub init_epsilon: f64,
    pub agent_timeout: Duration,
    pub interpreter: Vec<String>,
    pub generator: Option<Vec<String>>,
    pub discriminator: Option<Vec<String>>,
    pub scanner: ScannerConfig,
}

fn seconds(field: &str, value: f64) -> anyhow::Result<Duration> {
    Duration::try_from_secs_f64(value)
        .ok()
        .filter(|d| !d.is_zero())
        .ok_or_else(|| usage(anyhow::anyhow!("{field} must be a positive number of seconds, got {value}")))
}

impl GlobalConfig {
    pub fn resolve(flags: &Overrides) -> anyhow::Result<Self> {
        let file = match &flags.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        Self::merge(flags, file)
    }

    pub fn merge(flags: &Overrides, file: FileConfig) -> anyhow::Result<Self> {
        let port = flags.port.or(file.port).unwrap_or(DEFAULT_PORT);
        let bind = flags.bind.or(file.bind).unwrap_or(IpAddr::V4(Ipv4Addr::LOCALHOST));
        let ttl = flags.ttl.or(file.ttl).map_or(DEFAULT_TTL, Duration::from_secs);
        if ttl.is_zero() {
            return Err(usage(anyhow::anyhow!("ttl must be positive")));
        }
        let mask_patterns =
            flags.mask.clone().or(file.mask).unwrap_or_else(|| DEFAULT_MASK.iter().map(|s| s.to_string()).collect());
        let mask = VolatileMask::parse(&mask_patterns).map_err(|e| usage(anyhow::anyhow!("invalid mask: {e}")))?;
        let rounds = flags.rounds.or(file.rounds).unwrap_or(DEFAULT_ROUNDS);
        if rounds == 0 {
            return Err(usage(anyhow::anyhow!("rounds must be at least 1")));
        }
        let setup_timeout = match flags.timeout_setup.or(file.timeout_setup) {
            Some(v) => seconds("timeout-setup", v)?,
            None => DEFAULT_SETUP_TIMEOUT,
        };
        let reward_timeout = match flags.timeout_reward.or(file.timeout_reward) {
            Some(v) => seconds("timeout-reward", v)?,
            None => DEFAULT_REWARD_TIMEOUT,
        };
        let agent_timeout = match file.agent_timeout {
            Some(v) => seconds("agent_timeout", v)?,
            None => DEFAULT_AGENT_TIMEOUT,
        };
        let gc_interval = file.gc_interval.map_or(DEFAULT_GC_INTERVAL, Duration::from_secs);
        if gc_interval.is_zero() {
            return Err(usage(anyhow::anyhow!("gc_interval must be positive")));
        }
        let init_epsilon = file.init_epsilon.unwrap_or(0.0);
        if !(0.0..1.0).contains(&init_epsilon) {
            return Err(usage(anyhow::anyhow!("init_epsilon must lie in [0, 1)")));
        }
        let interpreter = file.interpreter.unwrap_or_else(|| vec!["python3".into(), "{script}".into()]);
        if !interpreter.iter().any(|a| a.contains("{script}")) {
            return Err(usage(anyhow::anyhow!("interpreter must contain a {{script}} placeholder")));
        }
        let scanner = file.scanner.unwrap_or_default();
        Scanner::new(&scanner).map_err(|e| usage(anyhow::anyhow!("invalid scanner config: {e}")))?;
        Ok(GlobalConfig {
            addr: SocketAddr::new(bind, port),
            ttl,
            mask,
            mask_patterns,
            rounds,
            setup_timeout,
            reward_timeout,
            out: flags.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
            upload_quota: file.upload_quota.unwrap_or(DEFAULT_UPLOAD_QUOTA),
            gc_interval,
            init_epsilon,
            agent_timeout,
            interpreter,
            generator: file.generator,
            discriminator: file.discriminator,
            scanner,
        })
    }
}
