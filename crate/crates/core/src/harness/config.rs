//! Experiment configuration files.
//!
//! The format is TOML restricted to dotted keys in a fixed set of sections:
//!
//! ```toml
//! env.name = "MountainCar"
//! run.seeds = [0, 1, 2, 3, 4]
//! run.episodes = 300
//! context.budget = 2048
//! context.operator = "nd"
//! backend.kind = "knn"
//! ```
//!
//! Every key other than `env.name` is optional; missing keys take the
//! per-environment defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::agent::{default_initial_transitions, AgentConfig, EpsilonSchedule};
use crate::context::{TruncationOperator, GATE_QUANTILE};
use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::fqi::FqiConfig;
use crate::regressor::{knn::DEFAULT_K, BackendConfig};

/// Environment variable that replaces `backend.endpoint`.
pub const BRIDGE_ENDPOINT_VAR: &str = "BRIDGE_ENDPOINT";

pub const DEFAULT_EPISODES: usize = 250;
pub const DEFAULT_BUDGET: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvKind,
    pub cap: usize,
    pub initial_transitions: usize,
    pub seeds: Vec<u64>,
    pub episodes: usize,
    pub workers: usize,
    pub budget: usize,
    pub operator: TruncationOperator,
    pub gate_quantile: f64,
    pub fqi: FqiConfig,
    pub epsilon: EpsilonSchedule,
    pub backend: BackendConfig,
    pub out_dir: PathBuf,
    pub record_timing: bool,
    pub snapshots: bool,
}

impl ExperimentConfig {
    pub fn defaults(env: EnvKind) -> Self {
        Self {
            env,
            cap: env.default_cap(),
            initial_transitions: default_initial_transitions(env),
            seeds: vec![0],
            episodes: DEFAULT_EPISODES,
            workers: 1,
            budget: DEFAULT_BUDGET,
            operator: TruncationOperator::Latest,
            gate_quantile: GATE_QUANTILE,
            fqi: FqiConfig::with_defaults(env.action_count()),
            epsilon: EpsilonSchedule::for_env(env),
            backend: BackendConfig::default(),
            out_dir: PathBuf::from("runs"),
            record_timing: false,
            snapshots: true,
        }
    }

    pub fn agent_config(&self, seed: u64) -> AgentConfig {
        AgentConfig {
            env: self.env,
            cap: self.cap,
            episodes: self.episodes,
            budget: self.budget,
            operator: self.operator,
            backend: self.backend.clone(),
            epsilon: self.epsilon,
            fqi: self.fqi,
            gate_quantile: self.gate_quantile,
            initial_transitions: self.initial_transitions,
            seed,
            record_timing: self.record_timing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(field("run.episodes", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(field("run.seeds", "must name at least one seed"));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(field("run.seeds", "contains duplicates"));
        }
        if self.workers == 0 {
            return Err(field("run.workers", "must be at least 1"));
        }
        if self.budget == 0 {
            return Err(field("context.budget", "must be at least 1"));
        }
        if self.operator == TruncationOperator::RewardVariance && self.budget < 2 {
            return Err(field("context.budget", "reward-variance truncation needs at least 2"));
        }
        match &self.backend {
            BackendConfig::Knn { k } if *k == 0 => return Err(field("backend.k", "must be at least 1")),
            BackendConfig::Remote { endpoint, .. } if endpoint.trim().is_empty() => {
                return Err(field("backend.endpoint", "must not be empty"))
            }
            _ => {}
        }
        self.agent_config(0).validate()
    }
}

fn field(name: &'static str, message: &str) -> Error {
    Error::Field {
        field: name,
        message: message.to_string(),
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    env: RawEnv,
    #[serde(default)]
    run: RawRun,
    #[serde(default)]
    context: RawContext,
    #[serde(default)]
    gate: RawGate,
    #[serde(default)]
    fqi: RawFqi,
    #[serde(default)]
    epsilon: RawEpsilon,
    #[serde(default)]
    backend: RawBackend,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnv {
    name: String,
    cap: Option<usize>,
    initial: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    seeds: Option<Vec<u64>>,
    episodes: Option<usize>,
    workers: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawContext {
    budget: Option<usize>,
    operator: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGate {
    quantile: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFqi {
    iterations: Option<usize>,
    gamma: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEpsilon {
    initial: Option<f64>,
    decay: Option<f64>,
    min: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBackend {
    kind: Option<String>,
    k: Option<usize>,
    endpoint: Option<String>,
    embed_layer: Option<i64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
    wall_clock: Option<bool>,
    snapshots: Option<bool>,
}

/// Parses and validates a config document. `path` is only used in error
/// messages; `bridge_endpoint` is the value of [`BRIDGE_ENDPOINT_VAR`].
pub fn parse_config(text: &str, path: &Path, bridge_endpoint: Option<&str>) -> Result<ExperimentConfig> {
    let config_err = |message: String| Error::Config {
        path: path.to_path_buf(),
        message,
    };
    let raw: RawConfig = toml::from_str(text).map_err(|e| config_err(e.to_string().trim_end().to_string()))?;

    let env: EnvKind = raw.env.name.parse()?;
    let mut cfg = ExperimentConfig::defaults(env);
    if let Some(v) = raw.env.cap {
        cfg.cap = v;
    }
    if let Some(v) = raw.env.initial {
        cfg.initial_transitions = v;
    }
    if let Some(v) = raw.run.seeds {
        cfg.seeds = v;
    }
    if let Some(v) = raw.run.episodes {
        cfg.episodes = v;
    }
    if let Some(v) = raw.run.workers {
        cfg.workers = v;
    }
    if let Some(v) = raw.context.budget {
        cfg.budget = v;
    }
    if let Some(v) = raw.context.operator {
        cfg.operator = v.parse()?;
    }
    if let Some(v) = raw.gate.quantile {
        cfg.gate_quantile = v;
    }
    if let Some(v) = raw.fqi.iterations {
        cfg.fqi.iterations = v;
    }
    if let Some(v) = raw.fqi.gamma {
        cfg.fqi.gamma = v;
    }
    if let Some(v) = raw.epsilon.initial {
        cfg.epsilon.initial = v;
    }
    if let Some(v) = raw.epsilon.decay {
        cfg.epsilon.decay = v;
    }
    if let Some(v) = raw.epsilon.min {
        cfg.epsilon.min = v;
    }

    let b = raw.backend;
    let endpoint = bridge_endpoint.filter(|e| !e.trim().is_empty()).map(str::to_string).or(b.endpoint);
    cfg.backend = match b.kind.as_deref().unwrap_or("knn").to_ascii_lowercase().as_str() {
        "knn" => {
            if b.embed_layer.is_some() {
                return Err(field("backend.embed_layer", "only applies to the remote backend"));
            }
            BackendConfig::Knn { k: b.k.unwrap_or(DEFAULT_K) }
        }
        "remote" | "bridge" | "tabpfn" => {
            if b.k.is_some() {
                return Err(field("backend.k", "only applies to the knn backend"));
            }
            BackendConfig::Remote {
                endpoint: endpoint.ok_or_else(|| field("backend.endpoint", "required for the remote backend"))?,
                embed_layer: b.embed_layer,
            }
        }
        other => return Err(field("backend.kind", &format!("unknown backend `{other}`"))),
    };

    if let Some(v) = raw.output.dir {
        cfg.out_dir = v;
    }
    if let Some(v) = raw.output.wall_clock {
        cfg.record_timing = v;
    }
    if let Some(v) = raw.output.snapshots {
        cfg.snapshots = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads, parses and validates a config file, honouring `BRIDGE_ENDPOINT`.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let endpoint = std::env::var(BRIDGE_ENDPOINT_VAR).ok();
    parse_config(&text, path, endpoint.as_deref())
}
