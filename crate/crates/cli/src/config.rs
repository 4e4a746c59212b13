//! Run configuration: one TOML file drives every subcommand. Built-in
//! defaults < config file < command-line flags; the effective (merged)
//! config is echoed into the run directory so a run is reproducible from
//! its artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use ozrl_core::backend::mock::{ActionEffect, MockBackend, MockConfig};
use ozrl_core::backend::toolchain::{BackendConfig, SizeMode, ToolchainBackend};
use ozrl_core::backend::{Backend, IrHandle};
use ozrl_core::catalog::{
    load_pipeline, manual_action_space, odg_action_space, oz_pipeline, ActionSpace,
    ActionSpaceKind,
};
use ozrl_core::agent::{EpsilonSchedule, TrainConfig};
use ozrl_core::env::{Environment, EpisodeConfig};
use ozrl_core::odg::{build_odg, enumerate_subsequences, WalkConvention};
use ozrl_core::reward::{RewardConfig, RewardWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Toolchain,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub opt: PathBuf,
    pub opt_args: Vec<String>,
    pub verify_args: Vec<String>,
    pub compiler: PathBuf,
    pub compiler_args: Vec<String>,
    pub mca: PathBuf,
    pub mca_args: Vec<String>,
    pub mca_field: String,
    pub embedder: PathBuf,
    pub embedder_args: Vec<String>,
    pub target_triple: Option<String>,
    pub timeout_secs: f64,
    pub size_mode: SizeMode,
}

impl Default for BackendSection {
    fn default() -> Self {
        let b = BackendConfig::default();
        BackendSection {
            kind: BackendKind::Mock,
            opt: b.opt,
            opt_args: b.opt_args,
            verify_args: b.verify_args,
            compiler: b.compiler,
            compiler_args: b.compiler_args,
            mca: b.mca,
            mca_args: b.mca_args,
            mca_field: b.mca_field,
            embedder: b.embedder,
            embedder_args: b.embedder_args,
            target_triple: b.target_triple,
            timeout_secs: b.timeout_secs,
            size_mode: b.size_mode,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockSection {
    pub initial_size: u64,
    pub initial_throughput: f64,
    pub oz_size_mul: f64,
    pub oz_tput_mul: f64,
    pub embed_seed: u64,
    /// Explicit effect table rows: [size_mul, size_add, tput_mul, tput_add].
    pub effects: Option<Vec<[f64; 4]>>,
    /// Convenience: build a table where this action dominates.
    pub dominant_action: Option<u32>,
}

impl Default for MockSection {
    fn default() -> Self {
        let m = MockConfig::default();
        MockSection {
            initial_size: m.initial_size,
            initial_throughput: m.initial_throughput,
            oz_size_mul: m.oz_size_mul,
            oz_tput_mul: m.oz_tput_mul,
            embed_seed: m.embed_seed,
            effects: None,
            dominant_action: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActionSpaceSection {
    pub kind: ActionSpaceKind,
    /// Critical-degree threshold for graph-derived spaces.
    pub k: u32,
    /// Action-space file override (required for `custom`).
    pub file: Option<PathBuf>,
}

impl Default for ActionSpaceSection {
    fn default() -> Self {
        ActionSpaceSection { kind: ActionSpaceKind::Odg, k: 8, file: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub alpha: f64,
    pub beta: f64,
    pub clip: Option<f64>,
}

impl Default for RewardSection {
    fn default() -> Self {
        let w = RewardWeights::default();
        RewardSection { alpha: w.alpha, beta: w.beta, clip: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSection {
    pub learning_rate: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub target_sync: u64,
    pub steps_per_iteration: u64,
    pub iterations: u64,
    pub replay_capacity: usize,
    pub hidden_layers: Vec<usize>,
    pub train_every: u64,
    pub min_replay: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_steps: u64,
    pub huber_delta: f64,
    pub seed: u64,
}

impl Default for AgentSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        AgentSection {
            learning_rate: t.learning_rate,
            gamma: t.gamma,
            batch_size: t.batch_size,
            target_sync: t.target_sync,
            steps_per_iteration: t.steps_per_iteration,
            iterations: t.iterations,
            replay_capacity: t.replay_capacity,
            hidden_layers: t.hidden_layers,
            train_every: t.train_every,
            min_replay: t.min_replay,
            epsilon_start: t.epsilon.start,
            epsilon_end: t.epsilon.end,
            epsilon_decay_steps: t.epsilon.decay_steps,
            huber_delta: t.huber_delta,
            seed: t.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub horizon: u32,
    pub failure_penalty: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        let e = EpisodeConfig::default();
        EnvSection { horizon: e.horizon, failure_penalty: e.failure_penalty }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub work_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub train_log: Option<PathBuf>,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            work_dir: PathBuf::from("ozrl-run"),
            cache_dir: None,
            checkpoint: None,
            train_log: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProgramsSection {
    pub train: Vec<String>,
    pub eval: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backend: BackendSection,
    pub mock: MockSection,
    pub action_space: ActionSpaceSection,
    pub reward: RewardSection,
    pub agent: AgentSection,
    pub env: EnvSection,
    pub paths: PathsSection,
    pub programs: ProgramsSection,
}

/// Command-line overrides that take precedence over the config file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub backend: Option<BackendKind>,
    pub jobs: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg: RunConfig = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("cannot read config file {}", p.display()))?;
                toml::from_str(&text)
                    .with_context(|| format!("cannot parse config file {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = overrides.seed {
            cfg.agent.seed = seed;
        }
        if let Some(kind) = overrides.backend {
            cfg.backend.kind = kind;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        RewardWeights::new(self.reward.alpha, self.reward.beta)
            .map_err(|e| anyhow!("reward section: {e}"))?;
        if self.env.horizon < 1 {
            bail!("env.horizon must be at least 1");
        }
        if self.action_space.k < 1 {
            bail!("action_space.k must be at least 1");
        }
        if self.action_space.kind == ActionSpaceKind::Custom && self.action_space.file.is_none() {
            bail!("action_space.kind = custom requires action_space.file");
        }
        if let Some(file) = &self.action_space.file {
            if !file.exists() {
                bail!("action_space.file does not exist: {}", file.display());
            }
        }
        if self.backend.kind == BackendKind::Toolchain {
            for p in self.programs.train.iter().chain(&self.programs.eval) {
                if !Path::new(p).exists() {
                    bail!("program file does not exist: {p}");
                }
            }
        }
        self.train_config().validate().map_err(|e| anyhow!("agent section: {e}"))?;
        Ok(())
    }

    pub fn reward_config(&self) -> RewardConfig {
        RewardConfig {
            weights: RewardWeights { alpha: self.reward.alpha, beta: self.reward.beta },
            clip: self.reward.clip,
        }
    }

    pub fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            horizon: self.env.horizon,
            failure_penalty: self.env.failure_penalty,
            reward: self.reward_config(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.agent.learning_rate,
            gamma: self.agent.gamma,
            batch_size: self.agent.batch_size,
            target_sync: self.agent.target_sync,
            steps_per_iteration: self.agent.steps_per_iteration,
            iterations: self.agent.iterations,
            replay_capacity: self.agent.replay_capacity,
            hidden_layers: self.agent.hidden_layers.clone(),
            train_every: self.agent.train_every,
            min_replay: self.agent.min_replay,
            epsilon: EpsilonSchedule {
                start: self.agent.epsilon_start,
                end: self.agent.epsilon_end,
                decay_steps: self.agent.epsilon_decay_steps,
            },
            huber_delta: self.agent.huber_delta,
            seed: self.agent.seed,
        }
    }

    /// Resolves the configured action space: bundled tables for the standard
    /// kinds (re-derived when `k` differs from the published threshold), a
    /// parsed file for `custom` or explicit overrides.
    pub fn action_space(&self) -> Result<ActionSpace> {
        if let Some(file) = &self.action_space.file {
            let text = fs::read_to_string(file)
                .with_context(|| format!("cannot read action-space file {}", file.display()))?;
            return ActionSpace::parse(self.action_space.kind, &text)
                .with_context(|| format!("bad action-space file {}", file.display()));
        }
        match self.action_space.kind {
            ActionSpaceKind::Manual => Ok(manual_action_space().clone()),
            ActionSpaceKind::Odg => {
                if self.action_space.k == 8 {
                    Ok(odg_action_space().clone())
                } else {
                    let graph =
                        build_odg(oz_pipeline(), self.action_space.k, WalkConvention::resolved())?;
                    let walks = enumerate_subsequences(&graph)?;
                    Ok(walks.to_action_space()?)
                }
            }
            ActionSpaceKind::Custom => bail!("custom action space requires action_space.file"),
        }
    }

    pub fn mock_config(&self, n_actions: usize) -> MockConfig {
        let effects = match (&self.mock.effects, self.mock.dominant_action) {
            (Some(rows), _) => rows
                .iter()
                .map(|[a, b, c, d]| ActionEffect {
                    size_mul: *a,
                    size_add: *b,
                    tput_mul: *c,
                    tput_add: *d,
                })
                .collect(),
            (None, Some(dominant)) => MockConfig::with_dominant(n_actions, dominant).effects,
            (None, None) => MockConfig::no_op(n_actions).effects,
        };
        MockConfig {
            initial_size: self.mock.initial_size,
            initial_throughput: self.mock.initial_throughput,
            oz_size_mul: self.mock.oz_size_mul,
            oz_tput_mul: self.mock.oz_tput_mul,
            effects,
            embed_seed: self.mock.embed_seed,
        }
    }

    pub fn backend_config(&self) -> BackendConfig {
        let cache_dir = self
            .paths
            .cache_dir
            .clone()
            .unwrap_or_else(|| self.paths.work_dir.join("cache"));
        BackendConfig {
            opt: self.backend.opt.clone(),
            opt_args: self.backend.opt_args.clone(),
            verify_args: self.backend.verify_args.clone(),
            compiler: self.backend.compiler.clone(),
            compiler_args: self.backend.compiler_args.clone(),
            mca: self.backend.mca.clone(),
            mca_args: self.backend.mca_args.clone(),
            mca_field: self.backend.mca_field.clone(),
            embedder: self.backend.embedder.clone(),
            embedder_args: self.backend.embedder_args.clone(),
            target_triple: self.backend.target_triple.clone(),
            timeout_secs: self.backend.timeout_secs,
            work_dir: self.paths.work_dir.join("ir"),
            cache_dir,
            size_mode: self.backend.size_mode,
        }
    }

    pub fn make_backend(&self, n_actions: usize) -> Result<Arc<dyn Backend>> {
        match self.backend.kind {
            BackendKind::Mock => Ok(Arc::new(MockBackend::new(self.mock_config(n_actions)))),
            BackendKind::Toolchain => Ok(Arc::new(
                ToolchainBackend::new(self.backend_config())
                    .map_err(|e| anyhow!("toolchain backend: {e}"))?,
            )),
        }
    }

    pub fn make_env(&self, actions: Arc<ActionSpace>) -> Result<Environment> {
        let backend = self.make_backend(actions.len())?;
        Ok(Environment::new(backend, actions, self.episode_config()))
    }

    /// Parses a program reference: `mock:<seed>` for the mock backend, a
    /// file path for the toolchain backend.
    pub fn program_handle(&self, spec: &str) -> Result<IrHandle> {
        match self.backend.kind {
            BackendKind::Mock => {
                let seed = spec
                    .strip_prefix("mock:")
                    .and_then(|s| s.parse::<u64>().ok())
                    .ok_or_else(|| {
                        anyhow!("mock programs must look like mock:<seed>, got {spec:?}")
                    })?;
                Ok(IrHandle::mock(seed))
            }
            BackendKind::Toolchain => {
                let path = PathBuf::from(spec);
                if !path.exists() {
                    bail!("program file does not exist: {}", path.display());
                }
                Ok(IrHandle::file(path))
            }
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.paths.work_dir.join("model.ckpt"))
    }

    pub fn train_log_path(&self) -> PathBuf {
        self.paths
            .train_log
            .clone()
            .unwrap_or_else(|| self.paths.work_dir.join("train_log.jsonl"))
    }

    /// Writes the merged configuration into the run directory.
    pub fn echo_effective(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.paths.work_dir).with_context(|| {
            format!("cannot create work dir {}", self.paths.work_dir.display())
        })?;
        let path = self.paths.work_dir.join("effective-config.toml");
        let text = toml::to_string_pretty(self).context("serialize effective config")?;
        fs::write(&path, text)
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }

    /// Pipeline used by the `odg` subcommand: an explicit file or the
    /// bundled `Oz` schedule.
    pub fn load_pipeline_or_bundled(path: Option<&Path>) -> Result<ozrl_core::catalog::PassPipeline> {
        match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("cannot read pipeline file {}", p.display()))?;
                Ok(load_pipeline(&text, &p.display().to_string())?)
            }
            None => Ok(oz_pipeline().clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_uses_published_defaults() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.reward.alpha, 10.0);
        assert_eq!(cfg.reward.beta, 5.0);
        assert_eq!(cfg.action_space.k, 8);
        assert_eq!(cfg.env.horizon, 15);
        assert_eq!(cfg.agent.learning_rate, 1e-4);
        assert_eq!(cfg.agent.steps_per_iteration, 1005);
        assert_eq!(cfg.agent.epsilon_start, 1.0);
        assert_eq!(cfg.agent.epsilon_end, 0.01);
        assert_eq!(cfg.agent.epsilon_decay_steps, 20_000);
    }

    #[test]
    fn toml_roundtrip_preserves_all_fields() {
        let mut cfg = RunConfig::default();
        cfg.agent.seed = 17;
        cfg.reward.clip = Some(2.5);
        cfg.mock.effects = Some(vec![[0.9, 0.0, 1.0, 0.0]]);
        cfg.programs.train = vec!["mock:0".into(), "mock:1".into()];
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        let again = toml::to_string_pretty(&back).unwrap();
        assert_eq!(text, again);
        assert_eq!(back.agent.seed, 17);
        assert_eq!(back.reward.clip, Some(2.5));
    }

    #[test]
    fn bad_weights_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.reward.alpha = -1.0;
        cfg.reward.beta = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn overrides_take_precedence() {
        let overrides = Overrides { seed: Some(42), backend: Some(BackendKind::Mock), jobs: None };
        let cfg = RunConfig::load(None, &overrides).unwrap();
        assert_eq!(cfg.agent.seed, 42);
        assert_eq!(cfg.backend.kind, BackendKind::Mock);
    }

    #[test]
    fn action_space_kinds_resolve() {
        let mut cfg = RunConfig::default();
        cfg.action_space.kind = ActionSpaceKind::Manual;
        assert_eq!(cfg.action_space().unwrap().len(), 15);
        cfg.action_space.kind = ActionSpaceKind::Odg;
        assert_eq!(cfg.action_space().unwrap().len(), 34);
        // Derivation path with a non-default threshold.
        cfg.action_space.k = 10;
        let bigger_k = cfg.action_space().unwrap();
        assert!(bigger_k.len() > 0);
    }

    #[test]
    fn mock_program_specs_parse() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.program_handle("mock:5").unwrap(), IrHandle::mock(5));
        assert!(cfg.program_handle("notmock").is_err());
    }
}
