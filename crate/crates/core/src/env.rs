//! Episode MDP over one program: reset captures the unoptimized and `Oz`
//! baselines, each step applies the chosen sub-sequence through the backend,
//! re-embeds the module, and pays the blended size/throughput reward.
//!
//! Backend failures inside a step do not abort the run: the episode ends
//! immediately with the configured failure penalty so unrecoverable actions
//! are never attractive to the agent.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, Baseline, Embedding, IrHandle};
use crate::catalog::ActionSpace;
use crate::reward::{Measurement, RewardConfig, RewardError};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("action {action} out of range for action space of {space} entries")]
    ActionOutOfRange { action: u32, space: usize },
    #[error("episode is already finished (step {step} of horizon {horizon})")]
    EpisodeFinished { step: u32, horizon: u32 },
    #[error("step called before reset captured a baseline")]
    MissingBaseline,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    /// Actions per episode.
    pub horizon: u32,
    /// Reward paid when a backend failure terminates the episode.
    pub failure_penalty: f64,
    pub reward: RewardConfig,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            horizon: 15,
            failure_penalty: -1.0,
            reward: RewardConfig::default(),
        }
    }
}

/// Live episode state: the current module handle, its embedding, the last
/// measurement and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgramState {
    pub ir: IrHandle,
    pub embedding: Embedding,
    pub last: Measurement,
    pub step_index: u32,
}

/// Per-step measurement detail carried alongside the reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub action: u32,
    pub size_last: u64,
    pub size_curr: u64,
    pub throughput_last: f64,
    pub throughput_curr: f64,
}

#[derive(Debug)]
pub struct StepResult {
    /// State after the step. On failure this is the input state unchanged.
    pub state: ProgramState,
    pub reward: f64,
    pub done: bool,
    /// True when a backend failure terminated the episode.
    pub failed: bool,
    pub info: Option<StepInfo>,
}

pub struct Environment {
    backend: Arc<dyn Backend>,
    actions: Arc<ActionSpace>,
    cfg: EpisodeConfig,
    baseline: Option<Baseline>,
}

impl Environment {
    pub fn new(backend: Arc<dyn Backend>, actions: Arc<ActionSpace>, cfg: EpisodeConfig) -> Self {
        Environment { backend, actions, cfg, baseline: None }
    }

    pub fn action_space(&self) -> &ActionSpace {
        &self.actions
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.cfg
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    /// Baseline captured by the last `reset`.
    pub fn baseline(&self) -> Option<&Baseline> {
        self.baseline.as_ref()
    }

    /// Starts an episode on an unoptimized module: captures the baselines,
    /// embeds the module, and returns the initial state.
    pub fn reset(&mut self, program: &IrHandle) -> Result<ProgramState, EnvError> {
        let baseline = self.backend.baseline(program)?;
        let embedding = self.backend.embed(program)?;
        self.baseline = Some(baseline);
        Ok(ProgramState {
            ir: program.clone(),
            embedding,
            last: baseline.unopt,
            step_index: 0,
        })
    }

    /// Applies `action` to `state`. Contract violations (bad action id,
    /// stepping a finished episode, no baseline) are errors; backend
    /// failures terminate the episode with the failure penalty instead.
    pub fn step(&self, state: ProgramState, action: u32) -> Result<StepResult, EnvError> {
        let space = self.actions.len();
        let seq = self
            .actions
            .get(action)
            .ok_or(EnvError::ActionOutOfRange { action, space })?;
        if state.step_index >= self.cfg.horizon {
            return Err(EnvError::EpisodeFinished {
                step: state.step_index,
                horizon: self.cfg.horizon,
            });
        }
        let baseline = self.baseline.ok_or(EnvError::MissingBaseline)?;

        let outcome: Result<(IrHandle, Measurement, Embedding), BackendError> = (|| {
            let ir = self.backend.apply_passes(&state.ir, seq)?;
            let measurement = self.backend.measure(&ir)?;
            let embedding = self.backend.embed(&ir)?;
            Ok((ir, measurement, embedding))
        })();

        match outcome {
            Ok((ir, measurement, embedding)) => {
                let reward = self
                    .cfg
                    .reward
                    .step_reward(&state.last, &measurement, &baseline.unopt)?;
                let info = StepInfo {
                    action,
                    size_last: state.last.bin_size,
                    size_curr: measurement.bin_size,
                    throughput_last: state.last.throughput,
                    throughput_curr: measurement.throughput,
                };
                let step_index = state.step_index + 1;
                Ok(StepResult {
                    state: ProgramState { ir, embedding, last: measurement, step_index },
                    reward,
                    done: step_index >= self.cfg.horizon,
                    failed: false,
                    info: Some(info),
                })
            }
            Err(_) => Ok(StepResult {
                state,
                reward: self.cfg.failure_penalty,
                done: true,
                failed: true,
                info: None,
            }),
        }
    }

    /// Runs one full episode under `policy`, which maps embeddings to action
    /// ids. Returns the trace, final measurement, and summed reward; on a
    /// mid-episode failure the trace is truncated and flagged.
    pub fn rollout(
        &mut self,
        program: &IrHandle,
        mut policy: impl FnMut(&Embedding) -> u32,
    ) -> Result<Rollout, EnvError> {
        let mut state = self.reset(program)?;
        let mut rollout = Rollout {
            program: program.describe(),
            trace: Vec::new(),
            rewards: Vec::new(),
            sizes: vec![state.last.bin_size],
            throughputs: vec![state.last.throughput],
            final_measurement: state.last,
            episode_return: 0.0,
            failed: false,
        };
        loop {
            let action = policy(&state.embedding);
            let result = self.step(state, action)?;
            rollout.trace.push(action);
            rollout.rewards.push(result.reward);
            rollout.episode_return += result.reward;
            if let Some(info) = &result.info {
                rollout.sizes.push(info.size_curr);
                rollout.throughputs.push(info.throughput_curr);
            }
            rollout.failed |= result.failed;
            rollout.final_measurement = result.state.last;
            state = result.state;
            if rollout.failed || state.step_index >= self.cfg.horizon {
                break;
            }
        }
        Ok(rollout)
    }
}

/// One finished episode, ready to serialize as a JSON-lines record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub program: String,
    pub trace: Vec<u32>,
    pub rewards: Vec<f64>,
    /// Object sizes, starting with the unoptimized size.
    pub sizes: Vec<u64>,
    pub throughputs: Vec<f64>,
    pub final_measurement: Measurement,
    pub episode_return: f64,
    pub failed: bool,
}

impl Rollout {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("rollout serializes")
    }

    /// Human-readable trace in the `id->id->...` report style.
    pub fn trace_arrows(&self) -> String {
        trace_arrows(&self.trace)
    }
}

pub fn trace_arrows(trace: &[u32]) -> String {
    trace
        .iter()
        .map(|a| a.to_string())
        .collect::<Vec<_>>()
        .join("\u{2192}")
}
