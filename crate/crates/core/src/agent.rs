//! Double-DQN learner: epsilon-greedy exploration with linear annealing,
//! ring-buffer replay memory, the double-DQN target (online picks the
//! action, target scores it), Huber-loss gradient steps, and periodic
//! target sync.
//!
//! Everything stochastic draws from one seeded generator, so a fixed seed
//! makes the whole training run — log and checkpoint included —
//! bit-reproducible on the mock backend.

use std::collections::VecDeque;
use std::fs;
use std::io::{self, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{Embedding, IrHandle, EMBED_DIM};
use crate::env::{EnvError, Environment};
use crate::nn::{huber, huber_grad, Activation, Adam, Gradients, Layer, NnError, QNetwork};
use crate::num::{scalar, to_f64, Scalar};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("bad training config: {0}")]
    BadConfig(String),
    #[error("loss became non-finite at global step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("checkpoint action space does not match the configured action space")]
    ActionSpaceMismatch,
    #[error("every training program failed")]
    AllProgramsFailed,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// One replay-memory entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Embedding,
    pub action: u32,
    pub reward: f64,
    pub next_state: Embedding,
    pub done: bool,
}

/// Fixed-capacity ring buffer; once full, each insert evicts the oldest
/// entry, so the buffer always holds the most recent `capacity` transitions
/// in insertion order.
#[derive(Debug)]
pub struct ReplayMemory {
    buf: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayMemory { buf: VecDeque::with_capacity(capacity), capacity }
    }

    pub fn push(&mut self, t: Transition) {
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.buf.iter()
    }

    /// Uniform sample with replacement; requires a non-empty buffer.
    pub fn sample<'a, R: Rng>(&'a self, rng: &mut R, batch: usize) -> Vec<&'a Transition> {
        assert!(!self.buf.is_empty(), "cannot sample an empty replay memory");
        (0..batch).map(|_| &self.buf[rng.gen_range(0..self.buf.len())]).collect()
    }
}

/// Linear epsilon annealing: `start` at step 0 down to `end` at
/// `decay_steps`, clamped thereafter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        EpsilonSchedule { start: 1.0, end: 0.01, decay_steps: 20_000 }
    }
}

impl EpsilonSchedule {
    pub fn validate(&self) -> Result<(), AgentError> {
        if !(self.start >= self.end && self.end > 0.0 && self.decay_steps >= 1) {
            return Err(AgentError::BadConfig(format!(
                "epsilon schedule must satisfy start >= end > 0 and decay_steps >= 1 \
                 (start={}, end={}, decay_steps={})",
                self.start, self.end, self.decay_steps
            )));
        }
        Ok(())
    }

    pub fn epsilon_at(&self, t: u64) -> f64 {
        if t >= self.decay_steps {
            return self.end;
        }
        let frac = t as f64 / self.decay_steps as f64;
        self.start + (self.end - self.start) * frac
    }
}

/// Greedy action: argmax of the Q-values, ties broken by lowest action id.
pub fn greedy_action<F: Scalar>(net: &QNetwork<F>, state: &[F]) -> Result<u32, NnError> {
    let q = net.forward(state)?;
    let mut best = 0usize;
    for (i, v) in q.iter().enumerate().skip(1) {
        if *v > q[best] {
            best = i;
        }
    }
    Ok(best as u32)
}

/// Epsilon-greedy: with probability `eps` a uniform action, otherwise the
/// greedy one.
pub fn select_action<F: Scalar, R: Rng>(
    net: &QNetwork<F>,
    state: &[F],
    eps: f64,
    rng: &mut R,
) -> Result<u32, NnError> {
    let n = net.output_dim() as u32;
    if rng.gen::<f64>() < eps {
        Ok(rng.gen_range(0..n))
    } else {
        greedy_action(net, state)
    }
}

/// The double-DQN target: terminal transitions return the bare reward;
/// otherwise the online network picks the next action and the target
/// network prices it.
pub fn double_dqn_target<F: Scalar>(
    online: &QNetwork<F>,
    target: &QNetwork<F>,
    tr: &Transition,
    gamma: f64,
) -> Result<f64, NnError> {
    if tr.done {
        return Ok(tr.reward);
    }
    let next: Vec<F> = tr.next_state.values().iter().map(|v| scalar(*v)).collect();
    let a_next = greedy_action(online, &next)?;
    let q_next = target.forward(&next)?[a_next as usize];
    Ok(tr.reward + gamma * to_f64(q_next))
}

/// One gradient-descent update of the online network on a batch: Huber loss
/// between the predicted Q of the taken action and the double-DQN target.
/// Returns the mean loss; the target network is untouched.
pub fn train_step<F: Scalar>(
    online: &mut QNetwork<F>,
    target: &QNetwork<F>,
    optimizer: &mut Adam<F>,
    batch: &[&Transition],
    gamma: f64,
    huber_delta: f64,
) -> Result<f64, AgentError> {
    assert!(!batch.is_empty(), "train_step requires a non-empty batch");
    let delta: F = scalar(huber_delta);
    let inv_n: F = scalar(1.0 / batch.len() as f64);
    let mut grads = Gradients::zeros_like(online);
    let mut total_loss = F::zero();
    for tr in batch {
        let target_value: F = scalar(double_dqn_target(online, target, tr, gamma)?);
        let state: Vec<F> = tr.state.values().iter().map(|v| scalar(*v)).collect();
        let action = tr.action as usize;
        let mut residual = F::zero();
        online.accumulate_gradients(
            &state,
            |out| {
                residual = out[action] - target_value;
                let mut g = vec![F::zero(); out.len()];
                g[action] = huber_grad(residual, delta) * inv_n;
                g
            },
            &mut grads,
        )?;
        total_loss += huber(residual, delta) * inv_n;
    }
    if !total_loss.is_finite() {
        return Err(AgentError::NonFiniteLoss { step: 0 });
    }
    optimizer.step(online, &grads);
    Ok(to_f64(total_loss))
}

/// Makes `target` a bit-exact copy of `online`.
pub fn sync_target<F: Scalar>(online: &QNetwork<F>, target: &mut QNetwork<F>) {
    target.copy_params_from(online);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub gamma: f64,
    pub batch_size: usize,
    /// Target network sync interval in environment steps.
    pub target_sync: u64,
    pub steps_per_iteration: u64,
    pub iterations: u64,
    pub replay_capacity: usize,
    /// Hidden layer widths; the full stack is EMBED_DIM -> hidden -> |A|.
    pub hidden_layers: Vec<usize>,
    /// Run a gradient step every this many environment steps.
    pub train_every: u64,
    /// Transitions required before training starts; 0 means `batch_size`.
    pub min_replay: usize,
    pub epsilon: EpsilonSchedule,
    pub huber_delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            gamma: 0.99,
            batch_size: 32,
            target_sync: 500,
            steps_per_iteration: 1005,
            iterations: 10,
            replay_capacity: 10_000,
            hidden_layers: vec![256, 128],
            train_every: 1,
            min_replay: 0,
            epsilon: EpsilonSchedule::default(),
            huber_delta: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |msg: &str| Err(AgentError::BadConfig(msg.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if self.batch_size == 0 || self.replay_capacity == 0 {
            return bad("batch_size and replay_capacity must be positive");
        }
        if self.steps_per_iteration == 0 || self.train_every == 0 {
            return bad("steps_per_iteration and train_every must be positive");
        }
        if !(self.huber_delta > 0.0) {
            return bad("huber_delta must be positive");
        }
        self.epsilon.validate()
    }

    pub fn network_dims(&self, n_actions: usize) -> Vec<usize> {
        let mut dims = vec![EMBED_DIM];
        dims.extend(&self.hidden_layers);
        dims.push(n_actions);
        dims
    }

    /// Stable content hash, embedded in checkpoints.
    pub fn config_hash(&self) -> [u8; 32] {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hasher.finalize().into()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub global_step: u64,
    pub epsilon: f64,
    pub mean_loss: Option<f64>,
    pub mean_return: f64,
    pub episodes: u64,
    pub failed_episodes: u64,
    pub replay_len: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub network: QNetwork<f64>,
    pub log: Vec<IterationRecord>,
    pub global_step: u64,
    pub checkpoint: Checkpoint,
}

/// Runs the interaction loop: cycle through the training programs, collect
/// transitions under the annealing epsilon-greedy policy, take a gradient
/// step every `train_every` environment steps once the replay holds enough,
/// and sync the target network every `target_sync` steps.
///
/// Episodes always run to completion, so an iteration ends at the first
/// episode boundary at or past `steps_per_iteration`. Program failures are
/// logged and skipped; the run only aborts if every program fails.
pub fn train(
    env: &mut Environment,
    programs: &[IrHandle],
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome, AgentError> {
    cfg.validate()?;
    if programs.is_empty() {
        return Err(AgentError::BadConfig("training program list is empty".into()));
    }
    let n_actions = env.action_space().len();
    let fingerprint = env.action_space().fingerprint();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let (mut online, mut global_step) = match resume {
        Some(ck) => {
            if ck.action_fingerprint != fingerprint {
                return Err(AgentError::ActionSpaceMismatch);
            }
            (ck.to_network()?, ck.global_step)
        }
        None => (QNetwork::new(&cfg.network_dims(n_actions), &mut rng)?, 0),
    };
    let mut target = online.clone();
    let mut optimizer = Adam::new(&online, cfg.learning_rate);
    let mut replay = ReplayMemory::new(cfg.replay_capacity);
    let min_replay = cfg.min_replay.max(cfg.batch_size);

    let mut log = Vec::with_capacity(cfg.iterations as usize);
    let mut program_cursor = 0usize;

    for iteration in 0..cfg.iterations {
        let mut iter_steps = 0u64;
        let mut losses: Vec<f64> = Vec::new();
        let mut returns: Vec<f64> = Vec::new();
        let mut episodes = 0u64;
        let mut failed_episodes = 0u64;
        let mut consecutive_reset_failures = 0usize;

        while iter_steps < cfg.steps_per_iteration {
            let program = &programs[program_cursor % programs.len()];
            program_cursor += 1;

            let mut state = match env.reset(program) {
                Ok(s) => s,
                Err(_) => {
                    failed_episodes += 1;
                    consecutive_reset_failures += 1;
                    if consecutive_reset_failures >= programs.len() {
                        return Err(AgentError::AllProgramsFailed);
                    }
                    continue;
                }
            };
            consecutive_reset_failures = 0;

            let mut episode_return = 0.0;
            loop {
                let eps = cfg.epsilon.epsilon_at(global_step);
                let action = select_action(&online, state.embedding.values(), eps, &mut rng)?;
                let prev_embedding = state.embedding.clone();
                let result = env.step(state, action)?;
                replay.push(Transition {
                    state: prev_embedding,
                    action,
                    reward: result.reward,
                    next_state: result.state.embedding.clone(),
                    done: result.done,
                });
                episode_return += result.reward;
                global_step += 1;
                iter_steps += 1;

                if replay.len() >= min_replay && global_step % cfg.train_every == 0 {
                    let batch = replay.sample(&mut rng, cfg.batch_size);
                    let loss = train_step(
                        &mut online,
                        &target,
                        &mut optimizer,
                        &batch,
                        cfg.gamma,
                        cfg.huber_delta,
                    )
                    .map_err(|e| match e {
                        AgentError::NonFiniteLoss { .. } => {
                            AgentError::NonFiniteLoss { step: global_step }
                        }
                        other => other,
                    })?;
                    losses.push(loss);
                }
                if cfg.target_sync > 0 && global_step % cfg.target_sync == 0 {
                    sync_target(&online, &mut target);
                }

                let done = result.done;
                let failed = result.failed;
                state = result.state;
                if done {
                    if failed {
                        failed_episodes += 1;
                    }
                    break;
                }
            }
            episodes += 1;
            returns.push(episode_return);
        }

        let record = IterationRecord {
            iteration,
            global_step,
            epsilon: cfg.epsilon.epsilon_at(global_step),
            mean_loss: if losses.is_empty() {
                None
            } else {
                Some(losses.iter().sum::<f64>() / losses.len() as f64)
            },
            mean_return: if returns.is_empty() {
                0.0
            } else {
                returns.iter().sum::<f64>() / returns.len() as f64
            },
            episodes,
            failed_episodes,
            replay_len: replay.len(),
        };
        eprintln!(
            "iteration {} | step {} | eps {:.3} | mean return {:.4} | mean loss {}",
            record.iteration,
            record.global_step,
            record.epsilon,
            record.mean_return,
            record.mean_loss.map_or("n/a".into(), |l| format!("{l:.6}")),
        );
        log.push(record);
    }

    let checkpoint = Checkpoint::from_network(&online, global_step, fingerprint, cfg.config_hash());
    Ok(TrainOutcome { network: online, log, global_step, checkpoint })
}

/// Serializes a training log as JSON lines.
pub fn log_to_jsonl(log: &[IterationRecord]) -> String {
    let mut out = String::new();
    for record in log {
        out.push_str(&serde_json::to_string(record).expect("record serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"OZRLCKP\x01";
const CHECKPOINT_VERSION: u32 = 1;

/// Self-describing binary container for a trained network: layer shapes and
/// activations, flat f64 parameters, the action-space fingerprint, and the
/// training-config hash. Loading is refused when the action space differs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub global_step: u64,
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub params: Vec<f64>,
    pub action_fingerprint: [u8; 32],
    pub config_hash: [u8; 32],
}

impl Checkpoint {
    pub fn from_network(
        net: &QNetwork<f64>,
        global_step: u64,
        action_fingerprint: [u8; 32],
        config_hash: [u8; 32],
    ) -> Self {
        Checkpoint {
            global_step,
            dims: net.dims(),
            activations: net.layers().iter().map(|l| l.activation).collect(),
            params: net.flat_params(),
            action_fingerprint,
            config_hash,
        }
    }

    pub fn to_network<F: Scalar>(&self) -> Result<QNetwork<F>, CheckpointError> {
        let mut layers = Vec::new();
        let mut off = 0usize;
        for (i, pair) in self.dims.windows(2).enumerate() {
            let (in_dim, out_dim) = (pair[0], pair[1]);
            let n_w = in_dim * out_dim;
            let end = off + n_w + out_dim;
            if end > self.params.len() {
                return Err(CheckpointError::Corrupt("parameter block too short".into()));
            }
            let weights = self.params[off..off + n_w].iter().map(|v| scalar(*v)).collect();
            let bias = self.params[off + n_w..end].iter().map(|v| scalar(*v)).collect();
            off = end;
            layers.push(Layer {
                in_dim,
                out_dim,
                weights,
                bias,
                activation: *self.activations.get(i).copied().as_ref().ok_or_else(|| {
                    CheckpointError::Corrupt("missing activation tag".into())
                })?,
            });
        }
        if off != self.params.len() {
            return Err(CheckpointError::Corrupt("trailing parameters".into()));
        }
        QNetwork::from_parts(layers)
            .map_err(|e| CheckpointError::Corrupt(format!("bad layer shapes: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        buf.write_u64::<LittleEndian>(self.global_step)?;
        buf.write_u32::<LittleEndian>(self.dims.len() as u32)?;
        for d in &self.dims {
            buf.write_u64::<LittleEndian>(*d as u64)?;
        }
        buf.write_u32::<LittleEndian>(self.activations.len() as u32)?;
        for a in &self.activations {
            buf.push(match a {
                Activation::Relu => 0,
                Activation::Linear => 1,
            });
        }
        buf.write_u64::<LittleEndian>(self.params.len() as u64)?;
        for p in &self.params {
            buf.write_f64::<LittleEndian>(*p)?;
        }
        buf.extend_from_slice(&self.action_fingerprint);
        buf.extend_from_slice(&self.config_hash);
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path)?;
        let mut r = io::Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let global_step = r.read_u64::<LittleEndian>()?;
        let n_dims = r.read_u32::<LittleEndian>()? as usize;
        if n_dims < 2 || n_dims > 1024 {
            return Err(CheckpointError::Corrupt(format!("implausible dim count {n_dims}")));
        }
        let mut dims = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            dims.push(r.read_u64::<LittleEndian>()? as usize);
        }
        let n_act = r.read_u32::<LittleEndian>()? as usize;
        let mut activations = Vec::with_capacity(n_act);
        for _ in 0..n_act {
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)?;
            activations.push(match tag[0] {
                0 => Activation::Relu,
                1 => Activation::Linear,
                other => {
                    return Err(CheckpointError::Corrupt(format!("bad activation tag {other}")))
                }
            });
        }
        let n_params = r.read_u64::<LittleEndian>()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            params.push(r.read_f64::<LittleEndian>()?);
        }
        let mut action_fingerprint = [0u8; 32];
        r.read_exact(&mut action_fingerprint)?;
        let mut config_hash = [0u8; 32];
        r.read_exact(&mut config_hash)?;
        Ok(Checkpoint { global_step, dims, activations, params, action_fingerprint, config_hash })
    }
}
