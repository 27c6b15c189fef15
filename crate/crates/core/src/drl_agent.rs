//! Cloud-side edge-association agent.
//!
//! The state is `[A(k-1); beta(k); Delta(k)]` flattened row-major, the action
//! is one of the `M^N` exactly-one associations in mixed-radix order (user 0
//! least significant). Q-networks are [`learnkit`] networks with an identity
//! head; in dueling mode the head emits `[V, A_1..A_K]` and
//! `Q_a = V + A_a - mean(A)`. The target of a transition is
//! `r + gamma * Q_target(s', argmax_a Q_online(s', a))` in double mode and
//! `r + gamma * max_a Q_target(s', a)` otherwise.

use std::collections::VecDeque;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::comms::BandwidthAllocation;
use crate::learnkit::{self, Batch, LearnError, NetworkSpec, OutputHead, ParameterVector};
use crate::rng::{self, Stream};
use crate::scenario::AssociationMatrix;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CFLA";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    #[error("action code {code} out of range for {actions} actions")]
    CodeOutOfRange { code: u64, actions: u64 },
    #[error("{stations}^{users} actions do not fit the action space")]
    TooManyActions { users: usize, stations: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("replay buffer holds {have} transitions, need {need}")]
    UnderfullBuffer { have: usize, need: usize },
    #[error("invalid agent config: {0}")]
    Config(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint layout {got:016x} does not match expected {expected:016x}")]
    LayoutMismatch { expected: u64, got: u64 },
    #[error("checkpoint i/o on {path}: {reason}")]
    Io { path: String, reason: String },
    #[error(transparent)]
    Learn(#[from] LearnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Learn steps between hard target copies.
    pub target_sync: u64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Epochs over which epsilon decays linearly; half of the training run
    /// when unset.
    pub epsilon_decay_epochs: Option<u64>,
    pub updates_per_epoch: usize,
    pub dueling: bool,
    pub double: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            gamma: 0.9,
            learning_rate: 1e-4,
            batch_size: 32,
            replay_capacity: 10_000,
            target_sync: 100,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_epochs: None,
            updates_per_epoch: 1,
            dueling: true,
            double: true,
        }
    }
}

impl AgentConfig {
    /// Same settings as a plain DQN: single head, max-target.
    pub fn plain(mut self) -> Self {
        self.dueling = false;
        self.double = false;
        self
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.replay_capacity < self.batch_size {
            return bad("replay_capacity must be at least batch_size");
        }
        if self.target_sync == 0 {
            return bad("target_sync must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_end) {
            return bad("epsilon bounds must lie in [0, 1]");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        Ok(())
    }

    /// Fills an unset decay length with half of `training_epochs`.
    pub fn for_training(mut self, training_epochs: u64) -> Self {
        self.epsilon_decay_epochs.get_or_insert(training_epochs / 2);
        self
    }

    /// Linear decay from `epsilon_start` to `epsilon_end`; an unset decay
    /// length means no decay phase.
    pub fn epsilon_at(&self, epoch: u64) -> f64 {
        let decay = self.epsilon_decay_epochs.unwrap_or(0);
        if decay == 0 || epoch >= decay {
            return self.epsilon_end;
        }
        let frac = epoch as f64 / decay as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// Encoded MDP state, entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MdpState(pub Vec<f64>);

pub fn state_width(num_users: usize, num_stations: usize) -> usize {
    num_users * (2 * num_stations + 1)
}

impl MdpState {
    /// Epoch-0 state: no previous association, allocation or improvement.
    pub fn initial(num_users: usize, num_stations: usize) -> Self {
        Self(vec![0.0; state_width(num_users, num_stations)])
    }
}

pub fn encode_state(
    prev_assoc: &AssociationMatrix,
    alloc: &BandwidthAllocation,
    improved: &[bool],
) -> Result<MdpState, AgentError> {
    let n = prev_assoc.num_users();
    let m = prev_assoc.num_stations();
    if alloc.beta.rows != n || alloc.beta.cols != m || improved.len() != n {
        return Err(AgentError::Shape(format!(
            "association {n}x{m}, allocation {}x{}, flags {}",
            alloc.beta.rows,
            alloc.beta.cols,
            improved.len()
        )));
    }
    let mut v = prev_assoc.to_grid().data;
    v.extend_from_slice(&alloc.beta.data);
    v.extend(improved.iter().map(|&f| if f { 1.0 } else { 0.0 }));
    Ok(MdpState(v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActionCode(pub u64);

pub fn num_actions(num_users: usize, num_stations: usize) -> Result<u64, AgentError> {
    u32::try_from(num_users)
        .ok()
        .and_then(|n| (num_stations as u64).checked_pow(n))
        .ok_or(AgentError::TooManyActions { users: num_users, stations: num_stations })
}

pub fn decode_action(code: ActionCode, num_users: usize, num_stations: usize) -> Result<AssociationMatrix, AgentError> {
    let actions = num_actions(num_users, num_stations)?;
    if code.0 >= actions {
        return Err(AgentError::CodeOutOfRange { code: code.0, actions });
    }
    let m = num_stations as u64;
    let mut rest = code.0;
    let stations = (0..num_users)
        .map(|_| {
            let digit = (rest % m) as usize;
            rest /= m;
            digit
        })
        .collect();
    Ok(AssociationMatrix::new(stations, num_stations).expect("digits are below the radix"))
}

pub fn encode_action(assoc: &AssociationMatrix) -> ActionCode {
    let m = assoc.num_stations() as u64;
    ActionCode(assoc.stations().iter().rev().fold(0u64, |acc, &s| acc * m + s as u64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: MdpState,
    pub action: ActionCode,
    pub reward: f64,
    pub next_state: MdpState,
    pub terminal: bool,
}

/// FIFO experience replay with uniform sampling without replacement.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, items: VecDeque::with_capacity(capacity.min(1 << 16)) }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn get(&self, k: usize) -> &Transition {
        &self.items[k]
    }

    /// Indices of a uniform mini-batch.
    pub fn sample_indices<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize) -> Result<Vec<usize>, AgentError> {
        if self.items.len() < batch {
            return Err(AgentError::UnderfullBuffer { have: self.items.len(), need: batch });
        }
        Ok(index::sample(rng, self.items.len(), batch).into_vec())
    }
}

/// Q-network shape plus the dueling switch.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    pub spec: NetworkSpec,
    pub dueling: bool,
    pub num_actions: usize,
}

impl QNetwork {
    pub fn new(state_dim: usize, num_actions: usize, hidden: &[usize], dueling: bool) -> Result<Self, AgentError> {
        let mut sizes = vec![state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(if dueling { num_actions + 1 } else { num_actions });
        let cut = (sizes.len() - 2).max(1);
        let spec = NetworkSpec::new(sizes, OutputHead::Identity, cut)?;
        Ok(Self { spec, dueling, num_actions })
    }

    pub fn for_problem(num_users: usize, num_stations: usize, cfg: &AgentConfig) -> Result<Self, AgentError> {
        let actions = usize::try_from(num_actions(num_users, num_stations)?)
            .map_err(|_| AgentError::TooManyActions { users: num_users, stations: num_stations })?;
        Self::new(state_width(num_users, num_stations), actions, &cfg.hidden, cfg.dueling)
    }

    /// Q-values for a batch of states, one row per state.
    pub fn q_batch(&self, params: &ParameterVector, states: &Batch) -> Result<Batch, AgentError> {
        let raw = learnkit::forward(&self.spec, params, states)?;
        Ok(self.head(&raw))
    }

    pub fn q_values(&self, params: &ParameterVector, state: &MdpState) -> Result<Vec<f64>, AgentError> {
        let b = Batch::new(1, state.0.len(), state.0.clone());
        Ok(self.q_batch(params, &b)?.data)
    }

    fn head(&self, raw: &Batch) -> Batch {
        if !self.dueling {
            return raw.clone();
        }
        let mut q = Batch::zeros(raw.rows, self.num_actions);
        for r in 0..raw.rows {
            q.row_mut(r).copy_from_slice(&dueling_combine(raw.row(r)));
        }
        q
    }

    /// Maps `dL/dQ` to `dL/d(raw head)`.
    fn head_backward(&self, dq: &Batch) -> Batch {
        if !self.dueling {
            return dq.clone();
        }
        let mut draw = Batch::zeros(dq.rows, self.num_actions + 1);
        for r in 0..dq.rows {
            let d = dq.row(r);
            let total: f64 = d.iter().sum();
            let mean = total / d.len() as f64;
            let out = draw.row_mut(r);
            out[0] = total;
            for (o, &v) in out[1..].iter_mut().zip(d) {
                *o = v - mean;
            }
        }
        draw
    }
}

/// `[V, A_1..A_K] -> V + A_a - mean(A)`.
pub fn dueling_combine(raw: &[f64]) -> Vec<f64> {
    let value = raw[0];
    let adv = &raw[1..];
    let mean = adv.iter().sum::<f64>() / adv.len() as f64;
    adv.iter().map(|a| value + a - mean).collect()
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    (0..values.len()).fold(0, |best, k| if values[k] > values[best] { k } else { best })
}

#[allow(clippy::too_many_arguments)]
pub fn td_target(
    qnet: &QNetwork,
    reward: f64,
    next_state: &MdpState,
    online: &ParameterVector,
    target: &ParameterVector,
    gamma: f64,
    terminal: bool,
    double: bool,
) -> Result<f64, AgentError> {
    if terminal {
        return Ok(reward);
    }
    let q_target = qnet.q_values(target, next_state)?;
    let bootstrap = if double {
        let q_online = qnet.q_values(online, next_state)?;
        q_target[argmax(&q_online)]
    } else {
        q_target.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    };
    Ok(reward + gamma * bootstrap)
}

fn stack_states<'a>(states: impl Iterator<Item = &'a MdpState>, width: usize) -> Batch {
    let data: Vec<f64> = states.flat_map(|s| s.0.iter().copied()).collect();
    Batch::new(data.len() / width, width, data)
}

/// One semi-gradient update on a uniform mini-batch:
/// `theta += (rho / B) * sum_k (y_k - Q(s_k, a_k)) * grad Q(s_k, a_k)`.
/// Returns the mean of `(y - Q)^2 / 2` before the update.
pub fn learn_step<R: Rng + ?Sized>(
    qnet: &QNetwork,
    buffer: &ReplayBuffer,
    online: &mut ParameterVector,
    target: &ParameterVector,
    cfg: &AgentConfig,
    rng: &mut R,
) -> Result<f64, AgentError> {
    let picks = buffer.sample_indices(rng, cfg.batch_size)?;
    let batch: Vec<&Transition> = picks.iter().map(|&k| buffer.get(k)).collect();
    let width = qnet.spec.input_width();
    let states = stack_states(batch.iter().map(|t| &t.state), width);
    let next = stack_states(batch.iter().map(|t| &t.next_state), width);

    let q_next_target = qnet.q_batch(target, &next)?;
    let q_next_online = if cfg.double { Some(qnet.q_batch(online, &next)?) } else { None };
    let targets: Vec<f64> = batch
        .iter()
        .enumerate()
        .map(|(k, t)| {
            if t.terminal {
                return t.reward;
            }
            let row = q_next_target.row(k);
            let bootstrap = match &q_next_online {
                Some(on) => row[argmax(on.row(k))],
                None => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            };
            t.reward + cfg.gamma * bootstrap
        })
        .collect();

    let actions: Vec<usize> = batch.iter().map(|t| t.action.0 as usize).collect();
    let (loss, grad) = td_loss_gradient(qnet, online, &states, &actions, &targets)?;
    learnkit::sgd_step_in_place(online, &grad, cfg.learning_rate, None)?;
    Ok(loss)
}

/// `mean_k (y_k - Q(s_k, a_k))^2 / 2`.
pub fn td_loss(
    qnet: &QNetwork,
    params: &ParameterVector,
    states: &Batch,
    actions: &[usize],
    targets: &[f64],
) -> Result<f64, AgentError> {
    let q = qnet.q_batch(params, states)?;
    let total: f64 = actions.iter().zip(targets).enumerate().map(|(k, (&a, &y))| 0.5 * (q.row(k)[a] - y).powi(2)).sum();
    Ok(total / states.rows as f64)
}

/// [`td_loss`] with the targets held fixed, and
/// its gradient in the online parameters.
pub fn td_loss_gradient(
    qnet: &QNetwork,
    params: &ParameterVector,
    states: &Batch,
    actions: &[usize],
    targets: &[f64],
) -> Result<(f64, ParameterVector), AgentError> {
    if actions.len() != states.rows || targets.len() != states.rows {
        return Err(AgentError::Shape(format!(
            "{} states, {} actions, {} targets",
            states.rows,
            actions.len(),
            targets.len()
        )));
    }
    let trace = learnkit::forward_trace(&qnet.spec, params, states)?;
    let q = qnet.head(trace.logits());
    let b = states.rows as f64;
    let mut dq = Batch::zeros(q.rows, q.cols);
    let mut loss = 0.0;
    for (k, (&a, &y)) in actions.iter().zip(targets).enumerate() {
        let err = q.row(k)[a] - y;
        loss += 0.5 * err * err;
        dq.row_mut(k)[a] = err / b;
    }
    let grad = learnkit::backprop(&qnet.spec, params, &trace, &qnet.head_backward(&dq));
    Ok((loss / b, grad))
}

/// Epsilon-greedy choice; one uniform draw decides explore vs exploit.
pub fn select_action<R: Rng + ?Sized>(
    qnet: &QNetwork,
    params: &ParameterVector,
    state: &MdpState,
    epsilon: f64,
    rng: &mut R,
) -> Result<ActionCode, AgentError> {
    if rng.random::<f64>() < epsilon {
        return Ok(ActionCode(rng.random_range(0..qnet.num_actions as u64)));
    }
    Ok(ActionCode(argmax(&qnet.q_values(params, state)?) as u64))
}

/// Online/target networks, replay memory and exploration schedule.
#[derive(Debug, Clone)]
pub struct Agent {
    pub config: AgentConfig,
    pub qnet: QNetwork,
    pub online: ParameterVector,
    pub target: ParameterVector,
    pub buffer: ReplayBuffer,
    num_users: usize,
    num_stations: usize,
    rng: ChaCha8Rng,
    epochs_seen: u64,
    learn_steps: u64,
}

impl Agent {
    pub fn new(num_users: usize, num_stations: usize, config: AgentConfig, seed: u64) -> Result<Self, AgentError> {
        config.validate()?;
        let qnet = QNetwork::for_problem(num_users, num_stations, &config)?;
        let mut init = rng::sub_stream(seed, Stream::Agent, 1);
        let online = ParameterVector::glorot(&qnet.spec, &mut init);
        let target = online.clone();
        Ok(Self {
            buffer: ReplayBuffer::new(config.replay_capacity),
            config,
            qnet,
            online,
            target,
            num_users,
            num_stations,
            rng: rng::stream(seed, Stream::Agent),
            epochs_seen: 0,
            learn_steps: 0,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_stations(&self) -> usize {
        self.num_stations
    }

    pub fn epsilon(&self) -> f64 {
        self.config.epsilon_at(self.epochs_seen)
    }

    pub fn learn_steps(&self) -> u64 {
        self.learn_steps
    }

    pub fn epochs_seen(&self) -> u64 {
        self.epochs_seen
    }

    /// Exploring action for the current epoch; advances the schedule.
    pub fn act(&mut self, state: &MdpState) -> Result<ActionCode, AgentError> {
        let eps = self.epsilon();
        self.epochs_seen += 1;
        select_action(&self.qnet, &self.online, state, eps, &mut self.rng)
    }

    pub fn greedy(&self, state: &MdpState) -> Result<ActionCode, AgentError> {
        Ok(ActionCode(argmax(&self.qnet.q_values(&self.online, state)?) as u64))
    }

    pub fn decode(&self, code: ActionCode) -> Result<AssociationMatrix, AgentError> {
        decode_action(code, self.num_users, self.num_stations)
    }

    pub fn remember(&mut self, t: Transition) {
        self.buffer.push(t);
    }

    /// Runs the configured number of learn steps once the buffer can fill a
    /// batch; returns their mean loss.
    pub fn train(&mut self) -> Result<Option<f64>, AgentError> {
        if self.buffer.len() < self.config.batch_size {
            return Ok(None);
        }
        let mut total = 0.0;
        for _ in 0..self.config.updates_per_epoch.max(1) {
            total += learn_step(&self.qnet, &self.buffer, &mut self.online, &self.target, &self.config, &mut self.rng)?;
            self.learn_steps += 1;
            if self.learn_steps.is_multiple_of(self.config.target_sync) {
                self.sync_target();
            }
        }
        Ok(Some(total / self.config.updates_per_epoch.max(1) as f64))
    }

    pub fn sync_target(&mut self) {
        self.target = self.online.clone();
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), AgentError> {
        std::fs::write(path, self.checkpoint_bytes())
            .map_err(|e| AgentError::Io { path: path.display().to_string(), reason: e.to_string() })
    }

    /// `magic | version | N | M | config json | epochs | learn steps | rng |
    /// online blob | target blob | sha256 of everything before it`.
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.num_users as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_stations as u32).to_le_bytes());
        let cfg = serde_json::to_vec(&self.config).expect("agent config serializes");
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&self.epochs_seen.to_le_bytes());
        out.extend_from_slice(&self.learn_steps.to_le_bytes());
        out.extend_from_slice(&self.rng.get_seed());
        out.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        for p in [&self.online, &self.target] {
            let blob = p.to_bytes();
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            out.extend_from_slice(&blob);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn load_checkpoint(path: &Path, num_users: usize, num_stations: usize) -> Result<Self, AgentError> {
        let bytes = std::fs::read(path)
            .map_err(|e| AgentError::Io { path: path.display().to_string(), reason: e.to_string() })?;
        Self::from_checkpoint_bytes(&bytes, num_users, num_stations)
    }

    /// Restores an agent (with an empty replay buffer). The whole file is
    /// verified before anything is decoded.
    pub fn from_checkpoint_bytes(bytes: &[u8], num_users: usize, num_stations: usize) -> Result<Self, AgentError> {
        let corrupt = |m: &str| AgentError::Corrupt(m.to_string());
        if bytes.len() < 32 + 20 {
            return Err(corrupt("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut cur = Cursor { bytes: body, at: 0 };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(corrupt("wrong magic"));
        }
        if cur.u32()? != CHECKPOINT_VERSION {
            return Err(corrupt("unsupported version"));
        }
        let n = cur.u32()? as usize;
        let m = cur.u32()? as usize;
        let cfg_len = cur.u32()? as usize;
        let config: AgentConfig =
            serde_json::from_slice(cur.take(cfg_len)?).map_err(|e| AgentError::Corrupt(e.to_string()))?;
        config.validate()?;
        let epochs_seen = cur.u64()?;
        let learn_steps = cur.u64()?;
        let seed: [u8; 32] = cur.take(32)?.try_into().unwrap();
        let stream = cur.u64()?;
        let word_pos = u128::from_le_bytes(cur.take(16)?.try_into().unwrap());
        let expected = QNetwork::for_problem(num_users, num_stations, &config)?;
        let stored = QNetwork::for_problem(n, m, &config)?;
        if stored.spec.layout_hash() != expected.spec.layout_hash() || (n, m) != (num_users, num_stations) {
            return Err(AgentError::LayoutMismatch { expected: expected.spec.layout_hash(), got: stored.spec.layout_hash() });
        }
        let mut blobs = Vec::with_capacity(2);
        for _ in 0..2 {
            let len = cur.u64()? as usize;
            let blob = cur.take(len)?;
            blobs.push(ParameterVector::from_bytes(&expected.spec, blob).map_err(|e| match e {
                LearnError::Layout { expected, got } => AgentError::LayoutMismatch { expected, got },
                other => AgentError::Learn(other),
            })?);
        }
        if cur.at != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        let target = blobs.pop().unwrap();
        let online = blobs.pop().unwrap();
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        Ok(Self {
            buffer: ReplayBuffer::new(config.replay_capacity),
            config,
            qnet: expected,
            online,
            target,
            num_users,
            num_stations,
            rng,
            epochs_seen,
            learn_steps,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], AgentError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| AgentError::Corrupt("truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, AgentError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, AgentError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
