//! Independent double-DQN learners, one per edge server, trained in
//! lock-step against the shared environment.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{feasible, repair, AgentAction, AgentState, EnvConfig, Environment, JointAction};
use crate::error::{invalid, Error, Result};
use crate::model::{evaluate_objective, ObjectiveBreakdown, Trajectory};
use crate::neural::{adam_step, mse_loss, AdamParams, AdamState, LayerParams, QNetwork};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DqlConfig {
    pub episodes: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub replay_capacity: usize,
    /// Environment steps between target-network synchronizations.
    pub target_interval: u64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of the episodes over which epsilon decays.
    pub epsilon_decay_fraction: f64,
    /// Environment steps between gradient updates.
    pub train_interval: u64,
    /// Set from the scenario's master seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DqlConfig {
    fn default() -> Self {
        Self {
            episodes: 3000,
            batch_size: 1024,
            gamma: 0.99,
            learning_rate: 3e-4,
            hidden: vec![256, 256],
            replay_capacity: 100_000,
            target_interval: 1000,
            epsilon_start: 1.0,
            epsilon_end: 0.02,
            epsilon_decay_fraction: 0.8,
            train_interval: 1,
            seed: 0,
        }
    }
}

impl DqlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.batch_size == 0 || self.replay_capacity == 0 {
            return Err(invalid("episodes, batch size and replay capacity must be positive"));
        }
        if self.batch_size > self.replay_capacity {
            return Err(invalid("batch size exceeds replay capacity"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(invalid(format!("discount {} outside [0, 1]", self.gamma)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid("learning rate must be positive"));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(invalid("hidden layers must be nonempty"));
        }
        if self.target_interval == 0 || self.train_interval == 0 {
            return Err(invalid("target and train intervals must be positive"));
        }
        let unit = 0.0..=1.0;
        if !unit.contains(&self.epsilon_start) || !unit.contains(&self.epsilon_end) {
            return Err(invalid("epsilon endpoints must lie in [0, 1]"));
        }
        if !(self.epsilon_decay_fraction > 0.0 && self.epsilon_decay_fraction <= 1.0) {
            return Err(invalid("epsilon decay fraction must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn layer_sizes(&self, env: &EnvConfig) -> Vec<usize> {
        let mut sizes = vec![env.state_dim()];
        sizes.extend(&self.hidden);
        sizes.push(env.action_count());
        sizes
    }
}

/// Exploration probability for an episode: linear decay, then flat.
pub fn epsilon(episode: usize, cfg: &DqlConfig) -> f64 {
    let decay = cfg.epsilon_decay_fraction * cfg.episodes as f64;
    let progress = (episode as f64 / decay).min(1.0);
    cfg.epsilon_start + (cfg.epsilon_end - cfg.epsilon_start) * progress
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn select_action<R: Rng + ?Sized>(net: &QNetwork, state: &AgentState, eps: f64, rng: &mut R) -> Result<AgentAction> {
    let explore = rng.random::<f64>() < eps;
    if explore {
        return Ok(AgentAction(rng.random_range(0..net.output_dim()) as u32));
    }
    Ok(AgentAction(argmax(&net.forward(state.as_slice())?) as u32))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Experience {
    pub state: AgentState,
    pub action: AgentAction,
    pub reward: f64,
    pub next_state: AgentState,
    /// Last transition of an episode; its target does not bootstrap.
    pub terminal: bool,
}

/// Fixed-capacity ring of transitions with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    dim: usize,
    states: Vec<f64>,
    next_states: Vec<f64>,
    actions: Vec<u32>,
    rewards: Vec<f64>,
    terminal: Vec<bool>,
    head: usize,
}

/// Mini-batch in matrix form.
#[derive(Clone, Debug)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_states: Array2<f64>,
    pub terminal: Vec<bool>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            states: Vec::new(),
            next_states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            terminal: Vec::new(),
            head: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, e: &Experience) -> Result<()> {
        for s in [&e.state, &e.next_state] {
            if s.0.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    context: "replay state",
                    expected: self.dim,
                    actual: s.0.len(),
                });
            }
        }
        if self.len() < self.capacity {
            self.states.extend_from_slice(&e.state.0);
            self.next_states.extend_from_slice(&e.next_state.0);
            self.actions.push(e.action.0);
            self.rewards.push(e.reward);
            self.terminal.push(e.terminal);
        } else {
            let at = self.head;
            let span = at * self.dim..(at + 1) * self.dim;
            self.states[span.clone()].copy_from_slice(&e.state.0);
            self.next_states[span].copy_from_slice(&e.next_state.0);
            self.actions[at] = e.action.0;
            self.rewards[at] = e.reward;
            self.terminal[at] = e.terminal;
        }
        self.head = (self.head + 1) % self.capacity;
        Ok(())
    }

    pub fn get(&self, i: usize) -> Experience {
        let span = i * self.dim..(i + 1) * self.dim;
        Experience {
            state: AgentState(self.states[span.clone()].to_vec()),
            action: AgentAction(self.actions[i]),
            reward: self.rewards[i],
            next_state: AgentState(self.next_states[span].to_vec()),
            terminal: self.terminal[i],
        }
    }

    /// Uniform sample with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(Error::InvalidState("sampling from an empty replay buffer".into()));
        }
        Ok((0..size).map(|_| rng.random_range(0..self.len())).collect())
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut states = Array2::zeros((indices.len(), self.dim));
        let mut next_states = Array2::zeros((indices.len(), self.dim));
        for (row, &i) in indices.iter().enumerate() {
            let span = i * self.dim..(i + 1) * self.dim;
            states.row_mut(row).as_slice_mut().expect("row").copy_from_slice(&self.states[span.clone()]);
            next_states.row_mut(row).as_slice_mut().expect("row").copy_from_slice(&self.next_states[span]);
        }
        Batch {
            states,
            actions: indices.iter().map(|&i| self.actions[i] as usize).collect(),
            rewards: indices.iter().map(|&i| self.rewards[i]).collect(),
            next_states,
            terminal: indices.iter().map(|&i| self.terminal[i]).collect(),
        }
    }
}

/// Double-DQN regression targets: the main network picks the next action,
/// the target network values it.
pub fn td_targets(batch: &Batch, main: &QNetwork, target: &QNetwork, gamma: f64) -> Result<Vec<f64>> {
    if batch.rewards.is_empty() {
        return Err(invalid("empty batch"));
    }
    let q_main = main.forward_batch(batch.next_states.view())?;
    let q_target = target.forward_batch(batch.next_states.view())?;
    Ok((0..batch.rewards.len())
        .map(|i| {
            if batch.terminal[i] {
                return batch.rewards[i];
            }
            let row = q_main.row(i);
            let best = argmax(row.as_slice().expect("row"));
            batch.rewards[i] + gamma * q_target[[i, best]]
        })
        .collect())
}

/// One learner: main and target networks, optimizer, replay memory and its
/// own random stream.
#[derive(Clone, Debug)]
pub struct DqlAgent {
    pub main: QNetwork,
    pub target: QNetwork,
    pub adam: AdamState,
    pub replay: ReplayBuffer,
    pub rng: ChaCha8Rng,
    pub updates: u64,
}

impl DqlAgent {
    pub fn new(sizes: &[usize], cfg: &DqlConfig, mut rng: ChaCha8Rng) -> Result<Self> {
        let main = QNetwork::new(sizes, &mut rng)?;
        let mut target = main.clone();
        target.copy_from(&main)?;
        Ok(Self {
            adam: AdamState::new(&main, cfg.learning_rate),
            replay: ReplayBuffer::new(cfg.replay_capacity, sizes[0]),
            target,
            main,
            rng,
            updates: 0,
        })
    }

    /// One gradient step on a freshly sampled mini-batch; returns the loss.
    pub fn learn(&mut self, batch_size: usize, gamma: f64) -> Result<f64> {
        let indices = self.replay.sample_indices(batch_size, &mut self.rng)?;
        let batch = self.replay.batch(&indices);
        let targets = td_targets(&batch, &self.main, &self.target, gamma)?;
        let cache = self.main.forward_cached(batch.states.view())?;
        let out = cache.output();
        let taken: Vec<f64> = batch.actions.iter().enumerate().map(|(i, &a)| out[[i, a]]).collect();
        let (loss, grad) = mse_loss(&taken, &targets)?;
        let mut upstream = Array2::zeros(out.raw_dim());
        for (i, (&a, g)) in batch.actions.iter().zip(grad).enumerate() {
            upstream[[i, a]] = g;
        }
        let grads = self.main.backward(&cache, &upstream)?;
        adam_step(&mut self.main, &grads, &mut self.adam)?;
        self.updates += 1;
        Ok(loss)
    }
}

/// Independent random streams for the environment (stream 0) and each agent.
pub fn agent_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardLogRow {
    pub episode: usize,
    pub agent: usize,
    pub mean_reward: f64,
    pub epsilon: f64,
    pub feasible_fraction: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub agents: Vec<DqlAgent>,
    pub log: Vec<RewardLogRow>,
    pub steps: u64,
}

impl TrainOutcome {
    pub fn networks(&self) -> Vec<QNetwork> {
        self.agents.iter().map(|a| a.main.clone()).collect()
    }
}

/// Lock-step training: every slot, all agents act, the controller scores the
/// joint action, each agent stores its own transition and, on schedule,
/// takes a gradient step. `progress` is called after every episode.
pub fn train(
    cfg: &DqlConfig,
    env_cfg: &EnvConfig,
    mut progress: impl FnMut(usize, &[RewardLogRow]),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut env = Environment::new(env_cfg.clone())?;
    let sizes = cfg.layer_sizes(env_cfg);
    let n = env_cfg.servers.len();
    let mut agents = (0..n)
        .map(|i| DqlAgent::new(&sizes, cfg, agent_rng(cfg.seed, i as u64 + 1)))
        .collect::<Result<Vec<_>>>()?;
    let mut episode_rng = agent_rng(cfg.seed, 0);
    let mut log = Vec::with_capacity(cfg.episodes * n);
    let mut step = 0u64;
    for episode in 0..cfg.episodes {
        let eps = epsilon(episode, cfg);
        let mut states = env.reset(episode_rng.next_u64())?;
        let mut totals = vec![0.0; n];
        let mut feasible_slots = 0usize;
        let mut slots = 0usize;
        loop {
            let actions = agents
                .iter_mut()
                .zip(&states)
                .map(|(a, s)| select_action(&a.main, s, eps, &mut a.rng))
                .collect::<Result<Vec<_>>>()?;
            let out = env.step(&JointAction(actions.clone()))?;
            slots += 1;
            feasible_slots += usize::from(out.record.feasible);
            step += 1;
            for (i, agent) in agents.iter_mut().enumerate() {
                totals[i] += out.rewards[i];
                agent.replay.push(&Experience {
                    state: states[i].clone(),
                    action: actions[i],
                    reward: out.rewards[i],
                    next_state: out.next_states[i].clone(),
                    terminal: out.done,
                })?;
                if step % cfg.train_interval == 0 && agent.replay.len() >= cfg.batch_size {
                    agent.learn(cfg.batch_size, cfg.gamma)?;
                }
                if step % cfg.target_interval == 0 {
                    agent.target.copy_from(&agent.main)?;
                }
            }
            states = out.next_states;
            if out.done {
                break;
            }
        }
        let start = log.len();
        log.extend((0..n).map(|agent| RewardLogRow {
            episode,
            agent,
            mean_reward: totals[agent] / slots as f64,
            epsilon: eps,
            feasible_fraction: feasible_slots as f64 / slots as f64,
        }));
        progress(episode, &log[start..]);
    }
    Ok(TrainOutcome { agents, log, steps: step })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeObjective {
    pub seed: u64,
    pub computing: f64,
    pub communication: f64,
    pub migration: f64,
    pub total: f64,
    /// Slots whose greedy joint action needed repair.
    pub repaired_slots: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std_dev: f64,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Self { mean: 0.0, std_dev: 0.0 };
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        Self {
            mean,
            std_dev: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub episodes: Vec<EpisodeObjective>,
    pub computing: Summary,
    pub communication: Summary,
    pub migration: Summary,
    pub total: Summary,
}

/// Runs one greedy episode on the environment's current realization.
pub fn greedy_episode(nets: &[QNetwork], env: &mut Environment, seed: u64) -> Result<(EpisodeObjective, Trajectory)> {
    let env_cfg = env.config().clone();
    if nets.len() != env_cfg.servers.len() {
        return Err(Error::DimensionMismatch {
            context: "networks per server",
            expected: env_cfg.servers.len(),
            actual: nets.len(),
        });
    }
    for net in nets {
        if net.input_dim() != env_cfg.state_dim() || net.output_dim() != env_cfg.action_count() {
            return Err(Error::DimensionMismatch {
                context: "network shape",
                expected: env_cfg.state_dim(),
                actual: net.input_dim(),
            });
        }
    }
    let mut states = env.reset(seed)?;
    let mut repaired_slots = 0;
    loop {
        let q_rows = nets
            .iter()
            .zip(&states)
            .map(|(net, s)| net.forward(s.as_slice()))
            .collect::<Result<Vec<_>>>()?;
        let mut ja = JointAction(q_rows.iter().map(|q| AgentAction(argmax(q) as u32)).collect());
        if !feasible(&ja, env_cfg.vehicles) {
            ja = repair(&ja, &q_rows, env_cfg.vehicles)?;
            repaired_slots += 1;
        }
        let out = env.step(&ja)?;
        states = out.next_states;
        if out.done {
            break;
        }
    }
    let traj = Trajectory::new(env.executed().to_vec());
    let obj: ObjectiveBreakdown = evaluate_objective(&traj, &env.realization()?.instance)?;
    Ok((
        EpisodeObjective {
            seed,
            computing: obj.computing,
            communication: obj.communication,
            migration: obj.migration,
            total: obj.total,
            repaired_slots,
        },
        traj,
    ))
}

/// Greedy inference with repair over one episode per seed.
pub fn infer(nets: &[QNetwork], env_cfg: &EnvConfig, seeds: &[u64]) -> Result<InferenceReport> {
    let mut env = Environment::new(env_cfg.clone())?;
    let episodes = seeds
        .iter()
        .map(|&seed| greedy_episode(nets, &mut env, seed).map(|(e, _)| e))
        .collect::<Result<Vec<_>>>()?;
    Ok(InferenceReport {
        computing: Summary::of(episodes.iter().map(|e| e.computing)),
        communication: Summary::of(episodes.iter().map(|e| e.communication)),
        migration: Summary::of(episodes.iter().map(|e| e.migration)),
        total: Summary::of(episodes.iter().map(|e| e.total)),
        episodes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    pub network: Vec<LayerParams>,
    pub target: Vec<LayerParams>,
    pub adam: AdamParams,
    pub updates: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub steps: u64,
    pub agents: Vec<AgentCheckpoint>,
}

impl Checkpoint {
    pub fn from_agents(agents: &[DqlAgent], steps: u64) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            steps,
            agents: agents
                .iter()
                .map(|a| AgentCheckpoint {
                    network: a.main.to_params(),
                    target: a.target.to_params(),
                    adam: a.adam.to_params(),
                    updates: a.updates,
                })
                .collect(),
        }
    }

    pub fn networks(&self) -> Result<Vec<QNetwork>> {
        self.agents.iter().map(|a| QNetwork::from_params(&a.network)).collect()
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string(checkpoint)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::CorruptCheckpoint(format!("{}: {e}", path.display())))?;
    let found = value
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::CorruptCheckpoint("missing version field".into()))?;
    if found != u64::from(CHECKPOINT_VERSION) {
        return Err(Error::CheckpointVersion {
            found: found.try_into().unwrap_or(u32::MAX),
            expected: CHECKPOINT_VERSION,
        });
    }
    let checkpoint: Checkpoint =
        serde_json::from_value(value).map_err(|e| Error::CorruptCheckpoint(format!("{}: {e}", path.display())))?;
    for agent in &checkpoint.agents {
        let net = QNetwork::from_params(&agent.network)?;
        QNetwork::from_params(&agent.target)?;
        AdamState::from_params(&agent.adam, &net)?;
    }
    Ok(checkpoint)
}
