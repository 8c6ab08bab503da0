//! Double-DQN over the erasing environment. Both agents share one
//! convolutional trunk and own a two-action head each.

use std::fmt::Write as _;
use std::path::Path;

use fliplearn_nn::loss::RegressionLoss;
use fliplearn_nn::optim::{Adam, AdamConfig};
use fliplearn_nn::{LayerSpec, Network, NetworkSpec, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classifier::{backbone, ClassifierModel};
use crate::env::{Action, ErasureEnv, Observation, RewardConfig, Scene, AGENTS, OBS_SIDE};
use crate::error::{Error, Result};

pub fn qnet_spec(channels: usize) -> NetworkSpec {
    NetworkSpec {
        input: vec![channels, OBS_SIDE, OBS_SIDE],
        trunk: backbone(),
        heads: vec![vec![LayerSpec::dense(2)]; AGENTS],
    }
}

/// Q-values of a batch of states: `[state][agent head][action]`.
pub trait QFunction {
    fn q_batch(&self, states: &[&Observation]) -> Result<Vec<[[f64; 2]; AGENTS]>>;
}

#[derive(Clone, Debug)]
pub struct QNetwork {
    net: Network<f32>,
}

impl QNetwork {
    pub fn new<R: Rng>(channels: usize, rng: &mut R) -> Result<Self> {
        Ok(QNetwork {
            net: Network::new(qnet_spec(channels), rng)?,
        })
    }

    pub fn from_network(net: Network<f32>) -> Result<Self> {
        let spec = net.spec();
        if spec.input.len() != 3 || *spec != qnet_spec(spec.input[0]) {
            return Err(Error::Param("network is not a two-head Q-network".into()));
        }
        Ok(QNetwork { net })
    }

    pub fn channels(&self) -> usize {
        self.net.spec().input[0]
    }

    pub fn network(&self) -> &Network<f32> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network<f32> {
        &mut self.net
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let net = fliplearn_nn::checkpoint::load(path).map_err(|e| match e {
            fliplearn_nn::NnError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Error::MissingArtifact {
                path: path.to_path_buf(),
                detail: "Q-network checkpoint not found".into(),
            },
            other => other.into(),
        })?;
        Self::from_network(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fliplearn_nn::checkpoint::save(&self.net, path)?)
    }

    fn input(&self, states: &[&Observation]) -> Result<Tensor<f32>> {
        let c = self.channels();
        let mut x = Vec::with_capacity(states.len() * c * OBS_SIDE * OBS_SIDE);
        for s in states {
            if s.channels != c {
                return Err(Error::Input(format!("observation has {} channels, network expects {c}", s.channels)));
            }
            s.extend_f32(&mut x);
        }
        Ok(Tensor::new(vec![states.len(), c, OBS_SIDE, OBS_SIDE], x)?)
    }
}

fn head_rows(outs: &[Tensor<f32>], n: usize) -> Vec<[[f64; 2]; AGENTS]> {
    (0..n)
        .map(|i| {
            let mut q = [[0.0; 2]; AGENTS];
            for (h, out) in outs.iter().enumerate() {
                let row = out.item(i);
                q[h] = [row[0] as f64, row[1] as f64];
            }
            q
        })
        .collect()
}

impl QFunction for QNetwork {
    fn q_batch(&self, states: &[&Observation]) -> Result<Vec<[[f64; 2]; AGENTS]>> {
        let outs = self.net.predict(&self.input(states)?)?;
        Ok(head_rows(&outs, states.len()))
    }
}

/// Argmax over (erase, pass); ties go to pass.
pub fn greedy(q: [f64; 2]) -> Action {
    if q[Action::Erase.index()] > q[Action::Pass.index()] {
        Action::Erase
    } else {
        Action::Pass
    }
}

/// Epsilon-greedy choice given the acting agent's Q-values.
pub fn epsilon_greedy<R: Rng>(q: [f64; 2], epsilon: f64, rng: &mut R) -> Action {
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        Action::from_index(rng.random_range(0..2))
    } else {
        greedy(q)
    }
}

pub fn select_action<Q: QFunction, R: Rng>(
    q: &Q,
    obs: &Observation,
    agent: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<Action> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Param(format!("epsilon {epsilon} outside [0,1]")));
    }
    if epsilon >= 1.0 {
        return Ok(epsilon_greedy([0.0; 2], 1.0, rng));
    }
    Ok(epsilon_greedy(q.q_batch(&[obs])?[0][agent], epsilon, rng))
}

/// One double-DQN target: the current network picks the next action, the
/// target network values it.
pub fn ddqn_target(reward: f64, done: bool, gamma: f64, q_current_next: [f64; 2], q_target_next: [f64; 2]) -> f64 {
    if done {
        reward
    } else {
        reward + gamma * q_target_next[greedy(q_current_next).index()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: Observation,
    pub a: Action,
    pub r: f64,
    pub s2: Observation,
    pub done: bool,
    pub agent: usize,
}

pub fn q_targets<C: QFunction, T: QFunction>(batch: &[&Transition], current: &C, target: &T, gamma: f64) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let next: Vec<&Observation> = batch.iter().map(|t| &t.s2).collect();
    let qc = current.q_batch(&next)?;
    let qt = target.q_batch(&next)?;
    Ok(batch
        .iter()
        .enumerate()
        .map(|(i, t)| ddqn_target(t.r, t.done, gamma, qc[i][t.agent], qt[i][t.agent]))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    Prioritized,
    Uniform,
}

pub const PRIORITY_FLOOR: f64 = 1e-3;

/// Fixed-capacity ring of transitions with per-slot priorities.
#[derive(Clone, Debug)]
pub struct ReplayBuffer<T = Transition> {
    capacity: usize,
    items: Vec<T>,
    priorities: Vec<f64>,
    next: usize,
    max_priority: f64,
    mode: Sampling,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize, mode: Sampling) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Param("replay capacity must be positive".into()));
        }
        Ok(ReplayBuffer {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            priorities: Vec::new(),
            next: 0,
            max_priority: 1.0,
            mode,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, slot: usize) -> &T {
        &self.items[slot]
    }

    pub fn priority(&self, slot: usize) -> f64 {
        self.priorities[slot]
    }

    /// Stores `item` at max priority, evicting the oldest when full.
    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
            self.priorities.push(self.max_priority);
        } else {
            self.items[self.next] = item;
            self.priorities[self.next] = self.max_priority;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Slot ids drawn with replacement, proportional to priority (or
    /// uniformly).
    pub fn sample<R: Rng>(&self, batch: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.items.len() < batch || batch == 0 {
            return Err(Error::State(format!(
                "cannot sample {batch} from a buffer holding {}",
                self.items.len()
            )));
        }
        match self.mode {
            Sampling::Uniform => Ok((0..batch).map(|_| rng.random_range(0..self.items.len())).collect()),
            Sampling::Prioritized => {
                let mut cdf = Vec::with_capacity(self.priorities.len());
                let mut acc = 0.0;
                for p in &self.priorities {
                    acc += p;
                    cdf.push(acc);
                }
                Ok((0..batch)
                    .map(|_| {
                        let u = rng.random::<f64>() * acc;
                        cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
                    })
                    .collect())
            }
        }
    }

    pub fn update_priorities(&mut self, slots: &[usize], td_errors: &[f64]) {
        for (&s, &td) in slots.iter().zip(td_errors) {
            let p = td.abs() + PRIORITY_FLOOR;
            self.priorities[s] = p;
            self.max_priority = self.max_priority.max(p);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub sync_interval: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of all iterations over which epsilon decays linearly.
    pub eps_decay_frac: f64,
    /// Environment steps to take; one learning iteration per step once the
    /// buffer holds a batch.
    pub steps: usize,
    pub capacity: usize,
    pub sampling: Sampling,
    pub loss: RegressionLoss,
    /// Greedy validation every this many episodes (0 disables).
    pub validate_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.9,
            lr: 1e-4,
            batch_size: 32,
            sync_interval: 1200,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay_frac: 0.6,
            steps: 12_000,
            capacity: 8000,
            sampling: Sampling::Prioritized,
            loss: RegressionLoss::Huber { delta: 1.0 },
            validate_every: 40,
            seed: 17,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Param(format!("gamma {} outside (0,1)", self.gamma)));
        }
        if self.sync_interval == 0 || self.batch_size == 0 || self.capacity < self.batch_size {
            return Err(Error::Param("sync interval, batch size and capacity must be positive, capacity >= batch".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..=1.0).contains(&self.eps_start) || !(0.0..=1.0).contains(&self.eps_end) {
            return Err(Error::Param("bad learning rate or epsilon range".into()));
        }
        Ok(())
    }

    pub fn epsilon(&self, step: usize) -> f64 {
        let horizon = (self.steps as f64 * self.eps_decay_frac).max(1.0);
        let t = (step as f64 / horizon).min(1.0);
        self.eps_start + (self.eps_end - self.eps_start) * t
    }
}

/// Mean TD loss of `batch` given the network outputs (one tensor per head)
/// and fixed targets, with the per-head output gradients. Each transition
/// only feeds its own agent's head.
pub fn td_head_grads<T: Scalar>(
    outs: &[Tensor<T>],
    batch: &[&Transition],
    targets: &[f64],
    loss: RegressionLoss,
) -> (f64, Vec<f64>, Vec<Tensor<T>>) {
    let n = batch.len();
    let mut grads = vec![Tensor::<T>::zeros(vec![n, 2]); AGENTS];
    let mut td = Vec::with_capacity(n);
    let mut total = 0.0;
    for (i, t) in batch.iter().enumerate() {
        let q = outs[t.agent].item(i)[t.a.index()].as_f64();
        let residual = q - targets[i];
        let (l, dl) = loss.eval(residual);
        total += l;
        td.push(residual);
        grads[t.agent].data_mut()[i * 2 + t.a.index()] = T::from_f64(dl / n as f64);
    }
    (total / n as f64, td, grads)
}

/// Current and target networks with their optimizer; the target is
/// overwritten by the current network every `sync_interval` updates.
#[derive(Clone, Debug)]
pub struct Learner {
    pub current: QNetwork,
    pub target: QNetwork,
    adam: Adam<f32>,
    iterations: usize,
    gamma: f64,
    loss: RegressionLoss,
    sync_interval: usize,
}

impl Learner {
    pub fn new(qnet: QNetwork, config: &TrainConfig) -> Self {
        let adam = Adam::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            qnet.net.num_params(),
        );
        Learner {
            target: qnet.clone(),
            current: qnet,
            adam,
            iterations: 0,
            gamma: config.gamma,
            loss: config.loss,
            sync_interval: config.sync_interval,
        }
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// One gradient step on `batch`; returns the mean loss and TD errors.
    pub fn learn(&mut self, batch: &[&Transition]) -> Result<(f64, Vec<f64>)> {
        let targets = q_targets(batch, &self.current, &self.target, self.gamma)?;
        let states: Vec<&Observation> = batch.iter().map(|t| &t.s).collect();
        let x = self.current.input(&states)?;
        let outs = self.current.net.forward(&x)?;
        let (mean, td, grads) = td_head_grads(&outs, batch, &targets, self.loss);
        let g = self.current.net.backward(&grads.into_iter().map(Some).collect::<Vec<_>>())?;
        self.adam.step(self.current.net.params_mut(), &g.params);
        self.iterations += 1;
        if !mean.is_finite() || !self.current.net.params().iter().all(|p| p.is_finite()) {
            return Err(Error::Divergence {
                stage: "agents",
                index: self.iterations,
                detail: "TD loss or parameters not finite".into(),
            });
        }
        if self.iterations.is_multiple_of(self.sync_interval) {
            self.target = self.current.clone();
        }
        Ok((mean, td))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub episode: usize,
    pub iteration: usize,
    pub loss: f64,
    pub mean_reward: f64,
    pub epsilon: f64,
    pub val_dice: Option<f64>,
}

pub fn training_log_csv(log: &[LogRow]) -> String {
    let mut s = String::from("episode,iteration,loss,mean_episode_reward,epsilon,val_dice\n");
    for r in log {
        let _ = write!(
            s,
            "{},{},{:.6},{:.6},{:.4},",
            r.episode, r.iteration, r.loss, r.mean_reward, r.epsilon
        );
        if let Some(d) = r.val_dice {
            let _ = write!(s, "{d:.4}");
        }
        s.push('\n');
    }
    s
}

/// Runs one episode to termination with an epsilon-greedy policy.
pub fn run_episode<Q: QFunction, R: Rng>(env: &mut ErasureEnv<'_>, q: &Q, epsilon: f64, rng: &mut R) -> Result<()> {
    while let Some(agent) = env.current_agent() {
        let a = select_action(q, &env.observation(agent), agent, epsilon, rng)?;
        env.step(agent, a)?;
    }
    Ok(())
}

pub struct TrainOutcome {
    pub qnet: QNetwork,
    pub log: Vec<LogRow>,
    pub best_val: Option<f64>,
}

/// Trains a Q-network on episodes drawn from `scenes`. `validate` scores a
/// candidate network (higher is better); the best-scoring snapshot is
/// returned, or the final one when validation is off.
pub fn train(
    scenes: &[Scene],
    model: &ClassifierModel,
    reward: RewardConfig,
    config: &TrainConfig,
    mut validate: Option<&mut dyn FnMut(&QNetwork) -> Result<f64>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(Error::Data("no training scenes".into()));
    }
    let channels = scenes[0].env(model, reward)?.channels();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut learner = Learner::new(QNetwork::new(channels, &mut rng)?, config);
    let mut buffer = ReplayBuffer::new(config.capacity, config.sampling)?;
    let mut log = Vec::new();
    let mut best: Option<(f64, QNetwork)> = None;
    let (mut step, mut episode) = (0usize, 0usize);
    while step < config.steps {
        let scene = &scenes[rng.random_range(0..scenes.len())];
        let mut env = scene.env(model, reward)?;
        let (mut loss_sum, mut updates, mut reward_sum, mut moves) = (0.0, 0usize, 0.0, 0usize);
        while let Some(agent) = env.current_agent() {
            let s = env.observation(agent);
            let eps = config.epsilon(step);
            let a = select_action(&learner.current, &s, agent, eps, &mut rng)?;
            let out = env.step(agent, a)?;
            reward_sum += out.reward;
            moves += 1;
            buffer.push(Transition {
                s,
                a,
                r: out.reward,
                s2: out.observation,
                done: out.done,
                agent,
            });
            step += 1;
            if buffer.len() >= config.batch_size {
                let slots = buffer.sample(config.batch_size, &mut rng)?;
                let batch: Vec<&Transition> = slots.iter().map(|&i| buffer.get(i)).collect();
                let (l, td) = learner.learn(&batch)?;
                buffer.update_priorities(&slots, &td);
                loss_sum += l;
                updates += 1;
            }
            if step >= config.steps {
                break;
            }
        }
        episode += 1;
        let mut val_dice = None;
        let last = step >= config.steps;
        if let Some(v) = validate.as_mut() {
            if config.validate_every > 0 && (episode % config.validate_every == 0 || last) {
                let d = v(&learner.current)?;
                val_dice = Some(d);
                if best.as_ref().is_none_or(|(b, _)| d > *b) {
                    best = Some((d, learner.current.clone()));
                }
            }
        }
        log.push(LogRow {
            episode,
            iteration: learner.iterations(),
            loss: if updates > 0 { loss_sum / updates as f64 } else { 0.0 },
            mean_reward: if moves > 0 { reward_sum / moves as f64 } else { 0.0 },
            epsilon: config.epsilon(step),
            val_dice,
        });
    }
    Ok(match best {
        Some((d, q)) => TrainOutcome {
            qnet: q,
            log,
            best_val: Some(d),
        },
        None => TrainOutcome {
            qnet: learner.current,
            log,
            best_val: None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_examples() {
        assert_eq!(greedy([1.2, 0.3]), Action::Erase);
        assert_eq!(greedy([0.3, 1.2]), Action::Pass);
        assert_eq!(greedy([0.5, 0.5]), Action::Pass);
    }

    #[test]
    fn target_examples() {
        assert_eq!(ddqn_target(1.0, true, 0.9, [5.0, 0.0], [5.0, 0.0]), 1.0);
        // Current net prefers erase; target net values erase at 2.0.
        let t = ddqn_target(0.0, false, 0.9, [3.0, 1.0], [2.0, 7.0]);
        assert!((t - 1.8).abs() < 1e-12);
    }

    #[test]
    fn ring_semantics() {
        let mut b = ReplayBuffer::new(4, Sampling::Uniform).unwrap();
        for i in 0..6 {
            b.push(i);
        }
        assert_eq!(b.len(), 4);
        let mut held: Vec<i32> = (0..4).map(|s| *b.get(s)).collect();
        held.sort_unstable();
        assert_eq!(held, vec![2, 3, 4, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(b.sample(5, &mut rng), Err(Error::State(_))));
    }

    #[test]
    fn epsilon_schedule() {
        let c = TrainConfig {
            steps: 100,
            ..TrainConfig::default()
        };
        assert_eq!(c.epsilon(0), 1.0);
        assert!((c.epsilon(30) - 0.525).abs() < 1e-12);
        assert!((c.epsilon(60) - 0.05).abs() < 1e-12);
        assert!((c.epsilon(99) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn spec_has_two_heads_over_one_trunk() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = QNetwork::new(6, &mut rng).unwrap();
        let n = q.network();
        assert_eq!(n.spec().heads.len(), 2);
        let trunk = n.trunk_param_range();
        let (h0, h1) = (n.head_param_range(0), n.head_param_range(1));
        assert!(trunk.end <= h0.start && h0.end <= h1.start);
        assert_eq!(h1.end, n.num_params());
    }
}
