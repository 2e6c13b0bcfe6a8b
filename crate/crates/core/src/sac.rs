//! Soft actor-critic with twin critics, n-step targets, and a replay buffer
//! that supports retroactive reward edits.

use std::collections::VecDeque;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Adam, Checkpoint, GaussianHead, Mlp, NnError, ScalarAdam, SquashedSample};

#[derive(Debug, Error)]
pub enum SacError {
    #[error("insufficient data: {have} transitions, need at least {need}")]
    InsufficientData { have: usize, need: usize },
    #[error("invalid SAC configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("buffer I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("buffer format: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    /// Normalized action in `[-1, 1]^A`.
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub terminal: bool,
    pub episode_id: u64,
}

/// Ring buffer addressed by global push index. Storage grows on demand up
/// to `capacity`, then overwrites the oldest entries.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    action_dim: usize,
    obs: Vec<f64>,
    next_obs: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    terminals: Vec<bool>,
    episodes: Vec<u64>,
    pushed: u64,
    terminal_index: VecDeque<u64>,
    epoch: u64,
}

/// A sampled batch of n-step transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct NStepBatch {
    pub indices: Vec<u64>,
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    /// Discounted reward sum `G`.
    pub returns: Array1<f64>,
    pub next_obs: Array2<f64>,
    /// 1.0 where the window ended in a terminal.
    pub done: Array1<f64>,
    /// `gamma^k`.
    pub gamma_k: Array1<f64>,
}

/// What an n-step window starting at one index looks like.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NStepTarget {
    pub k: usize,
    pub g: f64,
    pub done: bool,
    pub gamma_k: f64,
    /// Global index whose `next_obs` is the bootstrap state.
    pub last: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, action_dim: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            obs_dim,
            action_dim,
            obs: Vec::new(),
            next_obs: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            terminals: Vec::new(),
            episodes: Vec::new(),
            pushed: 0,
            terminal_index: VecDeque::new(),
            epoch: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }
    pub fn action_dim(&self) -> usize {
        self.action_dim
    }
    pub fn len(&self) -> usize {
        self.rewards.len()
    }
    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
    /// Total transitions ever pushed; the next push gets this global index.
    pub fn pushed(&self) -> u64 {
        self.pushed
    }
    /// Oldest global index still stored.
    pub fn oldest(&self) -> u64 {
        self.pushed - self.len() as u64
    }
    /// Count of completed writes (pushes and reward edits).
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Global indices of stored terminal transitions, oldest first.
    pub fn episode_boundaries(&self) -> Vec<u64> {
        self.terminal_index.iter().copied().collect()
    }

    pub fn contains(&self, global: u64) -> bool {
        global >= self.oldest() && global < self.pushed
    }

    fn slot(&self, global: u64) -> usize {
        (global % self.capacity as u64) as usize
    }

    pub fn push(&mut self, t: Transition) {
        assert_eq!(t.obs.len(), self.obs_dim, "observation length");
        assert_eq!(t.next_obs.len(), self.obs_dim, "next observation length");
        assert_eq!(t.action.len(), self.action_dim, "action length");
        let global = self.pushed;
        if self.len() < self.capacity {
            self.obs.extend_from_slice(&t.obs);
            self.next_obs.extend_from_slice(&t.next_obs);
            self.actions.extend_from_slice(&t.action);
            self.rewards.push(t.reward);
            self.terminals.push(t.terminal);
            self.episodes.push(t.episode_id);
        } else {
            let i = self.slot(global);
            if self.terminal_index.front() == Some(&(global - self.capacity as u64)) {
                self.terminal_index.pop_front();
            }
            let (o, a) = (i * self.obs_dim, i * self.action_dim);
            self.obs[o..o + self.obs_dim].copy_from_slice(&t.obs);
            self.next_obs[o..o + self.obs_dim].copy_from_slice(&t.next_obs);
            self.actions[a..a + self.action_dim].copy_from_slice(&t.action);
            self.rewards[i] = t.reward;
            self.terminals[i] = t.terminal;
            self.episodes[i] = t.episode_id;
        }
        if t.terminal {
            self.terminal_index.push_back(global);
        }
        self.pushed += 1;
        self.epoch += 1;
    }

    pub fn get(&self, global: u64) -> Option<Transition> {
        if !self.contains(global) {
            return None;
        }
        let i = self.slot(global);
        let (o, a) = (i * self.obs_dim, i * self.action_dim);
        Some(Transition {
            obs: self.obs[o..o + self.obs_dim].to_vec(),
            action: self.actions[a..a + self.action_dim].to_vec(),
            reward: self.rewards[i],
            next_obs: self.next_obs[o..o + self.obs_dim].to_vec(),
            terminal: self.terminals[i],
            episode_id: self.episodes[i],
        })
    }

    pub fn reward(&self, global: u64) -> Option<f64> {
        self.contains(global).then(|| self.rewards[self.slot(global)])
    }

    fn episode(&self, global: u64) -> u64 {
        self.episodes[self.slot(global)]
    }

    fn terminal(&self, global: u64) -> bool {
        self.terminals[self.slot(global)]
    }

    /// Stored rewards in global order.
    pub fn rewards_in_order(&self) -> Vec<f64> {
        (self.oldest()..self.pushed).map(|g| self.rewards[self.slot(g)]).collect()
    }

    /// Delayed penalty: when the terminal slot `current` holds reward 0, the
    /// `n`-th slot back (n = 0..N-1) loses `p - n p / N`. Edits stop at the
    /// start of the episode or the oldest stored entry. Returns the number of
    /// slots edited.
    pub fn apply_hdra(&mut self, current: u64, steps: usize, penalty: f64) -> usize {
        if !self.contains(current) || !self.terminal(current) || self.rewards[self.slot(current)] != 0.0 {
            return 0;
        }
        let episode = self.episode(current);
        let mut edited = 0;
        for n in 0..steps as u64 {
            let Some(idx) = current.checked_sub(n) else { break };
            if !self.contains(idx) || self.episode(idx) != episode {
                break;
            }
            let slot = self.slot(idx);
            self.rewards[slot] -= penalty - n as f64 * penalty / steps as f64;
            edited += 1;
        }
        self.epoch += 1;
        edited
    }

    /// The n-step window starting at `global`: stops at a terminal, at an
    /// episode change, or at the newest entry.
    pub fn nstep_target(&self, global: u64, n_steps: usize, gamma: f64) -> Option<NStepTarget> {
        if !self.contains(global) {
            return None;
        }
        let episode = self.episode(global);
        let mut g = 0.0;
        let mut discount = 1.0;
        let mut k = 0;
        let mut last = global;
        let mut done = false;
        for j in 0..n_steps as u64 {
            let idx = global + j;
            if idx >= self.pushed || self.episode(idx) != episode {
                break;
            }
            g += discount * self.rewards[self.slot(idx)];
            discount *= gamma;
            k += 1;
            last = idx;
            if self.terminal(idx) {
                done = true;
                break;
            }
        }
        Some(NStepTarget { k, g, done, gamma_k: discount, last })
    }

    pub fn sample_nstep<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        n_steps: usize,
        gamma: f64,
        rng: &mut R,
    ) -> Result<NStepBatch, SacError> {
        let need = n_steps + 1;
        if self.len() < need {
            return Err(SacError::InsufficientData { have: self.len(), need });
        }
        let indices: Vec<u64> = (0..batch_size).map(|_| rng.random_range(self.oldest()..self.pushed)).collect();
        Ok(self.gather(&indices, n_steps, gamma))
    }

    pub fn gather(&self, indices: &[u64], n_steps: usize, gamma: f64) -> NStepBatch {
        let b = indices.len();
        let mut obs = Array2::zeros((b, self.obs_dim));
        let mut next_obs = Array2::zeros((b, self.obs_dim));
        let mut actions = Array2::zeros((b, self.action_dim));
        let mut returns = Array1::zeros(b);
        let mut done = Array1::zeros(b);
        let mut gamma_k = Array1::zeros(b);
        for (row, &g) in indices.iter().enumerate() {
            let t = self.nstep_target(g, n_steps, gamma).expect("sampled index is stored");
            let i = self.slot(g);
            let j = self.slot(t.last);
            obs.row_mut(row).assign(&ArrayView1::from(&self.obs[i * self.obs_dim..(i + 1) * self.obs_dim]));
            next_obs
                .row_mut(row)
                .assign(&ArrayView1::from(&self.next_obs[j * self.obs_dim..(j + 1) * self.obs_dim]));
            actions
                .row_mut(row)
                .assign(&ArrayView1::from(&self.actions[i * self.action_dim..(i + 1) * self.action_dim]));
            returns[row] = t.g;
            done[row] = if t.done { 1.0 } else { 0.0 };
            gamma_k[row] = t.gamma_k;
        }
        NStepBatch { indices: indices.to_vec(), obs, actions, returns, next_obs, done, gamma_k }
    }

    /// Writes `<stem>.bin` (records oldest first) and `<stem>.json` (header).
    pub fn dump(&self, stem: &Path) -> Result<(), SacError> {
        let header = BufferHeader {
            capacity: self.capacity,
            obs_dim: self.obs_dim,
            action_dim: self.action_dim,
            len: self.len(),
            write_index: self.pushed,
            episode_boundaries: self.episode_boundaries(),
        };
        std::fs::write(
            stem.with_extension("json"),
            serde_json::to_string_pretty(&header).map_err(|e| SacError::Format(e.to_string()))?,
        )?;
        let mut w = BufWriter::new(std::fs::File::create(stem.with_extension("bin"))?);
        for g in self.oldest()..self.pushed {
            let t = self.get(g).expect("stored");
            for v in t.obs.iter().chain(&t.action).chain(std::iter::once(&t.reward)).chain(&t.next_obs) {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&[t.terminal as u8])?;
            w.write_all(&t.episode_id.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn restore(stem: &Path) -> Result<Self, SacError> {
        let header: BufferHeader = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)
            .map_err(|e| SacError::Format(e.to_string()))?;
        let mut buf = Self::new(header.capacity, header.obs_dim, header.action_dim);
        let mut r = BufReader::new(std::fs::File::open(stem.with_extension("bin"))?);
        let first = header.write_index - header.len as u64;
        buf.pushed = first;
        let read_f64s = |r: &mut BufReader<std::fs::File>, n: usize| -> Result<Vec<f64>, SacError> {
            let mut bytes = vec![0u8; 8 * n];
            r.read_exact(&mut bytes)?;
            Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
        };
        for _ in 0..header.len {
            let obs = read_f64s(&mut r, header.obs_dim)?;
            let action = read_f64s(&mut r, header.action_dim)?;
            let reward = read_f64s(&mut r, 1)?[0];
            let next_obs = read_f64s(&mut r, header.obs_dim)?;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            let mut ep = [0u8; 8];
            r.read_exact(&mut ep)?;
            buf.push_at_restore(Transition {
                obs,
                action,
                reward,
                next_obs,
                terminal: flag[0] != 0,
                episode_id: u64::from_le_bytes(ep),
            });
        }
        if buf.episode_boundaries() != header.episode_boundaries {
            return Err(SacError::Format("episode boundary index disagrees with records".into()));
        }
        Ok(buf)
    }

    fn push_at_restore(&mut self, t: Transition) {
        // a full ring keeps its physical layout so global indices survive
        if self.len() == 0 && self.pushed > 0 {
            self.obs.resize(self.capacity * self.obs_dim, 0.0);
            self.next_obs.resize(self.capacity * self.obs_dim, 0.0);
            self.actions.resize(self.capacity * self.action_dim, 0.0);
            self.rewards.resize(self.capacity, 0.0);
            self.terminals.resize(self.capacity, false);
            self.episodes.resize(self.capacity, 0);
        }
        self.push(t);
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BufferHeader {
    capacity: usize,
    obs_dim: usize,
    action_dim: usize,
    len: usize,
    write_index: u64,
    episode_boundaries: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SacConfig {
    pub gamma: f64,
    pub n_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau_polyak: f64,
    /// `None` means `-(action dimension)`.
    pub target_entropy: Option<f64>,
    pub initial_alpha: f64,
    pub hidden: Vec<usize>,
    pub buffer_capacity: usize,
    pub hdra_on: bool,
    pub hdra_steps: usize,
    pub penalty: f64,
    /// Output scale of the initial policy mean layer.
    pub policy_init_scale: f64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.96,
            n_steps: 3,
            batch_size: 256,
            lr: 0.003,
            tau_polyak: 0.005,
            target_entropy: None,
            initial_alpha: 1.0,
            hidden: vec![256, 256],
            buffer_capacity: 1_000_000,
            hdra_on: true,
            hdra_steps: 10,
            penalty: 10.0,
            policy_init_scale: 0.01,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<(), SacError> {
        let fail = |m: &str| Err(SacError::Config(m.into()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail("gamma must lie in (0, 1)");
        }
        if self.n_steps == 0 {
            return fail("n_steps must be at least 1");
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return fail("batch size and buffer capacity must be positive");
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.tau_polyak) {
            return fail("lr must be positive and tau_polyak in [0, 1]");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return fail("hidden layer sizes must be positive");
        }
        if self.hdra_steps == 0 || self.penalty < 0.0 {
            return fail("hdra_steps must be positive and penalty non-negative");
        }
        if !(self.initial_alpha > 0.0) {
            return fail("initial_alpha must be positive");
        }
        Ok(())
    }
}

/// Deterministic-or-stochastic view of an actor network.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub net: Mlp,
    pub action_dim: usize,
}

impl Policy {
    fn split(&self, out: ArrayView1<f64>) -> (Vec<f64>, Vec<f64>) {
        let a = self.action_dim;
        (out.slice(s![..a]).to_vec(), out.slice(s![a..]).to_vec())
    }

    /// Normalized action for one observation. `noise = None` returns the
    /// squashed mean.
    pub fn act(&self, obs: &[f64], noise: Option<&[f64]>) -> Result<Vec<f64>, NnError> {
        let out = self.net.forward(ArrayView1::from(obs))?;
        let (mean, log_std) = self.split(out.view());
        let head = GaussianHead::unit(self.action_dim);
        Ok(match noise {
            None => head.mean_action(&mean),
            Some(eps) => head.sample_squashed(&mean, &log_std, eps).action,
        })
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.action_dim).map(|_| rng.sample(StandardNormal)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    pub mean_log_prob: f64,
}

/// Actor, twin critics with targets, and the entropy temperature.
#[derive(Debug, Clone)]
pub struct SacLearner {
    pub config: SacConfig,
    obs_dim: usize,
    action_dim: usize,
    pub actor: Mlp,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    pub log_alpha: f64,
    actor_opt: Adam,
    q1_opt: Adam,
    q2_opt: Adam,
    alpha_opt: ScalarAdam,
    rng: ChaCha8Rng,
    updates: u64,
}

impl SacLearner {
    pub fn new(config: SacConfig, obs_dim: usize, action_dim: usize, seed: u64) -> Result<Self, SacError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = |input: usize, output: usize| {
            let mut v = vec![input];
            v.extend(&config.hidden);
            v.push(output);
            v
        };
        let mut actor = Mlp::new(&sizes(obs_dim, 2 * action_dim), &mut rng);
        actor.scale_output_units(0..action_dim, config.policy_init_scale);
        let q1 = Mlp::new(&sizes(obs_dim + action_dim, 1), &mut rng);
        let q2 = Mlp::new(&sizes(obs_dim + action_dim, 1), &mut rng);
        Ok(Self {
            actor_opt: Adam::new(&actor, config.lr),
            q1_opt: Adam::new(&q1, config.lr),
            q2_opt: Adam::new(&q2, config.lr),
            alpha_opt: Adam::scalar(config.lr),
            log_alpha: config.initial_alpha.ln(),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            actor,
            q1,
            q2,
            config,
            obs_dim,
            action_dim,
            rng,
            updates: 0,
        })
    }

    /// Shifts the mean-unit biases so the initial squashed mean sits at
    /// `action` (normalized coordinates).
    pub fn center_policy_on(&mut self, action: &[f64]) {
        let b = self.actor.biases_mut().last_mut().expect("non-empty network");
        for (j, &a) in action.iter().enumerate().take(self.action_dim) {
            b[j] = a.clamp(-0.999, 0.999).atanh();
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }
    pub fn action_dim(&self) -> usize {
        self.action_dim
    }
    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }
    pub fn updates(&self) -> u64 {
        self.updates
    }
    pub fn target_entropy(&self) -> f64 {
        self.config.target_entropy.unwrap_or(-(self.action_dim as f64))
    }

    /// Deep copy of the current actor.
    pub fn policy(&self) -> Policy {
        Policy { net: self.actor.clone(), action_dim: self.action_dim }
    }

    /// Checksum over every learnable parameter, for determinism checks.
    pub fn checksum(&self) -> String {
        let mut all = Vec::new();
        for net in [&self.actor, &self.q1, &self.q2, &self.q1_target, &self.q2_target] {
            all.extend(net.to_flat());
        }
        all.push(self.log_alpha);
        crate::nn::hash_f64s(&all)
    }

    pub fn draw_noise(&mut self, rows: usize) -> Array2<f64> {
        let rng = &mut self.rng;
        Array2::from_shape_simple_fn((rows, self.action_dim), || rng.sample(StandardNormal))
    }

    fn policy_samples(&self, obs: ArrayView2<f64>, noise: &Array2<f64>) -> Result<(crate::nn::ForwardCache, Vec<SquashedSample>), NnError> {
        let cache = self.actor.forward_cached(obs)?;
        let a = self.action_dim;
        let head = GaussianHead::unit(a);
        let out = cache.output();
        let samples = out
            .rows()
            .into_iter()
            .zip(noise.rows())
            .map(|(row, eps)| {
                let row = row.to_vec();
                head.sample_squashed(&row[..a], &row[a..], &eps.to_vec())
            })
            .collect();
        Ok((cache, samples))
    }

    fn actions_matrix(samples: &[SquashedSample], dim: usize) -> Array2<f64> {
        Array2::from_shape_fn((samples.len(), dim), |(i, j)| samples[i].squashed[j])
    }

    /// Bootstrapped n-step targets with fresh next-state actions from `noise`.
    pub fn critic_targets(&self, batch: &NStepBatch, alpha: f64, noise: &Array2<f64>) -> Result<Array1<f64>, NnError> {
        let (_, samples) = self.policy_samples(batch.next_obs.view(), noise)?;
        let a_next = Self::actions_matrix(&samples, self.action_dim);
        let x = concatenate![Axis(1), batch.next_obs, a_next];
        let t1 = self.q1_target.forward_batch(x.view())?;
        let t2 = self.q2_target.forward_batch(x.view())?;
        Ok(Array1::from_shape_fn(batch.returns.len(), |i| {
            let soft = t1[[i, 0]].min(t2[[i, 0]]) - alpha * samples[i].log_prob;
            batch.returns[i] + batch.gamma_k[i] * (1.0 - batch.done[i]) * soft
        }))
    }

    /// `0.5 * (mse(Q1, y) + mse(Q2, y))` and its gradients.
    pub fn critic_loss_and_grads(&self, batch: &NStepBatch, y: &Array1<f64>) -> Result<(f64, Mlp, Mlp), NnError> {
        let x = concatenate![Axis(1), batch.obs, batch.actions];
        let b = y.len() as f64;
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(2);
        for q in [&self.q1, &self.q2] {
            let cache = q.forward_cached(x.view())?;
            let err = &cache.output().column(0) - y;
            loss += 0.5 * err.mapv(|e| e * e).sum() / b;
            let up = (err / b).insert_axis(Axis(1));
            grads.push(q.backward(&cache, up.view())?.0);
        }
        let g2 = grads.pop().expect("two critics");
        let g1 = grads.pop().expect("two critics");
        Ok((loss, g1, g2))
    }

    /// Regresses both critics on the n-step soft targets; returns the loss.
    pub fn critic_update(&mut self, batch: &NStepBatch, alpha: f64) -> Result<f64, SacError> {
        let noise = self.draw_noise(batch.returns.len());
        let y = self.critic_targets(batch, alpha, &noise)?;
        let (loss, g1, g2) = self.critic_loss_and_grads(batch, &y)?;
        self.q1_opt.step(&mut self.q1, &g1);
        self.q2_opt.step(&mut self.q2, &g2);
        Ok(loss)
    }

    /// `mean(alpha * log_pi - min(Q1, Q2))` and the actor gradient.
    pub fn actor_loss_and_grads(&self, obs: ArrayView2<f64>, noise: &Array2<f64>, alpha: f64) -> Result<(f64, Mlp, f64), NnError> {
        let od = self.obs_dim;
        let twin = |x: ArrayView2<f64>| -> Result<(Array1<f64>, Array2<f64>), NnError> {
            let c1 = self.q1.forward_cached(x)?;
            let c2 = self.q2.forward_cached(x)?;
            let ones = Array2::from_elem((x.nrows(), 1), 1.0);
            let (_, gx1) = self.q1.backward(&c1, ones.view())?;
            let (_, gx2) = self.q2.backward(&c2, ones.view())?;
            let (o1, o2) = (c1.output(), c2.output());
            let q = Array1::from_shape_fn(x.nrows(), |i| o1[[i, 0]].min(o2[[i, 0]]));
            let dq = Array2::from_shape_fn((x.nrows(), x.ncols() - od), |(i, j)| {
                if o1[[i, 0]] <= o2[[i, 0]] { gx1[[i, od + j]] } else { gx2[[i, od + j]] }
            });
            Ok((q, dq))
        };
        self.actor_loss_with(obs, noise, alpha, twin)
    }

    /// Actor objective against an arbitrary critic returning `Q` and
    /// `dQ/da` for rows of `[obs, action]`.
    pub fn actor_loss_with(
        &self,
        obs: ArrayView2<f64>,
        noise: &Array2<f64>,
        alpha: f64,
        critic: impl Fn(ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>), NnError>,
    ) -> Result<(f64, Mlp, f64), NnError> {
        let (cache, samples) = self.policy_samples(obs, noise)?;
        let a = self.action_dim;
        let bsz = samples.len();
        let b = bsz as f64;
        let acts = Self::actions_matrix(&samples, a);
        let x = concatenate![Axis(1), obs, acts];
        let (q, dq) = critic(x.view())?;
        let head = GaussianHead::unit(a);
        let mut up = Array2::zeros((bsz, 2 * a));
        let mut loss = 0.0;
        let mut mean_logp = 0.0;
        for (i, s) in samples.iter().enumerate() {
            loss += (alpha * s.log_prob - q[i]) / b;
            mean_logp += s.log_prob / b;
            let d_act: Vec<f64> = (0..a).map(|j| -dq[[i, j]] / b).collect();
            let (dm, dl) = head.backward(s, &d_act, alpha / b);
            for j in 0..a {
                up[[i, j]] = dm[j];
                up[[i, a + j]] = dl[j];
            }
        }
        let (g, _) = self.actor.backward(&cache, up.view())?;
        Ok((loss, g, mean_logp))
    }

    /// Actor and temperature step against a supplied critic.
    pub fn actor_and_alpha_update_with(
        &mut self,
        obs: ArrayView2<f64>,
        critic: impl Fn(ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>), NnError>,
    ) -> Result<(f64, f64), SacError> {
        let noise = self.draw_noise(obs.nrows());
        let alpha = self.alpha();
        let (loss, g, mean_logp) = self.actor_loss_with(obs, &noise, alpha, critic)?;
        self.actor_opt.step(&mut self.actor, &g);
        self.alpha_step(mean_logp);
        Ok((loss, self.alpha()))
    }

    /// Policy step against the current critics plus the temperature step.
    /// Returns `(actor loss, alpha after the step)`.
    pub fn actor_and_alpha_update(&mut self, obs: ArrayView2<f64>) -> Result<(f64, f64), SacError> {
        let noise = self.draw_noise(obs.nrows());
        let alpha = self.alpha();
        let (loss, g, mean_logp) = self.actor_loss_and_grads(obs, &noise, alpha)?;
        self.actor_opt.step(&mut self.actor, &g);
        self.alpha_step(mean_logp);
        Ok((loss, self.alpha()))
    }

    fn alpha_step(&mut self, mean_log_prob: f64) {
        // d/d log_alpha of -log_alpha * (log_pi + target_entropy)
        let grad = -(mean_log_prob + self.target_entropy());
        self.alpha_opt.step(&mut self.log_alpha, grad);
    }

    fn soft_update_targets(&mut self) {
        let tau = self.config.tau_polyak;
        self.q1_target.polyak_from(&self.q1, tau);
        self.q2_target.polyak_from(&self.q2, tau);
    }

    /// One full gradient step: temperature, critics, actor, target nets.
    pub fn update(&mut self, buffer: &ReplayBuffer) -> Result<UpdateStats, SacError> {
        let batch = buffer.sample_nstep(self.config.batch_size, self.config.n_steps, self.config.gamma, &mut self.rng)?;
        self.update_on(&batch)
    }

    pub fn update_on(&mut self, batch: &NStepBatch) -> Result<UpdateStats, SacError> {
        let bsz = batch.returns.len();
        let alpha = self.alpha();
        let pi_noise = self.draw_noise(bsz);
        let next_noise = self.draw_noise(bsz);

        let (_, samples) = self.policy_samples(batch.obs.view(), &pi_noise)?;
        let mean_logp = samples.iter().map(|s| s.log_prob).sum::<f64>() / bsz as f64;
        self.alpha_step(mean_logp);

        let y = self.critic_targets(batch, alpha, &next_noise)?;
        let (critic_loss, g1, g2) = self.critic_loss_and_grads(batch, &y)?;
        self.q1_opt.step(&mut self.q1, &g1);
        self.q2_opt.step(&mut self.q2, &g2);

        let (actor_loss, g, _) = self.actor_loss_and_grads(batch.obs.view(), &pi_noise, alpha)?;
        self.actor_opt.step(&mut self.actor, &g);

        self.soft_update_targets();
        self.updates += 1;
        Ok(UpdateStats { critic_loss, actor_loss, alpha: self.alpha(), mean_log_prob: mean_logp })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for (name, net) in [
            ("actor", &self.actor),
            ("q1", &self.q1),
            ("q2", &self.q2),
            ("q1_target", &self.q1_target),
            ("q2_target", &self.q2_target),
        ] {
            ck.nets.insert(name.into(), net.clone());
        }
        ck.scalars.insert("log_alpha".into(), self.log_alpha);
        ck
    }

    /// Loads networks and temperature; optimizers restart from zero moments.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<(), SacError> {
        let fetch = |name: &str, like: &Mlp| -> Result<Mlp, SacError> {
            let net = ck.net(name)?;
            if net.layer_sizes() != like.layer_sizes() {
                return Err(SacError::Config(format!(
                    "checkpoint net `{name}` has layers {:?}, expected {:?}",
                    net.layer_sizes(),
                    like.layer_sizes()
                )));
            }
            Ok(net.clone())
        };
        self.actor = fetch("actor", &self.actor)?;
        self.q1 = fetch("q1", &self.q1)?;
        self.q2 = fetch("q2", &self.q2)?;
        self.q1_target = fetch("q1_target", &self.q1_target)?;
        self.q2_target = fetch("q2_target", &self.q2_target)?;
        if let Some(&la) = ck.scalars.get("log_alpha") {
            self.log_alpha = la;
        }
        self.actor_opt = Adam::new(&self.actor, self.config.lr);
        self.q1_opt = Adam::new(&self.q1, self.config.lr);
        self.q2_opt = Adam::new(&self.q2, self.config.lr);
        self.alpha_opt = Adam::scalar(self.config.lr);
        Ok(())
    }
}
