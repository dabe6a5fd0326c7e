//! Q-learning detection agent and the trace environment it runs on.
//!
//! The agent consumes one message at a time: the state is a sliding window
//! of recent feature vectors plus the actions taken on them, the two
//! actions are "flag" and "pass", and rewards score the decision against
//! the record label. Training follows the usual pattern: replay buffer,
//! online/target network pair, epsilon-greedy exploration with a linear
//! decay, periodic target sync.
//!
//! A [`TrainingHook`] can be installed to intercept every freshly built
//! next state before the agent observes it; that is the seam used to model
//! an adversary sitting between the environment and the learner.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ConfusionCounts;
use crate::net::{self, NetworkParams, NetworkSpec, ACTIONS};
use crate::trace::{
    featurize_stream, BsmRecord, DetectionState, FeatureConfig, Standardizer,
};

/// Action index for "report the sender as misbehaving".
pub const ACTION_FLAG: usize = 1;
/// Action index for "treat the sender as genuine".
pub const ACTION_PASS: usize = 0;

/// Reward magnitudes per decision outcome. Correct flags must pay more
/// than correct passes, and missed attacks must cost more than false
/// alarms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub true_pos: f64,
    pub true_neg: f64,
    pub false_pos: f64,
    pub false_neg: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            true_pos: 1.0,
            true_neg: 0.5,
            false_pos: 0.5,
            false_neg: 1.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.true_pos, self.true_neg, self.false_pos, self.false_neg];
        if all.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::InvalidConfig(
                "reward magnitudes must be positive".to_string(),
            ));
        }
        if self.true_pos <= self.true_neg {
            return Err(Error::InvalidConfig(
                "true-positive reward must exceed true-negative reward".to_string(),
            ));
        }
        if self.false_neg <= self.false_pos {
            return Err(Error::InvalidConfig(
                "false-negative penalty must exceed false-positive penalty".to_string(),
            ));
        }
        Ok(())
    }

    /// Signed reward for taking `action` on a record with `label`.
    pub fn reward(&self, action: usize, label: u8) -> f64 {
        match (action == ACTION_FLAG, label == 1) {
            (true, true) => self.true_pos,
            (false, false) => self.true_neg,
            (true, false) => -self.false_pos,
            (false, true) => -self.false_neg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub net: NetworkSpec,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_eps_start")]
    pub epsilon_start: f64,
    #[serde(default = "default_eps_end")]
    pub epsilon_end: f64,
    #[serde(default = "default_eps_fraction")]
    pub epsilon_fraction: f64,
    #[serde(default = "default_replay_capacity")]
    pub replay_capacity: usize,
    #[serde(default = "default_minibatch")]
    pub minibatch: usize,
    #[serde(default = "default_target_sync")]
    pub target_sync: u64,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    /// Train against the negated reward signal.
    #[serde(default)]
    pub invert_reward: bool,
}

fn default_gamma() -> f64 {
    0.995
}
fn default_lr() -> f64 {
    0.001
}
fn default_eps_start() -> f64 {
    1.0
}
fn default_eps_end() -> f64 {
    0.05
}
fn default_eps_fraction() -> f64 {
    0.6
}
fn default_replay_capacity() -> usize {
    100_000
}
fn default_minibatch() -> usize {
    32
}
fn default_target_sync() -> u64 {
    1000
}
fn default_grad_clip() -> f64 {
    5.0
}

impl AgentConfig {
    pub fn new(net: NetworkSpec) -> Self {
        AgentConfig {
            net,
            reward: RewardConfig::default(),
            gamma: default_gamma(),
            lr: default_lr(),
            epsilon_start: default_eps_start(),
            epsilon_end: default_eps_end(),
            epsilon_fraction: default_eps_fraction(),
            replay_capacity: default_replay_capacity(),
            minibatch: default_minibatch(),
            target_sync: default_target_sync(),
            grad_clip: default_grad_clip(),
            invert_reward: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.reward.validate()?;
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidConfig("gamma must be in (0, 1]".to_string()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig("lr must be positive".to_string()));
        }
        for (name, v) in [
            ("epsilon_start", self.epsilon_start),
            ("epsilon_end", self.epsilon_end),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(alloc::format!(
                    "{name} must be in [0, 1]"
                )));
            }
        }
        if !(self.epsilon_fraction > 0.0 && self.epsilon_fraction <= 1.0) {
            return Err(Error::InvalidConfig(
                "epsilon_fraction must be in (0, 1]".to_string(),
            ));
        }
        if self.minibatch == 0 {
            return Err(Error::InvalidConfig("minibatch must be positive".to_string()));
        }
        if self.replay_capacity < self.minibatch {
            return Err(Error::InvalidConfig(
                "replay_capacity must be at least minibatch".to_string(),
            ));
        }
        if self.target_sync == 0 {
            return Err(Error::InvalidConfig(
                "target_sync must be positive".to_string(),
            ));
        }
        if !(self.grad_clip >= 0.0) || !self.grad_clip.is_finite() {
            return Err(Error::InvalidConfig(
                "grad_clip must be non-negative".to_string(),
            ));
        }
        Ok(())
    }
}

/// Exploration rate for a given episode: linear decay over the first
/// `epsilon_fraction` of episodes, then flat.
pub fn epsilon_for(cfg: &AgentConfig, episode: usize, total_episodes: usize) -> f64 {
    let span = crate::math::floor(total_episodes as f64 * cfg.epsilon_fraction).max(1.0);
    let t = episode as f64 / span;
    if t >= 1.0 {
        return cfg.epsilon_end;
    }
    cfg.epsilon_start + (cfg.epsilon_end - cfg.epsilon_start) * t
}

/// One stored transition; states are in encoded (flat) form.
#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

/// Fixed-capacity FIFO ring of experiences.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    cap: usize,
    data: Vec<Experience>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(cap: usize) -> Result<Self> {
        if cap == 0 {
            return Err(Error::InvalidConfig(
                "replay capacity must be positive".to_string(),
            ));
        }
        Ok(ReplayBuffer {
            cap,
            data: Vec::new(),
            next: 0,
        })
    }

    pub fn push(&mut self, e: Experience) {
        if self.data.len() < self.cap {
            self.data.push(e);
        } else {
            self.data[self.next] = e;
            self.next = (self.next + 1) % self.cap;
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Experience {
        &self.data[idx]
    }

    /// `k` distinct indices into the buffer. Requires `k <= len`.
    pub fn sample_indices<R: Rng>(&self, rng: &mut R, k: usize) -> Vec<usize> {
        crate::seeding::sample_distinct(rng, self.data.len(), k)
    }
}

/// One prepared message for the environment: final feature view, already
/// standardized.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvRow {
    pub vehicle: u64,
    pub recv_time: f64,
    pub features: Vec<f64>,
    pub label: u8,
}

/// A trace turned into an ordered stream of feature rows, replayable as
/// episodes.
#[derive(Debug, Clone)]
pub struct TraceEnv {
    pub rows: Vec<EnvRow>,
    window: usize,
    dim: usize,
    jitter_span: f64,
}

impl TraceEnv {
    pub fn from_rows(rows: Vec<EnvRow>, window: usize, jitter_span: f64) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("trace env rows"));
        }
        if window == 0 {
            return Err(Error::InvalidConfig("window must be positive".to_string()));
        }
        if !(jitter_span > 0.0) || !jitter_span.is_finite() {
            return Err(Error::InvalidConfig(
                "jitter_span must be positive".to_string(),
            ));
        }
        let dim = rows[0].features.len();
        for r in &rows {
            if r.features.len() != dim {
                return Err(Error::ShapeMismatch {
                    context: "env row features",
                    expected: dim,
                    got: r.features.len(),
                });
            }
        }
        Ok(TraceEnv {
            rows,
            window,
            dim,
            jitter_span,
        })
    }

    /// Featurize records, keep the `view` columns, standardize, wrap.
    pub fn build(
        records: &[BsmRecord],
        feature_cfg: FeatureConfig,
        view: &[usize],
        standardizer: &Standardizer,
        window: usize,
        jitter_span: f64,
    ) -> Result<Self> {
        if view.is_empty() {
            return Err(Error::EmptyInput("feature view"));
        }
        let full_dim = feature_cfg.dim();
        if view.iter().any(|&i| i >= full_dim) {
            return Err(Error::InvalidConfig(
                "feature view index out of range".to_string(),
            ));
        }
        if standardizer.dim() != view.len() {
            return Err(Error::ShapeMismatch {
                context: "standardizer for view",
                expected: view.len(),
                got: standardizer.dim(),
            });
        }
        let full = featurize_stream(records, feature_cfg)?;
        let rows = records
            .iter()
            .zip(full)
            .map(|(r, f)| {
                let mut v: Vec<f64> = view.iter().map(|&i| f[i]).collect();
                standardizer.apply(&mut v);
                EnvRow {
                    vehicle: r.sender,
                    recv_time: r.recv_time,
                    features: v,
                    label: r.label,
                }
            })
            .collect();
        TraceEnv::from_rows(rows, window, jitter_span)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn feature_dim(&self) -> usize {
        self.dim
    }

    pub fn identity_order(&self) -> Vec<usize> {
        (0..self.rows.len()).collect()
    }

    /// Episode reshuffle: each vehicle's whole stream is shifted by a
    /// random phase, then rows are re-sorted by shifted receive time.
    /// Per-vehicle ordering (and hence per-sender message gaps) is
    /// preserved.
    pub fn jittered_order<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let mut phases: BTreeMap<u64, f64> = BTreeMap::new();
        for row in &self.rows {
            phases.entry(row.vehicle).or_insert(0.0);
        }
        for v in phases.values_mut() {
            *v = rng.random_range(0.0..self.jitter_span);
        }
        let mut idx: Vec<usize> = (0..self.rows.len()).collect();
        idx.sort_by(|&a, &b| {
            let ka = self.rows[a].recv_time + phases[&self.rows[a].vehicle];
            let kb = self.rows[b].recv_time + phases[&self.rows[b].vehicle];
            ka.total_cmp(&kb).then(a.cmp(&b))
        });
        idx
    }
}

/// Observer that may tamper with each next state before the agent sees
/// it. `craft` returns a delta in encoded layout (action slots must stay
/// zero); `after_transition` sees every stored transition. `as_any`
/// allows recovering the concrete hook after training to read its stats.
pub trait TrainingHook {
    fn craft(&mut self, true_next: &DetectionState) -> Result<Vec<f64>>;
    fn after_transition(&mut self, exp: &Experience) -> Result<()>;
    fn as_any(&self) -> &dyn core::any::Any;
}

/// Per-episode outcome summary.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeStats {
    pub steps: usize,
    pub total_reward: f64,
    pub counts: ConfusionCounts,
    pub loss_sum: f64,
    pub loss_count: u64,
}

impl EpisodeStats {
    pub fn mean_loss(&self) -> Option<f64> {
        (self.loss_count > 0).then(|| self.loss_sum / self.loss_count as f64)
    }
}

pub struct Agent {
    pub cfg: AgentConfig,
    pub online: NetworkParams,
    pub target: NetworkParams,
    pub replay: ReplayBuffer,
    pub train_steps: u64,
    hook: Option<Box<dyn TrainingHook>>,
}

impl Agent {
    pub fn new<R: Rng>(cfg: AgentConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let online = NetworkParams::init(cfg.net.clone(), rng)?;
        let target = online.clone();
        let replay = ReplayBuffer::new(cfg.replay_capacity)?;
        Ok(Agent {
            cfg,
            online,
            target,
            replay,
            train_steps: 0,
            hook: None,
        })
    }

    pub fn install_hook(&mut self, hook: Box<dyn TrainingHook>) -> Result<()> {
        if self.hook.is_some() {
            return Err(Error::HookInstalled);
        }
        self.hook = Some(hook);
        Ok(())
    }

    pub fn take_hook(&mut self) -> Option<Box<dyn TrainingHook>> {
        self.hook.take()
    }

    pub fn has_hook(&self) -> bool {
        self.hook.is_some()
    }

    /// Epsilon-greedy action. With `epsilon == 0` this is fully greedy
    /// and consumes no randomness.
    pub fn select_action<R: Rng>(
        &self,
        state: &[f64],
        epsilon: f64,
        rng: &mut R,
    ) -> Result<usize> {
        if epsilon > 0.0 {
            let coin: f64 = rng.random();
            if coin < epsilon {
                return Ok(rng.random_range(0..ACTIONS));
            }
        }
        Ok(net::argmax_q(&net::q_values(&self.online, state)?))
    }

    /// Bootstrap target: `r` on terminal transitions, else
    /// `r + gamma * max_a Q_target(s', a)`.
    pub fn td_target(&self, exp: &Experience) -> Result<f64> {
        if exp.terminal {
            return Ok(exp.reward);
        }
        let q = net::q_values(&self.target, &exp.next_state)?;
        let best = q.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        Ok(exp.reward + self.cfg.gamma * best)
    }

    /// One clipped SGD update on the given batch; returns the mean loss.
    /// Counts as a training step for target-sync purposes.
    pub fn update_on(&mut self, batch: &[&Experience]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("update batch"));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut acc = alloc::vec![0.0; self.online.weights.len()];
        let mut loss = 0.0;
        for exp in batch {
            let y = self.td_target(exp)?;
            let acts = net::forward(&self.online, &exp.state)?;
            let b = net::backward(&self.online, &acts, exp.action, y)?;
            for (a, g) in acc.iter_mut().zip(&b.params) {
                *a += scale * g;
            }
            loss += scale * b.loss;
        }
        net::sgd_step(&mut self.online, &acc, self.cfg.lr, self.cfg.grad_clip);
        self.train_steps += 1;
        if self.train_steps.is_multiple_of(self.cfg.target_sync) {
            self.target = self.online.clone();
        }
        Ok(loss)
    }

    /// Sample a minibatch from replay and update; `None` while the buffer
    /// is still shorter than one minibatch.
    pub fn train_step<R: Rng>(&mut self, rng: &mut R) -> Result<Option<f64>> {
        if self.replay.len() < self.cfg.minibatch {
            return Ok(None);
        }
        let idx = self.replay.sample_indices(rng, self.cfg.minibatch);
        // update_on needs &mut self, so clone the sampled experiences out.
        let owned: Vec<Experience> = idx.iter().map(|&i| self.replay.get(i).clone()).collect();
        let refs: Vec<&Experience> = owned.iter().collect();
        self.update_on(&refs).map(Some)
    }

    /// Run one pass over the environment. With `train` set, every step
    /// stores a transition and performs one replay update; any installed
    /// hook perturbs each next state before the agent observes it.
    pub fn run_episode<R: Rng>(
        &mut self,
        env: &TraceEnv,
        epsilon: f64,
        shuffle: bool,
        train: bool,
        rng: &mut R,
    ) -> Result<EpisodeStats> {
        if env.window() != self.cfg.net.window {
            return Err(Error::ShapeMismatch {
                context: "env window",
                expected: self.cfg.net.window,
                got: env.window(),
            });
        }
        if env.feature_dim() != self.cfg.net.feature_dim {
            return Err(Error::ShapeMismatch {
                context: "env feature dim",
                expected: self.cfg.net.feature_dim,
                got: env.feature_dim(),
            });
        }
        let order = if shuffle {
            env.jittered_order(rng)
        } else {
            env.identity_order()
        };
        let mut stats = EpisodeStats::default();
        let initial = DetectionState::initial(env.window(), env.feature_dim());
        let mut true_state = initial.push(&env.rows[order[0]].features, ACTION_PASS)?;
        let mut obs_state = true_state.clone();
        for k in 0..order.len() {
            let row = &env.rows[order[k]];
            let encoded = obs_state.encode();
            let action = self.select_action(&encoded, epsilon, rng)?;
            let sign = if self.cfg.invert_reward { -1.0 } else { 1.0 };
            let reward = sign * self.cfg.reward.reward(action, row.label);
            stats.counts.record(action, row.label);
            stats.total_reward += reward;
            stats.steps += 1;
            let terminal = k + 1 == order.len();
            let (true_next, obs_next) = if terminal {
                (true_state.clone(), obs_state.clone())
            } else {
                let tn = true_state.push(&env.rows[order[k + 1]].features, action)?;
                let mut on = tn.clone();
                if train {
                    if let Some(h) = self.hook.as_mut() {
                        let delta = h.craft(&tn)?;
                        on.apply_feature_delta(&delta)?;
                    }
                }
                (tn, on)
            };
            if train {
                let exp = Experience {
                    state: encoded,
                    action,
                    reward,
                    next_state: obs_next.encode(),
                    terminal,
                };
                self.replay.push(exp.clone());
                if let Some(loss) = self.train_step(rng)? {
                    stats.loss_sum += loss;
                    stats.loss_count += 1;
                }
                if let Some(h) = self.hook.as_mut() {
                    h.after_transition(&exp)?;
                }
            }
            true_state = true_next;
            obs_state = obs_next;
        }
        Ok(stats)
    }
}

/// Anything that maps an encoded state to an action.
pub trait Policy {
    fn action(&self, state: &[f64]) -> Result<usize>;
}

/// Greedy readout of a fixed network.
pub struct GreedyPolicy<'a>(pub &'a NetworkParams);

impl Policy for GreedyPolicy<'_> {
    fn action(&self, state: &[f64]) -> Result<usize> {
        Ok(net::argmax_q(&net::q_values(self.0, state)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub counts: ConfusionCounts,
    pub total_reward: f64,
}

/// Replay the environment in the given order under a fixed policy,
/// scoring with `reward`. No exploration, no learning.
pub fn evaluate_policy(
    policy: &dyn Policy,
    env: &TraceEnv,
    reward: &RewardConfig,
    order: &[usize],
) -> Result<EvalOutcome> {
    if order.is_empty() {
        return Err(Error::EmptyInput("evaluation order"));
    }
    let mut counts = ConfusionCounts::default();
    let mut total = 0.0;
    let mut state = DetectionState::initial(env.window(), env.feature_dim())
        .push(&env.rows[order[0]].features, ACTION_PASS)?;
    for k in 0..order.len() {
        let row = &env.rows[order[k]];
        let action = policy.action(&state.encode())?;
        counts.record(action, row.label);
        total += reward.reward(action, row.label);
        if k + 1 < order.len() {
            state = state.push(&env.rows[order[k + 1]].features, action)?;
        }
    }
    Ok(EvalOutcome {
        counts,
        total_reward: total,
    })
}

/// [`evaluate_policy`] over the natural trace order.
pub fn evaluate(policy: &dyn Policy, env: &TraceEnv, reward: &RewardConfig) -> Result<EvalOutcome> {
    evaluate_policy(policy, env, reward, &env.identity_order())
}
