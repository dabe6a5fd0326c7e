//! Data-poisoning attacks against a detector while it trains.
//!
//! Two attacks are modeled. Label flipping relabels every record of a
//! randomly chosen fraction of misbehaving vehicles as genuine before
//! training starts. Policy induction is an online attack: a policy
//! trained under a negated reward picks the action it wants the victim
//! to take, a replica network pair tracks the victim's learning from the
//! outside, and each next state the victim observes is nudged by a
//! bounded sign-gradient perturbation that steers the victim toward the
//! inverted policy's choice.

use alloc::collections::BTreeSet;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{epsilon_for, Agent, AgentConfig, Experience, TraceEnv, TrainingHook};
use crate::error::{Error, Result};
use crate::math;
use crate::net::{self, NetworkParams, ACTIONS};
use crate::seeding;
use crate::trace::{BsmRecord, DetectionState};

pub const DEFAULT_FLIP_FRACTION: f64 = 0.05;
pub const DEFAULT_FGSM_EPSILON: f64 = 0.05;
pub const DEFAULT_ADVERSARY_DATA_FRACTION: f64 = 0.1;

/// Which poisoning attack a malicious data owner runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    Flip,
    Induction,
}

impl AttackKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Flip => "flip",
            AttackKind::Induction => "induction",
        }
    }

    pub fn parse(s: &str) -> Option<AttackKind> {
        match s {
            "none" => Some(AttackKind::None),
            "flip" => Some(AttackKind::Flip),
            "induction" => Some(AttackKind::Induction),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlipConfig {
    /// Fraction of misbehaving vehicles whose records get relabeled.
    pub fraction: f64,
    pub seed: u64,
}

impl Default for FlipConfig {
    fn default() -> Self {
        FlipConfig {
            fraction: DEFAULT_FLIP_FRACTION,
            seed: 0,
        }
    }
}

impl FlipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::InvalidConfig(
                "flip fraction must be in (0, 1]".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InductionConfig {
    /// Max-norm perturbation budget in standardized feature units.
    pub epsilon: f64,
    /// Share of the victim's training data used to train the inverted
    /// policy.
    pub data_fraction: f64,
    /// Episode budget for the inverted policy; defaults to the victim's.
    pub episodes: Option<usize>,
    pub seed: u64,
}

impl Default for InductionConfig {
    fn default() -> Self {
        InductionConfig {
            epsilon: DEFAULT_FGSM_EPSILON,
            data_fraction: DEFAULT_ADVERSARY_DATA_FRACTION,
            episodes: None,
            seed: 0,
        }
    }
}

impl InductionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig(
                "perturbation budget must be positive".to_string(),
            ));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction < 1.0) {
            return Err(Error::InvalidConfig(
                "adversary data fraction must be in (0, 1)".to_string(),
            ));
        }
        Ok(())
    }
}

/// What a poisoned training run carried; emitted next to the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackManifest {
    None,
    Flip {
        fraction: f64,
        misbehaving_vehicles: usize,
        flipped_vehicles: Vec<u64>,
        flipped_records: u64,
        seed: u64,
    },
    Induction {
        epsilon: f64,
        data_fraction: f64,
        adversary_episodes: usize,
        crafted: u64,
        adv_flag: u64,
        max_abs_delta: f64,
        replica_updates: u64,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlipSummary {
    pub misbehaving_vehicles: usize,
    pub flipped_vehicles: Vec<u64>,
    pub flipped_records: u64,
}

/// Relabel all records of `ceil(fraction * M)` uniformly chosen
/// misbehaving vehicles from 1 to 0. Attack types are left in place so
/// evaluation can still see the ground truth; the output therefore
/// intentionally breaks the label/attack-type agreement.
pub fn flip_labels<R: Rng>(
    records: &mut [BsmRecord],
    fraction: f64,
    rng: &mut R,
) -> Result<FlipSummary> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(
            "flip fraction must be in (0, 1]".to_string(),
        ));
    }
    let eligible: BTreeSet<u64> = records
        .iter()
        .filter(|r| r.label == 1)
        .map(|r| r.sender)
        .collect();
    if eligible.is_empty() {
        return Err(Error::InsufficientData(
            "no misbehaving vehicles to flip".to_string(),
        ));
    }
    let m = eligible.len();
    let k = (math::ceil(fraction * m as f64 - 1e-9) as usize).clamp(1, m);
    let ordered: Vec<u64> = eligible.into_iter().collect();
    let chosen: BTreeSet<u64> = seeding::sample_distinct(rng, m, k)
        .into_iter()
        .map(|i| ordered[i])
        .collect();
    let mut flipped_records = 0u64;
    for r in records.iter_mut() {
        if r.label == 1 && chosen.contains(&r.sender) {
            r.label = 0;
            flipped_records += 1;
        }
    }
    Ok(FlipSummary {
        misbehaving_vehicles: m,
        flipped_vehicles: chosen.into_iter().collect(),
        flipped_records,
    })
}

/// Leading `floor(fraction * len)` items; errors when that is empty.
pub fn data_prefix<T>(items: &[T], fraction: f64) -> Result<&[T]> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(
            "prefix fraction must be in (0, 1)".to_string(),
        ));
    }
    let n = math::floor(fraction * items.len() as f64 + 1e-9) as usize;
    if n == 0 {
        return Err(Error::InsufficientData(
            "data slice too small for requested prefix".to_string(),
        ));
    }
    Ok(&items[..n])
}

/// Train a policy on the victim's pipeline with every reward negated;
/// its greedy choices are the actions the victim is steered toward.
pub fn build_adversarial_policy<R: Rng>(
    env: &TraceEnv,
    victim_cfg: &AgentConfig,
    episodes: usize,
    rng: &mut R,
) -> Result<NetworkParams> {
    if episodes == 0 {
        return Err(Error::InvalidConfig(
            "adversary episodes must be positive".to_string(),
        ));
    }
    let mut cfg = victim_cfg.clone();
    cfg.invert_reward = true;
    let mut adv = Agent::new(cfg, rng)?;
    for e in 0..episodes {
        let eps = epsilon_for(&adv.cfg, e, episodes);
        adv.run_episode(env, eps, true, true, rng)?;
    }
    Ok(adv.online)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InductionStats {
    pub crafted: u64,
    /// How often the inverted policy asked for the "flag" action.
    pub adv_flag: u64,
    pub max_abs_delta: f64,
    pub replica_updates: u64,
    pub replica_loss_sum: f64,
}

impl InductionStats {
    pub fn mean_replica_loss(&self) -> Option<f64> {
        (self.replica_updates > 0).then(|| self.replica_loss_sum / self.replica_updates as f64)
    }
}

/// Training hook implementing the policy induction attack: perturbs each
/// observed next state toward the inverted policy's choice and keeps a
/// replica network pair trained on everything the victim stores.
pub struct PolicyInductionAttack {
    adv_policy: NetworkParams,
    online: NetworkParams,
    target: NetworkParams,
    epsilon: f64,
    lr: f64,
    gamma: f64,
    target_sync: u64,
    grad_clip: f64,
    stats: InductionStats,
}

impl PolicyInductionAttack {
    /// Replicas are freshly initialized, independent of the victim's
    /// parameters; optimizer settings mirror the victim's.
    pub fn new<R: Rng>(
        adv_policy: NetworkParams,
        victim_cfg: &AgentConfig,
        epsilon: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidConfig(
                "perturbation budget must be positive".to_string(),
            ));
        }
        if adv_policy.spec != victim_cfg.net {
            return Err(Error::InvalidConfig(
                "adversarial policy network shape differs from the victim's".to_string(),
            ));
        }
        let online = NetworkParams::init(victim_cfg.net.clone(), rng)?;
        let target = online.clone();
        Ok(PolicyInductionAttack {
            adv_policy,
            online,
            target,
            epsilon,
            lr: victim_cfg.lr,
            gamma: victim_cfg.gamma,
            target_sync: victim_cfg.target_sync,
            grad_clip: victim_cfg.grad_clip,
            stats: InductionStats::default(),
        })
    }

    pub fn stats(&self) -> &InductionStats {
        &self.stats
    }
}

impl TrainingHook for PolicyInductionAttack {
    /// Sign-gradient perturbation: descend the squared distance between
    /// the replica's Q row and a one-hot target at the inverted policy's
    /// action, then keep only the gradient signs scaled to the budget.
    /// Action-history slots are never touched.
    fn craft(&mut self, true_next: &DetectionState) -> Result<Vec<f64>> {
        let x = true_next.encode();
        let a_adv = net::argmax_q(&net::q_values(&self.adv_policy, &x)?);
        let acts = net::forward(&self.online, &x)?;
        let scale = acts
            .q
            .iter()
            .fold(1.0f64, |m, &v| m.max(math::abs(v)));
        let mut dq = [0.0; ACTIONS];
        for (a, g) in dq.iter_mut().enumerate() {
            let t = if a == a_adv { scale } else { 0.0 };
            *g = acts.q[a] - t;
        }
        let grads = net::backward_from(&self.online, &acts, &dq)?;
        if grads.input.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("crafted state gradient"));
        }
        let feature_slots = true_next.window() * true_next.dim();
        let mut delta = vec![0.0; x.len()];
        for k in 0..feature_slots {
            delta[k] = -self.epsilon * math::sign(grads.input[k]);
        }
        self.stats.crafted += 1;
        self.stats.adv_flag += u64::from(a_adv == 1);
        let worst = delta.iter().fold(0.0f64, |m, &v| m.max(math::abs(v)));
        self.stats.max_abs_delta = self.stats.max_abs_delta.max(worst);
        Ok(delta)
    }

    /// Mimic the victim: one bootstrap update on the observed transition
    /// with the victim's own action, targets from the replica target net.
    fn after_transition(&mut self, exp: &Experience) -> Result<()> {
        let y = if exp.terminal {
            exp.reward
        } else {
            let q = net::q_values(&self.target, &exp.next_state)?;
            exp.reward + self.gamma * q.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
        };
        let acts = net::forward(&self.online, &exp.state)?;
        let b = net::backward(&self.online, &acts, exp.action, y)?;
        net::sgd_step(&mut self.online, &b.params, self.lr, self.grad_clip);
        self.stats.replica_updates += 1;
        self.stats.replica_loss_sum += b.loss;
        if self.stats.replica_updates.is_multiple_of(self.target_sync) {
            self.target = self.online.clone();
        }
        Ok(())
    }

    fn as_any(&self) -> &dyn core::any::Any {
        self
    }
}
