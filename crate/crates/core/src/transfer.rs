//! Trust-weighted instance transfer between detectors.
//!
//! A target that starts from scratch first scores every offered source
//! policy by replaying it greedily on a held-out slice of its own data
//! (probe), min-max scales the probe returns into trust values, and
//! keeps the sources above a threshold. Trusted sources then contribute
//! experience samples proportionally to trust into a transfer pool; the
//! target trains its early episodes from that pool under a lower-bound
//! experience filter, prunes what the filter rejects, and finishes with
//! plain replay training on its own experiences.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{
    epsilon_for, evaluate, Agent, Experience, GreedyPolicy, RewardConfig, TraceEnv, ACTION_PASS,
};
use crate::error::{Error, Result};
use crate::math;
use crate::metrics::ConfusionCounts;
use crate::net::{self, NetworkParams};
use crate::seeding;
use crate::trace::DetectionState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    /// Greedy evaluation episodes summed into one probe return.
    pub probe_episodes: usize,
    /// Trust threshold for source selection.
    pub trust_threshold: f64,
    /// Transfer pool capacity.
    pub capacity: usize,
    /// Fraction of target episodes trained from the transfer pool.
    pub selection_fraction: f64,
    /// Share of each pool refill drawn from the target's own replay.
    pub own_fraction: f64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            probe_episodes: 10,
            trust_threshold: 0.5,
            capacity: 50_000,
            selection_fraction: 0.4,
            own_fraction: 0.25,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.probe_episodes == 0 {
            return Err(Error::InvalidConfig(
                "probe_episodes must be positive".to_string(),
            ));
        }
        if !(0.0..=1.0).contains(&self.trust_threshold) {
            return Err(Error::InvalidConfig(
                "trust_threshold must be in [0, 1]".to_string(),
            ));
        }
        if self.capacity == 0 {
            return Err(Error::InvalidConfig(
                "transfer pool capacity must be positive".to_string(),
            ));
        }
        if !(self.selection_fraction > 0.0 && self.selection_fraction <= 1.0) {
            return Err(Error::InvalidConfig(
                "selection_fraction must be in (0, 1]".to_string(),
            ));
        }
        if !(0.0..=1.0).contains(&self.own_fraction) {
            return Err(Error::InvalidConfig(
                "own_fraction must be in [0, 1]".to_string(),
            ));
        }
        Ok(())
    }
}

/// Total greedy return of a policy over `episodes` identical replays of
/// the probe environment, scored with the prober's reward constants.
pub fn probe_return(
    params: &NetworkParams,
    env: &TraceEnv,
    reward: &RewardConfig,
    episodes: usize,
) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::InvalidConfig(
            "probe episodes must be positive".to_string(),
        ));
    }
    let policy = GreedyPolicy(params);
    let mut total = 0.0;
    for _ in 0..episodes {
        total += evaluate(&policy, env, reward)?.total_reward;
    }
    Ok(total)
}

/// Min-max scale to [0, 1]. A single value, or all values equal, scales
/// to 1.0 (fully trusted by convention).
pub fn min_max_scale(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::EmptyInput("min_max_scale values"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("min_max_scale values"));
    }
    let min = values.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let max = values.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if max == min {
        return Ok(vec![1.0; values.len()]);
    }
    Ok(values.iter().map(|v| (v - min) / (max - min)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustEntry {
    pub source: usize,
    pub raw_return: f64,
    pub trust: f64,
    /// 1 = highest trust.
    pub rank: usize,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustReport {
    pub threshold: f64,
    pub entries: Vec<TrustEntry>,
}

impl TrustReport {
    pub fn selected_sources(&self) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| e.selected)
            .map(|e| e.source)
            .collect()
    }
}

/// Scale probe returns into trust values, rank them descending, and
/// select everything at or above the threshold.
pub fn rank_sources(returns: &[f64], threshold: f64) -> Result<TrustReport> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidConfig(
            "trust threshold must be in [0, 1]".to_string(),
        ));
    }
    let trusts = min_max_scale(returns)?;
    let mut order: Vec<usize> = (0..trusts.len()).collect();
    order.sort_by(|&a, &b| trusts[b].total_cmp(&trusts[a]).then(a.cmp(&b)));
    let mut rank = vec![0usize; trusts.len()];
    for (pos, &i) in order.iter().enumerate() {
        rank[i] = pos + 1;
    }
    let entries = (0..trusts.len())
        .map(|i| TrustEntry {
            source: i,
            raw_return: returns[i],
            trust: trusts[i],
            rank: rank[i],
            selected: trusts[i] >= threshold,
        })
        .collect();
    Ok(TrustReport {
        threshold,
        entries,
    })
}

/// Split `size` into per-source counts proportional to trust, using
/// largest-remainder rounding so the counts sum exactly to `size`.
pub fn sample_allocation(trusts: &[f64], size: usize) -> Result<Vec<usize>> {
    if trusts.is_empty() {
        return Err(Error::EmptyInput("sample_allocation trusts"));
    }
    if trusts.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::InvalidConfig(
            "trust values must be non-negative".to_string(),
        ));
    }
    let sum: f64 = trusts.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::ZeroTrustMass);
    }
    let exact: Vec<f64> = trusts.iter().map(|t| t / sum * size as f64).collect();
    let mut counts: Vec<usize> = exact
        .iter()
        .map(|&e| math::floor(e + 1e-9) as usize)
        .collect();
    let mut assigned: usize = counts.iter().sum();
    // The epsilon guard can in principle overshoot; walk it back.
    while assigned > size {
        let i = (0..counts.len())
            .filter(|&i| counts[i] > 0)
            .min_by(|&a, &b| {
                let ra = exact[a] - counts[a] as f64;
                let rb = exact[b] - counts[b] as f64;
                ra.total_cmp(&rb)
            })
            .expect("positive counts exist while assigned > 0");
        counts[i] -= 1;
        assigned -= 1;
    }
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(size - assigned) {
        counts[i] += 1;
    }
    Ok(counts)
}

/// One trusted source offered to the target: its policy, the
/// environment it acts on, and a parallel view of the same records in
/// the target's feature space for storage. For same-view transfer both
/// environments are the same.
pub struct SourceHandle<'a> {
    pub params: &'a NetworkParams,
    pub act_env: &'a TraceEnv,
    pub store_env: &'a TraceEnv,
    pub trust: f64,
}

/// Every transition of one greedy pass: actions chosen on `act_env`
/// states, experiences recorded from `store_env` states, rewards
/// computed with the collector's (target's) constants.
fn greedy_transitions(
    params: &NetworkParams,
    act_env: &TraceEnv,
    store_env: &TraceEnv,
    reward: &RewardConfig,
) -> Result<Vec<Experience>> {
    if act_env.len() != store_env.len() {
        return Err(Error::ShapeMismatch {
            context: "act vs store env rows",
            expected: act_env.len(),
            got: store_env.len(),
        });
    }
    let policy = GreedyPolicy(params);
    let mut out = Vec::with_capacity(act_env.len());
    let mut act_s = DetectionState::initial(act_env.window(), act_env.feature_dim())
        .push(&act_env.rows[0].features, ACTION_PASS)?;
    let mut store_s = DetectionState::initial(store_env.window(), store_env.feature_dim())
        .push(&store_env.rows[0].features, ACTION_PASS)?;
    for k in 0..act_env.len() {
        let label = act_env.rows[k].label;
        debug_assert_eq!(label, store_env.rows[k].label);
        let action = crate::agent::Policy::action(&policy, &act_s.encode())?;
        let r = reward.reward(action, label);
        let terminal = k + 1 == act_env.len();
        let (act_next, store_next) = if terminal {
            (act_s.clone(), store_s.clone())
        } else {
            (
                act_s.push(&act_env.rows[k + 1].features, action)?,
                store_s.push(&store_env.rows[k + 1].features, action)?,
            )
        };
        out.push(Experience {
            state: store_s.encode(),
            action,
            reward: r,
            next_state: store_next.encode(),
            terminal,
        });
        act_s = act_next;
        store_s = store_next;
    }
    Ok(out)
}

/// Up to `count` experiences from one source, a uniform chronological
/// subset when the pass yields more than requested.
pub fn collect_source_samples<R: Rng>(
    params: &NetworkParams,
    act_env: &TraceEnv,
    store_env: &TraceEnv,
    reward: &RewardConfig,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Experience>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let full = greedy_transitions(params, act_env, store_env, reward)?;
    if count >= full.len() {
        return Ok(full);
    }
    let mut idx = seeding::sample_distinct(rng, full.len(), count);
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| full[i].clone()).collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    /// Trust-proportional quota per source before availability caps.
    pub allocated: Vec<usize>,
    /// What each source actually contributed.
    pub collected: Vec<usize>,
    /// Capacity left unfilled because sources ran out of transitions.
    pub shortfall: usize,
}

pub struct PoolBuild {
    pub pool: Vec<Experience>,
    /// Source transitions left out of the initial fill; used for refills.
    pub reserve: Vec<Experience>,
    pub stats: PoolStats,
}

/// Fill the transfer pool up to capacity with trust-proportional
/// contributions, redistributing quota from exhausted sources to those
/// with spare transitions.
pub fn build_sample_pool<R: Rng>(
    sources: &[SourceHandle],
    capacity: usize,
    reward: &RewardConfig,
    rng: &mut R,
) -> Result<PoolBuild> {
    if sources.is_empty() {
        return Err(Error::EmptyInput("build_sample_pool sources"));
    }
    let trusts: Vec<f64> = sources.iter().map(|s| s.trust).collect();
    let full: Vec<Vec<Experience>> = sources
        .iter()
        .map(|s| greedy_transitions(s.params, s.act_env, s.store_env, reward))
        .collect::<Result<_>>()?;
    let avail: Vec<usize> = full.iter().map(Vec::len).collect();

    let allocated = sample_allocation(&trusts, capacity)?;
    let mut take: Vec<usize> = vec![0; sources.len()];
    let mut remaining = capacity;
    // Iterative redistribution: each round either fills the quota or
    // exhausts at least one source.
    loop {
        let open: Vec<usize> = (0..sources.len())
            .filter(|&i| take[i] < avail[i] && trusts[i] > 0.0)
            .collect();
        if remaining == 0 || open.is_empty() {
            break;
        }
        let open_trusts: Vec<f64> = open.iter().map(|&i| trusts[i]).collect();
        let share = sample_allocation(&open_trusts, remaining)?;
        let mut progressed = false;
        for (slot, &i) in open.iter().enumerate() {
            let add = share[slot].min(avail[i] - take[i]);
            if add > 0 {
                take[i] += add;
                remaining -= add;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }

    let mut pool = Vec::with_capacity(capacity - remaining);
    let mut reserve = Vec::new();
    for (i, transitions) in full.into_iter().enumerate() {
        if take[i] >= transitions.len() {
            pool.extend(transitions);
        } else {
            let chosen: alloc::collections::BTreeSet<usize> =
                seeding::sample_distinct(rng, transitions.len(), take[i])
                    .into_iter()
                    .collect();
            for (k, exp) in transitions.into_iter().enumerate() {
                if chosen.contains(&k) {
                    pool.push(exp);
                } else {
                    reserve.push(exp);
                }
            }
        }
    }
    Ok(PoolBuild {
        pool,
        reserve,
        stats: PoolStats {
            allocated,
            collected: take,
            shortfall: remaining,
        },
    })
}

/// Lower-bound filter: keep a transition iff its bootstrap target still
/// exceeds the online estimate. The achieved return behind `y` is a
/// lower bound on the optimal value, so such samples pull the estimate
/// up toward it; once the estimate meets the bound the sample has
/// nothing left to teach and is dropped.
pub fn selection_keep(agent: &Agent, exp: &Experience) -> Result<bool> {
    let y = agent.td_target(exp)?;
    let q = net::q_values(&agent.online, &exp.state)?;
    Ok(y > q[exp.action])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Selection,
    PlainDqn,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Selection => "selection",
            Phase::PlainDqn => "plain-dqn",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub phase: Phase,
    pub epsilon: f64,
    pub steps: usize,
    pub total_reward: f64,
    pub counts: ConfusionCounts,
    pub mean_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionInstrumentation {
    pub examined: u64,
    pub kept: u64,
    pub discarded: u64,
    /// Samples handed to the optimizer out of pool minibatches; equals
    /// `kept` when no filtered sample is dropped or duplicated.
    pub trained_from_pool: u64,
    pub refills: u64,
    pub own_added: u64,
    pub pool_initial: usize,
    pub pool_final: usize,
    pub pool_stats: PoolStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferRun {
    pub episodes: Vec<EpisodeRecord>,
    pub selection: SelectionInstrumentation,
    pub no_sources: bool,
}

/// How many leading episodes train from the transfer pool.
pub fn selection_episode_count(cfg: &TransferConfig, total_episodes: usize) -> usize {
    (math::round(cfg.selection_fraction * total_episodes as f64) as usize)
        .clamp(1, total_episodes)
}

/// One episode trained from the transfer pool: the agent explores the
/// target environment, feeding each fresh transition into both its own
/// replay and the pool, while every update draws a pool minibatch,
/// filters it, trains on the kept part and prunes the rejected
/// transitions permanently. Falls back to own-replay updates when the
/// pool runs dry.
fn run_selection_episode<R: Rng>(
    agent: &mut Agent,
    env: &TraceEnv,
    epsilon: f64,
    capacity: usize,
    pool: &mut Vec<Experience>,
    inst: &mut SelectionInstrumentation,
    rng: &mut R,
) -> Result<crate::agent::EpisodeStats> {
    let order = env.jittered_order(rng);
    let mut stats = crate::agent::EpisodeStats::default();
    let mut state = DetectionState::initial(env.window(), env.feature_dim())
        .push(&env.rows[order[0]].features, ACTION_PASS)?;
    for k in 0..order.len() {
        let row = &env.rows[order[k]];
        let encoded = state.encode();
        let action = agent.select_action(&encoded, epsilon, rng)?;
        let reward = agent.cfg.reward.reward(action, row.label);
        stats.counts.record(action, row.label);
        stats.total_reward += reward;
        stats.steps += 1;
        let terminal = k + 1 == order.len();
        let next = if terminal {
            state.clone()
        } else {
            state.push(&env.rows[order[k + 1]].features, action)?
        };
        let exp = Experience {
            state: encoded,
            action,
            reward,
            next_state: next.encode(),
            terminal,
        };
        // Exploration flows into the pool alongside source samples, so
        // the filter sees both actions everywhere the agent has been.
        if pool.len() < capacity {
            pool.push(exp.clone());
            inst.own_added += 1;
        }
        agent.replay.push(exp);
        if pool.len() >= agent.cfg.minibatch {
            let idx = seeding::sample_distinct(rng, pool.len(), agent.cfg.minibatch);
            let mut kept: Vec<Experience> = Vec::new();
            let mut discard: Vec<usize> = Vec::new();
            for &i in &idx {
                inst.examined += 1;
                if selection_keep(agent, &pool[i])? {
                    inst.kept += 1;
                    kept.push(pool[i].clone());
                } else {
                    inst.discarded += 1;
                    discard.push(i);
                }
            }
            if !kept.is_empty() {
                let refs: Vec<&Experience> = kept.iter().collect();
                let loss = agent.update_on(&refs)?;
                inst.trained_from_pool += refs.len() as u64;
                stats.loss_sum += loss;
                stats.loss_count += 1;
            }
            discard.sort_unstable_by(|a, b| b.cmp(a));
            for i in discard {
                pool.swap_remove(i);
            }
        } else if agent.replay.len() >= agent.cfg.minibatch {
            if let Some(loss) = agent.train_step(rng)? {
                stats.loss_sum += loss;
                stats.loss_count += 1;
            }
        }
        state = next;
    }
    Ok(stats)
}

/// Top the pool back up after a selection episode: a configured share
/// comes from the target's own replay, the rest from source transitions
/// never offered before. Discarded transitions are gone for good.
fn refill_pool<R: Rng>(
    agent: &Agent,
    cfg: &TransferConfig,
    pool: &mut Vec<Experience>,
    reserve: &mut Vec<Experience>,
    inst: &mut SelectionInstrumentation,
    rng: &mut R,
) {
    let free = cfg.capacity.saturating_sub(pool.len());
    if free == 0 {
        return;
    }
    let own_quota = (math::round(cfg.own_fraction * free as f64) as usize)
        .min(agent.replay.len());
    let source_quota = (free - own_quota).min(reserve.len());
    let mut added = false;
    if source_quota > 0 {
        let mut idx = seeding::sample_distinct(rng, reserve.len(), source_quota);
        idx.sort_unstable_by(|a, b| b.cmp(a));
        for i in idx {
            pool.push(reserve.swap_remove(i));
        }
        added = true;
    }
    if own_quota > 0 {
        let idx = seeding::sample_distinct(rng, agent.replay.len(), own_quota);
        for i in idx {
            pool.push(agent.replay.get(i).clone());
        }
        inst.own_added += own_quota as u64;
        added = true;
    }
    if added {
        inst.refills += 1;
    }
}

/// Train the target agent over `total_episodes`. With trusted sources a
/// leading block of episodes trains from the transfer pool (built here),
/// the rest is plain replay training. With no sources the whole run is
/// plain training, bit-identical to a baseline on the same seeds.
pub fn train_target<R: Rng>(
    agent: &mut Agent,
    env: &TraceEnv,
    total_episodes: usize,
    cfg: &TransferConfig,
    sources: &[SourceHandle],
    agent_rng: &mut R,
    collect_rng: &mut R,
) -> Result<TransferRun> {
    cfg.validate()?;
    if total_episodes == 0 {
        return Err(Error::InvalidConfig(
            "total_episodes must be positive".to_string(),
        ));
    }
    let mut inst = SelectionInstrumentation::default();
    let mut episodes = Vec::with_capacity(total_episodes);
    if sources.is_empty() {
        for e in 0..total_episodes {
            let eps = epsilon_for(&agent.cfg, e, total_episodes);
            let st = agent.run_episode(env, eps, true, true, agent_rng)?;
            episodes.push(EpisodeRecord {
                episode: e,
                phase: Phase::PlainDqn,
                epsilon: eps,
                steps: st.steps,
                total_reward: st.total_reward,
                counts: st.counts,
                mean_loss: st.mean_loss(),
            });
        }
        return Ok(TransferRun {
            episodes,
            selection: inst,
            no_sources: true,
        });
    }

    let build = build_sample_pool(sources, cfg.capacity, &agent.cfg.reward, collect_rng)?;
    let mut pool = build.pool;
    let mut reserve = build.reserve;
    inst.pool_stats = build.stats;
    inst.pool_initial = pool.len();

    let sel_end = selection_episode_count(cfg, total_episodes);
    for e in 0..total_episodes {
        let eps = epsilon_for(&agent.cfg, e, total_episodes);
        let (phase, st) = if e < sel_end {
            if e > 0 {
                refill_pool(agent, cfg, &mut pool, &mut reserve, &mut inst, collect_rng);
            }
            let st = run_selection_episode(
                agent,
                env,
                eps,
                cfg.capacity,
                &mut pool,
                &mut inst,
                agent_rng,
            )?;
            (Phase::Selection, st)
        } else {
            let st = agent.run_episode(env, eps, true, true, agent_rng)?;
            (Phase::PlainDqn, st)
        };
        episodes.push(EpisodeRecord {
            episode: e,
            phase,
            epsilon: eps,
            steps: st.steps,
            total_reward: st.total_reward,
            counts: st.counts,
            mean_loss: st.mean_loss(),
        });
    }
    inst.pool_final = pool.len();
    Ok(TransferRun {
        episodes,
        selection: inst,
        no_sources: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{AgentConfig, EnvRow};
    use crate::net::NetworkSpec;

    /// Hand-built policy on window=1, d=1: flags iff the newest feature
    /// is positive. Gates are biased wide open and the cell weight is
    /// steep, so the hidden state carries the feature's sign.
    fn sign_oracle(flip: bool) -> NetworkParams {
        let spec = NetworkSpec {
            window: 1,
            feature_dim: 1,
            lstm_hidden: 1,
            dense: vec![],
        };
        let mut p = NetworkParams::zeros(spec).unwrap();
        // Layout: w_ih[4], w_hh[4], bias[4] (gates i,f,g,o), out w[2x2], out b[2].
        p.weights[2] = 5.0; // cell candidate weight on the feature
        p.weights[8] = 10.0; // input gate bias
        p.weights[11] = 10.0; // output gate bias
        let (lo, hi) = if flip { (1.0, -1.0) } else { (-1.0, 1.0) };
        p.weights[12] = lo; // q0 <- h
        p.weights[14] = hi; // q1 <- h
        p
    }

    /// `pos` rows labelled 1 with feature +1.5, `neg` labelled 0 at -1.5.
    fn two_class_env(pos: usize, neg: usize, window: usize) -> TraceEnv {
        let mut rows = Vec::new();
        for k in 0..pos.max(neg) {
            if k < neg {
                rows.push(EnvRow {
                    vehicle: 1,
                    recv_time: k as f64,
                    features: vec![-1.5],
                    label: 0,
                });
            }
            if k < pos {
                rows.push(EnvRow {
                    vehicle: 2,
                    recv_time: k as f64 + 0.4,
                    features: vec![1.5],
                    label: 1,
                });
            }
        }
        TraceEnv::from_rows(rows, window, 1.0).unwrap()
    }

    fn tiny_cfg() -> AgentConfig {
        let mut cfg = AgentConfig::new(NetworkSpec {
            window: 1,
            feature_dim: 1,
            lstm_hidden: 4,
            dense: vec![4],
        });
        cfg.gamma = 0.5;
        cfg.minibatch = 4;
        cfg.replay_capacity = 1024;
        cfg.target_sync = 25;
        cfg
    }

    #[test]
    fn oracle_probe_return_is_pure_bookkeeping() {
        let env = two_class_env(30, 70, 1);
        let oracle = sign_oracle(false);
        let reward = RewardConfig::default();
        // 30 correct flags at +1.0, 70 correct passes at +0.5, twice.
        let g = probe_return(&oracle, &env, &reward, 2).unwrap();
        assert_eq!(g, 2.0 * (30.0 * 1.0 + 70.0 * 0.5));
        let wrong = sign_oracle(true);
        let g_wrong = probe_return(&wrong, &env, &reward, 2).unwrap();
        assert_eq!(g_wrong, 2.0 * (-30.0 * 1.0 - 70.0 * 0.5));
        let report = rank_sources(&[g, g_wrong], 0.5).unwrap();
        assert_eq!(report.entries[1].rank, 2);
        assert!(!report.entries[1].selected);
    }

    #[test]
    fn min_max_scaling_matches_arithmetic() {
        assert_eq!(min_max_scale(&[2.0, 5.0, 8.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(min_max_scale(&[3.0, 3.0]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(min_max_scale(&[7.0]).unwrap(), vec![1.0]);
        assert!(min_max_scale(&[]).is_err());
        assert!(min_max_scale(&[f64::NAN]).is_err());
    }

    #[test]
    fn ranking_selects_at_or_above_threshold() {
        let report = rank_sources(&[2.0, 5.0, 8.0], 0.5).unwrap();
        let trusts: Vec<f64> = report.entries.iter().map(|e| e.trust).collect();
        assert_eq!(trusts, vec![0.0, 0.5, 1.0]);
        assert_eq!(report.selected_sources(), vec![1, 2]);
        let ranks: Vec<usize> = report.entries.iter().map(|e| e.rank).collect();
        assert_eq!(ranks, vec![3, 2, 1]);
        // Raising the threshold never adds a source.
        let strict = rank_sources(&[2.0, 5.0, 8.0], 0.8).unwrap();
        assert_eq!(strict.selected_sources(), vec![2]);
    }

    #[test]
    fn allocation_follows_trust_with_exact_total() {
        assert_eq!(
            sample_allocation(&[0.9, 0.6, 0.5], 2000).unwrap(),
            vec![900, 600, 500]
        );
        assert_eq!(sample_allocation(&[0.7], 123).unwrap(), vec![123]);
        assert_eq!(sample_allocation(&[1.0, 1.0], 1001).unwrap(), vec![501, 500]);
        assert!(matches!(
            sample_allocation(&[0.0, 0.0], 10),
            Err(Error::ZeroTrustMass)
        ));
        let mut rng = seeding::stream(1, "alloc", 0);
        for case in 0..100 {
            let k = rng.random_range(1..6);
            let trusts: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
            let size = rng.random_range(0..5000);
            let counts = sample_allocation(&trusts, size).unwrap();
            assert_eq!(counts.iter().sum::<usize>(), size, "case {case}");
        }
    }

    #[test]
    fn collected_samples_use_collector_rewards() {
        let env = two_class_env(10, 10, 1);
        let oracle = sign_oracle(false);
        let reward = RewardConfig { true_neg: 0.25, ..RewardConfig::default() };
        let mut rng = seeding::stream(2, "collect", 0);
        let all = collect_source_samples(&oracle, &env, &env, &reward, 999, &mut rng).unwrap();
        assert_eq!(all.len(), env.len());
        // An oracle makes no mistakes: rewards are the two positive ones.
        assert!(all.iter().all(|e| e.reward == 1.0 || e.reward == 0.25));
        assert!(all.iter().any(|e| e.reward == 0.25));
        assert_eq!(all.iter().filter(|e| e.terminal).count(), 1);
        let none = collect_source_samples(&oracle, &env, &env, &reward, 0, &mut rng).unwrap();
        assert!(none.is_empty());
        let some = collect_source_samples(&oracle, &env, &env, &reward, 7, &mut rng).unwrap();
        assert_eq!(some.len(), 7);
    }

    #[test]
    fn cross_view_collection_stores_in_target_shape() {
        // Source acts on a 2-wide view, experiences stored in a 1-wide one.
        let act = {
            let mut rows = Vec::new();
            for k in 0..12 {
                rows.push(EnvRow {
                    vehicle: 1 + (k % 2) as u64,
                    recv_time: k as f64,
                    features: vec![if k % 2 == 0 { -1.5 } else { 1.5 }, 0.3],
                    label: (k % 2) as u8,
                });
            }
            TraceEnv::from_rows(rows, 1, 1.0).unwrap()
        };
        let store = {
            let rows = act
                .rows
                .iter()
                .map(|r| EnvRow {
                    vehicle: r.vehicle,
                    recv_time: r.recv_time,
                    features: vec![r.features[0]],
                    label: r.label,
                })
                .collect();
            TraceEnv::from_rows(rows, 1, 1.0).unwrap()
        };
        let spec = NetworkSpec {
            window: 1,
            feature_dim: 2,
            lstm_hidden: 3,
            dense: vec![],
        };
        let mut rng = seeding::stream(3, "collect", 0);
        let params = NetworkParams::init(spec, &mut rng).unwrap();
        let reward = RewardConfig::default();
        let got =
            collect_source_samples(&params, &act, &store, &reward, 999, &mut rng).unwrap();
        assert_eq!(got.len(), 12);
        let target_len = DetectionState::initial(1, 1).encoded_len();
        assert!(got.iter().all(|e| e.state.len() == target_len));
    }

    #[test]
    fn selection_predicate_is_a_lower_bound() {
        let mut rng = seeding::stream(4, "select", 0);
        let mut agent = Agent::new(tiny_cfg(), &mut rng).unwrap();
        let n = agent.online.weights.len();
        agent.online.weights = vec![0.0; n];
        agent.target.weights = vec![0.0; n];
        let exp = |r: f64| Experience {
            state: vec![0.0; agent.cfg.net.input_len()],
            action: 0,
            reward: r,
            next_state: vec![0.0; agent.cfg.net.input_len()],
            terminal: true,
        };
        // Zero net values everything at 0: a positive return is still
        // unlearned (kept), a negative one is already overestimated
        // (dropped), and a sample sitting exactly on the estimate has
        // nothing left to teach (dropped).
        assert!(selection_keep(&agent, &exp(1.0)).unwrap());
        assert!(!selection_keep(&agent, &exp(-0.5)).unwrap());
        assert!(!selection_keep(&agent, &exp(0.0)).unwrap(), "boundary equality dropped");
    }

    #[test]
    fn pool_build_redistributes_and_reports_shortfall() {
        let env = two_class_env(8, 8, 1);
        let oracle = sign_oracle(false);
        let reward = RewardConfig::default();
        let handles = |t1: f64, t2: f64| {
            vec![
                SourceHandle {
                    params: &oracle,
                    act_env: &env,
                    store_env: &env,
                    trust: t1,
                },
                SourceHandle {
                    params: &oracle,
                    act_env: &env,
                    store_env: &env,
                    trust: t2,
                },
            ]
        };
        let mut rng = seeding::stream(5, "pool", 0);
        // Even trusts, tight capacity: a 5/5 split of 16+16 available.
        let b = build_sample_pool(&handles(1.0, 1.0), 10, &reward, &mut rng).unwrap();
        assert_eq!(b.stats.collected, vec![5, 5]);
        assert_eq!(b.pool.len(), 10);
        assert_eq!(b.reserve.len(), 22);
        assert_eq!(b.stats.shortfall, 0);
        // Skewed trusts.
        let b = build_sample_pool(&handles(0.9, 0.1), 10, &reward, &mut rng).unwrap();
        assert_eq!(b.stats.collected, vec![9, 1]);
        // Capacity beyond availability: everything taken, rest reported.
        let b = build_sample_pool(&handles(1.0, 1.0), 50, &reward, &mut rng).unwrap();
        assert_eq!(b.stats.collected, vec![16, 16]);
        assert_eq!(b.stats.shortfall, 50 - 32);
        assert!(b.reserve.is_empty());
    }

    #[test]
    fn no_sources_is_bit_identical_to_plain_training() {
        let env = two_class_env(20, 20, 1);
        let episodes = 6;
        let mut init_a = seeding::stream(6, "tt-init", 0);
        let mut a = Agent::new(tiny_cfg(), &mut init_a).unwrap();
        let mut ra = seeding::stream(6, "tt-run", 0);
        let mut ca = seeding::stream(6, "tt-collect", 0);
        let run = train_target(
            &mut a,
            &env,
            episodes,
            &TransferConfig::default(),
            &[],
            &mut ra,
            &mut ca,
        )
        .unwrap();
        assert!(run.no_sources);
        assert_eq!(run.episodes.len(), episodes);
        assert!(run.episodes.iter().all(|e| e.phase == Phase::PlainDqn));

        let mut init_b = seeding::stream(6, "tt-init", 0);
        let mut b = Agent::new(tiny_cfg(), &mut init_b).unwrap();
        let mut rb = seeding::stream(6, "tt-run", 0);
        for e in 0..episodes {
            let eps = epsilon_for(&b.cfg, e, episodes);
            b.run_episode(&env, eps, true, true, &mut rb).unwrap();
        }
        assert_eq!(a.online.weights, b.online.weights);
        assert_eq!(a.target.weights, b.target.weights);
    }

    #[test]
    fn transfer_run_phases_and_instrumentation() {
        let env = two_class_env(20, 20, 1);
        let oracle = sign_oracle(false);
        let episodes = 10;
        let cfg = TransferConfig { capacity: 64, ..TransferConfig::default() };
        let sources = vec![SourceHandle {
            params: &oracle,
            act_env: &env,
            store_env: &env,
            trust: 1.0,
        }];
        let mut init = seeding::stream(7, "tt-init", 0);
        let mut agent = Agent::new(tiny_cfg(), &mut init).unwrap();
        let mut arng = seeding::stream(7, "tt-run", 0);
        let mut crng = seeding::stream(7, "tt-collect", 0);
        let run = train_target(
            &mut agent,
            &env,
            episodes,
            &cfg,
            &sources,
            &mut arng,
            &mut crng,
        )
        .unwrap();
        assert!(!run.no_sources);
        assert_eq!(run.episodes.len(), episodes);
        let sel = run
            .episodes
            .iter()
            .filter(|e| e.phase == Phase::Selection)
            .count();
        assert_eq!(sel, selection_episode_count(&cfg, episodes));
        assert_eq!(sel, 4);
        assert!(run.episodes[..sel].iter().all(|e| e.phase == Phase::Selection));
        assert!(run.episodes[sel..].iter().all(|e| e.phase == Phase::PlainDqn));
        // Both environments contribute their full 20+20 transitions.
        assert_eq!(run.selection.pool_initial, 40);
        assert_eq!(
            run.selection.examined,
            run.selection.kept + run.selection.discarded
        );
        assert!(run.selection.examined > 0);
        assert!(run.selection.pool_final <= cfg.capacity);
        assert!(agent.online.weights.iter().all(|w| w.is_finite()));
    }

    #[test]
    fn refills_tap_reserve_and_own_replay() {
        let env = two_class_env(30, 30, 1);
        let cfg = TransferConfig { capacity: 100, ..TransferConfig::default() };
        let mut init = seeding::stream(8, "tt-init", 0);
        let mut agent = Agent::new(tiny_cfg(), &mut init).unwrap();
        let mut arng = seeding::stream(8, "tt-run", 0);
        // Seed the agent's replay with one exploratory episode.
        agent.run_episode(&env, 1.0, true, true, &mut arng).unwrap();
        let own_available = agent.replay.len();
        assert!(own_available > 0);

        let mut pool: Vec<Experience> = Vec::new();
        let mut reserve: Vec<Experience> = (0..40)
            .map(|k| Experience {
                state: vec![0.0; agent.cfg.net.input_len()],
                action: k % 2,
                reward: 1.0,
                next_state: vec![0.0; agent.cfg.net.input_len()],
                terminal: false,
            })
            .collect();
        let mut inst = SelectionInstrumentation::default();
        let mut crng = seeding::stream(8, "tt-collect", 0);
        refill_pool(&agent, &cfg, &mut pool, &mut reserve, &mut inst, &mut crng);

        // 25% of the 100 free slots from own replay, the rest from the
        // reserve (capped by its 40 entries).
        assert_eq!(inst.refills, 1);
        assert_eq!(inst.own_added, 25.min(own_available as u64));
        assert_eq!(reserve.len(), 0);
        assert_eq!(pool.len(), 40 + 25.min(own_available));
    }
}
