//! End-to-end collaborative-detection scenarios.
//!
//! Three setups share one driver. `sc1`: a single attack trace is split
//! by time, sources see the early slices and the target learns to catch
//! the same attack later. `sc2`: sources train on a wider mix of
//! flooding variants than the target, whose test set holds the variant
//! it never saw. `sc3`: sources observe full feature vectors while the
//! target trains on a single feature column, and is tested across every
//! variant of the attack family.
//!
//! Each run trains the source detectors (optionally poisoning the
//! malicious one), trust-scores them on the target's probe slice, trains
//! the target with selective transfer plus a matched-seed baseline, and
//! evaluates everything on the scenario's test set. All randomness
//! derives from the one configured seed, so identical configs produce
//! identical bundles.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::adversary::{
    build_adversarial_policy, data_prefix, flip_labels, AttackKind, AttackManifest, FlipConfig,
    InductionConfig, PolicyInductionAttack,
};
use crate::agent::{evaluate, Agent, AgentConfig, GreedyPolicy, RewardConfig, TraceEnv};
use crate::error::{Error, Result};
use crate::metrics::{metrics, ConfusionCounts, MetricsRow};
use crate::net::{NetworkParams, NetworkSpec};
use crate::seeding;
use crate::split::{split_by_time, SplitPlan};
use crate::synth::{generate, GenConfig};
use crate::trace::{featurize_stream, AttackType, BsmRecord, FeatureConfig, Standardizer};
use crate::transfer::{
    probe_return, rank_sources, train_target, EpisodeRecord, SelectionInstrumentation,
    SourceHandle, TransferConfig, TrustReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioId {
    Sc1,
    Sc2,
    Sc3,
}

impl ScenarioId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioId::Sc1 => "sc1",
            ScenarioId::Sc2 => "sc2",
            ScenarioId::Sc3 => "sc3",
        }
    }

    pub fn parse(s: &str) -> Option<ScenarioId> {
        match s {
            "sc1" => Some(ScenarioId::Sc1),
            "sc2" => Some(ScenarioId::Sc2),
            "sc3" => Some(ScenarioId::Sc3),
            _ => None,
        }
    }
}

/// Agent hyperparameters without the network shape; the scenario driver
/// derives per-role shapes (feature width differs between roles in sc3).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentTuning {
    pub reward: RewardConfig,
    pub gamma: f64,
    pub lr: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_fraction: f64,
    pub replay_capacity: usize,
    pub minibatch: usize,
    pub target_sync: u64,
    pub grad_clip: f64,
}

impl Default for AgentTuning {
    fn default() -> Self {
        let base = AgentConfig::new(NetworkSpec {
            window: 1,
            feature_dim: 1,
            lstm_hidden: 1,
            dense: vec![],
        });
        AgentTuning {
            reward: base.reward,
            gamma: base.gamma,
            lr: base.lr,
            epsilon_start: base.epsilon_start,
            epsilon_end: base.epsilon_end,
            epsilon_fraction: base.epsilon_fraction,
            replay_capacity: base.replay_capacity,
            minibatch: base.minibatch,
            target_sync: base.target_sync,
            grad_clip: base.grad_clip,
        }
    }
}

impl AgentTuning {
    pub fn agent_config(&self, net: NetworkSpec) -> AgentConfig {
        let mut cfg = AgentConfig::new(net);
        cfg.reward = self.reward;
        cfg.gamma = self.gamma;
        cfg.lr = self.lr;
        cfg.epsilon_start = self.epsilon_start;
        cfg.epsilon_end = self.epsilon_end;
        cfg.epsilon_fraction = self.epsilon_fraction;
        cfg.replay_capacity = self.replay_capacity;
        cfg.minibatch = self.minibatch;
        cfg.target_sync = self.target_sync;
        cfg.grad_clip = self.grad_clip;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub scenario: ScenarioId,
    pub seed: u64,
    /// Poisoning applied to the last source. `None` makes every source
    /// genuine. Ignored in full-table mode, which runs both kinds.
    pub adversary: AttackKind,
    /// Run the whole comparison table (flip, induction, genuine-only
    /// threshold) instead of a single variant.
    pub full_table: bool,
    pub trust_threshold: f64,
    /// Threshold for the full table's genuine-only row.
    pub genuine_only_threshold: f64,
    pub n_sources: usize,
    pub source_episodes: usize,
    pub target_episodes: usize,
    /// Vehicles per generated trace.
    pub vehicles: usize,
    /// Seconds of traffic per source slice.
    pub duration: f64,
    pub misbehaving_fraction: f64,
    /// Time share of the shared sc1 trace given to the target.
    pub sc1_target_fraction: f64,
    /// Share of the target's data held out for trust probing.
    pub probe_fraction: f64,
    /// Share of the target's sc1 slice held out for testing; sc2 and sc3
    /// test on dedicated traces instead.
    pub sc1_test_fraction: f64,
    pub window: usize,
    pub lstm_hidden: usize,
    pub dense: Vec<usize>,
    /// Span of the per-vehicle arrival jitter applied when an episode
    /// reshuffles its trace, in seconds.
    pub jitter_span: f64,
    pub tuning: AgentTuning,
    pub transfer: TransferConfig,
    pub flip: FlipConfig,
    pub induction: InductionConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            scenario: ScenarioId::Sc1,
            seed: 1,
            adversary: AttackKind::Flip,
            full_table: false,
            trust_threshold: 0.5,
            genuine_only_threshold: 0.8,
            n_sources: 3,
            source_episodes: 120,
            target_episodes: 80,
            vehicles: 60,
            duration: 120.0,
            misbehaving_fraction: 0.3,
            sc1_target_fraction: 0.1,
            probe_fraction: 0.2,
            sc1_test_fraction: 0.2,
            window: 4,
            lstm_hidden: 32,
            dense: vec![32],
            jitter_span: 1.0,
            tuning: AgentTuning::default(),
            transfer: TransferConfig::default(),
            flip: FlipConfig::default(),
            induction: InductionConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sources == 0 {
            return Err(Error::InvalidConfig("need at least one source".to_string()));
        }
        if self.source_episodes == 0 || self.target_episodes == 0 {
            return Err(Error::InvalidConfig(
                "episode budgets must be positive".to_string(),
            ));
        }
        for (name, v) in [
            ("trust_threshold", self.trust_threshold),
            ("genuine_only_threshold", self.genuine_only_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, 1]")));
            }
        }
        for (name, v) in [
            ("sc1_target_fraction", self.sc1_target_fraction),
            ("probe_fraction", self.probe_fraction),
            ("sc1_test_fraction", self.sc1_test_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidConfig(format!("{name} must be in (0, 1)")));
            }
        }
        if self.probe_fraction + self.sc1_test_fraction >= 1.0 {
            return Err(Error::InvalidConfig(
                "probe and test fractions leave no training data".to_string(),
            ));
        }
        self.net_spec(1).validate()?;
        self.tuning.agent_config(self.net_spec(1)).validate()?;
        self.transfer.validate()?;
        self.flip.validate()?;
        self.induction.validate()?;
        Ok(())
    }

    pub fn net_spec(&self, feature_dim: usize) -> NetworkSpec {
        NetworkSpec {
            window: self.window,
            feature_dim,
            lstm_hidden: self.lstm_hidden,
            dense: self.dense.clone(),
        }
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            // Flooding variants differ only in message frequency, so the
            // inter-arrival feature must be on for sc2.
            include_interarrival: self.scenario == ScenarioId::Sc2,
            ..FeatureConfig::default()
        }
    }

    pub fn source_view(&self) -> Vec<usize> {
        (0..self.feature_config().dim()).collect()
    }

    pub fn target_view(&self) -> Vec<usize> {
        match self.scenario {
            // Position norm only: the target sees one column of the
            // space the sources were trained on.
            ScenarioId::Sc3 => vec![0],
            _ => self.source_view(),
        }
    }
}

/// Per-role record sets, ready for feature extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioData {
    pub source_train: Vec<Vec<BsmRecord>>,
    pub target_train: Vec<BsmRecord>,
    pub probe: Vec<BsmRecord>,
    pub test: Vec<BsmRecord>,
}

fn gen_seed(cfg: &ScenarioConfig, index: u64) -> u64 {
    use rand::Rng;
    seeding::stream(cfg.seed, "gen", index).random()
}

fn gen_trace(
    cfg: &ScenarioConfig,
    mix: &[AttackType],
    duration: f64,
    seed: u64,
) -> Result<Vec<BsmRecord>> {
    let gen = GenConfig {
        n_vehicles: cfg.vehicles,
        misbehaving_fraction: cfg.misbehaving_fraction,
        duration,
        attack_mix: mix.to_vec(),
        seed,
        ..GenConfig::default()
    };
    // The mix cycles over attackers; fewer attackers than variants would
    // silently drop variants the scenario depends on.
    if gen.misbehaving_count() < mix.len() {
        return Err(Error::InsufficientData(format!(
            "{} misbehaving vehicles cannot cover {} attack variants",
            gen.misbehaving_count(),
            mix.len()
        )));
    }
    Ok(generate(&gen)?.0)
}

const SC2_SOURCE_MIX: [AttackType; 3] = [
    AttackType::DoS,
    AttackType::DoSRandom,
    AttackType::DoSRandomSybil,
];
const SC2_TARGET_MIX: [AttackType; 2] = [AttackType::DoS, AttackType::DoSRandom];
const SC2_TEST_MIX: [AttackType; 1] = [AttackType::DoSRandomSybil];

const SC3_SOURCE_ATTACKS: [AttackType; 3] = [
    AttackType::ConstantPositionOffset,
    AttackType::RandomPosition,
    AttackType::RandomPositionOffset,
];
const SC3_TARGET_MIX: [AttackType; 1] = [AttackType::ConstantPosition];
const SC3_TEST_MIX: [AttackType; 4] = [
    AttackType::ConstantPosition,
    AttackType::ConstantPositionOffset,
    AttackType::RandomPosition,
    AttackType::RandomPositionOffset,
];

/// Generate the per-role record sets for the configured scenario.
pub fn synth_data(cfg: &ScenarioConfig) -> Result<ScenarioData> {
    cfg.validate()?;
    let n = cfg.n_sources;
    match cfg.scenario {
        ScenarioId::Sc1 => {
            let src_frac = (1.0 - cfg.sc1_target_fraction) / n as f64;
            let total_duration = cfg.duration / src_frac;
            let trace = gen_trace(
                cfg,
                &[AttackType::RandomPosition],
                total_duration,
                gen_seed(cfg, 0),
            )?;
            let mut fractions = vec![src_frac; n];
            fractions.push(cfg.sc1_target_fraction);
            let mut slices = split_by_time(&trace, &SplitPlan(fractions))?;
            let target_slice = slices.pop().expect("plan has a target slice");
            let train_frac = 1.0 - cfg.probe_fraction - cfg.sc1_test_fraction;
            let mut sub = split_by_time(
                &target_slice,
                &SplitPlan(vec![train_frac, cfg.probe_fraction, cfg.sc1_test_fraction]),
            )?;
            let test = sub.pop().expect("three-way plan");
            let probe = sub.pop().expect("three-way plan");
            let train = sub.pop().expect("three-way plan");
            Ok(ScenarioData {
                source_train: slices,
                target_train: train,
                probe,
                test,
            })
        }
        ScenarioId::Sc2 | ScenarioId::Sc3 => {
            let sc3 = cfg.scenario == ScenarioId::Sc3;
            let mut source_train = Vec::with_capacity(n);
            for i in 0..n {
                let mix: Vec<AttackType> = if sc3 {
                    vec![SC3_SOURCE_ATTACKS[i % SC3_SOURCE_ATTACKS.len()]]
                } else {
                    SC2_SOURCE_MIX.to_vec()
                };
                source_train.push(gen_trace(cfg, &mix, cfg.duration, gen_seed(cfg, i as u64))?);
            }
            let target_mix: &[AttackType] = if sc3 { &SC3_TARGET_MIX } else { &SC2_TARGET_MIX };
            let target_trace = gen_trace(cfg, target_mix, cfg.duration, gen_seed(cfg, n as u64))?;
            let mut sub = split_by_time(
                &target_trace,
                &SplitPlan(vec![1.0 - cfg.probe_fraction, cfg.probe_fraction]),
            )?;
            let probe = sub.pop().expect("two-way plan");
            let train = sub.pop().expect("two-way plan");
            let test_mix: &[AttackType] = if sc3 { &SC3_TEST_MIX } else { &SC2_TEST_MIX };
            let test = gen_trace(cfg, test_mix, cfg.duration / 2.0, gen_seed(cfg, n as u64 + 1))?;
            Ok(ScenarioData {
                source_train,
                target_train: train,
                probe,
                test,
            })
        }
    }
}

/// One source training run kept in the result bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedSource {
    pub name: String,
    pub attack: AttackManifest,
    pub params: NetworkParams,
    pub standardizer: Standardizer,
    pub episodes: Vec<EpisodeRecord>,
}

/// One target training run: either the baseline or a transfer variant.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantResult {
    pub name: String,
    pub adversary: AttackKind,
    pub trust_threshold: f64,
    /// Source names aligned with the trust entries.
    pub roster: Vec<String>,
    pub trust: Option<TrustReport>,
    pub episodes: Vec<EpisodeRecord>,
    pub selection: Option<SelectionInstrumentation>,
    pub params: NetworkParams,
    pub test_counts: ConfusionCounts,
    pub test_metrics: MetricsRow,
    pub test_reward: f64,
    /// First episode (1-based) whose reward reached the baseline's best.
    pub episodes_to_baseline_best: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioBundle {
    pub scenario: ScenarioId,
    pub seed: u64,
    pub source_episodes: usize,
    pub target_episodes: usize,
    pub sources: Vec<TrainedSource>,
    /// Fitted on the target's training slice; shared by the baseline and
    /// every transfer variant.
    pub target_standardizer: Standardizer,
    pub baseline_best_return: f64,
    pub baseline: VariantResult,
    pub variants: Vec<VariantResult>,
}

/// Fit feature standardization over `records`, restricted to `view`.
pub fn fit_standardizer(
    records: &[BsmRecord],
    fc: FeatureConfig,
    view: &[usize],
) -> Result<Standardizer> {
    let full = featurize_stream(records, fc)?;
    let rows: Vec<Vec<f64>> = full
        .iter()
        .map(|f| view.iter().map(|&i| f[i]).collect())
        .collect();
    Standardizer::fit(&rows)
}

/// A trained source plus everything needed to probe it and collect its
/// experiences for one variant.
struct RosterEntry<'a> {
    trained: &'a TrainedSource,
    records: &'a [BsmRecord],
    env: &'a TraceEnv,
}

pub struct SourceTraining {
    pub trained: TrainedSource,
    pub env: TraceEnv,
}

/// Train one source detector with plain replay learning, optionally
/// poisoned. `slot` is the source's position (streams and names).
pub fn train_source(
    cfg: &ScenarioConfig,
    records: &[BsmRecord],
    slot: usize,
    kind: AttackKind,
) -> Result<(SourceTraining, Vec<BsmRecord>)> {
    let fc = cfg.feature_config();
    let view = cfg.source_view();
    let mut train_records = records.to_vec();
    let mut manifest = AttackManifest::None;
    if kind == AttackKind::Flip {
        let mut rng = seeding::stream(cfg.seed, "flip", slot as u64);
        let summary = flip_labels(&mut train_records, cfg.flip.fraction, &mut rng)?;
        manifest = AttackManifest::Flip {
            fraction: cfg.flip.fraction,
            misbehaving_vehicles: summary.misbehaving_vehicles,
            flipped_vehicles: summary.flipped_vehicles.clone(),
            flipped_records: summary.flipped_records,
            seed: cfg.seed,
        };
    }
    let standardizer = fit_standardizer(&train_records, fc, &view)?;
    let env = TraceEnv::build(
        &train_records,
        fc,
        &view,
        &standardizer,
        cfg.window,
        cfg.jitter_span,
    )?;
    let acfg = cfg.tuning.agent_config(cfg.net_spec(view.len()));
    let mut init = seeding::stream(cfg.seed, "source-init", slot as u64);
    let mut agent = Agent::new(acfg.clone(), &mut init)?;

    if kind == AttackKind::Induction {
        let prefix = data_prefix(&train_records, cfg.induction.data_fraction)?;
        let adv_env = TraceEnv::build(
            prefix,
            fc,
            &view,
            &standardizer,
            cfg.window,
            cfg.jitter_span,
        )?;
        let adv_episodes = cfg.induction.episodes.unwrap_or(cfg.source_episodes);
        let mut adv_rng = seeding::stream(cfg.seed, "induction-adv", slot as u64);
        let adv_policy = build_adversarial_policy(&adv_env, &acfg, adv_episodes, &mut adv_rng)?;
        let mut replica_rng = seeding::stream(cfg.seed, "induction-replica", slot as u64);
        let hook =
            PolicyInductionAttack::new(adv_policy, &acfg, cfg.induction.epsilon, &mut replica_rng)?;
        agent.install_hook(Box::new(hook))?;
    }

    let mut run_rng = seeding::stream(cfg.seed, "source-run", slot as u64);
    let mut collect_rng = seeding::stream(cfg.seed, "source-collect", slot as u64);
    let run = train_target(
        &mut agent,
        &env,
        cfg.source_episodes,
        &cfg.transfer,
        &[],
        &mut run_rng,
        &mut collect_rng,
    )?;

    if kind == AttackKind::Induction {
        let hook = agent.take_hook().expect("hook installed above");
        let attack = hook
            .as_any()
            .downcast_ref::<PolicyInductionAttack>()
            .expect("induction hook");
        let stats = attack.stats();
        manifest = AttackManifest::Induction {
            epsilon: cfg.induction.epsilon,
            data_fraction: cfg.induction.data_fraction,
            adversary_episodes: cfg.induction.episodes.unwrap_or(cfg.source_episodes),
            crafted: stats.crafted,
            adv_flag: stats.adv_flag,
            max_abs_delta: stats.max_abs_delta,
            replica_updates: stats.replica_updates,
            seed: cfg.seed,
        };
    }

    let suffix = match kind {
        AttackKind::None => String::new(),
        AttackKind::Flip => "-flip".to_string(),
        AttackKind::Induction => "-induction".to_string(),
    };
    let trained = TrainedSource {
        name: format!("source-{}{suffix}", slot + 1),
        attack: manifest,
        params: agent.online,
        standardizer,
        episodes: run.episodes,
    };
    Ok((
        SourceTraining { trained, env },
        train_records,
    ))
}

struct TargetContext {
    acfg: AgentConfig,
    env: TraceEnv,
    test_env: TraceEnv,
    standardizer: Standardizer,
}

fn target_context(cfg: &ScenarioConfig, data: &ScenarioData) -> Result<TargetContext> {
    let fc = cfg.feature_config();
    let view = cfg.target_view();
    let standardizer = fit_standardizer(&data.target_train, fc, &view)?;
    let env = TraceEnv::build(
        &data.target_train,
        fc,
        &view,
        &standardizer,
        cfg.window,
        cfg.jitter_span,
    )?;
    let test_env = TraceEnv::build(
        &data.test,
        fc,
        &view,
        &standardizer,
        cfg.window,
        cfg.jitter_span,
    )?;
    let acfg = cfg.tuning.agent_config(cfg.net_spec(view.len()));
    Ok(TargetContext {
        acfg,
        env,
        test_env,
        standardizer,
    })
}

/// Train the target once — with the given roster (possibly empty for the
/// baseline) — and evaluate it on the test environment.
fn run_variant(
    cfg: &ScenarioConfig,
    data: &ScenarioData,
    ctx: &TargetContext,
    name: String,
    adversary: AttackKind,
    threshold: f64,
    roster: &[RosterEntry],
) -> Result<VariantResult> {
    let fc = cfg.feature_config();
    let source_view = cfg.source_view();
    let target_view = cfg.target_view();

    let mut trust = None;
    let mut handles_data: Vec<(usize, f64, TraceEnv)> = Vec::new();
    if !roster.is_empty() {
        let mut returns = Vec::with_capacity(roster.len());
        for entry in roster {
            let probe_env = TraceEnv::build(
                &data.probe,
                fc,
                &source_view,
                &entry.trained.standardizer,
                cfg.window,
                cfg.jitter_span,
            )?;
            returns.push(probe_return(
                &entry.trained.params,
                &probe_env,
                &ctx.acfg.reward,
                cfg.transfer.probe_episodes,
            )?);
        }
        let report = rank_sources(&returns, threshold)?;
        for e in &report.entries {
            if e.selected {
                let store_env = TraceEnv::build(
                    roster[e.source].records,
                    fc,
                    &target_view,
                    &ctx.standardizer,
                    cfg.window,
                    cfg.jitter_span,
                )?;
                handles_data.push((e.source, e.trust, store_env));
            }
        }
        trust = Some(report);
    }
    let handles: Vec<SourceHandle> = handles_data
        .iter()
        .map(|(i, t, store_env)| SourceHandle {
            params: &roster[*i].trained.params,
            act_env: roster[*i].env,
            store_env,
            trust: *t,
        })
        .collect();

    let mut init = seeding::stream(cfg.seed, "target-init", 0);
    let mut agent = Agent::new(ctx.acfg.clone(), &mut init)?;
    let mut run_rng = seeding::stream(cfg.seed, "target-run", 0);
    let mut collect_rng = seeding::stream(cfg.seed, "target-collect", 0);
    let run = train_target(
        &mut agent,
        &ctx.env,
        cfg.target_episodes,
        &cfg.transfer,
        &handles,
        &mut run_rng,
        &mut collect_rng,
    )?;

    let outcome = evaluate(&GreedyPolicy(&agent.online), &ctx.test_env, &ctx.acfg.reward)?;
    let test_metrics = metrics(&outcome.counts)?;
    Ok(VariantResult {
        name,
        adversary,
        trust_threshold: threshold,
        roster: roster.iter().map(|e| e.trained.name.clone()).collect(),
        trust,
        episodes: run.episodes,
        selection: (!run.no_sources).then_some(run.selection),
        params: agent.online,
        test_counts: outcome.counts,
        test_metrics,
        test_reward: outcome.total_reward,
        episodes_to_baseline_best: None,
    })
}

fn roster_for<'a>(
    flavor: &'a (AttackKind, SourceTraining, Vec<BsmRecord>),
    genuine: &'a [(SourceTraining, Vec<BsmRecord>)],
) -> Vec<RosterEntry<'a>> {
    let mut roster: Vec<RosterEntry> = genuine
        .iter()
        .map(|(t, r)| RosterEntry {
            trained: &t.trained,
            records: r,
            env: &t.env,
        })
        .collect();
    roster.push(RosterEntry {
        trained: &flavor.1.trained,
        records: &flavor.2,
        env: &flavor.1.env,
    });
    roster
}

fn best_return(episodes: &[EpisodeRecord]) -> f64 {
    episodes
        .iter()
        .map(|e| e.total_reward)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn episodes_to_reach(episodes: &[EpisodeRecord], threshold: f64) -> Option<usize> {
    episodes
        .iter()
        .position(|e| e.total_reward >= threshold)
        .map(|i| i + 1)
}

/// Run the configured scenario on already-prepared record sets.
pub fn run_with_data(cfg: &ScenarioConfig, data: &ScenarioData) -> Result<ScenarioBundle> {
    cfg.validate()?;
    if data.source_train.len() != cfg.n_sources {
        return Err(Error::ShapeMismatch {
            context: "source record sets",
            expected: cfg.n_sources,
            got: data.source_train.len(),
        });
    }

    let ctx = target_context(cfg, data)?;
    let last = cfg.n_sources - 1;

    // Genuine trainings for every non-final slot, shared by all variants.
    let mut genuine: Vec<(SourceTraining, Vec<BsmRecord>)> = Vec::new();
    for (i, records) in data.source_train.iter().enumerate().take(last) {
        genuine.push(train_source(cfg, records, i, AttackKind::None)?);
    }

    // The last slot is trained once per adversary kind in play.
    let kinds: Vec<AttackKind> = if cfg.full_table {
        vec![AttackKind::Flip, AttackKind::Induction]
    } else {
        vec![cfg.adversary]
    };
    let mut flavors: Vec<(AttackKind, SourceTraining, Vec<BsmRecord>)> = Vec::new();
    for &kind in &kinds {
        let (training, records) = train_source(cfg, &data.source_train[last], last, kind)?;
        flavors.push((kind, training, records));
    }

    let baseline = run_variant(
        cfg,
        data,
        &ctx,
        "baseline".to_string(),
        AttackKind::None,
        cfg.trust_threshold,
        &[],
    )?;

    let mut variants = Vec::new();
    if cfg.full_table {
        for flavor in &flavors {
            let name = format!("{}-{:.2}", flavor.0.as_str(), cfg.trust_threshold);
            let roster = roster_for(flavor, &genuine);
            variants.push(run_variant(
                cfg,
                data,
                &ctx,
                name,
                flavor.0,
                cfg.trust_threshold,
                &roster,
            )?);
        }
        // Genuine-only row: same poisoned roster, stricter threshold.
        let flavor = &flavors[0];
        let name = format!("genuine-{:.2}", cfg.genuine_only_threshold);
        let roster = roster_for(flavor, &genuine);
        variants.push(run_variant(
            cfg,
            data,
            &ctx,
            name,
            flavor.0,
            cfg.genuine_only_threshold,
            &roster,
        )?);
    } else {
        let flavor = &flavors[0];
        let name = match flavor.0 {
            AttackKind::None => format!("all-genuine-{:.2}", cfg.trust_threshold),
            kind => format!("{}-{:.2}", kind.as_str(), cfg.trust_threshold),
        };
        let roster = roster_for(flavor, &genuine);
        variants.push(run_variant(
            cfg,
            data,
            &ctx,
            name,
            flavor.0,
            cfg.trust_threshold,
            &roster,
        )?);
    }

    let baseline_best = best_return(&baseline.episodes);
    let mut baseline = baseline;
    baseline.episodes_to_baseline_best = episodes_to_reach(&baseline.episodes, baseline_best);
    for v in &mut variants {
        v.episodes_to_baseline_best = episodes_to_reach(&v.episodes, baseline_best);
    }

    let mut sources: Vec<TrainedSource> =
        genuine.into_iter().map(|(t, _)| t.trained).collect();
    sources.extend(flavors.into_iter().map(|(_, t, _)| t.trained));

    Ok(ScenarioBundle {
        scenario: cfg.scenario,
        seed: cfg.seed,
        source_episodes: cfg.source_episodes,
        target_episodes: cfg.target_episodes,
        sources,
        target_standardizer: ctx.standardizer.clone(),
        baseline_best_return: baseline_best,
        baseline,
        variants,
    })
}

/// Generate data and run the scenario in one step.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioBundle> {
    let data = synth_data(cfg)?;
    run_with_data(cfg, &data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_cfg(id: ScenarioId) -> ScenarioConfig {
        let mut cfg = ScenarioConfig {
            scenario: id,
            seed: 11,
            n_sources: 2,
            source_episodes: 3,
            target_episodes: 5,
            vehicles: 8,
            misbehaving_fraction: 0.5,
            duration: 10.0,
            sc1_target_fraction: 0.25,
            probe_fraction: 0.25,
            sc1_test_fraction: 0.25,
            window: 2,
            lstm_hidden: 4,
            dense: vec![],
            ..ScenarioConfig::default()
        };
        cfg.tuning.gamma = 0.5;
        cfg.tuning.minibatch = 4;
        cfg.tuning.replay_capacity = 4096;
        cfg.tuning.target_sync = 20;
        cfg.transfer.capacity = 256;
        cfg.induction.episodes = Some(2);
        cfg
    }

    #[test]
    fn scenario_id_roundtrip() {
        for id in [ScenarioId::Sc1, ScenarioId::Sc2, ScenarioId::Sc3] {
            assert_eq!(ScenarioId::parse(id.as_str()), Some(id));
        }
        assert_eq!(ScenarioId::parse("sc4"), None);
    }

    #[test]
    fn default_config_is_valid() {
        ScenarioConfig::default().validate().unwrap();
    }

    #[test]
    fn sc1_slices_precede_target_and_partition() {
        let cfg = micro_cfg(ScenarioId::Sc1);
        let data = synth_data(&cfg).unwrap();
        assert_eq!(data.source_train.len(), 2);
        for part in [&data.target_train, &data.probe, &data.test] {
            assert!(!part.is_empty());
        }
        let src_max = data
            .source_train
            .iter()
            .flatten()
            .map(|r| r.recv_time)
            .fold(f64::NEG_INFINITY, f64::max);
        let tgt_min = data
            .target_train
            .iter()
            .chain(&data.probe)
            .chain(&data.test)
            .map(|r| r.recv_time)
            .fold(f64::INFINITY, f64::min);
        assert!(src_max <= tgt_min);
    }

    #[test]
    fn sc2_target_training_excludes_the_unseen_variant() {
        let cfg = micro_cfg(ScenarioId::Sc2);
        let data = synth_data(&cfg).unwrap();
        let has = |records: &[BsmRecord], at: AttackType| {
            records.iter().any(|r| r.attack_type == at)
        };
        assert!(!has(&data.target_train, AttackType::DoSRandomSybil));
        assert!(!has(&data.probe, AttackType::DoSRandomSybil));
        assert!(has(&data.test, AttackType::DoSRandomSybil));
        for records in &data.source_train {
            assert!(has(records, AttackType::DoSRandomSybil));
        }
        assert_eq!(cfg.feature_config().dim(), 5);
    }

    #[test]
    fn sc3_target_sees_one_feature_column() {
        let cfg = micro_cfg(ScenarioId::Sc3);
        assert_eq!(cfg.target_view(), vec![0]);
        assert_eq!(cfg.source_view().len(), 4);
        let data = synth_data(&cfg).unwrap();
        let ctx = target_context(&cfg, &data).unwrap();
        assert_eq!(ctx.env.feature_dim(), 1);
        assert_eq!(ctx.test_env.feature_dim(), 1);
        let kinds: alloc::collections::BTreeSet<&str> = data
            .test
            .iter()
            .filter(|r| r.label == 1)
            .map(|r| r.attack_type.as_str())
            .collect();
        assert_eq!(kinds.len(), 4);
    }

    #[test]
    fn single_variant_bundle_shape_and_determinism() {
        let cfg = micro_cfg(ScenarioId::Sc1);
        let a = run_scenario(&cfg).unwrap();
        assert_eq!(a.variants.len(), 1);
        assert_eq!(a.variants[0].name, "flip-0.50");
        assert_eq!(a.baseline.episodes.len(), cfg.target_episodes);
        assert_eq!(a.variants[0].episodes.len(), cfg.target_episodes);
        let trust = a.variants[0].trust.as_ref().unwrap();
        assert_eq!(trust.entries.len(), cfg.n_sources);
        assert_eq!(a.variants[0].roster, vec!["source-1", "source-2-flip"]);
        assert!(matches!(
            a.sources.last().unwrap().attack,
            AttackManifest::Flip { .. }
        ));
        assert!(a.baseline.trust.is_none());
        assert!(a.variants[0].test_metrics.accuracy.is_finite());
        assert!(a.baseline_best_return.is_finite());

        let b = run_scenario(&cfg).unwrap();
        assert_eq!(a.baseline.params.weights, b.baseline.params.weights);
        assert_eq!(a.variants[0].params.weights, b.variants[0].params.weights);
        assert_eq!(a.variants[0].test_counts, b.variants[0].test_counts);
    }

    #[test]
    fn full_table_mirrors_the_comparison_rows() {
        let mut cfg = micro_cfg(ScenarioId::Sc1);
        cfg.full_table = true;
        let bundle = run_scenario(&cfg).unwrap();
        let names: Vec<&str> = bundle.variants.iter().map(|v| v.name.as_str()).collect();
        assert_eq!(names, vec!["flip-0.50", "induction-0.50", "genuine-0.80"]);
        let source_names: Vec<&str> =
            bundle.sources.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(
            source_names,
            vec!["source-1", "source-2-flip", "source-2-induction"]
        );
        assert!(matches!(
            bundle.sources[2].attack,
            AttackManifest::Induction { .. }
        ));
        // Matched seeds: every target run starts from the same weights,
        // so identical flavors at different thresholds can only diverge
        // through the transfer pool.
        assert_eq!(bundle.baseline.episodes.len(), cfg.target_episodes);
        for v in &bundle.variants {
            assert_eq!(v.episodes.len(), cfg.target_episodes);
        }
    }

    #[test]
    fn all_genuine_variant_trains_last_slot_clean() {
        let mut cfg = micro_cfg(ScenarioId::Sc1);
        cfg.adversary = AttackKind::None;
        let bundle = run_scenario(&cfg).unwrap();
        assert_eq!(bundle.variants[0].name, "all-genuine-0.50");
        assert!(bundle
            .sources
            .iter()
            .all(|s| matches!(s.attack, AttackManifest::None)));
        assert_eq!(bundle.sources[1].name, "source-2");
    }

    #[test]
    fn sc3_end_to_end_crosses_dimensions() {
        let cfg = micro_cfg(ScenarioId::Sc3);
        let bundle = run_scenario(&cfg).unwrap();
        assert_eq!(bundle.variants.len(), 1);
        assert!(bundle.variants[0].test_metrics.accuracy.is_finite());
    }
}
