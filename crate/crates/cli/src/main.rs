//! `mds` — misbehavior-detection workflows over vehicular message traces:
//! synthetic trace generation, dataset ingestion, detector training with
//! optional poisoning, trust-based source ranking, selective experience
//! transfer, and reporting.

mod artifacts;
mod checkpoint;
mod ingest;
mod report;
mod trace_io;

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mds_core::adversary::AttackKind;
use mds_core::agent::{evaluate, Agent, GreedyPolicy, TraceEnv};
use mds_core::metrics::metrics;
use mds_core::scenario::{
    fit_standardizer, run_with_data, synth_data, train_source, ScenarioConfig, ScenarioId,
};
use mds_core::seeding;
use mds_core::split::{split_by_time, SplitPlan};
use mds_core::synth::{generate, GenConfig};
use mds_core::transfer::{probe_return, rank_sources, train_target, SourceHandle};
use serde::Serialize;

use checkpoint::{load_checkpoint, save_attack_manifest, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
use report::{episodes_csv, load_summary, render_report, transfer_csv};
use trace_io::{atomic_write, read_trace, write_trace};

/// Failure stages map to distinct exit codes so scripts can tell a bad
/// config from a bad dataset from a failed run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Config,
    Data,
    Train,
    Rank,
    Transfer,
    Report,
}

impl Stage {
    fn code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Data => 3,
            Stage::Train => 4,
            Stage::Rank => 5,
            Stage::Transfer => 6,
            Stage::Report => 7,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Data => "data",
            Stage::Train => "train",
            Stage::Rank => "rank",
            Stage::Transfer => "transfer",
            Stage::Report => "report",
        }
    }
}

struct Staged {
    stage: Stage,
    error: anyhow::Error,
}

trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T, Staged>;
}

impl<T, E: Into<anyhow::Error>> StageExt<T> for Result<T, E> {
    fn stage(self, stage: Stage) -> Result<T, Staged> {
        self.map_err(|e| Staged { stage, error: e.into() })
    }
}

#[derive(Parser)]
#[command(name = "mds", version, about = "Misbehavior detection over vehicular message traces")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic labeled trace.
    Gen(GenArgs),
    /// Parse a VeReMi-style dataset into canonical traces.
    Ingest(IngestArgs),
    /// Train one source detector on a trace, optionally poisoned.
    TrainSource(TrainSourceArgs),
    /// Probe source checkpoints on a trace and rank them by trust.
    RankSources(RankArgs),
    /// Train a target detector with selective experience transfer.
    TrainTarget(TrainTargetArgs),
    /// Run a full collaborative-detection scenario end to end.
    RunScenario(RunScenarioArgs),
    /// Render the tables for a finished run.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Generator settings (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output trace file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    /// Directory of newline-JSON log files.
    #[arg(long)]
    logs: PathBuf,
    /// Ground-truth file for the same dataset.
    #[arg(long)]
    ground_truth: PathBuf,
    /// Field mapping (TOML); VeReMi key names when omitted.
    #[arg(long)]
    mapping: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Time-ordered role split, e.g. `source-1=0.3,source-2=0.3,target=0.4`.
    #[arg(long)]
    splits: Option<String>,
}

#[derive(Args)]
struct TrainSourceArgs {
    /// Training trace (canonical CSV).
    #[arg(long)]
    trace: PathBuf,
    /// Run settings (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Poisoning applied before training: none, flip or induction.
    #[arg(long, default_value = "none")]
    adversary: String,
    /// Source position; separates the random streams of same-seed sources.
    #[arg(long, default_value_t = 0)]
    slot: usize,
    #[arg(long)]
    episodes: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RankArgs {
    /// Probe trace evaluated by every candidate (canonical CSV).
    #[arg(long)]
    probe: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trust threshold override.
    #[arg(long)]
    tth: Option<f64>,
    /// Output trust report (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Source checkpoints to rank.
    #[arg(required = true)]
    checkpoints: Vec<PathBuf>,
}

#[derive(Args)]
struct TrainTargetArgs {
    /// Target training trace (canonical CSV).
    #[arg(long)]
    trace: PathBuf,
    /// Held-out trace for trust probing.
    #[arg(long)]
    probe: PathBuf,
    /// Held-out trace for final evaluation.
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tth: Option<f64>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Source as `checkpoint.json=trace.csv`; repeatable.
    #[arg(long = "source")]
    sources: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunScenarioArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// sc1, sc2 or sc3.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// none, flip or induction.
    #[arg(long)]
    adversary: Option<String>,
    /// Trust threshold override.
    #[arg(long)]
    tth: Option<f64>,
    /// Run every comparison row instead of a single variant.
    #[arg(long)]
    full_table: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory or summary.json path.
    path: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Gen(args) => cmd_gen(args),
        Cmd::Ingest(args) => cmd_ingest(args),
        Cmd::TrainSource(args) => cmd_train_source(args),
        Cmd::RankSources(args) => cmd_rank_sources(args),
        Cmd::TrainTarget(args) => cmd_train_target(args),
        Cmd::RunScenario(args) => cmd_run_scenario(args),
        Cmd::Report(args) => cmd_report(args),
    };
    if let Err(staged) = result {
        eprintln!("error [{}]: {:#}", staged.stage.label(), staged.error);
        std::process::exit(staged.stage.code());
    }
}

fn load_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn scenario_config(
    path: Option<&Path>,
    seed: Option<u64>,
    tth: Option<f64>,
) -> Result<ScenarioConfig> {
    let mut cfg: ScenarioConfig = load_toml(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(tth) = tth {
        cfg.trust_threshold = tth;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Print to stdout, swallowing broken pipes (`mds report | head` should
/// not panic).
fn print_out(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).context("rendering output")?;
    text.push('\n');
    print_out(&text);
    Ok(())
}

fn cmd_gen(args: GenArgs) -> Result<(), Staged> {
    let mut cfg: GenConfig = load_toml(args.config.as_deref()).stage(Stage::Config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate().stage(Stage::Config)?;
    let (records, summary) = generate(&cfg).stage(Stage::Data)?;
    write_trace(&args.out, &records).stage(Stage::Data)?;
    print_json(&summary).stage(Stage::Report)?;
    Ok(())
}

#[derive(Serialize)]
struct SplitEntry {
    role: String,
    file: String,
    records: usize,
}

#[derive(Serialize)]
struct SplitsManifest {
    roles: Vec<SplitEntry>,
}

fn parse_splits(text: &str) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let (role, frac) = part
            .split_once('=')
            .with_context(|| format!("split {part:?} is not role=fraction"))?;
        let role = role.trim();
        if role.is_empty() || role.contains(['/', '\\']) {
            bail!("bad role name {role:?}");
        }
        let frac: f64 = frac.trim().parse().with_context(|| format!("fraction in {part:?}"))?;
        out.push((role.to_string(), frac));
    }
    if out.is_empty() {
        bail!("empty split list");
    }
    Ok(out)
}

fn cmd_ingest(args: IngestArgs) -> Result<(), Staged> {
    let mapping = match args.mapping.as_deref() {
        Some(p) => ingest::Mapping::load(p).stage(Stage::Config)?,
        None => ingest::Mapping::default(),
    };
    let splits = args
        .splits
        .as_deref()
        .map(parse_splits)
        .transpose()
        .stage(Stage::Config)?;
    let (records, report) =
        ingest::parse_dataset(&args.logs, &args.ground_truth, &mapping).stage(Stage::Data)?;

    let mut roles = Vec::new();
    match splits {
        None => {
            let file = "trace.csv".to_string();
            write_trace(&args.out.join(&file), &records).stage(Stage::Data)?;
            roles.push(SplitEntry { role: "all".to_string(), file, records: records.len() });
        }
        Some(pairs) => {
            let plan = SplitPlan(pairs.iter().map(|(_, f)| *f).collect());
            let slices = split_by_time(&records, &plan).stage(Stage::Data)?;
            for ((role, _), slice) in pairs.iter().zip(&slices) {
                let file = format!("{role}.csv");
                write_trace(&args.out.join(&file), slice).stage(Stage::Data)?;
                roles.push(SplitEntry { role: role.clone(), file, records: slice.len() });
            }
        }
    }
    let manifest = SplitsManifest { roles };
    let json = serde_json::to_vec_pretty(&manifest)
        .context("serializing splits")
        .stage(Stage::Data)?;
    atomic_write(&args.out.join("splits.json"), &json).stage(Stage::Data)?;
    print_json(&report).stage(Stage::Report)?;
    Ok(())
}

#[derive(Serialize)]
struct TrainSourceOutput {
    name: String,
    adversary: String,
    episodes: usize,
    final_return: f64,
    best_return: f64,
    checkpoint: String,
}

fn cmd_train_source(args: TrainSourceArgs) -> Result<(), Staged> {
    let mut cfg = scenario_config(args.config.as_deref(), args.seed, None).stage(Stage::Config)?;
    if let Some(episodes) = args.episodes {
        cfg.source_episodes = episodes;
    }
    let kind = AttackKind::parse(&args.adversary)
        .ok_or_else(|| anyhow!("unknown adversary {:?}", args.adversary))
        .stage(Stage::Config)?;
    cfg.validate().stage(Stage::Config)?;

    let records = read_trace(&args.trace).stage(Stage::Data)?;
    let (training, _) = train_source(&cfg, &records, args.slot, kind).stage(Stage::Train)?;
    let trained = training.trained;

    let ckpt_path = args.out.join("checkpoint.json");
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        role: "source".to_string(),
        seed: cfg.seed,
        episodes: trained.episodes.len(),
        feature: cfg.feature_config(),
        view: cfg.source_view(),
        reward: cfg.tuning.reward,
        standardizer: trained.standardizer.clone(),
        params: trained.params.clone(),
    };
    save_checkpoint(&ckpt_path, &ckpt).stage(Stage::Train)?;
    if kind != AttackKind::None {
        save_attack_manifest(&ckpt_path, &trained.attack).stage(Stage::Train)?;
    }
    atomic_write(&args.out.join("episodes.csv"), episodes_csv(&trained.episodes).as_bytes())
        .stage(Stage::Train)?;

    let returns: Vec<f64> = trained.episodes.iter().map(|e| e.total_reward).collect();
    print_json(&TrainSourceOutput {
        name: trained.name,
        adversary: kind.as_str().to_string(),
        episodes: returns.len(),
        final_return: returns.last().copied().unwrap_or(0.0),
        best_return: returns.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        checkpoint: ckpt_path.display().to_string(),
    })
    .stage(Stage::Report)?;
    Ok(())
}

#[derive(Serialize)]
struct RankedSource {
    name: String,
    seed: u64,
    raw_return: f64,
    trust: f64,
    rank: usize,
    selected: bool,
}

#[derive(Serialize)]
struct RankOutput {
    threshold: f64,
    entries: Vec<RankedSource>,
}

/// Display name for a checkpoint path; generically named files borrow
/// their parent directory for disambiguation.
fn stem(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    if stem == "checkpoint" {
        if let Some(parent) = path.parent().and_then(|p| p.file_name()) {
            return format!("{}/{stem}", parent.to_string_lossy());
        }
    }
    stem
}

fn probe_env_for(
    ckpt: &Checkpoint,
    records: &[mds_core::trace::BsmRecord],
    jitter: f64,
) -> Result<TraceEnv> {
    TraceEnv::build(
        records,
        ckpt.feature,
        &ckpt.view,
        &ckpt.standardizer,
        ckpt.params.spec.window,
        jitter,
    )
    .map_err(Into::into)
}

fn cmd_rank_sources(args: RankArgs) -> Result<(), Staged> {
    let cfg = scenario_config(args.config.as_deref(), None, args.tth).stage(Stage::Config)?;
    let probe = read_trace(&args.probe).stage(Stage::Data)?;

    let mut names = Vec::new();
    let mut seeds = Vec::new();
    let mut returns = Vec::new();
    for path in &args.checkpoints {
        let ckpt = load_checkpoint(path).stage(Stage::Rank)?;
        let env = probe_env_for(&ckpt, &probe, cfg.jitter_span).stage(Stage::Rank)?;
        let ret = probe_return(
            &ckpt.params,
            &env,
            &cfg.tuning.reward,
            cfg.transfer.probe_episodes,
        )
        .stage(Stage::Rank)?;
        names.push(stem(path));
        seeds.push(ckpt.seed);
        returns.push(ret);
    }
    let report = rank_sources(&returns, cfg.trust_threshold).stage(Stage::Rank)?;
    let entries = report
        .entries
        .iter()
        .map(|e| RankedSource {
            name: names[e.source].clone(),
            seed: seeds[e.source],
            raw_return: e.raw_return,
            trust: e.trust,
            rank: e.rank,
            selected: e.selected,
        })
        .collect();
    let out = RankOutput { threshold: report.threshold, entries };
    let json = serde_json::to_vec_pretty(&out)
        .context("serializing trust report")
        .stage(Stage::Rank)?;
    atomic_write(&args.out, &json).stage(Stage::Rank)?;
    print_json(&out).stage(Stage::Report)?;
    Ok(())
}

struct LoadedSource {
    name: String,
    ckpt: Checkpoint,
    act_env: TraceEnv,
    store_env: TraceEnv,
}

#[derive(Serialize)]
struct TrainTargetOutput {
    episodes: usize,
    final_return: f64,
    selected: Vec<String>,
    test_counts: mds_core::metrics::ConfusionCounts,
    test_metrics: mds_core::metrics::MetricsRow,
    test_reward: f64,
}

fn cmd_train_target(args: TrainTargetArgs) -> Result<(), Staged> {
    let mut cfg =
        scenario_config(args.config.as_deref(), args.seed, args.tth).stage(Stage::Config)?;
    if let Some(episodes) = args.episodes {
        cfg.target_episodes = episodes;
    }
    cfg.validate().stage(Stage::Config)?;
    let fc = cfg.feature_config();
    let view = cfg.target_view();

    let train = read_trace(&args.trace).stage(Stage::Data)?;
    let probe = read_trace(&args.probe).stage(Stage::Data)?;
    let test = read_trace(&args.test).stage(Stage::Data)?;
    let standardizer = fit_standardizer(&train, fc, &view).stage(Stage::Data)?;
    let env = TraceEnv::build(&train, fc, &view, &standardizer, cfg.window, cfg.jitter_span)
        .stage(Stage::Data)?;
    let test_env = TraceEnv::build(&test, fc, &view, &standardizer, cfg.window, cfg.jitter_span)
        .stage(Stage::Data)?;

    let mut loaded = Vec::new();
    for spec in &args.sources {
        let (ckpt_path, trace_path) = spec
            .split_once('=')
            .with_context(|| format!("source {spec:?} is not checkpoint=trace"))
            .stage(Stage::Config)?;
        let ckpt = load_checkpoint(Path::new(ckpt_path)).stage(Stage::Rank)?;
        let records = read_trace(Path::new(trace_path)).stage(Stage::Data)?;
        let act_env = TraceEnv::build(
            &records,
            ckpt.feature,
            &ckpt.view,
            &ckpt.standardizer,
            ckpt.params.spec.window,
            cfg.jitter_span,
        )
        .stage(Stage::Rank)?;
        let store_env =
            TraceEnv::build(&records, fc, &view, &standardizer, cfg.window, cfg.jitter_span)
                .stage(Stage::Rank)?;
        loaded.push(LoadedSource { name: stem(Path::new(ckpt_path)), ckpt, act_env, store_env });
    }

    let mut trust = None;
    let mut handles = Vec::new();
    if !loaded.is_empty() {
        let mut returns = Vec::new();
        for src in &loaded {
            let probe_env =
                probe_env_for(&src.ckpt, &probe, cfg.jitter_span).stage(Stage::Rank)?;
            returns.push(
                probe_return(
                    &src.ckpt.params,
                    &probe_env,
                    &cfg.tuning.reward,
                    cfg.transfer.probe_episodes,
                )
                .stage(Stage::Rank)?,
            );
        }
        let report = rank_sources(&returns, cfg.trust_threshold).stage(Stage::Rank)?;
        for entry in report.entries.iter().filter(|e| e.selected) {
            let src = &loaded[entry.source];
            handles.push(SourceHandle {
                params: &src.ckpt.params,
                act_env: &src.act_env,
                store_env: &src.store_env,
                trust: entry.trust,
            });
        }
        trust = Some(report);
    }

    let acfg = cfg.tuning.agent_config(cfg.net_spec(view.len()));
    let mut agent = Agent::new(acfg, &mut seeding::stream(cfg.seed, "target-init", 0))
        .stage(Stage::Transfer)?;
    let mut run_rng = seeding::stream(cfg.seed, "target-run", 0);
    let mut collect_rng = seeding::stream(cfg.seed, "target-collect", 0);
    let run = train_target(
        &mut agent,
        &env,
        cfg.target_episodes,
        &cfg.transfer,
        &handles,
        &mut run_rng,
        &mut collect_rng,
    )
    .stage(Stage::Transfer)?;

    atomic_write(&args.out.join("transfer_run.csv"), transfer_csv(&run.episodes).as_bytes())
        .stage(Stage::Transfer)?;
    if let Some(report) = &trust {
        let entries: Vec<RankedSource> = report
            .entries
            .iter()
            .map(|e| RankedSource {
                name: loaded[e.source].name.clone(),
                seed: loaded[e.source].ckpt.seed,
                raw_return: e.raw_return,
                trust: e.trust,
                rank: e.rank,
                selected: e.selected,
            })
            .collect();
        let out = RankOutput { threshold: report.threshold, entries };
        let json = serde_json::to_vec_pretty(&out)
            .context("serializing trust report")
            .stage(Stage::Transfer)?;
        atomic_write(&args.out.join("trust_report.json"), &json).stage(Stage::Transfer)?;
    }
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        role: "target".to_string(),
        seed: cfg.seed,
        episodes: run.episodes.len(),
        feature: fc,
        view,
        reward: cfg.tuning.reward,
        standardizer,
        params: agent.online.clone(),
    };
    save_checkpoint(&args.out.join("checkpoint.json"), &ckpt).stage(Stage::Transfer)?;

    let outcome = evaluate(&GreedyPolicy(&agent.online), &test_env, &cfg.tuning.reward)
        .stage(Stage::Transfer)?;
    let selected = trust
        .as_ref()
        .map(|r| {
            r.entries
                .iter()
                .filter(|e| e.selected)
                .map(|e| loaded[e.source].name.clone())
                .collect()
        })
        .unwrap_or_default();
    print_json(&TrainTargetOutput {
        episodes: run.episodes.len(),
        final_return: run.episodes.last().map(|e| e.total_reward).unwrap_or(0.0),
        selected,
        test_counts: outcome.counts,
        test_metrics: metrics(&outcome.counts).stage(Stage::Report)?,
        test_reward: outcome.total_reward,
    })
    .stage(Stage::Report)?;
    Ok(())
}

fn cmd_run_scenario(args: RunScenarioArgs) -> Result<(), Staged> {
    let mut cfg =
        scenario_config(args.config.as_deref(), args.seed, args.tth).stage(Stage::Config)?;
    if let Some(s) = args.scenario.as_deref() {
        cfg.scenario = ScenarioId::parse(s)
            .ok_or_else(|| anyhow!("unknown scenario {s:?} (expected sc1, sc2 or sc3)"))
            .stage(Stage::Config)?;
    }
    if let Some(a) = args.adversary.as_deref() {
        cfg.adversary = AttackKind::parse(a)
            .ok_or_else(|| anyhow!("unknown adversary {a:?} (expected none, flip or induction)"))
            .stage(Stage::Config)?;
    }
    if args.full_table {
        cfg.full_table = true;
    }
    cfg.validate().stage(Stage::Config)?;

    let started = std::time::Instant::now();
    let data = synth_data(&cfg).stage(Stage::Data)?;
    let bundle = run_with_data(&cfg, &data).stage(Stage::Train)?;
    let summary = artifacts::write_bundle(&args.out, &cfg, &bundle).stage(Stage::Report)?;
    eprintln!(
        "scenario {} finished in {:.1}s; artifacts in {}",
        summary.scenario,
        started.elapsed().as_secs_f64(),
        args.out.display()
    );
    print_out(&render_report(&summary));
    print_out("\n");
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), Staged> {
    let path = if args.path.is_dir() {
        args.path.join("summary.json")
    } else {
        args.path.clone()
    };
    let summary = load_summary(&path).stage(Stage::Report)?;
    print_out(&render_report(&summary));
    print_out("\n");
    Ok(())
}
