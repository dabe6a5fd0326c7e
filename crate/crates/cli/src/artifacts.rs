//! On-disk layout for one scenario run.
//!
//! ```text
//! out/
//!   config.toml                      resolved configuration
//!   summary.json                     versioned run summary
//!   sources/<name>.json              source checkpoint
//!   sources/<name>.attack.json       poisoning manifest (malicious only)
//!   sources/<name>.episodes.csv      source learning curve
//!   baseline/episodes.csv            no-transfer target learning curve
//!   baseline/checkpoint.json
//!   variants/<name>/transfer_run.csv phase-tagged target learning curve
//!   variants/<name>/trust_report.json
//!   variants/<name>/checkpoint.json
//! ```

use std::path::Path;

use anyhow::{Context, Result};
use mds_core::adversary::AttackManifest;
use mds_core::scenario::{ScenarioBundle, ScenarioConfig, TrainedSource, VariantResult};
use mds_core::transfer::EpisodeRecord;
use serde::Serialize;

use crate::checkpoint::{save_attack_manifest, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
use crate::report::{
    episodes_csv, save_summary, transfer_csv, RunRow, SourceSummary, Summary, SUMMARY_VERSION,
};
use crate::trace_io::atomic_write;

#[derive(Serialize)]
struct TrustFileEntry {
    name: String,
    seed: u64,
    raw_return: f64,
    trust: f64,
    rank: usize,
    selected: bool,
}

#[derive(Serialize)]
struct TrustFile {
    threshold: f64,
    entries: Vec<TrustFileEntry>,
}

fn final_return(rows: &[EpisodeRecord]) -> f64 {
    rows.last().map(|r| r.total_reward).unwrap_or(0.0)
}

fn best_return(rows: &[EpisodeRecord]) -> f64 {
    rows.iter().map(|r| r.total_reward).fold(f64::NEG_INFINITY, f64::max)
}

fn source_checkpoint(cfg: &ScenarioConfig, bundle: &ScenarioBundle, src: &TrainedSource) -> Checkpoint {
    Checkpoint {
        version: CHECKPOINT_VERSION,
        role: "source".to_string(),
        seed: bundle.seed,
        episodes: src.episodes.len(),
        feature: cfg.feature_config(),
        view: cfg.source_view(),
        reward: cfg.tuning.reward,
        standardizer: src.standardizer.clone(),
        params: src.params.clone(),
    }
}

fn target_checkpoint(cfg: &ScenarioConfig, bundle: &ScenarioBundle, v: &VariantResult) -> Checkpoint {
    Checkpoint {
        version: CHECKPOINT_VERSION,
        role: "target".to_string(),
        seed: bundle.seed,
        episodes: v.episodes.len(),
        feature: cfg.feature_config(),
        view: cfg.target_view(),
        reward: cfg.tuning.reward,
        standardizer: bundle.target_standardizer.clone(),
        params: v.params.clone(),
    }
}

fn run_row(v: &VariantResult, run_file: String, checkpoint: String) -> RunRow {
    let trust = v.trust.as_ref().map(|t| t.entries.clone()).unwrap_or_default();
    let selected = trust
        .iter()
        .filter(|e| e.selected)
        .filter_map(|e| v.roster.get(e.source).cloned())
        .collect();
    RunRow {
        name: v.name.clone(),
        adversary: v.adversary.as_str().to_string(),
        trust_threshold: v.trust_threshold,
        roster: v.roster.clone(),
        selected,
        trust,
        episodes: v.episodes.len(),
        final_return: final_return(&v.episodes),
        best_return: best_return(&v.episodes),
        test_counts: v.test_counts,
        test_metrics: v.test_metrics,
        test_reward: v.test_reward,
        episodes_to_baseline_best: v.episodes_to_baseline_best,
        selection: v.selection.clone(),
        run_file,
        checkpoint,
    }
}

fn trust_file(bundle: &ScenarioBundle, v: &VariantResult) -> Option<TrustFile> {
    let report = v.trust.as_ref()?;
    Some(TrustFile {
        threshold: report.threshold,
        entries: report
            .entries
            .iter()
            .map(|e| TrustFileEntry {
                name: v.roster.get(e.source).cloned().unwrap_or_else(|| format!("#{}", e.source)),
                seed: bundle.seed,
                raw_return: e.raw_return,
                trust: e.trust,
                rank: e.rank,
                selected: e.selected,
            })
            .collect(),
    })
}

/// Persist every artifact of a finished run and return the summary that
/// was written to `summary.json`.
pub fn write_bundle(out: &Path, cfg: &ScenarioConfig, bundle: &ScenarioBundle) -> Result<Summary> {
    let config_text = toml::to_string_pretty(cfg).context("serializing config")?;
    atomic_write(&out.join("config.toml"), config_text.as_bytes())?;

    let mut sources = Vec::new();
    for src in &bundle.sources {
        let ckpt_rel = format!("sources/{}.json", src.name);
        let episodes_rel = format!("sources/{}.episodes.csv", src.name);
        let ckpt_path = out.join(&ckpt_rel);
        save_checkpoint(&ckpt_path, &source_checkpoint(cfg, bundle, src))?;
        if !matches!(src.attack, AttackManifest::None) {
            save_attack_manifest(&ckpt_path, &src.attack)?;
        }
        atomic_write(&out.join(&episodes_rel), episodes_csv(&src.episodes).as_bytes())?;
        sources.push(SourceSummary {
            name: src.name.clone(),
            attack: src.attack.clone(),
            episodes: src.episodes.len(),
            final_return: final_return(&src.episodes),
            best_return: best_return(&src.episodes),
            checkpoint: ckpt_rel,
            episodes_file: episodes_rel,
        });
    }

    let baseline_run = "baseline/episodes.csv".to_string();
    let baseline_ckpt = "baseline/checkpoint.json".to_string();
    atomic_write(
        &out.join(&baseline_run),
        episodes_csv(&bundle.baseline.episodes).as_bytes(),
    )?;
    save_checkpoint(
        &out.join(&baseline_ckpt),
        &target_checkpoint(cfg, bundle, &bundle.baseline),
    )?;
    let baseline = run_row(&bundle.baseline, baseline_run, baseline_ckpt);

    let mut variants = Vec::new();
    for v in &bundle.variants {
        let run_rel = format!("variants/{}/transfer_run.csv", v.name);
        let ckpt_rel = format!("variants/{}/checkpoint.json", v.name);
        atomic_write(&out.join(&run_rel), transfer_csv(&v.episodes).as_bytes())?;
        save_checkpoint(&out.join(&ckpt_rel), &target_checkpoint(cfg, bundle, v))?;
        if let Some(tf) = trust_file(bundle, v) {
            let json = serde_json::to_vec_pretty(&tf).context("serializing trust report")?;
            atomic_write(&out.join(format!("variants/{}/trust_report.json", v.name)), &json)?;
        }
        variants.push(run_row(v, run_rel, ckpt_rel));
    }

    let summary = Summary {
        version: SUMMARY_VERSION,
        scenario: bundle.scenario.as_str().to_string(),
        seed: bundle.seed,
        adversary: cfg.adversary.as_str().to_string(),
        full_table: cfg.full_table,
        trust_threshold: cfg.trust_threshold,
        genuine_only_threshold: cfg.genuine_only_threshold,
        source_episodes: bundle.source_episodes,
        target_episodes: bundle.target_episodes,
        baseline_best_return: bundle.baseline_best_return,
        sources,
        baseline,
        variants,
    };
    save_summary(&out.join("summary.json"), &summary)?;
    Ok(summary)
}
