//! Run summaries: the versioned `summary.json` schema, per-episode CSV
//! writers, and the rendered tables shown after a scenario run.
//!
//! The summary deliberately contains nothing time- or host-dependent, so
//! two runs with the same seed produce byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use mds_core::adversary::AttackManifest;
use mds_core::metrics::{ConfusionCounts, MetricsRow};
use mds_core::transfer::{EpisodeRecord, SelectionInstrumentation, TrustEntry};
use serde::{Deserialize, Serialize};

use crate::trace_io::atomic_write;

pub const SUMMARY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSummary {
    pub name: String,
    pub attack: AttackManifest,
    pub episodes: usize,
    pub final_return: f64,
    pub best_return: f64,
    pub checkpoint: String,
    pub episodes_file: String,
}

/// One target training run: the baseline or a transfer variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub name: String,
    pub adversary: String,
    pub trust_threshold: f64,
    pub roster: Vec<String>,
    pub selected: Vec<String>,
    pub trust: Vec<TrustEntry>,
    pub episodes: usize,
    pub final_return: f64,
    pub best_return: f64,
    pub test_counts: ConfusionCounts,
    pub test_metrics: MetricsRow,
    pub test_reward: f64,
    /// First episode (1-based) whose return reached the baseline's best.
    pub episodes_to_baseline_best: Option<usize>,
    pub selection: Option<SelectionInstrumentation>,
    pub run_file: String,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub version: u32,
    pub scenario: String,
    pub seed: u64,
    pub adversary: String,
    pub full_table: bool,
    pub trust_threshold: f64,
    pub genuine_only_threshold: f64,
    pub source_episodes: usize,
    pub target_episodes: usize,
    pub baseline_best_return: f64,
    pub sources: Vec<SourceSummary>,
    pub baseline: RunRow,
    pub variants: Vec<RunRow>,
}

pub fn save_summary(path: &Path, summary: &Summary) -> Result<()> {
    let json = serde_json::to_vec_pretty(summary).context("serializing summary")?;
    atomic_write(path, &json)
}

/// Load a summary, reporting every missing top-level field at once.
pub fn load_summary(path: &Path) -> Result<Summary> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    const REQUIRED: &[&str] = &[
        "version",
        "scenario",
        "seed",
        "adversary",
        "full_table",
        "trust_threshold",
        "genuine_only_threshold",
        "source_episodes",
        "target_episodes",
        "baseline_best_return",
        "sources",
        "baseline",
        "variants",
    ];
    let missing: Vec<&str> = REQUIRED
        .iter()
        .copied()
        .filter(|k| value.get(k).is_none())
        .collect();
    if !missing.is_empty() {
        bail!("{} is incomplete; missing fields: {}", path.display(), missing.join(", "));
    }
    if value["version"] != serde_json::json!(SUMMARY_VERSION) {
        bail!(
            "{}: summary version {} unsupported (expected {})",
            path.display(),
            value["version"],
            SUMMARY_VERSION
        );
    }
    serde_json::from_value(value).with_context(|| format!("decoding {}", path.display()))
}

/// `episode,cumulative_reward,epsilon,tp,tn,fp,fn` rows.
pub fn episodes_csv(rows: &[EpisodeRecord]) -> String {
    let mut out = String::from("episode,cumulative_reward,epsilon,tp,tn,fp,fn\n");
    for r in rows {
        let c = r.counts;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.episode, r.total_reward, r.epsilon, c.true_pos, c.true_neg, c.false_pos, c.false_neg
        );
    }
    out
}

/// Same rows with the training phase in the second column.
pub fn transfer_csv(rows: &[EpisodeRecord]) -> String {
    let mut out = String::from("episode,phase,cumulative_reward,epsilon,tp,tn,fp,fn\n");
    for r in rows {
        let c = r.counts;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.episode,
            r.phase.as_str(),
            r.total_reward,
            r.epsilon,
            c.true_pos,
            c.true_neg,
            c.false_pos,
            c.false_neg
        );
    }
    out
}

fn pad(s: &str, width: usize) -> String {
    format!("{s:<width$}")
}

fn table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    for (i, h) in headers.iter().enumerate() {
        out.push_str(&pad(h, widths[i]));
        out.push_str("  ");
    }
    out.push('\n');
    for (i, _) in headers.iter().enumerate() {
        out.push_str(&"-".repeat(widths[i]));
        out.push_str("  ");
    }
    out.push('\n');
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            out.push_str(&pad(cell, widths[i]));
            out.push_str("  ");
        }
        out.push('\n');
    }
    out
}

fn metric_cell(value: f64, defined: bool) -> String {
    if defined {
        format!("{value:.4}")
    } else {
        "n/a".to_string()
    }
}

fn metrics_row(row: &RunRow) -> Vec<String> {
    let m = &row.test_metrics;
    let c = &row.test_counts;
    vec![
        row.name.clone(),
        format!("{:.4}", m.accuracy),
        metric_cell(m.precision, m.precision_defined),
        metric_cell(m.recall, m.recall_defined),
        metric_cell(m.f_score, m.precision_defined && m.recall_defined),
        format!("{}/{}/{}/{}", c.true_pos, c.true_neg, c.false_pos, c.false_neg),
        row.selected.join("+"),
    ]
}

/// Detection quality on the held-out test slice, baseline first.
pub fn render_metrics_table(summary: &Summary) -> String {
    let mut rows = vec![metrics_row(&summary.baseline)];
    rows.extend(summary.variants.iter().map(metrics_row));
    table(
        &["run", "accuracy", "precision", "recall", "f-score", "tp/tn/fp/fn", "sources"],
        &rows,
    )
}

/// Episodes needed to match the baseline's best training return.
pub fn render_time_table(summary: &Summary) -> String {
    let budget = summary.target_episodes.max(1) as f64;
    let mut rows = Vec::new();
    let mut push = |row: &RunRow| {
        let (episodes, reduction) = match row.episodes_to_baseline_best {
            Some(e) => (e.to_string(), format!("{:.1}%", 100.0 * (1.0 - e as f64 / budget))),
            None => ("not reached".to_string(), "-".to_string()),
        };
        rows.push(vec![row.name.clone(), episodes, reduction]);
    };
    push(&summary.baseline);
    summary.variants.iter().for_each(&mut push);
    let header = format!(
        "baseline best return {:.3} over {} episodes\n",
        summary.baseline_best_return, summary.target_episodes
    );
    header + &table(&["run", "episodes-to-baseline-best", "reduction"], &rows)
}

/// Raw probe returns, scaled trust and selection per variant.
pub fn render_trust_table(summary: &Summary) -> String {
    let mut rows = Vec::new();
    for row in &summary.variants {
        for entry in &row.trust {
            let name = row
                .roster
                .get(entry.source)
                .map(String::as_str)
                .unwrap_or("?");
            rows.push(vec![
                row.name.clone(),
                name.to_string(),
                format!("{:.3}", entry.raw_return),
                format!("{:.4}", entry.trust),
                entry.rank.to_string(),
                if entry.selected { "yes" } else { "no" }.to_string(),
            ]);
        }
    }
    table(&["run", "source", "probe-return", "trust", "rank", "selected"], &rows)
}

pub fn render_report(summary: &Summary) -> String {
    format!(
        "scenario {} seed {} adversary {}\n\n{}\n{}\n{}",
        summary.scenario,
        summary.seed,
        summary.adversary,
        render_metrics_table(summary),
        render_time_table(summary),
        render_trust_table(summary),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use mds_core::transfer::Phase;

    fn sample_row(name: &str) -> RunRow {
        RunRow {
            name: name.to_string(),
            adversary: "flip".to_string(),
            trust_threshold: 0.5,
            roster: vec!["source-1".to_string(), "source-2-flip".to_string()],
            selected: vec!["source-1".to_string()],
            trust: vec![
                TrustEntry { source: 0, raw_return: 42.0, trust: 1.0, rank: 1, selected: true },
                TrustEntry { source: 1, raw_return: -3.0, trust: 0.0, rank: 2, selected: false },
            ],
            episodes: 4,
            final_return: 11.0,
            best_return: 12.5,
            test_counts: ConfusionCounts {
                true_pos: 2,
                true_neg: 6,
                false_pos: 1,
                false_neg: 1,
            },
            test_metrics: mds_core::metrics::metrics(&ConfusionCounts {
                true_pos: 2,
                true_neg: 6,
                false_pos: 1,
                false_neg: 1,
            })
            .unwrap(),
            test_reward: 3.5,
            episodes_to_baseline_best: Some(3),
            selection: None,
            run_file: "variants/flip-0.50/transfer_run.csv".to_string(),
            checkpoint: "variants/flip-0.50/checkpoint.json".to_string(),
        }
    }

    fn sample_summary() -> Summary {
        Summary {
            version: SUMMARY_VERSION,
            scenario: "sc1".to_string(),
            seed: 7,
            adversary: "flip".to_string(),
            full_table: false,
            trust_threshold: 0.5,
            genuine_only_threshold: 0.8,
            source_episodes: 6,
            target_episodes: 4,
            baseline_best_return: 12.0,
            sources: vec![SourceSummary {
                name: "source-1".to_string(),
                attack: AttackManifest::None,
                episodes: 6,
                final_return: 9.0,
                best_return: 10.0,
                checkpoint: "sources/source-1.json".to_string(),
                episodes_file: "sources/source-1.episodes.csv".to_string(),
            }],
            baseline: RunRow {
                trust: Vec::new(),
                roster: Vec::new(),
                selected: Vec::new(),
                episodes_to_baseline_best: Some(4),
                ..sample_row("baseline")
            },
            variants: vec![sample_row("flip-0.50")],
        }
    }

    #[test]
    fn summary_roundtrips_and_missing_fields_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("summary.json");
        let summary = sample_summary();
        save_summary(&path, &summary).unwrap();
        assert_eq!(load_summary(&path).unwrap(), summary);

        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("baseline");
        v.as_object_mut().unwrap().remove("seed");
        std::fs::write(&path, serde_json::to_vec(&v).unwrap()).unwrap();
        let err = load_summary(&path).unwrap_err().to_string();
        assert!(err.contains("seed") && err.contains("baseline"), "{err}");
    }

    #[test]
    fn csv_row_count_matches_episodes() {
        let rows: Vec<EpisodeRecord> = (1..=5)
            .map(|i| EpisodeRecord {
                episode: i,
                phase: if i <= 2 { Phase::Selection } else { Phase::PlainDqn },
                epsilon: 1.0 - i as f64 * 0.1,
                steps: 10,
                total_reward: i as f64,
                counts: ConfusionCounts::default(),
                mean_loss: None,
            })
            .collect();
        let plain = episodes_csv(&rows);
        assert_eq!(plain.lines().count(), 6);
        assert!(plain.starts_with("episode,cumulative_reward,epsilon,tp,tn,fp,fn\n"));
        let transfer = transfer_csv(&rows);
        assert_eq!(transfer.lines().count(), 6);
        assert!(transfer.lines().nth(1).unwrap().contains(",selection,"));
        assert!(transfer.lines().nth(5).unwrap().contains(",plain-dqn,"));
    }

    #[test]
    fn tables_render_every_run() {
        let summary = sample_summary();
        let metrics = render_metrics_table(&summary);
        assert!(metrics.contains("baseline"));
        assert!(metrics.contains("flip-0.50"));
        assert!(metrics.contains("0.8000"));
        let time = render_time_table(&summary);
        assert!(time.contains("25.0%"), "{time}");
        let trust = render_trust_table(&summary);
        assert!(trust.contains("source-2-flip"));
    }
}
