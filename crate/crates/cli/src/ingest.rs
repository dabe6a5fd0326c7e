//! Ingestion of VeReMi-style datasets: per-receiver newline-JSON logs
//! plus one ground-truth file, labeled by divergence and emitted as
//! canonical trace records.
//!
//! Field names vary across dataset releases, so every JSON key is routed
//! through a `mapping.toml`; the defaults match the published VeReMi key
//! names. A record is labeled misbehaving when its transmitted kinematics
//! diverge from the ground truth beyond a small tolerance, or when the
//! ground-truth file marks its sender as an attacker (lets pure frequency
//! attacks, which transmit truthful kinematics, still be labeled).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mds_core::trace::{validate_trace, AttackType, BsmRecord, Vec3};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Per-component absolute tolerance when comparing transmitted kinematics
/// against ground truth; both sides went through float formatting.
pub const DIVERGENCE_TOL: f64 = 1e-6;
/// Tolerance when pairing a transmitted message with its ground-truth entry
/// by (sender, send time).
pub const MATCH_TOL: f64 = 1e-6;
/// Parse failures beyond this fraction of candidate lines abort the run.
pub const MAX_SKIP_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldMap {
    pub recv_time: String,
    pub send_time: String,
    pub sender: String,
    pub pseudo: String,
    pub pos: String,
    pub spd: String,
    pub acl: String,
    pub hed: String,
    /// Line filter: when `kind_filter` is set, keep only lines where the
    /// `kind` key equals `bsm_kind` (VeReMi logs mix BSMs with the
    /// receiver's own GPS rows).
    pub kind_filter: bool,
    pub kind: String,
    pub bsm_kind: i64,
}

impl Default for FieldMap {
    fn default() -> Self {
        FieldMap {
            recv_time: "rcvTime".to_string(),
            send_time: "sendTime".to_string(),
            sender: "sender".to_string(),
            pseudo: "senderPseudo".to_string(),
            pos: "pos".to_string(),
            spd: "spd".to_string(),
            acl: "acl".to_string(),
            hed: "hed".to_string(),
            kind_filter: true,
            kind: "type".to_string(),
            bsm_kind: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundTruthMap {
    pub time: String,
    pub sender: String,
    /// Numeric attacker code; zero or missing means genuine.
    pub attacker: String,
    pub pos: String,
    pub spd: String,
    pub acl: String,
    pub hed: String,
}

impl Default for GroundTruthMap {
    fn default() -> Self {
        GroundTruthMap {
            time: "time".to_string(),
            sender: "sender".to_string(),
            attacker: "attackerType".to_string(),
            pos: "pos".to_string(),
            spd: "spd".to_string(),
            acl: "acl".to_string(),
            hed: "hed".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelRules {
    /// Attack name recorded when a record diverges but its sender carries
    /// no (or an all-zero) attacker code.
    pub divergence_attack: String,
}

impl Default for LabelRules {
    fn default() -> Self {
        LabelRules { divergence_attack: "RandomPosition".to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Mapping {
    pub fields: FieldMap,
    pub ground_truth: GroundTruthMap,
    pub labels: LabelRules,
    /// Attacker code (as written in the ground truth) → attack name.
    /// Empty table means every attacker-coded sender falls back to
    /// `labels.divergence_attack`.
    pub attack_codes: BTreeMap<String, String>,
}

impl Mapping {
    pub fn load(path: &Path) -> Result<Mapping> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let mapping: Mapping =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        mapping.validate()?;
        Ok(mapping)
    }

    pub fn validate(&self) -> Result<()> {
        self.divergence_attack()?;
        self.code_table()?;
        Ok(())
    }

    fn divergence_attack(&self) -> Result<AttackType> {
        let name = &self.labels.divergence_attack;
        let at = AttackType::parse(name)
            .with_context(|| format!("unknown attack name {name:?} in labels.divergence_attack"))?;
        if at == AttackType::Genuine {
            bail!("labels.divergence_attack must name an attack, not Genuine");
        }
        Ok(at)
    }

    fn code_table(&self) -> Result<BTreeMap<i64, AttackType>> {
        let mut table = BTreeMap::new();
        for (code, name) in &self.attack_codes {
            let code: i64 = code
                .parse()
                .with_context(|| format!("attack_codes key {code:?} is not an integer"))?;
            let at = AttackType::parse(name)
                .with_context(|| format!("unknown attack name {name:?} for code {code}"))?;
            if at == AttackType::Genuine {
                bail!("attack_codes must not map code {code} to Genuine");
            }
            table.insert(code, at);
        }
        Ok(table)
    }
}

/// Counters describing one ingestion run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub log_files: usize,
    pub ground_truth_entries: usize,
    pub ground_truth_skipped: usize,
    pub candidate_lines: usize,
    pub records: usize,
    pub skipped: usize,
    /// Transmitted messages with no ground-truth entry at their send time.
    pub unmatched: usize,
    pub vehicles: usize,
    pub misbehaving_vehicles: usize,
    pub misbehaving_fraction: f64,
    /// First few skip diagnostics, for debugging without log spam.
    pub skip_samples: Vec<String>,
}

impl IngestReport {
    fn skip(&mut self, file: &Path, line_no: usize, why: &str) {
        self.skipped += 1;
        if self.skip_samples.len() < 5 {
            self.skip_samples
                .push(format!("{}:{line_no}: {why}", file.display()));
        }
    }
}

fn json_path<'v>(value: &'v Value, path: &str) -> Option<&'v Value> {
    path.split('.').try_fold(value, |cur, key| cur.get(key))
}

fn finite(value: &Value) -> Option<f64> {
    value.as_f64().filter(|x| x.is_finite())
}

fn uint(value: &Value) -> Option<u64> {
    value.as_u64().or_else(|| {
        let x = value.as_f64()?;
        (x >= 0.0 && x.fract() == 0.0 && x <= u64::MAX as f64).then_some(x as u64)
    })
}

fn code(value: &Value) -> Option<i64> {
    value.as_i64().or_else(|| {
        let x = value.as_f64()?;
        (x.fract() == 0.0 && x.abs() <= i64::MAX as f64).then_some(x as i64)
    })
}

fn vec3(value: &Value) -> Option<Vec3> {
    let arr = value.as_array()?;
    if arr.len() != 3 {
        return None;
    }
    Some(Vec3::new(finite(&arr[0])?, finite(&arr[1])?, finite(&arr[2])?))
}

struct GtEntry {
    time: f64,
    pos: Option<Vec3>,
    spd: Option<Vec3>,
    acl: Option<Vec3>,
    hed: Option<Vec3>,
}

struct GroundTruth {
    /// Per sender, entries sorted by time.
    by_sender: BTreeMap<u64, Vec<GtEntry>>,
    /// Senders whose ground truth carries a nonzero attacker code.
    attacker_codes: BTreeMap<u64, i64>,
}

impl GroundTruth {
    fn load(path: &Path, map: &GroundTruthMap, report: &mut IngestReport) -> Result<GroundTruth> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let mut by_sender: BTreeMap<u64, Vec<GtEntry>> = BTreeMap::new();
        let mut attacker_codes = BTreeMap::new();
        let mut lines = 0usize;
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            lines += 1;
            let line_no = idx + 1;
            let value: Value = match serde_json::from_str(line) {
                Ok(v) => v,
                Err(e) => {
                    report.ground_truth_skipped += 1;
                    report.skip(path, line_no, &format!("bad JSON: {e}"));
                    continue;
                }
            };
            let (Some(sender), Some(time)) = (
                json_path(&value, &map.sender).and_then(uint),
                json_path(&value, &map.time).and_then(finite),
            ) else {
                report.ground_truth_skipped += 1;
                report.skip(path, line_no, "missing sender or time");
                continue;
            };
            if let Some(c) = json_path(&value, &map.attacker).and_then(code) {
                if c != 0 {
                    attacker_codes.insert(sender, c);
                }
            }
            by_sender.entry(sender).or_default().push(GtEntry {
                time,
                pos: json_path(&value, &map.pos).and_then(vec3),
                spd: json_path(&value, &map.spd).and_then(vec3),
                acl: json_path(&value, &map.acl).and_then(vec3),
                hed: json_path(&value, &map.hed).and_then(vec3),
            });
        }
        if lines == 0 {
            bail!("ground truth {} contains no entries", path.display());
        }
        if (report.ground_truth_skipped as f64) > MAX_SKIP_FRACTION * lines as f64 {
            bail!(
                "ground truth {}: {} of {} lines unusable",
                path.display(),
                report.ground_truth_skipped,
                lines
            );
        }
        for entries in by_sender.values_mut() {
            entries.sort_by(|a, b| a.time.total_cmp(&b.time));
        }
        report.ground_truth_entries = by_sender.values().map(Vec::len).sum();
        Ok(GroundTruth { by_sender, attacker_codes })
    }

    /// Closest entry for `sender` within `MATCH_TOL` of `send_time`.
    fn lookup(&self, sender: u64, send_time: f64) -> Option<&GtEntry> {
        let entries = self.by_sender.get(&sender)?;
        let from = entries.partition_point(|e| e.time < send_time - MATCH_TOL);
        entries[from..]
            .iter()
            .take_while(|e| e.time <= send_time + MATCH_TOL)
            .min_by(|a, b| {
                (a.time - send_time)
                    .abs()
                    .total_cmp(&(b.time - send_time).abs())
            })
    }
}

fn diverges(transmitted: &Vec3, truth: Option<&Vec3>) -> bool {
    match truth {
        Some(t) => {
            (transmitted.x - t.x).abs() > DIVERGENCE_TOL
                || (transmitted.y - t.y).abs() > DIVERGENCE_TOL
                || (transmitted.z - t.z).abs() > DIVERGENCE_TOL
        }
        None => false,
    }
}

/// Directory listing, name-sorted for determinism, ground truth excluded.
fn log_files(log_dir: &Path, ground_truth: &Path) -> Result<Vec<PathBuf>> {
    let gt = ground_truth.canonicalize().unwrap_or_else(|_| ground_truth.to_path_buf());
    let mut files = Vec::new();
    for entry in std::fs::read_dir(log_dir)
        .with_context(|| format!("listing {}", log_dir.display()))?
    {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        if path.canonicalize().map(|p| p == gt).unwrap_or(false) {
            continue;
        }
        files.push(path);
    }
    files.sort();
    if files.is_empty() {
        bail!("no log files in {}", log_dir.display());
    }
    Ok(files)
}

/// Parse a whole dataset directory into canonical, time-sorted records.
pub fn parse_dataset(
    log_dir: &Path,
    ground_truth: &Path,
    mapping: &Mapping,
) -> Result<(Vec<BsmRecord>, IngestReport)> {
    let divergence_attack = mapping.divergence_attack()?;
    let codes = mapping.code_table()?;
    let mut report = IngestReport::default();
    let gt = GroundTruth::load(ground_truth, &mapping.ground_truth, &mut report)?;
    let files = log_files(log_dir, ground_truth)?;
    report.log_files = files.len();

    let fm = &mapping.fields;
    let mut records = Vec::new();
    for file in &files {
        let text = std::fs::read_to_string(file)
            .with_context(|| format!("reading {}", file.display()))?;
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let line_no = idx + 1;
            let value: Value = match serde_json::from_str(line) {
                Ok(v) => v,
                Err(e) => {
                    report.candidate_lines += 1;
                    report.skip(file, line_no, &format!("bad JSON: {e}"));
                    continue;
                }
            };
            if fm.kind_filter {
                match json_path(&value, &fm.kind).and_then(code) {
                    Some(k) if k == fm.bsm_kind => {}
                    _ => continue,
                }
            }
            report.candidate_lines += 1;
            let fields = (|| {
                Some((
                    json_path(&value, &fm.recv_time).and_then(finite)?,
                    json_path(&value, &fm.send_time).and_then(finite)?,
                    json_path(&value, &fm.sender).and_then(uint)?,
                    json_path(&value, &fm.pseudo).and_then(uint)?,
                    json_path(&value, &fm.pos).and_then(vec3)?,
                    json_path(&value, &fm.spd).and_then(vec3)?,
                    json_path(&value, &fm.acl).and_then(vec3)?,
                    json_path(&value, &fm.hed).and_then(vec3)?,
                ))
            })();
            let Some((recv_time, send_time, sender, pseudo, pos, spd, acl, hed)) = fields else {
                report.skip(file, line_no, "missing or malformed field");
                continue;
            };
            let attacker_code = gt.attacker_codes.get(&sender).copied();
            let diverged = match gt.lookup(sender, send_time) {
                Some(entry) => {
                    diverges(&pos, entry.pos.as_ref())
                        || diverges(&spd, entry.spd.as_ref())
                        || diverges(&acl, entry.acl.as_ref())
                        || diverges(&hed, entry.hed.as_ref())
                }
                None => {
                    report.unmatched += 1;
                    false
                }
            };
            let label = u8::from(diverged || attacker_code.is_some());
            let attack_type = if label == 0 {
                AttackType::Genuine
            } else {
                match attacker_code {
                    Some(c) => match codes.get(&c) {
                        Some(&at) => at,
                        None if codes.is_empty() => divergence_attack,
                        None => bail!(
                            "sender {sender} carries attacker code {c} with no entry in attack_codes"
                        ),
                    },
                    None => divergence_attack,
                }
            };
            records.push(BsmRecord {
                recv_time,
                send_time,
                sender,
                pseudo,
                pos,
                spd,
                acl,
                hed,
                label,
                attack_type,
            });
        }
    }

    if report.candidate_lines == 0 {
        bail!("no BSM lines found under {}", log_dir.display());
    }
    if (report.skipped as f64) > MAX_SKIP_FRACTION * report.candidate_lines as f64 {
        bail!(
            "{} of {} candidate lines unusable; see skip_samples {:?}",
            report.skipped,
            report.candidate_lines,
            report.skip_samples
        );
    }
    records.sort_by(|a, b| {
        a.recv_time
            .total_cmp(&b.recv_time)
            .then(a.sender.cmp(&b.sender))
            .then(a.send_time.total_cmp(&b.send_time))
    });
    validate_trace(&records).context("ingested records failed trace validation")?;

    report.records = records.len();
    let mut vehicles = BTreeMap::new();
    for r in &records {
        *vehicles.entry(r.sender).or_insert(0u8) |= r.label;
    }
    report.vehicles = vehicles.len();
    report.misbehaving_vehicles = vehicles.values().filter(|&&m| m == 1).count();
    report.misbehaving_fraction = report.misbehaving_vehicles as f64 / vehicles.len() as f64;
    Ok((records, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fmt::Write as _;

    fn gt_line(time: f64, sender: u64, attacker: i64, px: f64) -> String {
        format!(
            "{{\"type\":2,\"time\":{time},\"sender\":{sender},\"attackerType\":{attacker},\
             \"pos\":[{px},0.0,0.0],\"spd\":[5.0,0.0,0.0],\"acl\":[0.1,0.0,0.0],\"hed\":[1.0,0.0,0.0]}}"
        )
    }

    fn bsm_line(recv: f64, send: f64, sender: u64, px: f64) -> String {
        format!(
            "{{\"type\":3,\"rcvTime\":{recv},\"sendTime\":{send},\"sender\":{sender},\
             \"senderPseudo\":{sender}00,\"pos\":[{px},0.0,0.0],\"spd\":[5.0,0.0,0.0],\
             \"acl\":[0.1,0.0,0.0],\"hed\":[1.0,0.0,0.0]}}"
        )
    }

    fn write_dataset(dir: &Path, logs: &[String], gt: &[String]) -> PathBuf {
        let log = logs.join("\n");
        std::fs::write(dir.join("log-1.json"), log).unwrap();
        let gt_path = dir.join("gt.json");
        std::fs::write(&gt_path, gt.join("\n")).unwrap();
        gt_path
    }

    #[test]
    fn labels_follow_divergence_and_attacker_marks() {
        let dir = tempfile::tempdir().unwrap();
        let gt = write_dataset(
            dir.path(),
            &[
                bsm_line(1.0, 0.9, 1, 10.0),        // matches truth exactly
                bsm_line(1.1, 1.0, 2, 500.0),       // truth says 10.0
                bsm_line(1.2, 1.1, 3, 10.0 + 5e-7), // inside tolerance
                bsm_line(1.3, 1.2, 4, 10.0),        // truthful but attacker-coded
                "{\"type\":2,\"rcvTime\":1.4}".to_string(), // filtered, not a skip
            ],
            &[
                gt_line(0.9, 1, 0, 10.0),
                gt_line(1.0, 2, 8, 10.0),
                gt_line(1.1, 3, 0, 10.0),
                gt_line(1.2, 4, 16, 10.0),
            ],
        );
        let mut mapping = Mapping::default();
        mapping
            .attack_codes
            .insert("8".to_string(), "RandomPositionOffset".to_string());
        mapping.attack_codes.insert("16".to_string(), "DoS".to_string());
        let (records, report) = parse_dataset(dir.path(), &gt, &mapping).unwrap();
        assert_eq!(report.skipped, 0);
        assert_eq!(report.candidate_lines, 4);
        let by_sender: BTreeMap<u64, &BsmRecord> =
            records.iter().map(|r| (r.sender, r)).collect();
        assert_eq!(by_sender[&1].label, 0);
        assert_eq!(by_sender[&1].attack_type, AttackType::Genuine);
        assert_eq!(by_sender[&2].label, 1);
        assert_eq!(by_sender[&2].attack_type, AttackType::RandomPositionOffset);
        assert_eq!(by_sender[&3].label, 0);
        assert_eq!(by_sender[&4].label, 1);
        assert_eq!(by_sender[&4].attack_type, AttackType::DoS);
        assert_eq!(report.misbehaving_vehicles, 2);
        assert_eq!(report.vehicles, 4);
    }

    #[test]
    fn diverging_record_without_code_gets_the_fallback_attack() {
        let dir = tempfile::tempdir().unwrap();
        let gt = write_dataset(
            dir.path(),
            &[bsm_line(1.0, 0.9, 1, 77.0)],
            &[gt_line(0.9, 1, 0, 10.0)],
        );
        let (records, _) = parse_dataset(dir.path(), &gt, &Mapping::default()).unwrap();
        assert_eq!(records[0].label, 1);
        assert_eq!(records[0].attack_type, AttackType::RandomPosition);
    }

    #[test]
    fn excessive_skips_abort() {
        let dir = tempfile::tempdir().unwrap();
        let mut broken = String::new();
        for i in 0..9 {
            writeln!(broken, "{{\"type\":3,\"rcvTime\":{i}").unwrap();
        }
        broken.push_str(&bsm_line(9.0, 8.9, 1, 10.0));
        std::fs::write(dir.path().join("log-1.json"), broken).unwrap();
        let gt_path = dir.path().join("gt.json");
        std::fs::write(&gt_path, gt_line(8.9, 1, 0, 10.0)).unwrap();
        let err = parse_dataset(dir.path(), &gt_path, &Mapping::default()).unwrap_err();
        assert!(err.to_string().contains("unusable"), "{err}");
    }

    #[test]
    fn custom_mapping_reaches_nested_keys() {
        let dir = tempfile::tempdir().unwrap();
        let line = "{\"meta\":{\"rx\":1.0,\"tx\":0.9},\"who\":7,\"nym\":700,\
                    \"p\":[10.0,0.0,0.0],\"v\":[5.0,0.0,0.0],\"a\":[0.1,0.0,0.0],\"h\":[1.0,0.0,0.0]}";
        std::fs::write(dir.path().join("log-1.json"), line).unwrap();
        let gt_path = dir.path().join("gt.json");
        std::fs::write(&gt_path, gt_line(0.9, 7, 0, 10.0)).unwrap();
        let toml_text = r#"
            [fields]
            recv_time = "meta.rx"
            send_time = "meta.tx"
            sender = "who"
            pseudo = "nym"
            pos = "p"
            spd = "v"
            acl = "a"
            hed = "h"
            kind_filter = false
        "#;
        let mapping: Mapping = toml::from_str(toml_text).unwrap();
        assert!(!mapping.fields.kind_filter);
        let (records, report) = parse_dataset(dir.path(), &gt_path, &mapping).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(report.unmatched, 0);
        assert_eq!(records[0].sender, 7);
    }

    #[test]
    fn parsing_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let logs: Vec<String> =
            (0..20).map(|i| bsm_line(i as f64 + 1.0, i as f64 + 0.9, i % 5 + 1, 10.0)).collect();
        let gts: Vec<String> =
            (0..20).map(|i| gt_line(i as f64 + 0.9, i % 5 + 1, 0, 10.0)).collect();
        let gt = write_dataset(dir.path(), &logs, &gts);
        let (a, ra) = parse_dataset(dir.path(), &gt, &Mapping::default()).unwrap();
        let (b, rb) = parse_dataset(dir.path(), &gt, &Mapping::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert!(a.windows(2).all(|w| w[0].recv_time <= w[1].recv_time));
    }

    #[test]
    fn unknown_attack_code_is_a_hard_error() {
        let dir = tempfile::tempdir().unwrap();
        let gt = write_dataset(
            dir.path(),
            &[bsm_line(1.0, 0.9, 1, 10.0)],
            &[gt_line(0.9, 1, 3, 10.0)],
        );
        let mut mapping = Mapping::default();
        mapping.attack_codes.insert("16".to_string(), "DoS".to_string());
        let err = parse_dataset(dir.path(), &gt, &mapping).unwrap_err();
        assert!(err.to_string().contains("attacker code 3"), "{err}");
    }
}
