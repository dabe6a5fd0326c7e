//! Message trace model: BSM records, attack taxonomy, feature extraction
//! and the windowed detection state fed to the Q-network.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

/// Column order of the canonical trace table.
pub const TRACE_COLUMNS: [&str; 18] = [
    "recv_time",
    "send_time",
    "sender",
    "pseudo",
    "pos_x",
    "pos_y",
    "pos_z",
    "spd_x",
    "spd_y",
    "spd_z",
    "acl_x",
    "acl_y",
    "acl_z",
    "hed_x",
    "hed_y",
    "hed_z",
    "label",
    "attack_type",
];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn norm(&self) -> f64 {
        math::sqrt(self.x * self.x + self.y * self.y + self.z * self.z)
    }

    pub fn add(&self, o: &Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn scale(&self, k: f64) -> Vec3 {
        Vec3::new(self.x * k, self.y * k, self.z * k)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Message falsification kinds, plus `Genuine` for honest traffic.
///
/// The `DoS*` variants are frequency attacks; the `*Sybil` variants change
/// the transmitted pseudonym on every message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AttackType {
    Genuine,
    ConstantPosition,
    ConstantPositionOffset,
    RandomPosition,
    RandomPositionOffset,
    ConstantSpeed,
    ConstantSpeedOffset,
    RandomSpeed,
    RandomSpeedOffset,
    Disruptive,
    DoS,
    DoSRandom,
    DoSDisruptive,
    DoSRandomSybil,
    DoSDisruptiveSybil,
}

impl AttackType {
    pub const ALL: [AttackType; 15] = [
        AttackType::Genuine,
        AttackType::ConstantPosition,
        AttackType::ConstantPositionOffset,
        AttackType::RandomPosition,
        AttackType::RandomPositionOffset,
        AttackType::ConstantSpeed,
        AttackType::ConstantSpeedOffset,
        AttackType::RandomSpeed,
        AttackType::RandomSpeedOffset,
        AttackType::Disruptive,
        AttackType::DoS,
        AttackType::DoSRandom,
        AttackType::DoSDisruptive,
        AttackType::DoSRandomSybil,
        AttackType::DoSDisruptiveSybil,
    ];

    /// Stable name used in trace files and reports.
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackType::Genuine => "Genuine",
            AttackType::ConstantPosition => "ConstantPosition",
            AttackType::ConstantPositionOffset => "ConstantPositionOffset",
            AttackType::RandomPosition => "RandomPosition",
            AttackType::RandomPositionOffset => "RandomPositionOffset",
            AttackType::ConstantSpeed => "ConstantSpeed",
            AttackType::ConstantSpeedOffset => "ConstantSpeedOffset",
            AttackType::RandomSpeed => "RandomSpeed",
            AttackType::RandomSpeedOffset => "RandomSpeedOffset",
            AttackType::Disruptive => "Disruptive",
            AttackType::DoS => "DoS",
            AttackType::DoSRandom => "DoSRandom",
            AttackType::DoSDisruptive => "DoSDisruptive",
            AttackType::DoSRandomSybil => "DoSRandomSybil",
            AttackType::DoSDisruptiveSybil => "DoSDisruptiveSybil",
        }
    }

    pub fn parse(s: &str) -> Option<AttackType> {
        AttackType::ALL.iter().copied().find(|a| a.as_str() == s)
    }

    /// High-frequency (flooding) attack.
    pub fn is_dos(&self) -> bool {
        matches!(
            self,
            AttackType::DoS
                | AttackType::DoSRandom
                | AttackType::DoSDisruptive
                | AttackType::DoSRandomSybil
                | AttackType::DoSDisruptiveSybil
        )
    }

    /// Fresh pseudonym on every message.
    pub fn is_sybil(&self) -> bool {
        matches!(self, AttackType::DoSRandomSybil | AttackType::DoSDisruptiveSybil)
    }

    /// Replays previously observed genuine messages.
    pub fn is_replay(&self) -> bool {
        matches!(
            self,
            AttackType::Disruptive | AttackType::DoSDisruptive | AttackType::DoSDisruptiveSybil
        )
    }
}

/// One received basic safety message with its ground-truth label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BsmRecord {
    pub recv_time: f64,
    pub send_time: f64,
    /// True sender identity (generator / ground-truth scoped; not a feature).
    pub sender: u64,
    /// Transmitted pseudonym; equals `sender` unless the sender runs a
    /// pseudonym-changing attack.
    pub pseudo: u64,
    pub pos: Vec3,
    pub spd: Vec3,
    pub acl: Vec3,
    pub hed: Vec3,
    /// 0 = genuine, 1 = misbehaving.
    pub label: u8,
    pub attack_type: AttackType,
}

impl BsmRecord {
    pub fn kinematics_finite(&self) -> bool {
        self.pos.is_finite() && self.spd.is_finite() && self.acl.is_finite() && self.hed.is_finite()
    }
}

/// Per-message feature vector: Euclidean norms of position, speed,
/// acceleration and heading, in that order.
pub const BASE_FEATURES: usize = 4;

/// Compute the norm features for one record.
pub fn featurize(r: &BsmRecord) -> Result<Vec<f64>> {
    if !r.kinematics_finite() {
        return Err(Error::NonFinite("kinematic field"));
    }
    Ok(vec![r.pos.norm(), r.spd.norm(), r.acl.norm(), r.hed.norm()])
}

/// Feature pipeline settings.
///
/// `include_interarrival` appends a fifth feature: the receive-time gap to
/// the previous message carrying the same pseudonym, clipped to
/// `interarrival_cap`. A never-seen pseudonym yields the cap value, which
/// is what makes flooding attacks with per-message pseudonym changes
/// stand out from steady genuine beaconing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub include_interarrival: bool,
    pub interarrival_cap: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            include_interarrival: false,
            interarrival_cap: 2.0,
        }
    }
}

impl FeatureConfig {
    pub fn dim(&self) -> usize {
        if self.include_interarrival {
            BASE_FEATURES + 1
        } else {
            BASE_FEATURES
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.interarrival_cap > 0.0) || !self.interarrival_cap.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "interarrival_cap must be positive and finite, got {}",
                self.interarrival_cap
            )));
        }
        Ok(())
    }
}

/// Stateful featurizer for a message stream; tracks per-pseudonym receive
/// times for the inter-arrival feature.
pub struct StreamFeaturizer {
    cfg: FeatureConfig,
    last_seen: BTreeMap<u64, f64>,
}

impl StreamFeaturizer {
    pub fn new(cfg: FeatureConfig) -> Self {
        StreamFeaturizer {
            cfg,
            last_seen: BTreeMap::new(),
        }
    }

    pub fn next(&mut self, r: &BsmRecord) -> Result<Vec<f64>> {
        let mut f = featurize(r)?;
        if self.cfg.include_interarrival {
            let cap = self.cfg.interarrival_cap;
            let gap = match self.last_seen.get(&r.pseudo) {
                Some(&prev) => (r.recv_time - prev).min(cap),
                None => cap,
            };
            self.last_seen.insert(r.pseudo, r.recv_time);
            f.push(gap);
        }
        Ok(f)
    }
}

/// Featurize a whole stream in the given order.
pub fn featurize_stream(records: &[BsmRecord], cfg: FeatureConfig) -> Result<Vec<Vec<f64>>> {
    let mut fz = StreamFeaturizer::new(cfg);
    records.iter().map(|r| fz.next(r)).collect()
}

/// Per-feature z-score parameters, fit on training data only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fit on feature rows. Features with (near) zero variance keep scale
    /// 1.0 so constant channels pass through unexploded.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        if m == 0 {
            return Err(Error::EmptyInput("standardizer fit rows"));
        }
        let d = rows[0].len();
        let mut mean = vec![0.0; d];
        for row in rows {
            if row.len() != d {
                return Err(Error::ShapeMismatch {
                    context: "standardizer fit row",
                    expected: d,
                    got: row.len(),
                });
            }
            for (acc, v) in mean.iter_mut().zip(row) {
                *acc += v;
            }
        }
        for acc in mean.iter_mut() {
            *acc /= m as f64;
        }
        let mut var = vec![0.0; d];
        for row in rows {
            for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                let e = v - mu;
                *acc += e * e;
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = math::sqrt(v / m as f64);
                if s < 1e-9 {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, x: &mut [f64]) {
        for ((v, mu), s) in x.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - mu) / s;
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Detection input: a sliding window of the `n` most recent feature
/// vectors together with the `n` most recent actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionState {
    /// Oldest to newest, each row of feature dimension `d`.
    pub time_window: Vec<Vec<f64>>,
    /// Oldest to newest, values 0.0 or 1.0.
    pub action_window: Vec<f64>,
}

impl DetectionState {
    /// All-zero padding state for the start of an episode.
    pub fn initial(window: usize, dim: usize) -> Self {
        DetectionState {
            time_window: vec![vec![0.0; dim]; window],
            action_window: vec![0.0; window],
        }
    }

    pub fn window(&self) -> usize {
        self.time_window.len()
    }

    pub fn dim(&self) -> usize {
        self.time_window.first().map_or(0, Vec::len)
    }

    /// Slide the window: drop the oldest slot, append the new feature
    /// vector and the action taken on the previous message.
    pub fn push(&self, features: &[f64], prev_action: usize) -> Result<Self> {
        if features.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                context: "push features",
                expected: self.dim(),
                got: features.len(),
            });
        }
        let mut time_window = self.time_window[1..].to_vec();
        time_window.push(features.to_vec());
        let mut action_window = self.action_window[1..].to_vec();
        action_window.push(if prev_action == 0 { 0.0 } else { 1.0 });
        Ok(DetectionState {
            time_window,
            action_window,
        })
    }

    pub fn encoded_len(&self) -> usize {
        self.window() * self.dim() + self.window()
    }

    /// Flat encoding consumed by the network: feature rows oldest to
    /// newest, then the action window.
    pub fn encode(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.encoded_len());
        for row in &self.time_window {
            out.extend_from_slice(row);
        }
        out.extend_from_slice(&self.action_window);
        out
    }

    /// Add `delta` (encoded layout) to the feature slots. Entries of
    /// `delta` beyond the feature region must be zero and are ignored.
    pub fn apply_feature_delta(&mut self, delta: &[f64]) -> Result<()> {
        let feat = self.window() * self.dim();
        if delta.len() != self.encoded_len() {
            return Err(Error::ShapeMismatch {
                context: "feature delta",
                expected: self.encoded_len(),
                got: delta.len(),
            });
        }
        let d = self.dim();
        for (i, row) in self.time_window.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += delta[i * d + j];
            }
        }
        debug_assert!(delta[feat..].iter().all(|&v| v == 0.0));
        Ok(())
    }
}

/// Structural checks for a canonical trace: finite ordered timestamps,
/// binary labels and label/attack-kind agreement.
pub fn validate_trace(records: &[BsmRecord]) -> Result<()> {
    let mut prev_recv = f64::NEG_INFINITY;
    for (i, r) in records.iter().enumerate() {
        if !r.recv_time.is_finite() || !r.send_time.is_finite() || !r.kinematics_finite() {
            return Err(Error::MalformedRecord(format!("record {i}: non-finite field")));
        }
        if r.send_time < 0.0 || r.recv_time < r.send_time {
            return Err(Error::MalformedRecord(format!(
                "record {i}: bad timestamps send={} recv={}",
                r.send_time, r.recv_time
            )));
        }
        if r.recv_time < prev_recv {
            return Err(Error::MalformedRecord(format!(
                "record {i}: receive times not sorted"
            )));
        }
        prev_recv = r.recv_time;
        if r.label > 1 {
            return Err(Error::MalformedRecord(format!(
                "record {i}: label {} not in {{0,1}}",
                r.label
            )));
        }
        let genuine = r.attack_type == AttackType::Genuine;
        if (r.label == 0) != genuine {
            return Err(Error::MalformedRecord(format!(
                "record {i}: label {} disagrees with attack type {}",
                r.label,
                r.attack_type.as_str()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(pos: Vec3, spd: Vec3, acl: Vec3, hed: Vec3) -> BsmRecord {
        BsmRecord {
            recv_time: 1.0,
            send_time: 0.95,
            sender: 17,
            pseudo: 17,
            pos,
            spd,
            acl,
            hed,
            label: 0,
            attack_type: AttackType::Genuine,
        }
    }

    #[test]
    fn featurize_norms() {
        let r = record(
            Vec3::new(3.0, 4.0, 0.0),
            Vec3::new(1.0, 2.0, 2.0),
            Vec3::ZERO,
            Vec3::new(0.0, 1.0, 0.0),
        );
        let f = featurize(&r).unwrap();
        assert_eq!(f, vec![5.0, 3.0, 0.0, 1.0]);
    }

    #[test]
    fn featurize_second_norm_case() {
        let r = record(
            Vec3::ZERO,
            Vec3::new(2.0, 3.0, 6.0),
            Vec3::new(2.0, 3.0, 6.0),
            Vec3::ZERO,
        );
        let f = featurize(&r).unwrap();
        assert_eq!(f[1], 7.0);
        assert_eq!(f[2], 7.0);
    }

    #[test]
    fn featurize_rejects_non_finite() {
        let r = record(
            Vec3::new(f64::NAN, 0.0, 0.0),
            Vec3::ZERO,
            Vec3::ZERO,
            Vec3::ZERO,
        );
        assert!(featurize(&r).is_err());
    }

    #[test]
    fn sign_flip_preserves_norm_features() {
        let r = record(
            Vec3::new(3.0, -4.0, 1.0),
            Vec3::new(-1.0, 2.0, -2.0),
            Vec3::new(0.5, 0.0, -0.5),
            Vec3::new(0.0, -1.0, 0.0),
        );
        let mut flipped = r.clone();
        flipped.pos = flipped.pos.scale(-1.0);
        flipped.spd = flipped.spd.scale(-1.0);
        flipped.acl = flipped.acl.scale(-1.0);
        flipped.hed = flipped.hed.scale(-1.0);
        assert_eq!(featurize(&r).unwrap(), featurize(&flipped).unwrap());
    }

    #[test]
    fn push_slides_and_records_action() {
        let s0 = DetectionState::initial(3, 2);
        let s1 = s0.push(&[1.0, 2.0], 1).unwrap();
        assert_eq!(s1.time_window, vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![1.0, 2.0]]);
        assert_eq!(s1.action_window, vec![0.0, 0.0, 1.0]);
        let s2 = s1.push(&[3.0, 4.0], 0).unwrap();
        assert_eq!(s2.time_window[1], vec![1.0, 2.0]);
        assert_eq!(s2.time_window[2], vec![3.0, 4.0]);
        assert_eq!(s2.action_window, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn window_forgets_initial_padding() {
        let n = 4;
        let a = DetectionState::initial(n, 1);
        let mut b = DetectionState::initial(n, 1);
        for row in b.time_window.iter_mut() {
            row[0] = 99.0;
        }
        b.action_window = vec![1.0; n];
        let feed = [(0.5, 1), (0.25, 0), (0.125, 1), (0.0625, 0)];
        let mut sa = a;
        let mut sb = b;
        for (x, act) in feed {
            sa = sa.push(&[x], act).unwrap();
            sb = sb.push(&[x], act).unwrap();
        }
        assert_eq!(sa, sb);
    }

    #[test]
    fn encode_layout_and_delta() {
        let s0 = DetectionState::initial(2, 2);
        let s1 = s0.push(&[1.0, 2.0], 1).unwrap();
        let enc = s1.encode();
        assert_eq!(enc, vec![0.0, 0.0, 1.0, 2.0, 0.0, 1.0]);
        let mut s2 = s1.clone();
        s2.apply_feature_delta(&[0.1, 0.0, -0.1, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(s2.time_window[0], vec![0.1, 0.0]);
        assert_eq!(s2.time_window[1], vec![0.9, 2.0]);
        assert_eq!(s2.action_window, s1.action_window);
    }

    #[test]
    fn interarrival_tracks_pseudonym_gaps() {
        let cfg = FeatureConfig {
            include_interarrival: true,
            interarrival_cap: 2.0,
        };
        let mut fz = StreamFeaturizer::new(cfg);
        let mut a = record(Vec3::ZERO, Vec3::ZERO, Vec3::ZERO, Vec3::ZERO);
        a.recv_time = 1.0;
        let f1 = fz.next(&a).unwrap();
        assert_eq!(f1[4], 2.0); // unseen pseudonym reads as the cap
        let mut b = a.clone();
        b.recv_time = 2.1;
        let f2 = fz.next(&b).unwrap();
        assert!((f2[4] - 1.1).abs() < 1e-12);
        let mut c = a.clone();
        c.pseudo = 99;
        c.recv_time = 2.2;
        let f3 = fz.next(&c).unwrap();
        assert_eq!(f3[4], 2.0);
    }

    #[test]
    fn standardizer_fit_apply() {
        let rows = vec![vec![1.0, 5.0], vec![3.0, 5.0]];
        let st = Standardizer::fit(&rows).unwrap();
        assert_eq!(st.mean, vec![2.0, 5.0]);
        assert_eq!(st.std[0], 1.0);
        assert_eq!(st.std[1], 1.0); // zero variance keeps unit scale
        let mut x = vec![3.0, 5.0];
        st.apply(&mut x);
        assert_eq!(x, vec![1.0, 0.0]);
    }

    #[test]
    fn validate_trace_rejects_label_mismatch() {
        let mut r = record(Vec3::ZERO, Vec3::ZERO, Vec3::ZERO, Vec3::ZERO);
        r.label = 1; // still marked Genuine
        let err = validate_trace(&[r]).unwrap_err();
        assert!(matches!(err, Error::MalformedRecord(_)));
    }
}
