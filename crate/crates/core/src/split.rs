//! Time-based trace splitting with class-ratio preservation at vehicle
//! granularity.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::BsmRecord;

/// Allowed deviation of a slice's vehicle class ratio from the global one.
pub const RATIO_TOLERANCE: f64 = 0.05;

/// Ordered slice fractions; the last slice is the target's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan(pub Vec<f64>);

impl SplitPlan {
    pub fn validate(&self) -> Result<()> {
        if self.0.len() < 2 {
            return Err(Error::InvalidConfig(
                "split plan needs at least two slices".into(),
            ));
        }
        if self.0.iter().any(|&f| !(f > 0.0) || !f.is_finite()) {
            return Err(Error::InvalidConfig(
                "split fractions must be positive".into(),
            ));
        }
        let sum: f64 = self.0.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "split fractions sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Fraction of distinct vehicles that ever misbehave.
pub fn class_ratio(records: &[BsmRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("class_ratio records"));
    }
    let mut misbehaving: BTreeSet<u64> = BTreeSet::new();
    let mut all: BTreeSet<u64> = BTreeSet::new();
    for r in records {
        all.insert(r.sender);
        if r.label == 1 {
            misbehaving.insert(r.sender);
        }
    }
    Ok(misbehaving.len() as f64 / all.len() as f64)
}

fn slice_ratio(slice: &[BsmRecord]) -> f64 {
    if slice.is_empty() {
        return 0.0;
    }
    class_ratio(slice).unwrap_or(0.0)
}

fn vehicle_class(records: &[BsmRecord]) -> BTreeMap<u64, bool> {
    let mut map = BTreeMap::new();
    for r in records {
        let e = map.entry(r.sender).or_insert(false);
        if r.label == 1 {
            *e = true;
        }
    }
    map
}

/// Split a time-sorted trace into contiguous slices per the plan, then
/// repair class-ratio violations by moving whole vehicles between
/// adjacent slices. Slices keep internal receive-time order; every record
/// lands in exactly one slice.
pub fn split_by_time(records: &[BsmRecord], plan: &SplitPlan) -> Result<Vec<Vec<BsmRecord>>> {
    plan.validate()?;
    if records.is_empty() {
        return Err(Error::EmptyInput("split_by_time records"));
    }
    let total = records.len();
    let global = class_ratio(records)?;
    let classes = vehicle_class(records);

    // Contiguous cuts by cumulative record count.
    let mut slices: Vec<Vec<BsmRecord>> = Vec::with_capacity(plan.0.len());
    let mut start = 0usize;
    let mut acc = 0.0;
    for (i, f) in plan.0.iter().enumerate() {
        acc += f;
        let end = if i + 1 == plan.0.len() {
            total
        } else {
            (crate::math::round(acc * total as f64) as usize).clamp(start, total)
        };
        slices.push(records[start..end].to_vec());
        start = end;
    }

    let violated = |s: &[BsmRecord]| {
        s.is_empty() || (slice_ratio(s) - global).abs() > RATIO_TOLERANCE + 1e-12
    };

    // Move one whole vehicle from a neighbor into the worst slice per pass.
    let max_moves = classes.len() * plan.0.len();
    for _ in 0..max_moves {
        let Some(i) = (0..slices.len()).find(|&i| violated(&slices[i])) else {
            return Ok(slices);
        };
        let need_misbehaving = slice_ratio(&slices[i]) < global;
        let present: BTreeSet<u64> = slices[i].iter().map(|r| r.sender).collect();
        // Nearest neighbor slices first.
        let mut donors: Vec<usize> = (0..slices.len()).filter(|&j| j != i).collect();
        donors.sort_by_key(|&j| (j as i64 - i as i64).unsigned_abs());
        let mut moved = false;
        'donor: for j in donors {
            let mut candidates: Vec<u64> = slices[j]
                .iter()
                .map(|r| r.sender)
                .filter(|s| !present.contains(s) && classes[s] == need_misbehaving)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            // Don't strip the donor of its last vehicle of that class.
            candidates.retain(|s| {
                slices[j]
                    .iter()
                    .any(|r| r.sender != *s && classes[&r.sender] == need_misbehaving)
            });
            if let Some(&v) = candidates.first() {
                let (take, keep): (Vec<_>, Vec<_>) =
                    slices[j].iter().cloned().partition(|r| r.sender == v);
                slices[j] = keep;
                slices[i].extend(take);
                slices[i].sort_by(|a, b| a.recv_time.total_cmp(&b.recv_time));
                moved = true;
                break 'donor;
            }
        }
        if !moved {
            return Err(Error::RatioUnsatisfiable(format!(
                "slice {i} ratio {:.3} vs global {global:.3}, no movable vehicle",
                slice_ratio(&slices[i])
            )));
        }
    }
    if slices.iter().any(|s| violated(s)) {
        return Err(Error::RatioUnsatisfiable(
            "move budget exhausted before ratios converged".into(),
        ));
    }
    Ok(slices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{AttackType, Vec3};

    fn rec(t: f64, sender: u64, label: u8) -> BsmRecord {
        BsmRecord {
            recv_time: t,
            send_time: t - 0.05,
            sender,
            pseudo: sender,
            pos: Vec3::ZERO,
            spd: Vec3::ZERO,
            acl: Vec3::ZERO,
            hed: Vec3::ZERO,
            label,
            attack_type: if label == 1 {
                AttackType::RandomPosition
            } else {
                AttackType::Genuine
            },
        }
    }

    #[test]
    fn class_ratio_counts_vehicles_not_records() {
        // Vehicle 1 misbehaving with many records, 2 and 3 genuine.
        let mut rs = Vec::new();
        for k in 0..10 {
            rs.push(rec(k as f64, 1, 1));
        }
        rs.push(rec(0.5, 2, 0));
        rs.push(rec(0.6, 3, 0));
        let ratio = class_ratio(&rs).unwrap();
        assert!((ratio - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn class_ratio_vehicle_with_any_bad_record_is_misbehaving() {
        let rs = vec![rec(0.0, 1, 0), rec(1.0, 1, 1), rec(2.0, 2, 0)];
        assert!((class_ratio(&rs).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn class_ratio_empty_errors() {
        assert!(class_ratio(&[]).is_err());
    }

    #[test]
    fn split_keeps_all_records_once() {
        // 4 vehicles (1 misbehaving), interleaved over 40 s.
        let mut rs = Vec::new();
        for k in 0..40 {
            for v in 1..=4u64 {
                let label = u8::from(v == 4);
                rs.push(rec(k as f64 + v as f64 * 0.1, v, label));
            }
        }
        rs.sort_by(|a, b| a.recv_time.total_cmp(&b.recv_time));
        let plan = SplitPlan(alloc::vec![0.3, 0.3, 0.3, 0.1]);
        let slices = split_by_time(&rs, &plan).unwrap();
        assert_eq!(slices.len(), 4);
        let n: usize = slices.iter().map(Vec::len).sum();
        assert_eq!(n, rs.len());
        // Source slices proportionally larger than the target slice.
        assert!(slices[0].len() >= 3 * slices[3].len() - 3);
        // All vehicles span all slices here, so ratios match globally.
        for s in &slices {
            assert!((slice_ratio(s) - 0.25).abs() <= RATIO_TOLERANCE);
        }
    }

    #[test]
    fn split_time_ordering_between_slices() {
        let mut rs = Vec::new();
        for k in 0..30 {
            for v in 1..=3u64 {
                rs.push(rec(k as f64 + v as f64 * 0.01, v, u8::from(v == 3)));
            }
        }
        let plan = SplitPlan(alloc::vec![0.5, 0.5]);
        let slices = split_by_time(&rs, &plan).unwrap();
        let max_first = slices[0].last().unwrap().recv_time;
        let min_second = slices[1].first().unwrap().recv_time;
        assert!(max_first <= min_second);
    }

    #[test]
    fn split_rebalances_when_second_half_is_all_genuine() {
        // Misbehaving vehicles 5 and 6 only transmit in the first half.
        let mut rs = Vec::new();
        for k in 0..20 {
            for v in 1..=4u64 {
                rs.push(rec(k as f64 + v as f64 * 0.01, v, 0));
            }
            if k < 10 {
                rs.push(rec(k as f64 + 0.05, 5, 1));
                rs.push(rec(k as f64 + 0.06, 6, 1));
            }
        }
        rs.sort_by(|a, b| a.recv_time.total_cmp(&b.recv_time));
        let global = class_ratio(&rs).unwrap();
        let plan = SplitPlan(alloc::vec![0.5, 0.5]);
        let slices = split_by_time(&rs, &plan).unwrap();
        for s in &slices {
            assert!((slice_ratio(s) - global).abs() <= RATIO_TOLERANCE + 1e-12);
        }
        let n: usize = slices.iter().map(Vec::len).sum();
        assert_eq!(n, rs.len());
    }

    #[test]
    fn split_errors_when_no_misbehaving_vehicle_exists_to_move() {
        // Single misbehaving vehicle confined to the first half: the
        // second slice can never be repaired without stripping the donor
        // of its last one.
        let mut rs = Vec::new();
        for k in 0..10 {
            rs.push(rec(k as f64, 1, 0));
            if k < 5 {
                rs.push(rec(0.1 + 0.05 * k as f64, 2, 1));
            }
        }
        rs.sort_by(|a, b| a.recv_time.total_cmp(&b.recv_time));
        let plan = SplitPlan(alloc::vec![0.5, 0.5]);
        assert!(matches!(
            split_by_time(&rs, &plan),
            Err(Error::RatioUnsatisfiable(_))
        ));
    }

    #[test]
    fn plan_must_sum_to_one() {
        let plan = SplitPlan(alloc::vec![0.5, 0.6]);
        assert!(plan.validate().is_err());
    }
}
