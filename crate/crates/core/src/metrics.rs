//! Detection quality accounting: confusion counts and derived metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub true_neg: u64,
    pub false_pos: u64,
    pub false_neg: u64,
}

impl ConfusionCounts {
    pub fn record(&mut self, action: usize, label: u8) {
        match (action, label) {
            (1, 1) => self.true_pos += 1,
            (0, 0) => self.true_neg += 1,
            (1, 0) => self.false_pos += 1,
            _ => self.false_neg += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.true_pos + self.true_neg + self.false_pos + self.false_neg
    }

    pub fn merge(&mut self, o: &ConfusionCounts) {
        self.true_pos += o.true_pos;
        self.true_neg += o.true_neg;
        self.false_pos += o.false_pos;
        self.false_neg += o.false_neg;
    }
}

/// Accuracy, precision, recall and F-score. Precision is undefined when
/// nothing was flagged and recall when no positives exist; undefined
/// values are reported as 0.0 with the matching flag cleared.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub precision_defined: bool,
    pub recall_defined: bool,
}

pub fn metrics(c: &ConfusionCounts) -> Result<MetricsRow> {
    let total = c.total();
    if total == 0 {
        return Err(Error::EmptyInput("confusion counts"));
    }
    let tp = c.true_pos as f64;
    let tn = c.true_neg as f64;
    let fp = c.false_pos as f64;
    let fneg = c.false_neg as f64;
    let accuracy = (tp + tn) / total as f64;
    let precision_defined = c.true_pos + c.false_pos > 0;
    let recall_defined = c.true_pos + c.false_neg > 0;
    let precision = if precision_defined { tp / (tp + fp) } else { 0.0 };
    let recall = if recall_defined { tp / (tp + fneg) } else { 0.0 };
    let f_score = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(MetricsRow {
        accuracy,
        precision,
        recall,
        f_score,
        precision_defined,
        recall_defined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_arithmetic_case() {
        let c = ConfusionCounts {
            true_pos: 30,
            true_neg: 50,
            false_pos: 10,
            false_neg: 10,
        };
        let m = metrics(&c).unwrap();
        assert!((m.accuracy - 0.8).abs() < 1e-15);
        assert!((m.precision - 0.75).abs() < 1e-15);
        assert!((m.recall - 0.75).abs() < 1e-15);
        assert!((m.f_score - 0.75).abs() < 1e-15);
    }

    #[test]
    fn perfect_detector() {
        let c = ConfusionCounts {
            true_pos: 30,
            true_neg: 70,
            false_pos: 0,
            false_neg: 0,
        };
        let m = metrics(&c).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.f_score, 1.0);
    }

    #[test]
    fn never_flags_has_undefined_precision() {
        let c = ConfusionCounts {
            true_pos: 0,
            true_neg: 70,
            false_pos: 0,
            false_neg: 30,
        };
        let m = metrics(&c).unwrap();
        assert!(!m.precision_defined);
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.f_score, 0.0);
        assert!(m.recall_defined);
    }

    #[test]
    fn no_positives_has_undefined_recall() {
        let c = ConfusionCounts {
            true_pos: 0,
            true_neg: 70,
            false_pos: 5,
            false_neg: 0,
        };
        let m = metrics(&c).unwrap();
        assert!(!m.recall_defined);
    }

    #[test]
    fn empty_counts_error() {
        assert!(metrics(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn record_maps_action_label_pairs() {
        let mut c = ConfusionCounts::default();
        c.record(1, 1);
        c.record(0, 0);
        c.record(1, 0);
        c.record(0, 1);
        assert_eq!(
            c,
            ConfusionCounts {
                true_pos: 1,
                true_neg: 1,
                false_pos: 1,
                false_neg: 1
            }
        );
    }
}
