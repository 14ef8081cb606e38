//! Serializable metrics and their text renderings.

use depthlane_core::MetricsReport;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub x_err_near: f64,
    pub x_err_far: f64,
    pub z_err_near: f64,
    pub z_err_far: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl From<&MetricsReport> for Report {
    fn from(r: &MetricsReport) -> Self {
        Self {
            f1: r.f1,
            precision: r.precision,
            recall: r.recall,
            accuracy: r.accuracy,
            x_err_near: r.x_err_near,
            x_err_far: r.x_err_far,
            z_err_near: r.z_err_near,
            z_err_far: r.z_err_far,
            true_positives: r.true_positives,
            false_positives: r.false_positives,
            false_negatives: r.false_negatives,
        }
    }
}

impl Report {
    /// `key = value` lines, valid TOML.
    pub fn to_key_value(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn from_key_value(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Two-line human-readable summary.
    pub fn table(&self) -> String {
        format!(
            "{:>6} {:>6} {:>6} {:>6} {:>8} {:>8} {:>8} {:>8}\n{:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3}\n",
            "F1", "P", "R", "Acc", "x_near", "x_far", "z_near", "z_far",
            self.f1, self.precision, self.recall, self.accuracy,
            self.x_err_near, self.x_err_far, self.z_err_near, self.z_err_far
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_value_round_trip() {
        let r = Report {
            f1: 2.0 / 3.0,
            precision: 1.0,
            recall: 0.5,
            accuracy: 0.5,
            x_err_near: 0.1,
            x_err_far: 0.1,
            z_err_near: 0.0,
            z_err_far: 0.0,
            true_positives: 2,
            false_positives: 0,
            false_negatives: 2,
        };
        assert_eq!(Report::from_key_value(&r.to_key_value()).unwrap(), r);
    }
}
