//! Confusion counts and the Matthews correlation coefficient. The upset class `-1` is positive.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_labels(truth: &[i8], predicted: &[i8]) -> Self {
        let mut c = Self::default();
        for (&y, &p) in truth.iter().zip(predicted) {
            c.add(y, p);
        }
        c
    }

    pub fn add(&mut self, truth: i8, predicted: i8) {
        match (truth < 0, predicted < 0) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Matthews correlation coefficient; zero when any denominator factor vanishes.
pub fn mcc(c: &ConfusionCounts) -> f64 {
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if den == 0.0 {
        return 0.0;
    }
    (tp * tn - fp * fn_) / den.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(tp: u64, tn: u64, fp: u64, fn_: u64) -> ConfusionCounts {
        ConfusionCounts { tp, tn, fp, fn_ }
    }

    #[test]
    fn examples() {
        assert_eq!(mcc(&counts(50, 50, 0, 0)), 1.0);
        assert_eq!(mcc(&counts(25, 25, 25, 25)), 0.0);
        assert_eq!(mcc(&counts(30, 0, 70, 0)), 0.0);
        assert_eq!(mcc(&counts(30, 70, 0, 0)), 1.0);
        assert_eq!(mcc(&counts(0, 0, 50, 50)), -1.0);
        assert_eq!(mcc(&counts(0, 0, 0, 0)), 0.0);
    }

    #[test]
    fn from_labels() {
        let c = ConfusionCounts::from_labels(&[-1, -1, 1, 1, 1], &[-1, 1, -1, 1, 1]);
        assert_eq!(c, counts(1, 2, 1, 1));
    }
}
