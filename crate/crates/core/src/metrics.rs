//! Confusion-matrix metrics with FAKE as the positive class.

use serde::{Deserialize, Serialize};

use crate::data::Label;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Label, Label)>) -> Self {
        let mut c = Confusion::default();
        for (truth, pred) in pairs {
            c.record(truth, pred);
        }
        c
    }

    pub fn record(&mut self, truth: Label, predicted: Label) {
        match (truth, predicted) {
            (Label::Fake, Label::Fake) => self.tp += 1,
            (Label::Real, Label::Fake) => self.fp += 1,
            (Label::Fake, Label::Real) => self.fn_ += 1,
            (Label::Real, Label::Real) => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ClassMetrics {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub fake: ClassMetrics,
    pub real: ClassMetrics,
    pub confusion: Confusion,
}

impl Metrics {
    pub fn from_confusion(c: Confusion) -> Self {
        let total = c.total();
        Self {
            accuracy: if total == 0 {
                0.0
            } else {
                (c.tp + c.tn) as f64 / total as f64
            },
            fake: ClassMetrics::from_counts(c.tp, c.fp, c.fn_),
            // REAL as positive swaps the roles of the off-diagonal counts
            real: ClassMetrics::from_counts(c.tn, c.fn_, c.fp),
            confusion: c,
        }
    }

    /// Share of predictions that were FAKE.
    pub fn fake_prediction_rate(&self) -> f64 {
        let c = &self.confusion;
        if c.total() == 0 {
            0.0
        } else {
            (c.tp + c.fp) as f64 / c.total() as f64
        }
    }
}
