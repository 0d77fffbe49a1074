//! Binary classification metrics: accuracy plus per-class precision,
//! recall, and F1, with fake as the positive class of the confusion counts.

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Counts with the real class taken as positive.
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            tn: self.tp,
            fn_: self.fp,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Accuracy and one metric block per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub fake: ClassMetrics,
    pub real: ClassMetrics,
    pub counts: ConfusionCounts,
    /// Metrics whose denominator was zero and were reported as 0.
    pub zero_division: Vec<String>,
}

/// Tallies predictions against truths.
pub fn confusion(predictions: &[Label], truths: &[Label]) -> Result<ConfusionCounts> {
    if predictions.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truths.len()
        )));
    }
    if truths.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty prediction set"));
    }
    let mut c = ConfusionCounts::default();
    for (p, t) in predictions.iter().zip(truths) {
        match (p, t) {
            (Label::Fake, Label::Fake) => c.tp += 1,
            (Label::Fake, Label::Real) => c.fp += 1,
            (Label::Real, Label::Real) => c.tn += 1,
            (Label::Real, Label::Fake) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64, name: String, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(name);
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_metrics(c: &ConfusionCounts, class: &str, flags: &mut Vec<String>) -> ClassMetrics {
    let precision = ratio(c.tp, c.tp + c.fp, format!("{class}.precision"), flags);
    let recall = ratio(c.tp, c.tp + c.fn_, format!("{class}.recall"), flags);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassMetrics { precision, recall, f1 }
}

/// Report computed from given confusion counts.
pub fn report_from_counts(counts: ConfusionCounts) -> Result<MetricsReport> {
    if counts.total() == 0 {
        return Err(Error::invalid("cannot evaluate an empty prediction set"));
    }
    let mut flags = Vec::new();
    let fake = class_metrics(&counts, "fake", &mut flags);
    let real = class_metrics(&counts.swapped(), "real", &mut flags);
    Ok(MetricsReport {
        accuracy: (counts.tp + counts.tn) as f64 / counts.total() as f64,
        fake,
        real,
        counts,
        zero_division: flags,
    })
}

pub fn evaluate(predictions: &[Label], truths: &[Label]) -> Result<MetricsReport> {
    report_from_counts(confusion(predictions, truths)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Label::{Fake, Real};

    #[test]
    fn perfect_predictions() {
        let y = [Fake, Real, Real, Fake];
        let r = evaluate(&y, &y).unwrap();
        assert_eq!(r.accuracy, 1.0);
        for m in [r.fake, r.real] {
            assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        }
        assert!(r.zero_division.is_empty());
    }

    #[test]
    fn single_class_predictions_on_balanced_truth() {
        let r = evaluate(&[Fake; 4], &[Fake, Real, Fake, Real]).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!((r.fake.precision, r.fake.recall), (0.5, 1.0));
        assert_eq!((r.real.precision, r.real.recall, r.real.f1), (0.0, 0.0, 0.0));
        assert_eq!(r.zero_division, vec!["real.precision".to_string()]);
    }

    #[test]
    fn counts_example() {
        let r = report_from_counts(ConfusionCounts {
            tp: 3,
            fp: 1,
            tn: 4,
            fn_: 2,
        })
        .unwrap();
        assert_eq!(r.fake.precision, 0.75);
        assert_eq!(r.fake.recall, 0.6);
        assert!((r.fake.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.accuracy, 0.7);
    }

    #[test]
    fn errors() {
        assert!(evaluate(&[], &[]).is_err());
        assert!(evaluate(&[Fake], &[Fake, Real]).is_err());
    }

    #[test]
    fn report_serializes_with_fn_key() {
        let r = evaluate(&[Fake, Real], &[Real, Fake]).unwrap();
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"fn\":1"));
        let back: MetricsReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
    }

    fn flip(v: &[bool]) -> Vec<Label> {
        v.iter().map(|&b| if b { Fake } else { Real }).collect()
    }

    proptest! {
        #[test]
        fn swapping_classes_swaps_blocks(p in prop::collection::vec(any::<bool>(), 1..40), t in prop::collection::vec(any::<bool>(), 40)) {
            let t = &t[..p.len()];
            let a = evaluate(&flip(&p), &flip(t)).unwrap();
            let inv = |v: &[bool]| flip(&v.iter().map(|b| !b).collect::<Vec<_>>());
            let b = evaluate(&inv(&p), &inv(t)).unwrap();
            prop_assert_eq!(a.accuracy, b.accuracy);
            prop_assert_eq!(a.fake, b.real);
            prop_assert_eq!(a.real, b.fake);
            prop_assert_eq!(a.counts.total(), p.len() as u64);
        }
    }
}
