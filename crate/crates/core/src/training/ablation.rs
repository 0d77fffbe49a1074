//! Multi-seed comparison of the full model against its single-component variants.

use serde::{Deserialize, Serialize};

use crate::data::{split, FeatureRecord};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

use super::config::{Ablation, TrainConfig};
use super::{evaluate_records, train};

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub name: String,
    pub accuracy: MeanSd,
    pub fake_f1: MeanSd,
    pub real_f1: MeanSd,
    /// Test-split report of each seed, in seed order.
    pub runs: Vec<MetricsReport>,
}

/// Seed `i` of `n` uses `base.seed + i` for both the split and the training run.
pub fn seeded_config(base: &TrainConfig, i: usize, ablation: Ablation) -> TrainConfig {
    TrainConfig {
        seed: base.seed.wrapping_add(i as u64),
        ablation,
        ..base.clone()
    }
}

/// Splits with the config's ratios and seed, trains, and evaluates on the test split.
pub fn train_and_test(records: &[FeatureRecord], config: &TrainConfig) -> Result<MetricsReport> {
    let (train_set, val_set, test_set) = split(records, config.split, config.seed)?;
    if test_set.is_empty() {
        return Err(Error::invalid("test split is empty"));
    }
    let outcome = train(&train_set, &val_set, config)?;
    Ok(evaluate_records(&outcome.checkpoint.params, config, &test_set)?.report)
}

/// Trains every variant of [`Ablation::variants`] on `seeds` seeds.
/// The base config's own ablation flags are ignored.
pub fn ablation_study(records: &[FeatureRecord], base: &TrainConfig, seeds: usize) -> Result<Vec<VariantSummary>> {
    if seeds == 0 {
        return Err(Error::invalid("at least one seed is required"));
    }
    Ablation::variants()
        .into_iter()
        .map(|(name, ablation)| {
            let runs = (0..seeds)
                .map(|i| train_and_test(records, &seeded_config(base, i, ablation)))
                .collect::<Result<Vec<_>>>()?;
            let stat = |f: fn(&MetricsReport) -> f64| MeanSd::of(&runs.iter().map(f).collect::<Vec<_>>());
            Ok(VariantSummary {
                name: name.to_string(),
                accuracy: stat(|r| r.accuracy),
                fake_f1: stat(|r| r.fake.f1),
                real_f1: stat(|r| r.real.f1),
                runs,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_sd_hand_values() {
        let s = MeanSd::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(MeanSd::of(&[0.7]), MeanSd { mean: 0.7, sd: 0.0 });
    }
}
