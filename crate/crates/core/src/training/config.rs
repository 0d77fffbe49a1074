//! Flat `key = value` training configuration.

use std::path::Path;

use crate::data::SplitRatios;
use crate::error::{Error, Result};
use crate::model::Architecture;

/// Structure-level ablations. Each flag removes one component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Ablation {
    pub no_itm: bool,
    pub no_itc: bool,
    pub no_cmf: bool,
    pub no_att: bool,
    pub no_agu: bool,
}

impl Ablation {
    /// The full model followed by the five single-component variants.
    pub fn variants() -> [(&'static str, Ablation); 6] {
        let none = Ablation::default();
        [
            ("COOLANT", none),
            ("w/o ITM", Ablation { no_itm: true, ..none }),
            ("w/o ITC", Ablation { no_itc: true, ..none }),
            ("w/o CMF", Ablation { no_cmf: true, ..none }),
            ("w/o ATT", Ablation { no_att: true, ..none }),
            ("w/o AGU", Ablation { no_agu: true, ..none }),
        ]
    }

    /// All 32 flag combinations.
    pub fn all_combinations() -> Vec<Ablation> {
        (0u8..32)
            .map(|b| Ablation {
                no_itm: b & 1 != 0,
                no_itc: b & 2 != 0,
                no_cmf: b & 4 != 0,
                no_att: b & 8 != 0,
                no_agu: b & 16 != 0,
            })
            .collect()
    }

    pub fn uses_itm(&self) -> bool {
        !self.no_itm
    }

    pub fn uses_itc(&self) -> bool {
        !self.no_itc
    }

    /// Soft targets come from the consistency branch, so both must be on.
    pub fn uses_sem(&self) -> bool {
        !self.no_itc && !self.no_itm
    }

    /// Guidance needs learned gates to act on.
    pub fn uses_ag(&self) -> bool {
        !self.no_agu && !self.no_att
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lambda_sem: f64,
    pub gamma_ag: f64,
    pub itm_margin: f64,
    pub tau_init: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub negatives_per_positive: usize,
    pub arch: Architecture,
    pub split: SplitRatios,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 64,
            max_epochs: 50,
            patience: 5,
            lambda_sem: 0.2,
            gamma_ag: 0.5,
            itm_margin: 0.2,
            tau_init: 0.07,
            seed: 0,
            ablation: Ablation::default(),
            negatives_per_positive: 1,
            arch: Architecture::default(),
            split: SplitRatios::default(),
        }
    }
}

/// Every recognized key, in serialization order.
pub const CONFIG_KEYS: [&str; 25] = [
    "learning_rate",
    "batch_size",
    "max_epochs",
    "patience",
    "lambda_sem",
    "gamma_ag",
    "itm_margin",
    "tau_init",
    "seed",
    "no_itm",
    "no_itc",
    "no_cmf",
    "no_att",
    "no_agu",
    "negatives_per_positive",
    "d_in",
    "hidden",
    "embed",
    "shared_hidden",
    "aligned",
    "latent",
    "classifier_hidden",
    "train_ratio",
    "val_ratio",
    "test_ratio",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value {value:?} for {key}"))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and >= 0"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2"));
        }
        if self.patience == 0 {
            return Err(Error::invalid("patience must be at least 1"));
        }
        if !nonneg(self.lambda_sem) || !nonneg(self.gamma_ag) {
            return Err(Error::invalid("lambda_sem and gamma_ag must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.itm_margin) {
            return Err(Error::invalid("itm_margin must lie in [0, 1)"));
        }
        if !positive(self.tau_init) {
            return Err(Error::invalid("tau_init must be positive"));
        }
        if self.negatives_per_positive == 0 {
            return Err(Error::invalid("negatives_per_positive must be at least 1"));
        }
        self.arch.validate()?;
        self.split.validate()
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let a = &mut self.ablation;
        match key {
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "patience" => self.patience = parse_value(key, value)?,
            "lambda_sem" => self.lambda_sem = parse_value(key, value)?,
            "gamma_ag" => self.gamma_ag = parse_value(key, value)?,
            "itm_margin" => self.itm_margin = parse_value(key, value)?,
            "tau_init" => self.tau_init = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "no_itm" => a.no_itm = parse_value(key, value)?,
            "no_itc" => a.no_itc = parse_value(key, value)?,
            "no_cmf" => a.no_cmf = parse_value(key, value)?,
            "no_att" => a.no_att = parse_value(key, value)?,
            "no_agu" => a.no_agu = parse_value(key, value)?,
            "negatives_per_positive" => self.negatives_per_positive = parse_value(key, value)?,
            "d_in" => self.arch.d_in = parse_value(key, value)?,
            "hidden" => self.arch.hidden = parse_value(key, value)?,
            "embed" => self.arch.embed = parse_value(key, value)?,
            "shared_hidden" => self.arch.shared_hidden = parse_value(key, value)?,
            "aligned" => self.arch.aligned = parse_value(key, value)?,
            "latent" => self.arch.latent = parse_value(key, value)?,
            "classifier_hidden" => self.arch.classifier_hidden = parse_value(key, value)?,
            "train_ratio" => self.split.train = parse_value(key, value)?,
            "val_ratio" => self.split.val = parse_value(key, value)?,
            "test_ratio" => self.split.test = parse_value(key, value)?,
            _ => return Err(format!("unknown configuration key {key:?}")),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let a = &self.ablation;
        match key {
            "learning_rate" => self.learning_rate.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "patience" => self.patience.to_string(),
            "lambda_sem" => self.lambda_sem.to_string(),
            "gamma_ag" => self.gamma_ag.to_string(),
            "itm_margin" => self.itm_margin.to_string(),
            "tau_init" => self.tau_init.to_string(),
            "seed" => self.seed.to_string(),
            "no_itm" => a.no_itm.to_string(),
            "no_itc" => a.no_itc.to_string(),
            "no_cmf" => a.no_cmf.to_string(),
            "no_att" => a.no_att.to_string(),
            "no_agu" => a.no_agu.to_string(),
            "negatives_per_positive" => self.negatives_per_positive.to_string(),
            "d_in" => self.arch.d_in.to_string(),
            "hidden" => self.arch.hidden.to_string(),
            "embed" => self.arch.embed.to_string(),
            "shared_hidden" => self.arch.shared_hidden.to_string(),
            "aligned" => self.arch.aligned.to_string(),
            "latent" => self.arch.latent.to_string(),
            "classifier_hidden" => self.arch.classifier_hidden.to_string(),
            "train_ratio" => self.split.train.to_string(),
            "val_ratio" => self.split.val.to_string(),
            "test_ratio" => self.split.test.to_string(),
            _ => unreachable!("unlisted key {key}"),
        }
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are skipped; unknown or repeated keys are errors.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut config = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: source.into(),
                line: i + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, found {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) && CONFIG_KEYS.contains(&key) {
                return Err(err(format!("duplicate key {key:?}")));
            }
            config.set(key, value).map_err(err)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::parse(&c.to_text(), "mem").unwrap(), c);
        assert_eq!(c.to_text().lines().count(), CONFIG_KEYS.len());
    }

    #[test]
    fn parses_overrides_and_comments() {
        let text = "# sweep\nlearning_rate = 0.01\n\nno_itc=true  # variant\nseed = 7\naligned = 8\n";
        let c = TrainConfig::parse(text, "cfg").unwrap();
        assert_eq!(c.learning_rate, 0.01);
        assert!(c.ablation.no_itc && !c.ablation.no_itm);
        assert_eq!((c.seed, c.arch.aligned), (7, 8));
        let back = TrainConfig::parse(&c.to_text(), "cfg").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = TrainConfig::parse("seed = 1\nlearning_rat = 0.1\n", "my.cfg").unwrap_err();
        match err {
            Error::Parse { path, line, message } => {
                assert_eq!((path.to_str().unwrap(), line), ("my.cfg", 2));
                assert!(message.contains("learning_rat"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "batch_size = many",
            "no_att = yes",
            "seed = 1\nseed = 2",
            "patience = 0",
            "learning_rate = -1",
            "itm_margin = 1.0",
            "train_ratio = 0.9",
            "just a line",
        ] {
            assert!(TrainConfig::parse(text, "t").is_err(), "{text}");
        }
    }

    #[test]
    fn ablation_helpers() {
        assert_eq!(Ablation::all_combinations().len(), 32);
        let v = Ablation::variants();
        assert_eq!(v[0].1, Ablation::default());
        assert!(v[2].1.no_itc && !v[2].1.uses_sem());
        assert!(!v[4].1.uses_ag());
    }
}
