//! Central-difference check of the joint-loss gradient.

use crate::aggregation::{dataset_posteriors, DatasetPosteriors};
use crate::contrastive::build_pair_dataset;
use crate::data::{generate_synthetic, SyntheticSpec};
use crate::encoders::posterior_rows;
use crate::error::{Error, Result};
use crate::model::{Architecture, Modality, Params};

use super::config::TrainConfig;
use super::loss::{compute_targets, forward, joint_loss_value, joint_loss_with_signature, Batch, Targets};

pub const AUDIT_STEP: f64 = 1e-5;
/// Denominator floor of the relative error.
pub const AUDIT_FLOOR: f64 = 1e-6;

/// Widths used by the audit instance.
pub fn audit_architecture() -> Architecture {
    Architecture {
        d_in: 6,
        hidden: 6,
        embed: 6,
        shared_hidden: 6,
        aligned: 8,
        latent: 4,
        classifier_hidden: 6,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub max_rel_error: f64,
    /// Parameter holding the worst coordinate.
    pub worst: String,
    pub checked: usize,
    /// Coordinates skipped because a step crossed a non-smooth branch.
    pub skipped: usize,
}

impl AuditReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// A tiny fixed problem on which gradients are compared.
pub struct AuditInstance {
    pub config: TrainConfig,
    pub params: Params,
    pub batch: Batch,
    pub dataset: DatasetPosteriors,
    pub targets: Targets,
}

impl AuditInstance {
    /// Four records (two real, two fake) at the audit widths.
    pub fn new(config: &TrainConfig, seed: u64) -> Result<Self> {
        let mut config = config.clone();
        config.arch = audit_architecture();
        let records = generate_synthetic(&SyntheticSpec {
            n_records: 4,
            d_in: config.arch.d_in,
            latent_dim: 3,
            noise: 0.1,
            fake_mismatched: 0.25,
            fake_corrupted: 0.25,
            seed,
        })?;
        let pairs = build_pair_dataset(&records, config.negatives_per_positive, seed)?;
        let batch = Batch::new(&records.iter().collect::<Vec<_>>(), &pairs.iter().collect::<Vec<_>>())?;
        // Larger-than-default weights keep activations away from zero.
        let params = Params::init(&config.arch, seed, config.tau_init).map(|name, m| {
            if name.ends_with(".bias") {
                crate::numerics::seeded_init(m.rows(), m.cols(), crate::numerics::InitScheme::UniformScaled, seed ^ 0x5eed)
                    .scale(0.3)
            } else {
                m.clone()
            }
        });
        let out = forward(&params, &config, &batch.img, &batch.txt)?;
        let dataset = DatasetPosteriors {
            image: dataset_posteriors(&posterior_rows(Modality::Image, &out.m_img, &params)?)?,
            text: dataset_posteriors(&posterior_rows(Modality::Text, &out.m_txt, &params)?)?,
        };
        let targets = compute_targets(&batch, &params, &config, &dataset)?;
        Ok(Self {
            config,
            params,
            batch,
            dataset,
            targets,
        })
    }

    pub fn analytic(&self) -> Result<(Params, u64)> {
        let (_, grads, sig) =
            joint_loss_with_signature(&self.batch, &self.params, &self.config, &self.dataset, Some(&self.targets))?;
        Ok((grads, sig))
    }

    fn loss_at(&self, params: &Params) -> Result<(f64, u64)> {
        let (b, sig) = joint_loss_value(&self.batch, params, &self.config, &self.dataset, Some(&self.targets))?;
        Ok((b.total, sig))
    }

    /// Compares `analytic` against central differences at every coordinate.
    pub fn check(&self, analytic: &Params, base_signature: u64) -> Result<AuditReport> {
        let mut report = AuditReport {
            max_rel_error: 0.0,
            worst: String::new(),
            checked: 0,
            skipped: 0,
        };
        let mut probe = self.params.clone();
        let names = self.params.names();
        let grads = analytic.to_vec();
        for (slot, ((name, g), _)) in grads.iter().zip(&names).enumerate() {
            for k in 0..g.len() {
                let original = probe.slots_mut()[slot].as_slice()[k];
                probe.slots_mut()[slot].as_mut_slice()[k] = original + AUDIT_STEP;
                let (plus, sig_plus) = self.loss_at(&probe)?;
                probe.slots_mut()[slot].as_mut_slice()[k] = original - AUDIT_STEP;
                let (minus, sig_minus) = self.loss_at(&probe)?;
                probe.slots_mut()[slot].as_mut_slice()[k] = original;
                if sig_plus != base_signature || sig_minus != base_signature {
                    report.skipped += 1;
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * AUDIT_STEP);
                let a = g.as_slice()[k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(AUDIT_FLOOR);
                if !rel.is_finite() {
                    return Err(Error::NonFinite(format!("audit of {name}[{k}]")));
                }
                report.checked += 1;
                if rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = format!("{name}[{k}]");
                }
            }
        }
        Ok(report)
    }
}

/// Audits the joint-loss gradient for `config`'s ablation flags and loss weights.
pub fn grad_audit(config: &TrainConfig, seed: u64) -> Result<AuditReport> {
    let instance = AuditInstance::new(config, seed)?;
    let (grads, sig) = instance.analytic()?;
    instance.check(&grads, sig)
}
