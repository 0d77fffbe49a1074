//! Joint optimization with Adam, early stopping on validation accuracy,
//! checkpointing, and a finite-difference gradient auditor.

mod ablation;
mod audit;
mod checkpoint;
mod config;
mod loss;
mod optimizer;

pub use ablation::{ablation_study, seeded_config, train_and_test, MeanSd, VariantSummary};
pub use audit::{audit_architecture, grad_audit, AuditInstance, AuditReport, AUDIT_FLOOR, AUDIT_STEP};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{Ablation, TrainConfig, CONFIG_KEYS};
pub use loss::{
    ambiguity_scores, compute_targets, effective_tau, forward, joint_loss, joint_loss_value,
    joint_loss_with_signature, mean_cls_loss, stack_records, Batch, ForwardOutputs, LossBreakdown, Targets,
    TAU_MAX, TAU_MIN,
};
pub use optimizer::{adam_step, adam_update, AdamState, BETA1, BETA2, EPSILON};

use serde::{Deserialize, Serialize};

use crate::aggregation::{DatasetPosteriors, PosteriorAccumulator};
use crate::contrastive::build_pair_dataset;
use crate::data::{batches, FeatureRecord};
use crate::encoders::posterior;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{Modality, Params};

/// One line of the training log: mean batch losses and validation results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub l_itm: f64,
    pub l_itc: f64,
    pub l_sem: f64,
    pub l_cls: f64,
    pub l_ag: f64,
    pub total: f64,
    pub val_accuracy: f64,
    pub val_cls_loss: f64,
    pub tau: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// State at the best validation epoch.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
    /// Every batch's loss terms, in order.
    pub batch_losses: Vec<LossBreakdown>,
}

/// Predictions and metrics over a record set.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub cls_loss: f64,
    pub outputs: ForwardOutputs,
}

pub fn evaluate_records(params: &Params, config: &TrainConfig, records: &[FeatureRecord]) -> Result<Evaluation> {
    let (img, txt) = stack_records(records, config.arch.d_in)?;
    let outputs = forward(params, config, &img, &txt)?;
    let truths: Vec<_> = records.iter().map(|r| r.label).collect();
    Ok(Evaluation {
        report: evaluate(&outputs.predictions(), &truths)?,
        cls_loss: mean_cls_loss(&outputs.probs, &truths),
        outputs,
    })
}

/// Moment-matched posteriors of both modalities over `records`.
pub fn compute_dataset_posteriors(
    params: &Params,
    config: &TrainConfig,
    records: &[FeatureRecord],
) -> Result<DatasetPosteriors> {
    let (img, txt) = stack_records(records, config.arch.d_in)?;
    let out = forward(params, config, &img, &txt)?;
    let z = config.arch.latent;
    let (mut acc_img, mut acc_txt) = (PosteriorAccumulator::new(z), PosteriorAccumulator::new(z));
    for r in 0..out.m_img.rows() {
        acc_img.push(&posterior(Modality::Image, out.m_img.row(r), params)?)?;
        acc_txt.push(&posterior(Modality::Text, out.m_txt.row(r), params)?)?;
    }
    Ok(DatasetPosteriors {
        image: acc_img.finish()?,
        text: acc_txt.finish()?,
    })
}

fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Trains from the seeded initialization until early stopping or `max_epochs`.
pub fn train(train_set: &[FeatureRecord], val_set: &[FeatureRecord], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.len() < 2 {
        return Err(Error::invalid(format!("training set has {} records, need at least 2", train_set.len())));
    }
    if val_set.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    for r in train_set.iter().chain(val_set) {
        r.validate(config.arch.d_in)
            .map_err(|e| Error::Compatibility(format!("record {}: {e}", r.id)))?;
    }
    let mut params = Params::init(&config.arch, config.seed, config.tau_init);
    let mut adam = AdamState::new(&params);
    let group = 1 + config.negatives_per_positive;
    let mut best: Option<Checkpoint> = None;
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut batch_losses = Vec::new();

    for epoch in 1..=config.max_epochs as u64 {
        let pairs = build_pair_dataset(train_set, config.negatives_per_positive, epoch_seed(config.seed, epoch))?;
        let dataset = compute_dataset_posteriors(&params, config, train_set)?;
        let mut sums = LossBreakdown::default();
        let order = batches(train_set.len(), config.batch_size, config.seed, epoch)?;
        for idx in &order {
            let recs: Vec<_> = idx.iter().map(|&i| &train_set[i]).collect();
            let prs: Vec<_> = idx.iter().flat_map(|&i| &pairs[i * group..(i + 1) * group]).collect();
            let batch = Batch::new(&recs, &prs)?;
            let (b, grads) = joint_loss(&batch, &params, config, &dataset, None)?;
            adam_step(&mut params, &grads, &mut adam, config.learning_rate)?;
            if !params.is_finite() {
                return Err(Error::NonFinite(format!("parameters after epoch {epoch} update")));
            }
            sums.l_itm += b.l_itm;
            sums.l_itc += b.l_itc;
            sums.l_sem += b.l_sem;
            sums.l_cls += b.l_cls;
            sums.l_ag += b.l_ag;
            sums.total += b.total;
            batch_losses.push(b);
        }
        let nb = order.len() as f64;
        let val = evaluate_records(&params, config, val_set)?;
        let record = EpochRecord {
            epoch,
            l_itm: sums.l_itm / nb,
            l_itc: sums.l_itc / nb,
            l_sem: sums.l_sem / nb,
            l_cls: sums.l_cls / nb,
            l_ag: sums.l_ag / nb,
            total: sums.total / nb,
            val_accuracy: val.report.accuracy,
            val_cls_loss: val.cls_loss,
            tau: effective_tau(&params),
        };
        log.push(record);
        let improved = match &best {
            None => true,
            Some(b) => {
                val.report.accuracy > b.best_val_acc
                    || (val.report.accuracy == b.best_val_acc && val.cls_loss < b.best_val_loss)
            }
        };
        if improved {
            best = Some(Checkpoint {
                config: config.clone(),
                epoch,
                best_val_acc: val.report.accuracy,
                best_val_loss: val.cls_loss,
                params: params.clone(),
                adam: adam.clone(),
                dataset: compute_dataset_posteriors(&params, config, train_set)?,
            });
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let checkpoint = best.ok_or_else(|| Error::invalid("max_epochs is 0; nothing was trained"))?;
    Ok(TrainOutcome {
        checkpoint,
        log,
        batch_losses,
    })
}
