//! Batched forward pass and the joint objective.

use serde::{Deserialize, Serialize};

use crate::aggregation::{
    aggregate_tape, ambiguity_score, classification_loss_tape, classifier_logits_tape, gate_logits_tape,
    guidance_loss_tape, guidance_target, DatasetPosteriors,
};
use crate::autodiff::{Tape, Var};
use crate::contrastive::{
    cross_entropy_tape, itm_loss_tape, log_similarities_tape, similarity_logits_tape, soft_targets, PairSample,
};
use crate::data::{FeatureRecord, Label};
use crate::encoders::{encode_tape, posterior_rows, project_shared_tape};
use crate::error::{Error, Result};
use crate::fusion::{concat_tape, fuse_tape};
use crate::model::{Modality, ParamVars, Params};
use crate::numerics::Matrix;

use super::config::TrainConfig;

/// Bounds on the temperature, applied to `log tau`.
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;

/// One training batch: records plus the consistency pairs drawn from them.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub img: Matrix,
    pub txt: Matrix,
    pub labels: Vec<Label>,
    pub pair_img: Matrix,
    pub pair_txt: Matrix,
    pub pair_matched: Vec<bool>,
}

fn stack<'a>(rows: impl Iterator<Item = &'a [f64]>, width: usize) -> Result<Matrix> {
    let rows: Vec<&[f64]> = rows.collect();
    Matrix::from_rows(&rows, width)
}

impl Batch {
    pub fn new(records: &[&FeatureRecord], pairs: &[&PairSample]) -> Result<Self> {
        let d = records
            .first()
            .map(|r| r.img.len())
            .ok_or_else(|| Error::invalid("empty batch"))?;
        Ok(Self {
            img: stack(records.iter().map(|r| r.img.as_slice()), d)?,
            txt: stack(records.iter().map(|r| r.txt.as_slice()), d)?,
            labels: records.iter().map(|r| r.label).collect(),
            pair_img: stack(pairs.iter().map(|p| p.img.as_slice()), d)?,
            pair_txt: stack(pairs.iter().map(|p| p.txt.as_slice()), d)?,
            pair_matched: pairs.iter().map(|p| p.matched).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-batch loss terms; ablated terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_itm: f64,
    pub l_itc: f64,
    pub l_sem: f64,
    pub l_cls: f64,
    pub l_ag: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `l_itm + (l_itc + lambda l_sem) + (l_cls + gamma l_ag)`.
    pub fn composed(&self, lambda: f64, gamma: f64) -> f64 {
        self.l_itm + (self.l_itc + lambda * self.l_sem) + (self.l_cls + gamma * self.l_ag)
    }

    pub fn is_finite(&self) -> bool {
        [self.l_itm, self.l_itc, self.l_sem, self.l_cls, self.l_ag, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Gradient-stopped targets, fixed at a given parameter point.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    /// Soft similarity targets `(v -> t, t -> v)`.
    pub soft: Option<(Matrix, Matrix)>,
    /// Per-sample guidance triples, `n x 3`.
    pub guidance: Option<Matrix>,
    /// Per-sample ambiguity scores.
    pub scores: Option<Vec<f64>>,
}

struct Graph {
    vars: ParamVars,
    m_img: Var,
    m_txt: Var,
    m_fused: Var,
    gate_logits: Var,
    gates: Var,
    features: Var,
    logits: Var,
}

fn clamped_inv_tau(tape: &mut Tape, log_tau: Var) -> Var {
    let clamped = tape.clamp(log_tau, TAU_MIN.ln(), TAU_MAX.ln());
    let neg = tape.scale(clamped, -1.0);
    tape.exp(neg)
}

/// Temperature actually used for a parameter set.
pub fn effective_tau(params: &Params) -> f64 {
    params.log_tau.as_slice()[0].clamp(TAU_MIN.ln(), TAU_MAX.ln()).exp()
}

fn build_main(tape: &mut Tape, params: &Params, config: &TrainConfig, img: &Matrix, txt: &Matrix) -> (Graph, Var, Var) {
    let vars = params.register(tape);
    let x_img = tape.constant(img.clone());
    let x_txt = tape.constant(txt.clone());
    let e_img = encode_tape(tape, &vars, Modality::Image, x_img);
    let e_txt = encode_tape(tape, &vars, Modality::Text, x_txt);
    let m_img = project_shared_tape(tape, &vars, Modality::Image, e_img);
    let m_txt = project_shared_tape(tape, &vars, Modality::Text, e_txt);
    let m_fused = if config.ablation.no_cmf {
        concat_tape(tape, &vars, m_img, m_txt)
    } else {
        fuse_tape(tape, &vars, m_img, m_txt)
    };
    let (gate_logits, gates) = if config.ablation.no_att {
        (tape.constant(Matrix::zeros(img.rows(), 3)), tape.constant(Matrix::filled(img.rows(), 3, 1.0)))
    } else {
        let z = gate_logits_tape(tape, &vars, m_img, m_txt, m_fused);
        (z, tape.sigmoid(z))
    };
    let features = aggregate_tape(tape, gates, m_img, m_txt, m_fused);
    let logits = classifier_logits_tape(tape, &vars, features);
    (
        Graph {
            vars,
            m_img,
            m_txt,
            m_fused,
            gate_logits,
            gates,
            features,
            logits,
        },
        e_img,
        e_txt,
    )
}

/// Per-sample ambiguity scores for rows of aligned representations.
pub fn ambiguity_scores(
    params: &Params,
    m_img: &Matrix,
    m_txt: &Matrix,
    dataset: &DatasetPosteriors,
) -> Result<Vec<f64>> {
    let p_img = posterior_rows(Modality::Image, m_img, params)?;
    let p_txt = posterior_rows(Modality::Text, m_txt, params)?;
    p_img
        .iter()
        .zip(&p_txt)
        .map(|(a, b)| ambiguity_score(a, b, dataset))
        .collect()
}

fn targets_from_aligned(
    params: &Params,
    config: &TrainConfig,
    m_img: &Matrix,
    m_txt: &Matrix,
    dataset: &DatasetPosteriors,
) -> Result<Targets> {
    let ab = config.ablation;
    let soft = if ab.uses_sem() {
        let (v2t, t2v) = soft_targets(m_img, m_txt, effective_tau(params))?;
        Some((v2t.into_matrix(), t2v.into_matrix()))
    } else {
        None
    };
    let (guidance, scores) = if ab.uses_ag() {
        let scores = ambiguity_scores(params, m_img, m_txt, dataset)?;
        let rows: Vec<[f64; 3]> = scores.iter().map(|&g| guidance_target(g)).collect();
        (Some(Matrix::from_rows(&rows, 3)?), Some(scores))
    } else {
        (None, None)
    };
    Ok(Targets { soft, guidance, scores })
}

/// Gradient-stopped targets at `params`.
pub fn compute_targets(
    batch: &Batch,
    params: &Params,
    config: &TrainConfig,
    dataset: &DatasetPosteriors,
) -> Result<Targets> {
    let mut tape = Tape::new();
    let (g, _, _) = build_main(&mut tape, params, config, &batch.img, &batch.txt);
    targets_from_aligned(params, config, tape.value(g.m_img), tape.value(g.m_txt), dataset)
}

/// Joint loss and parameter gradients on one batch.
///
/// Targets are recomputed at `params` unless `frozen` is given.
pub fn joint_loss(
    batch: &Batch,
    params: &Params,
    config: &TrainConfig,
    dataset: &DatasetPosteriors,
    frozen: Option<&Targets>,
) -> Result<(LossBreakdown, Params)> {
    let (breakdown, grads, _) = joint_loss_with_signature(batch, params, config, dataset, frozen)?;
    Ok((breakdown, grads))
}

/// [`joint_loss`] plus the tape's branch signature.
pub fn joint_loss_with_signature(
    batch: &Batch,
    params: &Params,
    config: &TrainConfig,
    dataset: &DatasetPosteriors,
    frozen: Option<&Targets>,
) -> Result<(LossBreakdown, Params, u64)> {
    let (b, g, sig) = run_joint(batch, params, config, dataset, frozen, true)?;
    Ok((b, g.expect("gradients requested"), sig))
}

/// Loss value and branch signature without a backward pass.
pub fn joint_loss_value(
    batch: &Batch,
    params: &Params,
    config: &TrainConfig,
    dataset: &DatasetPosteriors,
    frozen: Option<&Targets>,
) -> Result<(LossBreakdown, u64)> {
    let (b, _, sig) = run_joint(batch, params, config, dataset, frozen, false)?;
    Ok((b, sig))
}

fn run_joint(
    batch: &Batch,
    params: &Params,
    config: &TrainConfig,
    dataset: &DatasetPosteriors,
    frozen: Option<&Targets>,
    with_grads: bool,
) -> Result<(LossBreakdown, Option<Params>, u64)> {
    if batch.len() < 2 {
        return Err(Error::invalid(format!("batch size {} is below 2", batch.len())));
    }
    let ab = config.ablation;
    let mut tape = Tape::new();
    let (g, e_img, e_txt) = build_main(&mut tape, params, config, &batch.img, &batch.txt);
    let owned;
    let targets = match frozen {
        Some(t) => t,
        None => {
            owned = targets_from_aligned(params, config, tape.value(g.m_img), tape.value(g.m_txt), dataset)?;
            &owned
        }
    };
    let mut terms: Vec<Var> = Vec::new();
    let mut out = LossBreakdown::default();

    let cls = classification_loss_tape(&mut tape, g.logits, &batch.labels);
    let mut itm = None;
    if ab.uses_itm() {
        if batch.pair_matched.is_empty() {
            return Err(Error::invalid("batch carries no consistency pairs"));
        }
        let pi = tape.constant(batch.pair_img.clone());
        let pt = tape.constant(batch.pair_txt.clone());
        let ei = encode_tape(&mut tape, &g.vars, Modality::Image, pi);
        let et = encode_tape(&mut tape, &g.vars, Modality::Text, pt);
        let si = project_shared_tape(&mut tape, &g.vars, Modality::Image, ei);
        let st = project_shared_tape(&mut tape, &g.vars, Modality::Text, et);
        itm = Some(itm_loss_tape(&mut tape, si, st, &batch.pair_matched, config.itm_margin));
    }
    let (mut itc, mut sem) = (None, None);
    if ab.uses_itc() {
        let inv_tau = clamped_inv_tau(&mut tape, g.vars.log_tau);
        let logits = similarity_logits_tape(&mut tape, e_img, e_txt, inv_tau);
        let (lv, lt) = log_similarities_tape(&mut tape, logits);
        let eye = Matrix::identity(batch.len());
        itc = Some(cross_entropy_tape(&mut tape, lv, lt, &eye, &eye));
        if ab.uses_sem() {
            let (s_v2t, s_t2v) = targets
                .soft
                .as_ref()
                .ok_or_else(|| Error::invalid("soft targets missing"))?;
            sem = Some(cross_entropy_tape(&mut tape, lv, lt, s_v2t, s_t2v));
        }
    }
    let mut ag = None;
    if ab.uses_ag() {
        let guidance = targets
            .guidance
            .as_ref()
            .ok_or_else(|| Error::invalid("guidance targets missing"))?;
        ag = Some(guidance_loss_tape(&mut tape, g.gate_logits, guidance));
    }

    if let Some(v) = itm {
        out.l_itm = tape.scalar(v);
        terms.push(v);
    }
    if let Some(v) = itc {
        out.l_itc = tape.scalar(v);
        terms.push(v);
    }
    if let Some(v) = sem {
        out.l_sem = tape.scalar(v);
        terms.push(tape.scale(v, config.lambda_sem));
    }
    out.l_cls = tape.scalar(cls);
    terms.push(cls);
    if let Some(v) = ag {
        out.l_ag = tape.scalar(v);
        terms.push(tape.scale(v, config.gamma_ag));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t);
    }
    out.total = tape.scalar(total);
    if !out.is_finite() {
        return Err(Error::NonFinite(format!("loss terms {out:?}")));
    }
    let grads = with_grads.then(|| g.vars.gradients(&tape.backward(total)));
    Ok((out, grads, tape.signature()))
}

/// Inference outputs for a block of records.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutputs {
    pub m_img: Matrix,
    pub m_txt: Matrix,
    pub m_fused: Matrix,
    /// Gate logits, `n x 3`; zero when gates are disabled.
    pub gate_logits: Matrix,
    /// Raw gates, `n x 3`.
    pub gates: Matrix,
    /// Pre-classifier features, `n x 3L`.
    pub features: Matrix,
    /// Class probabilities `(real, fake)`, `n x 2`.
    pub probs: Matrix,
}

impl ForwardOutputs {
    pub fn predictions(&self) -> Vec<Label> {
        (0..self.probs.rows())
            .map(|r| {
                if self.probs[(r, 1)] > self.probs[(r, 0)] {
                    Label::Fake
                } else {
                    Label::Real
                }
            })
            .collect()
    }
}

const FORWARD_BLOCK: usize = 256;

/// Batched inference over `img`, `txt` rows.
pub fn forward(params: &Params, config: &TrainConfig, img: &Matrix, txt: &Matrix) -> Result<ForwardOutputs> {
    if img.shape() != txt.shape() {
        return Err(Error::invalid("image and text blocks differ in shape"));
    }
    if img.cols() != config.arch.d_in {
        return Err(Error::Compatibility(format!(
            "features have dimension {}, model expects {}",
            img.cols(),
            config.arch.d_in
        )));
    }
    let l = config.arch.aligned;
    let n = img.rows();
    let mut parts = [
        Vec::with_capacity(n * l),
        Vec::with_capacity(n * l),
        Vec::with_capacity(n * l),
        Vec::with_capacity(n * 3),
        Vec::with_capacity(n * 3),
        Vec::with_capacity(n * 3 * l),
        Vec::with_capacity(n * 2),
    ];
    let d = img.cols();
    for start in (0..n).step_by(FORWARD_BLOCK) {
        let end = (start + FORWARD_BLOCK).min(n);
        let block = |m: &Matrix| Matrix::from_vec(end - start, d, m.as_slice()[start * d..end * d].to_vec());
        let mut tape = Tape::new();
        let (g, _, _) = build_main(&mut tape, params, config, &block(img)?, &block(txt)?);
        let logits = tape.value(g.logits);
        let mut probs = Vec::with_capacity(logits.len());
        for r in 0..logits.rows() {
            probs.extend(crate::numerics::softmax_unchecked(logits.row(r), 1.0));
        }
        for (dst, src) in parts.iter_mut().zip([g.m_img, g.m_txt, g.m_fused, g.gate_logits, g.gates, g.features]) {
            dst.extend_from_slice(tape.value(src).as_slice());
        }
        parts[6].extend(probs);
    }
    let [a, b, c, z, d_, e, f] = parts;
    let out = ForwardOutputs {
        m_img: Matrix::from_vec(n, l, a)?,
        m_txt: Matrix::from_vec(n, l, b)?,
        m_fused: Matrix::from_vec(n, l, c)?,
        gate_logits: Matrix::from_vec(n, 3, z)?,
        gates: Matrix::from_vec(n, 3, d_)?,
        features: Matrix::from_vec(n, 3 * l, e)?,
        probs: Matrix::from_vec(n, 2, f)?,
    };
    if !out.probs.is_finite() || !out.features.is_finite() {
        return Err(Error::NonFinite("forward pass".into()));
    }
    Ok(out)
}

/// Image and text matrices of a record set.
pub fn stack_records(records: &[FeatureRecord], d_in: usize) -> Result<(Matrix, Matrix)> {
    for r in records {
        r.validate(d_in)?;
    }
    Ok((
        stack(records.iter().map(|r| r.img.as_slice()), d_in)?,
        stack(records.iter().map(|r| r.txt.as_slice()), d_in)?,
    ))
}

/// Mean classification cross-entropy of probabilities against labels.
pub fn mean_cls_loss(probs: &Matrix, labels: &[Label]) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, y)| -probs[(r, y.index())].max(crate::numerics::LOG_FLOOR).ln())
        .sum();
    total / labels.len().max(1) as f64
}
