//! Modality gating, ambiguity-guided attention, feature aggregation, and
//! the final classifier.
//!
//! Gates come from a squeeze-and-excitation block over the three features
//! `(m_v, m_t, m_f)`. Ambiguity scores compare the two modalities'
//! Gaussian posteriors against the dataset-level posteriors and yield a
//! guidance distribution `[1 - g, 1 - g, g]` that the gates are pulled
//! toward.

use crate::autodiff::{Tape, Var};
use crate::data::Label;
use crate::encoders::{dense_tape, perceptron_tape};
use crate::error::{Error, Result};
use crate::model::{ParamVars, Perceptron};
use crate::numerics::{
    kl_diag_gaussian, kl_discrete_raw, log_sigmoid, sigmoid, softmax_unchecked, DiagonalGaussian, Matrix,
    ProbabilityVector, LOG_FLOOR,
};

/// Floor on the dataset-level KL in the ambiguity ratio.
pub const AMBIGUITY_FLOOR: f64 = 1e-6;

/// Floor on moment-matched variances.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Raw sigmoid gates `(a_v, a_t, a_f)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionWeights {
    pub raw: [f64; 3],
}

impl AttentionWeights {
    pub fn uniform() -> Self {
        Self { raw: [1.0; 3] }
    }

    /// Gates divided by their sum.
    pub fn normalized(&self) -> [f64; 3] {
        let s: f64 = self.raw.iter().sum();
        self.raw.map(|a| a / s)
    }
}

/// Normalized gates from gate logits, `softmax(ln sigmoid(z))`.
/// Agrees with [`AttentionWeights::normalized`] and stays finite when every
/// sigmoid underflows.
pub fn normalized_gates(logits: &[f64]) -> [f64; 3] {
    let p = softmax_unchecked(&logits.iter().map(|&z| log_sigmoid(z)).collect::<Vec<_>>(), 1.0);
    [p[0], p[1], p[2]]
}

/// Moment-matched dataset posteriors for both modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPosteriors {
    pub image: DiagonalGaussian,
    pub text: DiagonalGaussian,
}

fn mean_pool(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Squeeze each feature to its mean, excite through `3 -> 3 -> 3`, sigmoid.
pub fn modality_attention(
    m_img: &[f64],
    m_txt: &[f64],
    m_fused: &[f64],
    gate: &Perceptron<Matrix>,
) -> Result<AttentionWeights> {
    let l = m_img.len();
    if l == 0 || m_txt.len() != l || m_fused.len() != l {
        return Err(Error::invalid("modality_attention: features must share a nonzero length"));
    }
    let squeezed = [mean_pool(m_img), mean_pool(m_txt), mean_pool(m_fused)];
    let layer = |w: &Matrix, b: &Matrix, x: &[f64]| -> Vec<f64> {
        (0..3)
            .map(|j| b.as_slice()[j] + (0..3).map(|i| x[i] * w[(i, j)]).sum::<f64>())
            .collect()
    };
    let hidden: Vec<f64> = layer(&gate.hidden.weight, &gate.hidden.bias, &squeezed)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    let out = layer(&gate.output.weight, &gate.output.bias, &hidden);
    Ok(AttentionWeights {
        raw: [sigmoid(out[0]), sigmoid(out[1]), sigmoid(out[2])],
    })
}

/// Running sums for moment-matching a mixture of diagonal Gaussians.
#[derive(Clone, Debug)]
pub struct PosteriorAccumulator {
    count: usize,
    sum_mean: Vec<f64>,
    sum_second: Vec<f64>,
}

impl PosteriorAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            sum_mean: vec![0.0; dim],
            sum_second: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, q: &DiagonalGaussian) -> Result<()> {
        if q.dim() != self.sum_mean.len() {
            return Err(Error::invalid("posterior dimension mismatch"));
        }
        self.count += 1;
        for k in 0..q.dim() {
            let (m, s) = (q.mean()[k], q.stddev()[k]);
            self.sum_mean[k] += m;
            self.sum_second[k] += s * s + m * m;
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<DiagonalGaussian> {
        if self.count == 0 {
            return Err(Error::invalid("no posteriors to aggregate"));
        }
        let n = self.count as f64;
        let mean: Vec<f64> = self.sum_mean.iter().map(|s| s / n).collect();
        let stddev = self
            .sum_second
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(VARIANCE_FLOOR).sqrt())
            .collect();
        DiagonalGaussian::new(mean, stddev)
    }
}

/// Single Gaussian with the mean and variance of the uniform mixture.
pub fn dataset_posteriors(posteriors: &[DiagonalGaussian]) -> Result<DiagonalGaussian> {
    let first = posteriors
        .first()
        .ok_or_else(|| Error::invalid("dataset_posteriors of an empty set"))?;
    if posteriors.len() == 1 {
        return Ok(first.clone());
    }
    let mut acc = PosteriorAccumulator::new(first.dim());
    for q in posteriors {
        acc.push(q)?;
    }
    acc.finish()
}

/// `sigmoid(mean of the two dataset-normalized directional KLs)`.
pub fn ambiguity_score(
    p_img: &DiagonalGaussian,
    p_txt: &DiagonalGaussian,
    dataset: &DatasetPosteriors,
) -> Result<f64> {
    let v2t = kl_diag_gaussian(p_img, p_txt)? / kl_diag_gaussian(&dataset.image, &dataset.text)?.max(AMBIGUITY_FLOOR);
    let t2v = kl_diag_gaussian(p_txt, p_img)? / kl_diag_gaussian(&dataset.text, &dataset.image)?.max(AMBIGUITY_FLOOR);
    Ok(sigmoid(0.5 * (v2t + t2v)))
}

/// Normalized guidance distribution `[1 - g, 1 - g, g] / (2 - g)`.
pub fn guidance_target(g: f64) -> [f64; 3] {
    let s = 2.0 - g;
    [(1.0 - g) / s, (1.0 - g) / s, g / s]
}

/// Mean over samples of `KL(normalized gates || guidance target)`.
pub fn guidance_loss(gates: &[AttentionWeights], scores: &[f64]) -> Result<f64> {
    if gates.len() != scores.len() || gates.is_empty() {
        return Err(Error::invalid("guidance_loss: gates and scores must pair up"));
    }
    let total: f64 = gates
        .iter()
        .zip(scores)
        .map(|(a, &g)| kl_discrete_raw(&a.normalized(), &guidance_target(g)))
        .sum();
    Ok(total / gates.len() as f64)
}

/// `(a_v m_v) ++ (a_t m_t) ++ (a_f m_f)` using raw gates.
pub fn aggregate(a: &AttentionWeights, m_img: &[f64], m_txt: &[f64], m_fused: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(m_img.len() + m_txt.len() + m_fused.len());
    for (gate, m) in a.raw.iter().zip([m_img, m_txt, m_fused]) {
        out.extend(m.iter().map(|x| gate * x));
    }
    out
}

/// Two-layer perceptron then softmax; index 0 is real, 1 is fake.
pub fn classify(features: &[f64], classifier: &Perceptron<Matrix>) -> Result<ProbabilityVector> {
    if features.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("classifier input".into()));
    }
    let (w1, b1) = (&classifier.hidden.weight, &classifier.hidden.bias);
    let (w2, b2) = (&classifier.output.weight, &classifier.output.bias);
    if features.len() != w1.rows() {
        return Err(Error::invalid("classifier input width mismatch"));
    }
    let mut hidden = b1.as_slice().to_vec();
    for (i, &x) in features.iter().enumerate() {
        for (h, &w) in hidden.iter_mut().zip(w1.row(i)) {
            *h += x * w;
        }
    }
    hidden.iter_mut().for_each(|h| *h = h.max(0.0));
    let mut logits = b2.as_slice().to_vec();
    for (i, &h) in hidden.iter().enumerate() {
        for (o, &w) in logits.iter_mut().zip(w2.row(i)) {
            *o += h * w;
        }
    }
    ProbabilityVector::new(softmax_unchecked(&logits, 1.0))
}

/// Mean binary cross-entropy, log floored at [`LOG_FLOOR`].
pub fn classification_loss(predictions: &[ProbabilityVector], labels: &[Label]) -> Result<f64> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::invalid("classification_loss: predictions and labels must pair up"));
    }
    let total: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(p, y)| -p[y.index()].max(LOG_FLOOR).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// `L_CA = L_CLS + gamma * L_AG`.
pub fn ca_objective(cls: f64, ag: f64, gamma: f64) -> f64 {
    cls + gamma * ag
}

/// Batched gate logits on the tape: `n x 3` pre-sigmoid outputs.
pub fn gate_logits_tape(tape: &mut Tape, vars: &ParamVars, m_img: Var, m_txt: Var, m_fused: Var) -> Var {
    let l = tape.value(m_img).cols() as f64;
    let pooled: Vec<Var> = [m_img, m_txt, m_fused]
        .into_iter()
        .map(|m| {
            let s = tape.row_sum(m);
            tape.scale(s, 1.0 / l)
        })
        .collect();
    let squeezed = tape.concat(&pooled);
    perceptron_tape(tape, &vars.gate, squeezed)
}

/// Batched aggregation on the tape: `n x 3L`.
pub fn aggregate_tape(tape: &mut Tape, gates: Var, m_img: Var, m_txt: Var, m_fused: Var) -> Var {
    let scaled: Vec<Var> = [m_img, m_txt, m_fused]
        .into_iter()
        .enumerate()
        .map(|(k, m)| {
            let g = tape.columns(gates, k, 1);
            tape.row_scale(m, g)
        })
        .collect();
    tape.concat(&scaled)
}

/// Classifier logits on the tape: `n x 2`.
pub fn classifier_logits_tape(tape: &mut Tape, vars: &ParamVars, features: Var) -> Var {
    let h = dense_tape(tape, &vars.classifier.hidden, features);
    let h = tape.relu(h);
    dense_tape(tape, &vars.classifier.output, h)
}

/// Mean cross-entropy of `n x 2` logits against labels.
pub fn classification_loss_tape(tape: &mut Tape, logits: Var, labels: &[Label]) -> Var {
    let log_p = tape.log_softmax_rows(logits, LOG_FLOOR);
    let mut onehot = Matrix::zeros(labels.len(), 2);
    for (r, y) in labels.iter().enumerate() {
        onehot[(r, y.index())] = 1.0;
    }
    let picked = tape.mul_const(log_p, onehot);
    let total = tape.sum(picked);
    tape.scale(total, -1.0 / labels.len() as f64)
}

/// Guidance loss on the tape from `n x 3` gate logits; `targets` (`n x 3`)
/// are constants. Gates are normalized as `softmax(ln sigmoid(z))`.
pub fn guidance_loss_tape(tape: &mut Tape, gate_logits: Var, targets: &Matrix) -> Var {
    let n = targets.rows() as f64;
    let log_gates = tape.log_sigmoid(gate_logits);
    let a_hat = tape.softmax_rows(log_gates);
    let log_a = tape.log_softmax_rows(log_gates, LOG_FLOOR);
    let log_g = targets.map(|g| g.max(LOG_FLOOR).ln());
    let log_g = tape.constant(log_g);
    let diff = tape.sub(log_a, log_g);
    let kl = tape.mul(a_hat, diff);
    let total = tape.sum(kl);
    tape.scale(total, 1.0 / n)
}
