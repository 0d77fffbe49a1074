//! Cross-modal contrastive learning: the matched/unmatched pair dataset and
//! consistency loss, in-batch image-text contrastive loss, soft targets from
//! the shared space, and the semantic matching loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{FeatureRecord, Label};
use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, l2_norm, softmax_unchecked, Matrix, LOG_FLOOR};

/// One (image, text) pair with its match label.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    /// Index of the record whose image this pair uses.
    pub source: usize,
    pub img: Vec<f64>,
    pub txt: Vec<f64>,
    pub matched: bool,
}

/// `N x N` row-stochastic matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix(Matrix);

impl SimilarityMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::invalid("similarity matrix must be square"));
        }
        for r in 0..m.rows() {
            let row = m.row(r);
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::invalid("similarity entry outside [0, 1]"));
            }
            if (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("similarity row {r} does not sum to 1")));
            }
        }
        Ok(Self(m))
    }

    /// One-hot diagonal targets.
    pub fn identity(n: usize) -> Self {
        Self(Matrix::identity(n))
    }

    pub fn uniform(n: usize) -> Self {
        Self(Matrix::filled(n, n, 1.0 / n as f64))
    }

    pub fn size(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

impl std::ops::Index<(usize, usize)> for SimilarityMatrix {
    type Output = f64;
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

/// Builds the consistency-learning pairs.
///
/// Every record contributes its own (image, text) pair, labeled matched only
/// if the record is real, followed by `negatives_per_positive` mismatched
/// pairs that join its image to the text of a different, uniformly drawn
/// record.
pub fn build_pair_dataset(
    records: &[FeatureRecord],
    negatives_per_positive: usize,
    seed: u64,
) -> Result<Vec<PairSample>> {
    if records.len() < 2 {
        return Err(Error::invalid("pair dataset needs at least 2 records"));
    }
    if negatives_per_positive == 0 {
        return Err(Error::invalid("negatives_per_positive must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = records.len();
    let mut pairs = Vec::with_capacity(n * (1 + negatives_per_positive));
    for (i, rec) in records.iter().enumerate() {
        pairs.push(PairSample {
            source: i,
            img: rec.img.clone(),
            txt: rec.txt.clone(),
            matched: rec.label == Label::Real,
        });
        for _ in 0..negatives_per_positive {
            // Uniform over the other n - 1 records.
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            pairs.push(PairSample {
                source: i,
                img: rec.img.clone(),
                txt: records[j].txt.clone(),
                matched: false,
            });
        }
    }
    Ok(pairs)
}

/// Cosine embedding loss with margin, averaged over samples.
pub fn itm_loss(shared_img: &Matrix, shared_txt: &Matrix, matched: &[bool], margin: f64) -> Result<f64> {
    if shared_img.shape() != shared_txt.shape() || shared_img.rows() != matched.len() {
        return Err(Error::invalid("itm_loss: inconsistent batch shapes"));
    }
    if !(0.0..1.0).contains(&margin) {
        return Err(Error::invalid(format!("margin {margin} outside [0, 1)")));
    }
    if matched.is_empty() {
        return Err(Error::invalid("itm_loss of an empty batch"));
    }
    let mut total = 0.0;
    for (r, &y) in matched.iter().enumerate() {
        let cos = cosine_similarity(shared_img.row(r), shared_txt.row(r))?;
        total += if y { 1.0 - cos } else { (cos - margin).max(0.0) };
    }
    Ok(total / matched.len() as f64)
}

fn normalized_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = l2_norm(row);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Degenerate(format!("embedding row {r} has zero or non-finite norm")));
        }
        row.iter_mut().for_each(|x| *x /= n);
    }
    Ok(out)
}

/// Vision-to-text and text-to-vision match probabilities over a batch.
/// Rows of both inputs are L2-normalized before the dot product.
pub fn itc_similarities(
    img: &Matrix,
    txt: &Matrix,
    tau: f64,
) -> Result<(SimilarityMatrix, SimilarityMatrix)> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if img.shape() != txt.shape() || img.rows() == 0 {
        return Err(Error::invalid("itc_similarities: shape mismatch or empty batch"));
    }
    let (v, t) = (normalized_rows(img)?, normalized_rows(txt)?);
    let logits = v.matmul_t(&t);
    let row_softmax = |m: &Matrix| {
        let mut out = m.clone();
        for r in 0..out.rows() {
            let p = softmax_unchecked(m.row(r), tau);
            out.row_mut(r).copy_from_slice(&p);
        }
        SimilarityMatrix(out)
    };
    Ok((row_softmax(&logits), row_softmax(&logits.transpose())))
}

/// Same mechanics as [`itc_similarities`], applied to shared-space embeddings.
/// The caller treats the result as a constant target.
pub fn soft_targets(
    shared_img: &Matrix,
    shared_txt: &Matrix,
    tau: f64,
) -> Result<(SimilarityMatrix, SimilarityMatrix)> {
    itc_similarities(shared_img, shared_txt, tau)
}

fn floored_ln(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

/// Mean negative log-probability of the diagonal, averaged over both directions.
pub fn itc_loss(v2t: &SimilarityMatrix, t2v: &SimilarityMatrix) -> Result<f64> {
    if v2t.size() != t2v.size() {
        return Err(Error::invalid("itc_loss: matrices differ in size"));
    }
    let n = v2t.size();
    let direction = |s: &SimilarityMatrix| -(0..n).map(|i| floored_ln(s[(i, i)])).sum::<f64>() / n as f64;
    Ok(((direction(v2t) + direction(t2v)) / 2.0).max(0.0))
}

/// Cross-entropy between predictions and soft targets, both directions, `1/(2N)`.
pub fn semantic_matching_loss(
    p_v2t: &SimilarityMatrix,
    p_t2v: &SimilarityMatrix,
    s_v2t: &SimilarityMatrix,
    s_t2v: &SimilarityMatrix,
) -> Result<f64> {
    let n = p_v2t.size();
    if [p_t2v.size(), s_v2t.size(), s_t2v.size()].iter().any(|&m| m != n) {
        return Err(Error::invalid("semantic_matching_loss: matrices differ in size"));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += s_v2t[(i, j)] * floored_ln(p_v2t[(i, j)]) + s_t2v[(i, j)] * floored_ln(p_t2v[(i, j)]);
        }
    }
    Ok((-total / (2.0 * n as f64)).max(0.0))
}

/// `L_CL = L_ITC + lambda * L_SEM`.
pub fn contrastive_objective(itc: f64, sem: f64, lambda: f64) -> f64 {
    itc + lambda * sem
}

/// Similarity logits `normalize(a) normalize(b)^T / tau` on the tape.
pub(crate) fn similarity_logits_tape(tape: &mut Tape, a: Var, b: Var, inv_tau: Var) -> Var {
    let an = tape.row_normalize(a);
    let bn = tape.row_normalize(b);
    let bt = tape.transpose(bn);
    let s = tape.matmul(an, bt);
    tape.mul_scalar(s, inv_tau)
}

/// Floored log-probabilities for both directions from `v -> t` logits.
pub(crate) fn log_similarities_tape(tape: &mut Tape, logits: Var) -> (Var, Var) {
    let lv = tape.log_softmax_rows(logits, LOG_FLOOR);
    let lt_logits = tape.transpose(logits);
    let lt = tape.log_softmax_rows(lt_logits, LOG_FLOOR);
    (lv, lt)
}

/// `-(1/2N) sum(targets_v2t * log_v2t + targets_t2v * log_t2v)` on the tape.
/// Hard targets are the identity matrices.
pub(crate) fn cross_entropy_tape(
    tape: &mut Tape,
    log_v2t: Var,
    log_t2v: Var,
    targets_v2t: &Matrix,
    targets_t2v: &Matrix,
) -> Var {
    let n = targets_v2t.rows() as f64;
    let a = tape.mul_const(log_v2t, targets_v2t.clone());
    let b = tape.mul_const(log_t2v, targets_t2v.clone());
    let s = tape.add(a, b);
    let total = tape.sum(s);
    tape.scale(total, -1.0 / (2.0 * n))
}

/// Batched consistency loss on the tape.
pub(crate) fn itm_loss_tape(tape: &mut Tape, shared_img: Var, shared_txt: Var, matched: &[bool], margin: f64) -> Var {
    let a = tape.row_normalize(shared_img);
    let b = tape.row_normalize(shared_txt);
    let prod = tape.mul(a, b);
    let cos = tape.row_sum(prod);
    let pos = Matrix::from_vec(matched.len(), 1, matched.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())
        .expect("mask shape");
    let neg = pos.map(|x| 1.0 - x);
    // matched: 1 - cos
    let one_minus = tape.scale(cos, -1.0);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let pos_term = tape.mul_const(one_minus, pos);
    // unmatched: max(0, cos - d)
    let shifted = tape.add_scalar(cos, -margin);
    let hinge = tape.relu(shifted);
    let neg_term = tape.mul_const(hinge, neg);
    let per_sample = tape.add(pos_term, neg_term);
    tape.mean(per_sample)
}
