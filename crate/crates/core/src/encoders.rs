//! Modality towers: input perceptron, shared-space projection, and the
//! Gaussian posterior heads used for ambiguity scoring.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Dense, Modality, ParamVars, Params, Perceptron};
use crate::numerics::{DiagonalGaussian, Matrix};

fn dense_forward(layer: &Dense<Matrix>, x: &[f64]) -> Result<Vec<f64>> {
    let w = &layer.weight;
    if x.len() != w.rows() {
        return Err(Error::invalid(format!(
            "input has length {}, layer expects {}",
            x.len(),
            w.rows()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("layer input".into()));
    }
    let mut out = layer.bias.as_slice().to_vec();
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wv;
        }
    }
    Ok(out)
}

fn perceptron_forward(mlp: &Perceptron<Matrix>, x: &[f64]) -> Result<Vec<f64>> {
    let mut h = dense_forward(&mlp.hidden, x)?;
    h.iter_mut().for_each(|v| *v = v.max(0.0));
    dense_forward(&mlp.output, &h)
}

/// Unimodal embedding `e` (length `embed`) from an input feature vector.
pub fn encode(modality: Modality, x: &[f64], params: &Params) -> Result<Vec<f64>> {
    perceptron_forward(&params.tower(modality).encoder, x)
}

/// Aligned representation `m` (length `aligned`) from a unimodal embedding.
pub fn project_shared(modality: Modality, e: &[f64], params: &Params) -> Result<Vec<f64>> {
    perceptron_forward(&params.tower(modality).shared, e)
}

/// `q(z | m)` with stddev `exp(logvar / 2)`.
pub fn posterior(modality: Modality, m: &[f64], params: &Params) -> Result<DiagonalGaussian> {
    let tower = params.tower(modality);
    let mean = dense_forward(&tower.mean, m)?;
    let logvar = dense_forward(&tower.logvar, m)?;
    let stddev = logvar.iter().map(|lv| (0.5 * lv).exp()).collect();
    DiagonalGaussian::new(mean, stddev)
        .map_err(|_| Error::NonFinite("posterior parameters".into()))
}

pub(crate) fn dense_tape(tape: &mut Tape, layer: &Dense<Var>, x: Var) -> Var {
    let z = tape.matmul(x, layer.weight);
    tape.add_bias(z, layer.bias)
}

pub(crate) fn perceptron_tape(tape: &mut Tape, mlp: &Perceptron<Var>, x: Var) -> Var {
    let h = dense_tape(tape, &mlp.hidden, x);
    let h = tape.relu(h);
    dense_tape(tape, &mlp.output, h)
}

/// Batched [`encode`] on the tape; `x` is `n x d_in`.
pub fn encode_tape(tape: &mut Tape, vars: &ParamVars, modality: Modality, x: Var) -> Var {
    perceptron_tape(tape, &vars.tower(modality).encoder, x)
}

/// Batched [`project_shared`] on the tape; `e` is `n x embed`.
pub fn project_shared_tape(tape: &mut Tape, vars: &ParamVars, modality: Modality, e: Var) -> Var {
    perceptron_tape(tape, &vars.tower(modality).shared, e)
}

/// Posteriors for each row of an `n x aligned` matrix of representations.
pub fn posterior_rows(modality: Modality, m: &Matrix, params: &Params) -> Result<Vec<DiagonalGaussian>> {
    (0..m.rows())
        .map(|r| posterior(modality, m.row(r), params))
        .collect()
}
