//! Cross-modal fusion: inter-modal attention between the aligned
//! representations, attention-weighted correlation features, and their
//! outer-product interaction projected back to the aligned width.

use crate::autodiff::{Tape, Var};
use crate::encoders::dense_tape;
use crate::error::{Error, Result};
use crate::model::{Dense, ParamVars};
use crate::numerics::{dot, outer_product, softmax_unchecked, Matrix};

/// Row-stochastic `L x L` attention maps in both directions.
#[derive(Clone, Debug, PartialEq)]
pub struct InterModalAttention {
    pub text_to_image: Matrix,
    pub image_to_text: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationFeature {
    /// Projected feature, length `L`.
    pub projected: Vec<f64>,
    /// Flattened `L x L` interaction before projection.
    pub interaction: Vec<f64>,
}

fn row_softmax_of_outer(a: &[f64], b: &[f64]) -> Result<Matrix> {
    let scale = (a.len() as f64).sqrt();
    let mut m = outer_product(a, b)?;
    for r in 0..m.rows() {
        let logits: Vec<f64> = m.row(r).iter().map(|x| x / scale).collect();
        m.row_mut(r).copy_from_slice(&softmax_unchecked(&logits, 1.0));
    }
    Ok(m)
}

/// `softmax(m_v m_t^T / sqrt(L))` and `softmax(m_t m_v^T / sqrt(L))`, row-wise.
pub fn inter_modal_attention(m_img: &[f64], m_txt: &[f64]) -> Result<InterModalAttention> {
    if m_img.len() != m_txt.len() || m_img.is_empty() {
        return Err(Error::invalid(format!(
            "aligned representations differ in length ({} vs {})",
            m_img.len(),
            m_txt.len()
        )));
    }
    Ok(InterModalAttention {
        text_to_image: row_softmax_of_outer(m_img, m_txt)?,
        image_to_text: row_softmax_of_outer(m_txt, m_img)?,
    })
}

fn matvec(m: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|r| dot(m.row(r), x)).collect()
}

/// Updates each representation by its attention map: `(f_tv m_v, f_vt m_t)`.
pub fn correlate(
    attention: &InterModalAttention,
    m_img: &[f64],
    m_txt: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let l = m_img.len();
    if m_txt.len() != l
        || attention.text_to_image.shape() != (l, l)
        || attention.image_to_text.shape() != (l, l)
    {
        return Err(Error::invalid("correlate: attention and representation shapes disagree"));
    }
    Ok((
        matvec(&attention.text_to_image, m_img),
        matvec(&attention.image_to_text, m_txt),
    ))
}

/// Flattened outer product of the correlation features, then `L^2 -> L`.
pub fn interaction(
    corr_img: &[f64],
    corr_txt: &[f64],
    projection: &Dense<Matrix>,
) -> Result<CorrelationFeature> {
    let l = corr_img.len();
    if corr_txt.len() != l || projection.weight.shape() != (l * l, l) {
        return Err(Error::invalid("interaction: shape mismatch"));
    }
    let flat = outer_product(corr_img, corr_txt)?.into_vec();
    let mut projected = projection.bias.as_slice().to_vec();
    for (i, &x) in flat.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (o, &w) in projected.iter_mut().zip(projection.weight.row(i)) {
            *o += x * w;
        }
    }
    Ok(CorrelationFeature {
        projected,
        interaction: flat,
    })
}

/// Full fusion for one sample.
pub fn fuse(m_img: &[f64], m_txt: &[f64], projection: &Dense<Matrix>) -> Result<CorrelationFeature> {
    let att = inter_modal_attention(m_img, m_txt)?;
    let (ci, ct) = correlate(&att, m_img, m_txt)?;
    interaction(&ci, &ct, projection)
}

/// Concatenation baseline used when fusion is ablated: `[m_v, m_t] -> L`.
pub fn concat_projection(m_img: &[f64], m_txt: &[f64], projection: &Dense<Matrix>) -> Result<Vec<f64>> {
    let joint = [m_img, m_txt].concat();
    if projection.weight.rows() != joint.len() {
        return Err(Error::invalid("concat projection: shape mismatch"));
    }
    let mut out = projection.bias.as_slice().to_vec();
    for (i, &x) in joint.iter().enumerate() {
        for (o, &w) in out.iter_mut().zip(projection.weight.row(i)) {
            *o += x * w;
        }
    }
    Ok(out)
}

fn attention_tape(tape: &mut Tape, a: Var, b: Var, l: usize) -> Var {
    let n = tape.value(a).rows();
    let outer = tape.batched_outer(a, b);
    let scaled = tape.scale(outer, 1.0 / (l as f64).sqrt());
    let rows = tape.reshape(scaled, n * l, l);
    let att = tape.softmax_rows(rows);
    tape.reshape(att, n, l * l)
}

/// Batched fusion on the tape; `m_img`, `m_txt` are `n x L`.
pub fn fuse_tape(tape: &mut Tape, vars: &ParamVars, m_img: Var, m_txt: Var) -> Var {
    let l = tape.value(m_img).cols();
    let f_tv = attention_tape(tape, m_img, m_txt, l);
    let f_vt = attention_tape(tape, m_txt, m_img, l);
    let corr_img = tape.batched_matvec(f_tv, m_img);
    let corr_txt = tape.batched_matvec(f_vt, m_txt);
    let inter = tape.batched_outer(corr_img, corr_txt);
    dense_tape(tape, &vars.fusion, inter)
}

/// Batched [`concat_projection`] on the tape.
pub fn concat_tape(tape: &mut Tape, vars: &ParamVars, m_img: Var, m_txt: Var) -> Var {
    let joint = tape.concat(&[m_img, m_txt]);
    dense_tape(tape, &vars.concat, joint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Params};
    use crate::numerics::{seeded_init, InitScheme};
    use proptest::prelude::*;

    fn rows_are_distributions(m: &Matrix) -> bool {
        (0..m.rows()).all(|r| (m.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-9)
    }

    #[test]
    fn single_dimension_attention_is_one() {
        let a = inter_modal_attention(&[2.5], &[-1.0]).unwrap();
        assert_eq!(a.text_to_image.as_slice(), &[1.0]);
        assert_eq!(a.image_to_text.as_slice(), &[1.0]);
    }

    #[test]
    fn constant_vectors_give_uniform_attention() {
        let a = inter_modal_attention(&[0.7; 5], &[0.7; 5]).unwrap();
        for m in [&a.text_to_image, &a.image_to_text] {
            assert!(m.as_slice().iter().all(|&x| (x - 0.2).abs() < 1e-15));
        }
    }

    #[test]
    fn basis_vectors_match_hand_expanded_softmax() {
        let a = inter_modal_attention(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        // m_v m_t^T = [[0, 1], [0, 0]], scaled by 1/sqrt(2).
        let s = 1.0 / 2f64.sqrt();
        let hi = s.exp() / (1.0 + s.exp());
        let expected_tv = [1.0 - hi, hi, 0.5, 0.5];
        // m_t m_v^T = [[0, 0], [1, 0]]
        let expected_vt = [0.5, 0.5, hi, 1.0 - hi];
        for (x, y) in a.text_to_image.as_slice().iter().zip(expected_tv) {
            assert!((x - y).abs() < 1e-15);
        }
        for (x, y) in a.image_to_text.as_slice().iter().zip(expected_vt) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(inter_modal_attention(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn correlate_identity_and_uniform() {
        let m = [1.0, -2.0, 4.0];
        let id = InterModalAttention {
            text_to_image: Matrix::identity(3),
            image_to_text: Matrix::identity(3),
        };
        let (a, b) = correlate(&id, &m, &m).unwrap();
        assert_eq!(a, m.to_vec());
        assert_eq!(b, m.to_vec());
        let uni = InterModalAttention {
            text_to_image: Matrix::filled(3, 3, 1.0 / 3.0),
            image_to_text: Matrix::filled(3, 3, 1.0 / 3.0),
        };
        let (a, _) = correlate(&uni, &m, &m).unwrap();
        assert!(a.iter().all(|x| (x - 1.0).abs() < 1e-15));
        assert!(correlate(&uni, &m, &[1.0]).is_err());
    }

    #[test]
    fn correlate_matches_double_loop() {
        let mv: Vec<f64> = (0..6).map(|i| (i as f64 * 0.37).sin()).collect();
        let mt: Vec<f64> = (0..6).map(|i| (i as f64 * 0.91).cos()).collect();
        let att = inter_modal_attention(&mv, &mt).unwrap();
        let (a, b) = correlate(&att, &mv, &mt).unwrap();
        for i in 0..6 {
            let mut sa = 0.0;
            let mut sb = 0.0;
            for j in 0..6 {
                sa += att.text_to_image[(i, j)] * mv[j];
                sb += att.image_to_text[(i, j)] * mt[j];
            }
            assert!((a[i] - sa).abs() < 1e-14);
            assert!((b[i] - sb).abs() < 1e-14);
        }
    }

    #[test]
    fn interaction_examples() {
        let proj = Dense {
            weight: seeded_init(4, 2, InitScheme::UniformScaled, 1),
            bias: Matrix::row_vector(&[0.25, -0.5]),
        };
        let f = interaction(&[1.0, 2.0], &[3.0, 4.0], &proj).unwrap();
        assert_eq!(f.interaction, vec![3.0, 4.0, 6.0, 8.0]);
        let z = interaction(&[0.0, 0.0], &[3.0, 4.0], &proj).unwrap();
        assert!(z.interaction.iter().all(|&x| x == 0.0));
        assert_eq!(z.projected, vec![0.25, -0.5]);
    }

    #[test]
    fn tape_fusion_matches_value_path() {
        let arch = Architecture {
            aligned: 4,
            ..Architecture::default()
        };
        let p = Params::init(&arch, 3, 0.07);
        let mv = seeded_init(3, 4, InitScheme::UniformScaled, 10).scale(4.0);
        let mt = seeded_init(3, 4, InitScheme::UniformScaled, 11).scale(4.0);
        let mut tape = Tape::new();
        let vars = p.register(&mut tape);
        let a = tape.constant(mv.clone());
        let b = tape.constant(mt.clone());
        let f = fuse_tape(&mut tape, &vars, a, b);
        let c = concat_tape(&mut tape, &vars, a, b);
        for r in 0..3 {
            let expected = fuse(mv.row(r), mt.row(r), &p.fusion).unwrap().projected;
            for (x, y) in tape.value(f).row(r).iter().zip(&expected) {
                assert!((x - y).abs() < 1e-12);
            }
            let expected = concat_projection(mv.row(r), mt.row(r), &p.concat).unwrap();
            for (x, y) in tape.value(c).row(r).iter().zip(&expected) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn attention_rows_are_distributions(
            v in prop::collection::vec(-5.0f64..5.0, 1..10),
            seed in 0u64..100,
        ) {
            let t: Vec<f64> = v.iter().enumerate().map(|(i, x)| (x + seed as f64 + i as f64).cos()).collect();
            let a = inter_modal_attention(&v, &t).unwrap();
            prop_assert!(rows_are_distributions(&a.text_to_image));
            prop_assert!(rows_are_distributions(&a.image_to_text));
        }

        #[test]
        fn interaction_is_bilinear(
            v in prop::collection::vec(-5.0f64..5.0, 3),
            t in prop::collection::vec(-5.0f64..5.0, 3),
            c in -4.0f64..4.0,
        ) {
            let proj = Dense { weight: Matrix::zeros(9, 3), bias: Matrix::zeros(1, 3) };
            let base = interaction(&v, &t, &proj).unwrap().interaction;
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            let out = interaction(&scaled, &t, &proj).unwrap().interaction;
            for (a, b) in base.iter().zip(&out) {
                prop_assert!((a * c - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }
}
