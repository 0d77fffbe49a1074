//! Inter-modal attention, correlation features, and the projected
//! interaction for one pair of aligned representations.

use coolant::fusion::{correlate, fuse, inter_modal_attention};
use coolant::model::Dense;
use coolant::numerics::{seeded_init, InitScheme, Matrix};

fn main() -> coolant::Result<()> {
    let m_img = [0.5, -1.0, 2.0, 0.1];
    let m_txt = [1.5, 0.3, -0.7, 0.9];
    let l = m_img.len();

    let att = inter_modal_attention(&m_img, &m_txt)?;
    println!("text-to-image attention:");
    for r in 0..l {
        println!("  {:.4?}", att.text_to_image.row(r));
    }
    let (c_img, c_txt) = correlate(&att, &m_img, &m_txt)?;
    println!("correlated image {c_img:.4?}\ncorrelated text  {c_txt:.4?}");

    let projection = Dense { weight: seeded_init(l * l, l, InitScheme::UniformScaled, 1), bias: Matrix::zeros(1, l) };
    let fused = fuse(&m_img, &m_txt, &projection)?;
    println!("interaction has {} entries; fused feature {:.4?}", fused.interaction.len(), fused.projected);
    Ok(())
}
