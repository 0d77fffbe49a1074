//! Consistency pairs, ITM, ITC, soft targets and the semantic matching loss
//! on a handful of synthetic records with random embeddings.

use coolant::contrastive::{
    build_pair_dataset, contrastive_objective, itc_loss, itc_similarities, itm_loss, semantic_matching_loss, soft_targets,
};
use coolant::data::{generate_synthetic, SyntheticSpec};
use coolant::numerics::{seeded_init, InitScheme};

fn main() -> coolant::Result<()> {
    let records = generate_synthetic(&SyntheticSpec { n_records: 6, d_in: 8, ..SyntheticSpec::default() })?;
    let pairs = build_pair_dataset(&records, 1, 0)?;
    let matched: Vec<bool> = pairs.iter().map(|p| p.matched).collect();
    println!("{} pairs, {} matched", pairs.len(), matched.iter().filter(|&&m| m).count());

    let n = records.len();
    let e_img = seeded_init(n, 5, InitScheme::UniformScaled, 1);
    let e_txt = seeded_init(n, 5, InitScheme::UniformScaled, 2);
    let m_img = seeded_init(n, 4, InitScheme::UniformScaled, 3);
    let m_txt = seeded_init(n, 4, InitScheme::UniformScaled, 4);
    let tau = 0.07;

    let s_img = seeded_init(pairs.len(), 4, InitScheme::UniformScaled, 5);
    let s_txt = seeded_init(pairs.len(), 4, InitScheme::UniformScaled, 6);
    println!("ITM {:.4}", itm_loss(&s_img, &s_txt, &matched, 0.2)?);

    let (p_v2t, p_t2v) = itc_similarities(&e_img, &e_txt, tau)?;
    let (q_v2t, q_t2v) = soft_targets(&m_img, &m_txt, tau)?;
    let itc = itc_loss(&p_v2t, &p_t2v)?;
    let sem = semantic_matching_loss(&p_v2t, &p_t2v, &q_v2t, &q_t2v)?;
    println!("ITC {itc:.4}  SEM {sem:.4}  L_CL {:.4}", contrastive_objective(itc, sem, 0.2));
    println!("ln N = {:.4}", (n as f64).ln());
    Ok(())
}
