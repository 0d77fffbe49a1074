//! Ambiguity scores and guidance targets for hand-built posteriors.

use coolant::aggregation::{ambiguity_score, dataset_posteriors, guidance_loss, guidance_target, AttentionWeights, DatasetPosteriors};
use coolant::numerics::{kl_diag_gaussian, DiagonalGaussian};

fn gaussian(mean: &[f64], stddev: &[f64]) -> DiagonalGaussian {
    DiagonalGaussian::new(mean.to_vec(), stddev.to_vec()).expect("valid gaussian")
}

fn main() -> coolant::Result<()> {
    let images = [gaussian(&[1.0, 0.0], &[1.0, 1.0]), gaussian(&[-1.0, 0.5], &[1.0, 0.8])];
    let texts = [gaussian(&[0.8, 0.1], &[1.0, 1.0]), gaussian(&[2.0, -1.5], &[0.6, 1.2])];
    let dataset = DatasetPosteriors { image: dataset_posteriors(&images)?, text: dataset_posteriors(&texts)? };
    println!("dataset KL(image || text) = {:.4}", kl_diag_gaussian(&dataset.image, &dataset.text)?);

    let mut scores = Vec::new();
    for (i, (p, q)) in images.iter().zip(&texts).enumerate() {
        let g = ambiguity_score(p, q, &dataset)?;
        println!("sample {i}: KL {:.4}, g = {g:.4}, guidance {:?}", kl_diag_gaussian(p, q)?, guidance_target(g));
        scores.push(g);
    }
    println!("identical posteriors: g = {}", ambiguity_score(&images[0], &images[0], &dataset)?);

    let gates = [AttentionWeights { raw: [0.9, 0.8, 0.3] }, AttentionWeights { raw: [0.2, 0.3, 0.9] }];
    println!("guidance loss {:.4}", guidance_loss(&gates, &scores)?);
    Ok(())
}
