//! Compares analytic gradients of the joint loss with central differences
//! for every combination of ablation flags.

use coolant::training::{grad_audit, Ablation, TrainConfig, AUDIT_STEP};

fn main() -> coolant::Result<()> {
    let start = std::time::Instant::now();
    println!("step {AUDIT_STEP:e}");
    for (i, ablation) in Ablation::all_combinations().into_iter().enumerate() {
        let config = TrainConfig { ablation, ..TrainConfig::default() };
        let r = grad_audit(&config, i as u64)?;
        println!(
            "{ablation:?}\n  max rel err {:.2e} at {} ({} checked, {} skipped)",
            r.max_rel_error, r.worst, r.checked, r.skipped
        );
    }
    println!("done in {:.1?}", start.elapsed());
    Ok(())
}
