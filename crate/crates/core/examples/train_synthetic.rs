//! Trains the full model on a generated corpus and reports test metrics.
//!
//! Usage: `train_synthetic [SEED] [key=value ...]`

use coolant::data::{generate_synthetic, split, SyntheticSpec};
use coolant::training::{evaluate_records, train, TrainConfig};

fn main() -> coolant::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let records = generate_synthetic(&SyntheticSpec { seed, ..SyntheticSpec::default() })?;
    let overrides: Vec<String> = std::env::args().skip(2).collect();
    let mut config = TrainConfig::parse(&overrides.join("\n"), "args")?;
    config.seed = seed;
    let (train_set, val_set, test_set) = split(&records, config.split, seed)?;
    let start = std::time::Instant::now();
    let out = train(&train_set, &val_set, &config)?;
    for e in &out.log {
        println!(
            "epoch {:>2} itm {:.3} itc {:.3} sem {:.3} cls {:.3} ag {:.3} val {:.3}",
            e.epoch, e.l_itm, e.l_itc, e.l_sem, e.l_cls, e.l_ag, e.val_accuracy
        );
    }
    let test = evaluate_records(&out.checkpoint.params, &config, &test_set)?;
    println!("best epoch {} in {:.1?}", out.checkpoint.epoch, start.elapsed());
    println!("test accuracy {:.4}", test.report.accuracy);
    Ok(())
}
