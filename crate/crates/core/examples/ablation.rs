//! Multi-seed ablation of every model component on a small corpus.
//!
//! Usage: `ablation [SEEDS] [N_RECORDS]`

use coolant::cli::ablation_table;
use coolant::data::{generate_synthetic, SyntheticSpec};
use coolant::training::{ablation_study, TrainConfig};

fn main() -> coolant::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let seeds = args.first().copied().unwrap_or(2);
    let n = args.get(1).copied().unwrap_or(900);
    let records = generate_synthetic(&SyntheticSpec { n_records: n, ..SyntheticSpec::default() })?;
    let base = TrainConfig {
        max_epochs: 15,
        ..TrainConfig::default()
    };
    let rows = ablation_study(&records, &base, seeds)?;
    print!("{}", ablation_table(&rows));
    Ok(())
}
