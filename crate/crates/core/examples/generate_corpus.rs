//! Writes a synthetic corpus and summarizes its composition.
//!
//! Usage: `generate_corpus [OUT] [N] [SEED]`

use std::path::PathBuf;

use coolant::data::{generate_synthetic, load_records, save_records, Label, SyntheticSpec};

fn main() -> coolant::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().map(String::as_str).unwrap_or("synthetic.jsonl"));
    let n = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let spec = SyntheticSpec { n_records: n, seed, ..SyntheticSpec::default() };
    let records = generate_synthetic(&spec)?;
    save_records(&records, &out)?;

    let fake = records.iter().filter(|r| r.label == Label::Fake).count();
    println!("wrote {} records to {}", records.len(), out.display());
    println!("real {} / fake {} (d_in {}, latent {}, noise {})", records.len() - fake, fake, spec.d_in, spec.latent_dim, spec.noise);
    let reloaded = load_records(&out)?;
    println!("reload matches: {}", reloaded.len() == records.len());
    Ok(())
}
