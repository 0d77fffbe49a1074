//! Trains a small model, round-trips it through a checkpoint file, and
//! prints test metrics with per-sample gates and ambiguity scores.

use coolant::cli::metrics_table;
use coolant::data::{generate_synthetic, split, SplitRatios, SyntheticSpec};
use coolant::training::{ambiguity_scores, evaluate_records, load_checkpoint, save_checkpoint, train, TrainConfig};

fn main() -> coolant::Result<()> {
    let records = generate_synthetic(&SyntheticSpec { n_records: 600, ..SyntheticSpec::default() })?;
    let ratios = SplitRatios { train: 0.6, val: 0.2, test: 0.2 };
    let (train_set, val_set, test_set) = split(&records, ratios, 0)?;
    let config = TrainConfig { max_epochs: 10, split: ratios, ..TrainConfig::default() };
    let outcome = train(&train_set, &val_set, &config)?;

    let path = std::env::temp_dir().join("coolant-example.ckpt");
    save_checkpoint(&outcome.checkpoint, &path)?;
    let ckpt = load_checkpoint(&path)?;
    println!("checkpoint epoch {} (val accuracy {:.4})", ckpt.epoch, ckpt.best_val_acc);

    let eval = evaluate_records(&ckpt.params, &ckpt.config, &test_set)?;
    print!("{}", metrics_table(&[("test", &eval.report)]));
    let g = ambiguity_scores(&ckpt.params, &eval.outputs.m_img, &eval.outputs.m_txt, &ckpt.dataset)?;
    println!("{:<12} {:>5} {:>20} {:>7}", "id", "label", "gates (v, t, f)", "g");
    for (i, r) in test_set.iter().take(8).enumerate() {
        let a = eval.outputs.gates.row(i);
        println!("{:<12} {:>5} {:>6.3} {:>6.3} {:>6.3} {:>7.4}", r.id, r.label.index(), a[0], a[1], a[2], g[i]);
    }
    std::fs::remove_file(&path).ok();
    Ok(())
}
