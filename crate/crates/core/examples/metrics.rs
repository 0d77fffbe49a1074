//! Accuracy and per-class precision, recall and F1 for a label vector.

use coolant::cli::metrics_table;
use coolant::data::Label::{Fake, Real};
use coolant::metrics::evaluate;

fn main() -> coolant::Result<()> {
    let truth = [Fake, Fake, Fake, Real, Real, Real, Real, Fake];
    let pred = [Fake, Real, Fake, Real, Fake, Real, Real, Fake];
    let report = evaluate(&pred, &truth)?;
    println!("{:?}", report.counts);
    print!("{}", metrics_table(&[("example", &report)]));

    let degenerate = evaluate(&[Real, Real], &[Real, Real])?;
    println!("undefined ratios reported as 0: {:?}", degenerate.zero_division);
    Ok(())
}
