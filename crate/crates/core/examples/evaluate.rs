//! Evaluation protocol on hand-made scores: SROCC, PLCC after the logistic
//! mapping, and a dataset-size weighted average.

use nriqa::metrics::{evaluate, weighted_average, ScorePairs};

fn main() -> nriqa::Result<()> {
    // a saturating predictor: monotone but far from linear
    let gts: Vec<f64> = (0..40).map(|i| i as f64 * 2.5).collect();
    let preds: Vec<f64> = gts
        .iter()
        .enumerate()
        .map(|(i, g)| (g / 25.0 - 2.0).tanh() + if i % 7 == 0 { 0.15 } else { 0.0 })
        .collect();
    let pairs = ScorePairs::new(preds, gts)?;
    let report = evaluate(&pairs)?;
    println!("{}", nriqa::metrics::MetricReport::CSV_HEADER);
    println!("{}", report.csv_row("saturating"));
    print!("{}", report.key_values());

    let per_dataset = [0.91, 0.78, 0.64];
    let sizes = [3000.0, 1200.0, 10000.0];
    println!("weighted srocc {:.4}", weighted_average(&per_dataset, &sizes)?);
    Ok(())
}
