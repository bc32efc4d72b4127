//! Scatter plot of test predictions against subjective scores with the fitted
//! logistic curve, as SVG.

mod common;

use nriqa::analysis::{predict_images, scatter_plot};
use nriqa::data::load_images;
use nriqa::metrics::{evaluate, ScorePairs};

fn main() -> nriqa::Result<()> {
    let out = common::out_dir("scatter");
    let q = common::quick_model(&out)?;
    let preds = predict_images(&q.model, &load_images(&q.test)?, 4, common::PATCH, 0)?;
    let pairs = ScorePairs::new(preds, q.test.scores())?;
    match evaluate(&pairs) {
        Ok(r) => println!("srocc {:.4} plcc {:.4}", r.srocc, r.plcc),
        Err(e) => println!("metrics undefined: {e}"),
    }
    let path = out.join("scatter.svg");
    scatter_plot(&pairs, "quick model, synthetic test split", &path)?;
    println!("wrote {}", path.display());
    Ok(())
}
