//! Finite-difference check of every parameter gradient of the tiny model.

use nriqa::model::model_grad_check;
use nriqa::ModelConfig;

fn main() -> nriqa::Result<()> {
    let rows = model_grad_check(&ModelConfig::tiny(), 2, 16, 0, 5)?;
    let mut worst = 0.0f64;
    for (name, err) in &rows {
        println!("{name:<40} {err:.2e}");
        worst = worst.max(*err);
    }
    println!("{} parameters, worst relative error {worst:.2e}", rows.len());
    Ok(())
}
