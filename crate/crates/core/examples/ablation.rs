//! Trains one model per loss combination (ranking and consistency on or off)
//! and prints the median test scores as a table.

mod common;

use nriqa::analysis::{ablate, AblationAxis};
use nriqa::config::RunConfig;
use nriqa::trainer::LoadedSet;
use nriqa::ScoreScale;

fn main() -> nriqa::Result<()> {
    let out = common::out_dir("ablation");
    let (train_m, test_m) = common::small_dataset(&out)?;
    let mut base = RunConfig::toy();
    base.train = common::quick_config();
    let axes = [
        AblationAxis::RankingLoss(vec![true, false]),
        AblationAxis::ConsistencyLoss(vec![true, false]),
    ];
    let table = ablate(
        &base,
        &axes,
        2,
        &LoadedSet::load(&train_m)?,
        &LoadedSet::load(&test_m)?,
        ScoreScale::new(0.0, 100.0),
    )?;
    print!("{}", table.to_csv());
    Ok(())
}
