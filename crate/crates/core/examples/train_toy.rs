//! Trains the toy preset on the default synthetic dataset, validating on the
//! held-out references, and writes logs plus the best checkpoint.
//!
//!     cargo run --release --example train_toy -- /tmp/toy
//!
//! A full run takes a few minutes on one core. Pass `quick` as a second
//! argument to train for a single epoch.

mod common;

use nriqa::config::RunConfig;
use nriqa::data::{split, synth_generate};
use nriqa::trainer::{evaluate_set, train_with_outputs, LoadedSet, TrainOutputs};
use nriqa::{Model, ScoreScale};

fn main() -> nriqa::Result<()> {
    let out = common::out_dir("toy");
    let mut run = RunConfig::toy();
    if std::env::args().nth(2).as_deref() == Some("quick") {
        run.train.epochs = 1;
    }
    let m = synth_generate(&run.synth, out.join("data"), run.workers)?;
    let (train_m, test_m) = split(&m, run.split_seed, run.split_ratio)?;
    let train_set = LoadedSet::load(&train_m)?;
    let test_set = LoadedSet::load(&test_m)?;

    let outputs = TrainOutputs { dir: Some(out.join("run")) };
    let outcome = train_with_outputs(
        &run.train,
        Model::new(&run.model)?,
        &train_set,
        Some(&test_set),
        ScoreScale::new(m.score_range.0, m.score_range.1),
        &outputs,
        &run.semantic_pairs(),
    )?;
    let last = outcome.history.last().expect("at least one step");
    println!("{} steps, final loss {:.4} (quality {:.4})", outcome.steps, last.total, last.quality);
    println!("best checkpoint from epoch {} step {}", outcome.model_epoch, outcome.model_step);

    let report = evaluate_set(&outcome.model, &test_set, run.train.eval_patches, run.train.patch_size, run.train.seed)?;
    println!("test srocc {:.4} plcc {:.4} over {} images", report.srocc, report.plcc, report.n);
    println!("artifacts in {}", out.join("run").display());
    Ok(())
}
