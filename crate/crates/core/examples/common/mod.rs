//! Shared setup for the examples: a small synthetic dataset and a briefly
//! trained model.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use nriqa::data::{split, synth_generate, DatasetManifest, SyntheticSpec};
use nriqa::trainer::{train, LoadedSet, TrainConfig};
use nriqa::{Model, ModelConfig, ScoreScale};

pub const PATCH: usize = 32;

pub struct Quick {
    pub model: Model,
    pub train: DatasetManifest,
    pub test: DatasetManifest,
}

/// Output directory from the first argument, or a fresh one under the
/// system temp directory.
pub fn out_dir(name: &str) -> PathBuf {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join(format!("nriqa-{name}")));
    std::fs::create_dir_all(&dir).expect("create output directory");
    dir
}

pub fn small_dataset(dir: &Path) -> nriqa::Result<(DatasetManifest, DatasetManifest)> {
    let spec = SyntheticSpec { n_refs: 8, height: PATCH, width: PATCH, ..SyntheticSpec::default() };
    let m = synth_generate(&spec, dir.join("data"), 1)?;
    split(&m, 0, 0.8)
}

pub fn quick_config() -> TrainConfig {
    TrainConfig { epochs: 3, patch_size: PATCH, ..TrainConfig::toy() }
}

/// Trains the toy architecture for a few epochs on 32×32 images.
pub fn quick_model(dir: &Path) -> nriqa::Result<Quick> {
    let (train_m, test_m) = small_dataset(dir)?;
    let set = LoadedSet::load(&train_m)?;
    let outcome = train(&quick_config(), Model::new(&ModelConfig::default())?, &set, None, ScoreScale::new(0.0, 100.0))?;
    eprintln!("trained {} steps on {} images", outcome.steps, train_m.len());
    Ok(Quick { model: outcome.model, train: train_m, test: test_m })
}

pub fn names(m: &DatasetManifest) -> Vec<String> {
    m.records.iter().map(|r| r.path.clone()).collect()
}
