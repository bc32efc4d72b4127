//! Generates a small synthetic distortion dataset and splits it by reference.
//!
//!     cargo run --release --example synth_dataset -- /tmp/synth

use std::path::PathBuf;

use nriqa::data::{split, synth_generate, SyntheticSpec};

fn main() -> nriqa::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("nriqa-synth"));
    let spec = SyntheticSpec { n_refs: 10, ..SyntheticSpec::default() };
    let manifest = synth_generate(&spec, &out, 1)?;
    let (train, test) = split(&manifest, 0, 0.8)?;
    train.write(out.join("train.csv"))?;
    test.write(out.join("test.csv"))?;

    println!("{} images in {}", manifest.len(), out.display());
    println!("train {} images / test {} images", train.len(), test.len());
    for r in manifest.records.iter().take(spec.image_count() / spec.n_refs) {
        println!("  {:<28} score {:>6.2}  ref {}", r.path, r.score, r.ref_id);
    }
    Ok(())
}
