//! How much predictions change when test images are mirrored left to right.

mod common;

use nriqa::analysis::flip_report;
use nriqa::data::load_images;

fn main() -> nriqa::Result<()> {
    let out = common::out_dir("flip");
    let q = common::quick_model(&out)?;
    let images = load_images(&q.test)?;
    let report = flip_report(&q.model, &common::names(&q.test), &images, 4, common::PATCH, 0, "quick")?;
    print!("{}", report.to_csv());
    print!("{}", report.summary());
    Ok(())
}
