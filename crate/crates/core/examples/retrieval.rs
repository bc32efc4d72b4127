//! Nearest neighbors of a test image among the training images, measured in
//! the model's latent space.

mod common;

use nriqa::analysis::nearest_neighbors;
use nriqa::data::load_images;

fn main() -> nriqa::Result<()> {
    let out = common::out_dir("retrieval");
    let q = common::quick_model(&out)?;
    let gallery = load_images(&q.train)?;
    let queries = load_images(&q.test)?;
    for (i, query) in queries.iter().enumerate().step_by(queries.len().div_ceil(3)) {
        let rec = &q.test.records[i];
        let result = nearest_neighbors(
            &q.model,
            &rec.path,
            query,
            &common::names(&q.train),
            &gallery,
            &q.train.scores(),
            3,
            4,
            common::PATCH,
            0,
        )?;
        println!("query {} (score {:.1})", rec.path, rec.score);
        for n in &result.neighbors {
            println!("  {:<28} distance {:.4} score {:.1}", n.path, n.distance, n.score);
        }
    }
    Ok(())
}
