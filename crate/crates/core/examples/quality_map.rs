//! Spatial activation maps of a distorted image from the encoder and from the
//! last CNN scale, written as PPM heat maps and overlays.

mod common;

use nriqa::analysis::{quality_map, QmapSource};
use nriqa::data::RgbImage;

fn main() -> nriqa::Result<()> {
    let out = common::out_dir("qmap");
    let q = common::quick_model(&out)?;
    let rec = q.test.records.iter().find(|r| r.path.contains("noise")).unwrap_or(&q.test.records[0]);
    let img = RgbImage::read_ppm(q.test.resolve(rec))?;
    for (source, name) in [(QmapSource::Encoder, "encoder"), (QmapSource::Cnn, "cnn")] {
        let map = quality_map(&q.model, &img, source)?;
        map.heat_image().write_ppm(out.join(format!("{name}_qmap.ppm")))?;
        map.overlay(&img)?.write_ppm(out.join(format!("{name}_overlay.ppm")))?;
        println!("{name}: {}x{} grid upsampled to {}x{}", map.grid_dims.0, map.grid_dims.1, map.height, map.width);
    }
    println!("maps of {} in {}", rec.path, out.display());
    Ok(())
}
