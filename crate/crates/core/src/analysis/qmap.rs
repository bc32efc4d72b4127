//! Spatial quality maps: channel-wise L2 magnitude of a feature grid,
//! bilinearly upsampled to the image and min-max normalized.

use std::fmt;
use std::str::FromStr;

use crate::data::RgbImage;
use crate::error::{Error, Result};
use crate::model::Model;

/// Feature grid the map is computed from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum QmapSource {
    /// Encoder output.
    #[default]
    Encoder,
    /// Last CNN scale.
    Cnn,
}

impl FromStr for QmapSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Self::Encoder),
            "cnn" => Ok(Self::Cnn),
            _ => Err(Error::Config(format!("qmap source must be encoder or cnn, got {s:?}"))),
        }
    }
}

impl fmt::Display for QmapSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Encoder => "encoder",
            Self::Cnn => "cnn",
        })
    }
}

/// Heat values in `[0, 1]`, row-major `height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    /// Channel magnitudes on the feature grid before upsampling.
    pub grid: Vec<f64>,
    pub grid_dims: (usize, usize),
}

/// Bilinear sample of a row-major `rows × cols` grid at continuous pixel
/// position `(y, x)` of a `height × width` image (half-pixel centers).
pub fn bilinear_at(grid: &[f64], rows: usize, cols: usize, height: usize, width: usize, y: f64, x: f64) -> f64 {
    let gy = ((y + 0.5) * rows as f64 / height as f64 - 0.5).clamp(0.0, (rows - 1) as f64);
    let gx = ((x + 0.5) * cols as f64 / width as f64 - 0.5).clamp(0.0, (cols - 1) as f64);
    let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(rows - 1), (x0 + 1).min(cols - 1));
    let (ty, tx) = (gy - y0 as f64, gx - x0 as f64);
    let at = |r: usize, c: usize| grid[r * cols + c];
    (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x1)) + ty * ((1.0 - tx) * at(y1, x0) + tx * at(y1, x1))
}

pub fn upsample(grid: &[f64], rows: usize, cols: usize, height: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            out.push(bilinear_at(grid, rows, cols, height, width, y as f64, x as f64));
        }
    }
    out
}

/// Min-max normalization to `[0, 1]`; a constant input maps to 0.5.
pub fn normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Channel L2 magnitude of a `(1, C, m, n)` activation, row-major `m × n`.
pub fn channel_magnitude(data: &[f32], channels: usize, rows: usize, cols: usize) -> Vec<f64> {
    let plane = rows * cols;
    (0..plane)
        .map(|p| {
            (0..channels)
                .map(|c| (data[c * plane + p] as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Whole-image quality map (no patching); sides must be multiples of 16.
pub fn quality_map(model: &Model, image: &RgbImage, source: QmapSource) -> Result<QualityMap> {
    let t = image.to_tensor();
    let act = model.activation_grid(&t, source == QmapSource::Cnn)?;
    let (_, c, m, n) = act.dims4("quality_map")?;
    let grid = channel_magnitude(act.data(), c, m, n);
    let (h, w) = (image.height(), image.width());
    let values = normalize(&upsample(&grid, m, n, h, w));
    Ok(QualityMap {
        width: w,
        height: h,
        values,
        grid,
        grid_dims: (m, n),
    })
}

impl QualityMap {
    /// Grayscale heat image: bright means high activation.
    pub fn heat_image(&self) -> RgbImage {
        RgbImage::from_fn(self.width, self.height, |x, y| {
            let v = (self.values[y * self.width + x] * 255.0).round() as u8;
            [v, v, v]
        })
    }

    /// `image` blended half-and-half with a red heat layer.
    pub fn overlay(&self, image: &RgbImage) -> Result<RgbImage> {
        if (image.width(), image.height()) != (self.width, self.height) {
            return Err(Error::Invalid(format!(
                "overlay image {}x{} vs map {}x{}",
                image.width(),
                image.height(),
                self.width,
                self.height
            )));
        }
        Ok(RgbImage::from_fn(self.width, self.height, |x, y| {
            let v = self.values[y * self.width + x];
            let p = image.pixel(x, y);
            let heat = [255.0 * v, 64.0 * v, 0.0];
            std::array::from_fn(|c| (0.5 * p[c] as f64 + 0.5 * heat[c]).round() as u8)
        }))
    }
}
