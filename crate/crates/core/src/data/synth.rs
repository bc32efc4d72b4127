//! Deterministic synthetic distortion dataset: procedural pristine references
//! plus graded blur, noise, block quantization and contrast distortions with
//! scores that fall linearly with severity.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::image::RgbImage;
use super::manifest::{DatasetManifest, Record};
use crate::error::{Error, Result};
use crate::nn::pool::reflect;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const QUANT_BLOCK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    GaussianBlur,
    WhiteNoise,
    QuantizeBlocks,
    ContrastShift,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::GaussianBlur,
        Family::WhiteNoise,
        Family::QuantizeBlocks,
        Family::ContrastShift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::GaussianBlur => "gaussian_blur",
            Family::WhiteNoise => "white_noise",
            Family::QuantizeBlocks => "quantize_blocks",
            Family::ContrastShift => "contrast_shift",
        }
    }

    /// Severity parameters for four levels: blur σ, noise σ (0–255 scale),
    /// gray levels, gamma.
    fn table(self) -> [f64; 4] {
        match self {
            Family::GaussianBlur => [0.5, 1.0, 2.0, 4.0],
            Family::WhiteNoise => [4.0, 8.0, 16.0, 32.0],
            Family::QuantizeBlocks => [32.0, 16.0, 8.0, 4.0],
            Family::ContrastShift => [1.2, 1.5, 2.0, 2.8],
        }
    }

    /// Parameter of `level` (1-based) out of `levels`. Four levels use the
    /// table; other counts interpolate geometrically between its endpoints.
    pub fn parameter(self, level: usize, levels: usize) -> f64 {
        let t = self.table();
        if levels == 4 {
            return t[level - 1];
        }
        let frac = (level - 1) as f64 / (levels - 1) as f64;
        t[0] * (t[3] / t[0]).powf(frac)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown distortion family {s:?} (expected gaussian_blur, white_noise, quantize_blocks or contrast_shift)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_refs: usize,
    pub height: usize,
    pub width: usize,
    pub families: Vec<Family>,
    pub levels: usize,
    pub seed: u64,
    pub score_range: (f64, f64),
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_refs: 25,
            height: 64,
            width: 64,
            families: Family::ALL.to_vec(),
            levels: 4,
            seed: 0,
            score_range: (0.0, 100.0),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_refs == 0 {
            return Err(Error::Config("synth.n_refs must be positive".into()));
        }
        if self.levels < 2 {
            return Err(Error::Config(format!("synth.levels must be >= 2, got {}", self.levels)));
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(16) || !self.width.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "synth image size {}x{} must be positive multiples of 16",
                self.height, self.width
            )));
        }
        if self.families.is_empty() {
            return Err(Error::Config("synth.families must not be empty".into()));
        }
        let (lo, hi) = self.score_range;
        if !(lo < hi) {
            return Err(Error::Config(format!("score range [{lo}, {hi}] is empty")));
        }
        Ok(())
    }

    pub fn image_count(&self) -> usize {
        self.n_refs * (1 + self.families.len() * self.levels)
    }

    /// `100 − 90·(level−1)/(levels−1)` mapped from `[0, 100]` into the score range.
    pub fn score(&self, level: usize) -> f64 {
        let raw = 100.0 - 90.0 * (level - 1) as f64 / (self.levels - 1) as f64;
        self.scale(raw)
    }

    pub fn pristine_score(&self) -> f64 {
        self.scale(100.0)
    }

    fn scale(&self, raw: f64) -> f64 {
        let (lo, hi) = self.score_range;
        lo + (hi - lo) * raw / 100.0
    }
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Procedural pristine content: smooth color fields, filled shapes (some
/// striped or checkered) and a patch of fine random texture.
pub fn reference_image(rng: &mut ChaCha8Rng, width: usize, height: usize) -> RgbImage {
    let (w, h) = (width as f64, height as f64);
    let mut px = vec![[0.0f64; 3]; width * height];
    for c in 0..3 {
        let base = rng.gen_range(50.0..205.0);
        let waves: Vec<[f64; 4]> = (0..3)
            .map(|_| {
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let freq = rng.gen_range(0.5..3.0) * std::f64::consts::TAU;
                [rng.gen_range(15.0..45.0), freq * angle.cos() / w, freq * angle.sin() / h, rng.gen_range(0.0..std::f64::consts::TAU)]
            })
            .collect();
        for y in 0..height {
            for x in 0..width {
                let v: f64 = waves
                    .iter()
                    .map(|[a, fx, fy, ph]| a * (fx * x as f64 + fy * y as f64 + ph).sin())
                    .sum();
                px[y * width + x][c] = base + v;
            }
        }
    }
    let n_shapes = rng.gen_range(3..=6);
    for shape in 0..n_shapes {
        let color: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..255.0));
        let circle = rng.gen_bool(0.5);
        let cx = rng.gen_range(0.0..w);
        let cy = rng.gen_range(0.0..h);
        let rx = rng.gen_range(w / 12.0..w / 3.0);
        let ry = if circle { rx } else { rng.gen_range(h / 12.0..h / 3.0) };
        // 0 flat, 1 stripes, 2 checker; the first shape is always patterned
        let pattern = if shape == 0 { rng.gen_range(1..3) } else { rng.gen_range(0..3) };
        let period = rng.gen_range(2..=4) as f64;
        let contrast = rng.gen_range(40.0..100.0);
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = if circle {
                    dx * dx + dy * dy <= rx * rx
                } else {
                    dx.abs() <= rx && dy.abs() <= ry
                };
                if !inside {
                    continue;
                }
                let m = match pattern {
                    1 => {
                        let u = dx * theta.cos() + dy * theta.sin();
                        if (u / period).floor() as i64 % 2 == 0 { 0.5 } else { -0.5 }
                    }
                    2 => {
                        let k = (x as f64 / period).floor() as i64 + (y as f64 / period).floor() as i64;
                        if k % 2 == 0 { 0.5 } else { -0.5 }
                    }
                    _ => 0.0,
                };
                for c in 0..3 {
                    px[y * width + x][c] = color[c] + m * contrast;
                }
            }
        }
    }
    let tw = rng.gen_range(width / 6..=width / 3).max(1);
    let th = rng.gen_range(height / 6..=height / 3).max(1);
    let tx = rng.gen_range(0..=width - tw);
    let ty = rng.gen_range(0..=height - th);
    for y in ty..ty + th {
        for x in tx..tx + tw {
            let n = rng.gen_range(-40.0..40.0);
            for c in 0..3 {
                px[y * width + x][c] += n;
            }
        }
    }
    stretch_levels(&mut px);
    RgbImage::from_fn(width, height, |x, y| px[y * width + x].map(to_u8))
}

/// Tonal range every reference is mapped to.
pub const LEVELS_LOW: f64 = 16.0;
pub const LEVELS_HIGH: f64 = 239.0;
const LEVELS_PERCENTILE: f64 = 0.02;

/// Linear stretch sending the 2nd and 98th percentiles of all channel values
/// to [`LEVELS_LOW`] and [`LEVELS_HIGH`].
fn stretch_levels(px: &mut [[f64; 3]]) {
    let mut v: Vec<f64> = px.iter().flatten().copied().collect();
    v.sort_by(f64::total_cmp);
    let at = |q: f64| v[((v.len() - 1) as f64 * q).round() as usize];
    let (lo, hi) = (at(LEVELS_PERCENTILE), at(1.0 - LEVELS_PERCENTILE));
    if hi - lo < 1.0 {
        return;
    }
    let gain = (LEVELS_HIGH - LEVELS_LOW) / (hi - lo);
    for p in px.iter_mut() {
        for c in p.iter_mut() {
            *c = LEVELS_LOW + (*c - lo) * gain;
        }
    }
}

fn planes(img: &RgbImage) -> Vec<f64> {
    img.data().iter().map(|&v| v as f64).collect()
}

fn from_interleaved(img: &RgbImage, v: &[f64]) -> RgbImage {
    RgbImage::new(img.width(), img.height(), v.iter().map(|&x| to_u8(x)).collect())
        .expect("same extents")
}

pub fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let (w, h) = (img.width(), img.height());
    let src = planes(img);
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                tmp[(y * w + x) * 3 + c] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * src[(y * w + reflect(x as isize + i as isize - radius, w)) * 3 + c])
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[(y * w + x) * 3 + c] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * tmp[(reflect(y as isize + i as isize - radius, h) * w + x) * 3 + c])
                    .sum();
            }
        }
    }
    from_interleaved(img, &out)
}

pub fn white_noise(img: &RgbImage, sigma: f64, rng: &mut ChaCha8Rng) -> RgbImage {
    let normal = Normal::new(0.0, sigma).expect("sigma is positive and finite");
    let v: Vec<f64> = planes(img).into_iter().map(|x| x + normal.sample(rng)).collect();
    from_interleaved(img, &v)
}

/// Keeps each 8×8 block's per-channel mean and quantizes the residual around
/// it with step `256 / gray_levels`.
pub fn quantize_blocks(img: &RgbImage, gray_levels: f64) -> RgbImage {
    let step = 256.0 / gray_levels.round().max(1.0);
    let (w, h) = (img.width(), img.height());
    let src = planes(img);
    let mut out = src.clone();
    for by in (0..h).step_by(QUANT_BLOCK) {
        for bx in (0..w).step_by(QUANT_BLOCK) {
            let ys = by..(by + QUANT_BLOCK).min(h);
            let xs = bx..(bx + QUANT_BLOCK).min(w);
            let count = (ys.len() * xs.len()) as f64;
            for c in 0..3 {
                let mut mean = 0.0;
                for y in ys.clone() {
                    for x in xs.clone() {
                        mean += src[(y * w + x) * 3 + c];
                    }
                }
                mean /= count;
                for y in ys.clone() {
                    for x in xs.clone() {
                        let i = (y * w + x) * 3 + c;
                        out[i] = mean + ((src[i] - mean) / step).round() * step;
                    }
                }
            }
        }
    }
    from_interleaved(img, &out)
}

pub fn contrast_shift(img: &RgbImage, gamma: f64) -> RgbImage {
    let v: Vec<f64> = planes(img)
        .into_iter()
        .map(|x| 255.0 * (x / 255.0).powf(gamma))
        .collect();
    from_interleaved(img, &v)
}

pub fn distort(img: &RgbImage, family: Family, param: f64, rng: &mut ChaCha8Rng) -> RgbImage {
    match family {
        Family::GaussianBlur => gaussian_blur(img, param),
        Family::WhiteNoise => white_noise(img, param, rng),
        Family::QuantizeBlocks => quantize_blocks(img, param),
        Family::ContrastShift => contrast_shift(img, param),
    }
}

fn reference_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn distortion_rng(seed: u64, index: usize, family: Family, level: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d157);
    rng.set_stream(((index as u64) << 32) | ((family as u64) << 16) | level as u64);
    rng
}

struct Generated {
    file: String,
    image: RgbImage,
    record: Record,
}

fn generate_reference(spec: &SyntheticSpec, index: usize) -> Vec<Generated> {
    let ref_id = format!("ref_{index:03}");
    let pristine = reference_image(&mut reference_rng(spec.seed, index), spec.width, spec.height);
    let record = |file: &str, score: f64, family: &str, level: usize| Record {
        path: file.to_string(),
        score,
        ref_id: ref_id.clone(),
        tags: [("family".to_string(), family.to_string()), ("level".to_string(), level.to_string())]
            .into_iter()
            .collect(),
    };
    let mut out = Vec::with_capacity(1 + spec.families.len() * spec.levels);
    let file = format!("{ref_id}.ppm");
    out.push(Generated {
        record: record(&file, spec.pristine_score(), "pristine", 0),
        file,
        image: pristine.clone(),
    });
    for &family in &spec.families {
        for level in 1..=spec.levels {
            let mut rng = distortion_rng(spec.seed, index, family, level);
            let image = distort(&pristine, family, family.parameter(level, spec.levels), &mut rng);
            let file = format!("{ref_id}_{family}_{level}.ppm");
            out.push(Generated {
                record: record(&file, spec.score(level), family.name(), level),
                file,
                image,
            });
        }
    }
    out
}

/// Writes every reference, every distorted copy and `manifest.csv` into
/// `out_dir`. References are generated in parallel on `workers` threads, each
/// from its own RNG stream, so the output does not depend on `workers`.
pub fn synth_generate(spec: &SyntheticSpec, out_dir: impl AsRef<Path>, workers: usize) -> Result<DatasetManifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    let per_ref: Vec<Result<Vec<Record>>> = pool.install(|| {
        (0..spec.n_refs)
            .into_par_iter()
            .map(|i| {
                let items = generate_reference(spec, i);
                for g in &items {
                    g.image.write_ppm(out_dir.join(&g.file))?;
                }
                Ok(items.into_iter().map(|g| g.record).collect())
            })
            .collect()
    });
    let mut records = Vec::with_capacity(spec.image_count());
    for r in per_ref {
        records.extend(r?);
    }
    let manifest = DatasetManifest::new("synth", out_dir, records, Some(spec.score_range))?;
    manifest.write(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
