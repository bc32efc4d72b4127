//! Inference and diagnostics: patch-averaged prediction, flip sensitivity,
//! latent nearest neighbors, quality maps, scatter plots and ablations.

pub mod ablation;
pub mod plot;
pub mod qmap;

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use ablation::{ablate, AblationAxis, AblationRow, AblationTable};
pub use plot::{logistic_curve, scatter_plot, scatter_svg};
pub use qmap::{quality_map, QmapSource, QualityMap};

use crate::data::patches::{gather_patches, hflip, random_corner};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Patches forwarded together at inference.
pub const INFERENCE_CHUNK: usize = 64;

/// Corners of `n` seeded random patches; a patch-sized image has one.
fn corners(image: &Tensor<f32>, n: usize, size: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("predict", format!("expected a (3, H, W) image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    if h < size || w < size {
        return Err(Error::Invalid(format!("image {h}x{w} is smaller than patch size {size}")));
    }
    if n == 0 {
        return Err(Error::Invalid("need at least one patch".into()));
    }
    if h == size && w == size {
        return Ok(vec![(0, 0)]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| random_corner(h, w, size, &mut rng)).collect())
}

/// Per-image mean of the model outputs (score units) and of the latent
/// vectors over patches. `flip` mirrors every patch first, which equals
/// sampling the flipped image at mirrored corners.
fn patch_means(
    model: &Model,
    images: &[Tensor<f32>],
    n: usize,
    size: usize,
    seed: u64,
    flip: bool,
) -> Result<Vec<(f64, Vec<f64>)>> {
    let mut picks = Vec::new();
    let mut owner = Vec::new();
    for (i, img) in images.iter().enumerate() {
        for (t, l) in corners(img, n, size, seed)? {
            picks.push((i, t, l));
            owner.push(i);
        }
    }
    let width = model.config().latent_len();
    let mut sums = vec![(0.0, vec![0.0; width], 0usize); images.len()];
    let dummy = vec![0.0; images.len()];
    for (chunk, own) in picks.chunks(INFERENCE_CHUNK).zip(owner.chunks(INFERENCE_CHUNK)) {
        let batch = gather_patches(images, &dummy, chunk, size)?;
        let x = if flip { hflip(&batch.patches)? } else { batch.patches };
        let out = model.predict(&x)?;
        for (j, &i) in own.iter().enumerate() {
            let s = &mut sums[i];
            s.0 += out.q[j];
            for (a, b) in s.1.iter_mut().zip(&out.latent[j]) {
                *a += b;
            }
            s.2 += 1;
        }
    }
    Ok(sums
        .into_iter()
        .map(|(q, lat, c)| {
            let c = c as f64;
            (model.score_scale.from_unit(q / c), lat.into_iter().map(|v| v / c).collect())
        })
        .collect())
}

/// Mean predicted score over `n_patches` seeded random patches of each
/// `(3, H, W)` image. Every image uses the same fresh RNG, so a result does
/// not depend on the other images.
pub fn predict_images(model: &Model, images: &[Tensor<f32>], n_patches: usize, patch_size: usize, seed: u64) -> Result<Vec<f64>> {
    Ok(patch_means(model, images, n_patches, patch_size, seed, false)?
        .into_iter()
        .map(|(q, _)| q)
        .collect())
}

pub fn predict_image(model: &Model, image: &Tensor<f32>, n_patches: usize, patch_size: usize, seed: u64) -> Result<f64> {
    Ok(predict_images(model, std::slice::from_ref(image), n_patches, patch_size, seed)?[0])
}

/// Patch-averaged latent vectors, computed on the current rayon pool.
pub fn latents(model: &Model, images: &[Tensor<f32>], n_patches: usize, patch_size: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    images
        .par_iter()
        .map(|img| {
            let mut r = patch_means(model, std::slice::from_ref(img), n_patches, patch_size, seed, false)?;
            Ok(r.remove(0).1)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlipRow {
    pub path: String,
    pub q: f64,
    pub q_flipped: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlipReport {
    pub tag: String,
    pub rows: Vec<FlipRow>,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl FlipReport {
    pub const CSV_HEADER: &'static str = "path,q,q_flipped,abs_delta";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.path, r.q, r.q_flipped, r.delta);
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "model={}\nn={}\nmean_abs_delta={}\nmedian_abs_delta={}\nmax_abs_delta={}\n",
            self.tag,
            self.rows.len(),
            self.mean,
            self.median,
            self.max
        )
    }
}

/// Prediction differences between each image and its horizontal mirror. The
/// mirrored image is sampled at mirrored corners, so for a flip-invariant
/// model every delta is zero regardless of the sampled positions.
pub fn flip_report(
    model: &Model,
    names: &[String],
    images: &[Tensor<f32>],
    n_patches: usize,
    patch_size: usize,
    seed: u64,
    tag: &str,
) -> Result<FlipReport> {
    if names.len() != images.len() || images.is_empty() {
        return Err(Error::Invalid(format!(
            "flip report needs matching non-empty names and images ({} vs {})",
            names.len(),
            images.len()
        )));
    }
    let q = patch_means(model, images, n_patches, patch_size, seed, false)?;
    let qf = patch_means(model, images, n_patches, patch_size, seed, true)?;
    let rows: Vec<FlipRow> = names
        .iter()
        .zip(q.iter().zip(&qf))
        .map(|(name, ((a, _), (b, _)))| FlipRow {
            path: name.clone(),
            q: *a,
            q_flipped: *b,
            delta: (a - b).abs(),
        })
        .collect();
    let deltas: Vec<f64> = rows.iter().map(|r| r.delta).collect();
    Ok(FlipReport {
        tag: tag.to_string(),
        mean: deltas.iter().sum::<f64>() / deltas.len() as f64,
        median: median(&deltas),
        max: deltas.iter().copied().fold(0.0, f64::max),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub path: String,
    pub distance: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub query: String,
    pub k: usize,
    pub neighbors: Vec<Neighbor>,
}

impl RetrievalResult {
    pub const CSV_HEADER: &'static str = "query,rank,path,distance,score";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for (r, n) in self.neighbors.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{},{}", self.query, r + 1, n.path, n.distance, n.score);
        }
        s
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Gallery indices ordered by distance to `query` (ties by index), at most `k`.
pub fn rank_by_distance(query: &[f64], gallery: &[Vec<f64>], k: usize) -> Vec<(usize, f64)> {
    let mut d: Vec<(usize, f64)> = gallery
        .iter()
        .enumerate()
        .map(|(i, g)| (i, euclidean(query, g)))
        .collect();
    d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    d.truncate(k);
    d
}

/// Exact k nearest neighbors of the query in latent space by full scan.
#[allow(clippy::too_many_arguments)]
pub fn nearest_neighbors(
    model: &Model,
    query_name: &str,
    query: &Tensor<f32>,
    gallery_names: &[String],
    gallery: &[Tensor<f32>],
    gallery_scores: &[f64],
    k: usize,
    n_patches: usize,
    patch_size: usize,
    seed: u64,
) -> Result<RetrievalResult> {
    if gallery.is_empty() {
        return Err(Error::Data("retrieval gallery is empty".into()));
    }
    if gallery_names.len() != gallery.len() || gallery_scores.len() != gallery.len() {
        return Err(Error::Invalid("gallery names, images and scores differ in length".into()));
    }
    let q = latents(model, std::slice::from_ref(query), n_patches, patch_size, seed)?.remove(0);
    let lat = latents(model, gallery, n_patches, patch_size, seed)?;
    let neighbors = rank_by_distance(&q, &lat, k)
        .into_iter()
        .map(|(i, distance)| Neighbor {
            index: i,
            path: gallery_names[i].clone(),
            distance,
            score: gallery_scores[i],
        })
        .collect();
    Ok(RetrievalResult {
        query: query_name.to_string(),
        k,
        neighbors,
    })
}
