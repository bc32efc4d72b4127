//! Patch sampling, flip augmentation and the equivariant transforms used to
//! build the paired batch for the self-consistency loss.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::pool::reflect;
use crate::tensor::Tensor;

pub const TRANSLATE_MIN: usize = 16;
pub const TRANSLATE_MAX: usize = 20;
/// Smallest random-crop side as a fraction of the patch side.
pub const CROP_MIN_FRACTION: f64 = 0.75;

/// Patches `(k, 3, P, P)` with the score of the image each came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    pub patches: Tensor<f32>,
    pub scores: Vec<f64>,
    /// Index of the source image for every patch.
    pub sources: Vec<usize>,
    /// Top-left `(row, col)` of every patch in its source.
    pub corners: Vec<(usize, usize)>,
    /// ChaCha word position after sampling.
    pub rng_state: u128,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.patches.shape()[3]
    }
}

fn image_dims(image: &Tensor<f32>) -> Result<(usize, usize)> {
    match image.shape() {
        [3, h, w] => Ok((*h, *w)),
        s => Err(Error::shape("patches", format!("expected a (3, H, W) image, got {s:?}"))),
    }
}

/// Copies the `size × size` window at `(top, left)` of a `(3, H, W)` image.
pub fn crop(image: &Tensor<f32>, top: usize, left: usize, size: usize) -> Result<Vec<f32>> {
    let (h, w) = image_dims(image)?;
    if top + size > h || left + size > w {
        return Err(Error::Invalid(format!(
            "patch {size}x{size} at ({top}, {left}) exceeds {h}x{w} image"
        )));
    }
    let mut out = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        for y in top..top + size {
            let row = (c * h + y) * w;
            out.extend_from_slice(&image.data()[row + left..row + left + size]);
        }
    }
    Ok(out)
}

/// Patches at explicit `(image, top, left)` picks.
pub fn gather_patches(
    images: &[Tensor<f32>],
    scores: &[f64],
    picks: &[(usize, usize, usize)],
    size: usize,
) -> Result<PatchBatch> {
    let mut data = Vec::with_capacity(picks.len() * 3 * size * size);
    for &(i, top, left) in picks {
        let img = images
            .get(i)
            .ok_or_else(|| Error::Invalid(format!("image index {i} out of range")))?;
        data.extend(crop(img, top, left, size)?);
    }
    Ok(PatchBatch {
        patches: Tensor::from_vec(&[picks.len(), 3, size, size], data)?,
        scores: picks.iter().map(|&(i, _, _)| scores[i]).collect(),
        sources: picks.iter().map(|&(i, _, _)| i).collect(),
        corners: picks.iter().map(|&(_, t, l)| (t, l)).collect(),
        rng_state: 0,
    })
}

/// Uniformly random top-left corner for a `size` patch.
pub fn random_corner(h: usize, w: usize, size: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(0..=h - size), rng.gen_range(0..=w - size))
}

/// `count` patches from one `(3, H, W)` image at uniformly random corners.
pub fn sample_patches(
    image: &Tensor<f32>,
    score: f64,
    count: usize,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PatchBatch> {
    let (h, w) = image_dims(image)?;
    if count == 0 || size == 0 {
        return Err(Error::Invalid("patch count and size must be positive".into()));
    }
    if h < size || w < size {
        return Err(Error::Invalid(format!("image {h}x{w} is smaller than patch size {size}")));
    }
    let picks: Vec<_> = (0..count)
        .map(|_| {
            let (t, l) = random_corner(h, w, size, rng);
            (0, t, l)
        })
        .collect();
    let mut batch = gather_patches(std::slice::from_ref(image), &[score], &picks, size)?;
    batch.rng_state = rng.get_word_pos();
    Ok(batch)
}

/// Independent per-patch flip probabilities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub hflip: f64,
    pub vflip: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self { hflip: 0.5, vflip: 0.5 }
    }
}

impl AugmentPolicy {
    pub fn none() -> Self {
        Self { hflip: 0.0, vflip: 0.0 }
    }
}

/// Flip decisions `[horizontal, vertical]` for `k` patches. A zero
/// probability draws nothing, so an empty policy leaves the RNG untouched.
pub fn augment_flags(k: usize, policy: AugmentPolicy, rng: &mut ChaCha8Rng) -> Vec<[bool; 2]> {
    (0..k)
        .map(|_| {
            let h = policy.hflip > 0.0 && rng.gen_bool(policy.hflip.min(1.0));
            let v = policy.vflip > 0.0 && rng.gen_bool(policy.vflip.min(1.0));
            [h, v]
        })
        .collect()
}

pub fn augment(batch: &PatchBatch, rng: &mut ChaCha8Rng, policy: AugmentPolicy) -> Result<PatchBatch> {
    let flags = augment_flags(batch.len(), policy, rng);
    let (k, c, h, w) = batch.patches.dims4("augment")?;
    let src = batch.patches.data();
    let plane = h * w;
    let mut out = src.to_vec();
    for (i, [fh, fv]) in flags.into_iter().enumerate() {
        if !fh && !fv {
            continue;
        }
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            for y in 0..h {
                let sy = if fv { h - 1 - y } else { y };
                for x in 0..w {
                    let sx = if fh { w - 1 - x } else { x };
                    out[base + y * w + x] = src[base + sy * w + sx];
                }
            }
        }
    }
    debug_assert_eq!(k, batch.len());
    Ok(PatchBatch {
        patches: Tensor::from_vec(batch.patches.shape(), out)?,
        ..batch.clone()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TransformKind {
    HFlip,
    VFlip,
    Rot90,
    /// Random shift of 16–20 px per axis with reflective padding.
    Translate,
    /// Random square crop resized back to the patch size.
    RandomCrop,
    HFlipTranslate,
}

impl TransformKind {
    pub const ALL: [TransformKind; 6] = [
        TransformKind::HFlip,
        TransformKind::VFlip,
        TransformKind::Rot90,
        TransformKind::Translate,
        TransformKind::RandomCrop,
        TransformKind::HFlipTranslate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::HFlip => "hflip",
            TransformKind::VFlip => "vflip",
            TransformKind::Rot90 => "rot90",
            TransformKind::Translate => "translate",
            TransformKind::RandomCrop => "random_crop",
            TransformKind::HFlipTranslate => "hflip_translate",
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TransformKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = TransformKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown transform {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Per-image remap `out(y, x) = in(map(y, x))` over a `(k, c, h, w)` tensor.
fn remap(
    t: &Tensor<f32>,
    out_hw: (usize, usize),
    map: impl Fn(usize, usize, usize) -> (usize, usize),
) -> Result<Tensor<f32>> {
    let (k, c, h, w) = t.dims4("equivariant_transform")?;
    let (oh, ow) = out_hw;
    let src = t.data();
    let mut out = Vec::with_capacity(k * c * oh * ow);
    for i in 0..k {
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for y in 0..oh {
                for x in 0..ow {
                    let (sy, sx) = map(i, y, x);
                    out.push(src[base + sy * w + sx]);
                }
            }
        }
    }
    Tensor::from_vec(&[k, c, oh, ow], out)
}

pub fn hflip(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (_, _, h, w) = t.dims4("hflip")?;
    remap(t, (h, w), |_, y, x| (y, w - 1 - x))
}

pub fn vflip(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (_, _, h, w) = t.dims4("vflip")?;
    remap(t, (h, w), |_, y, x| (h - 1 - y, x))
}

/// Counter-clockwise quarter turn of square patches.
pub fn rot90(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (_, _, h, w) = t.dims4("rot90")?;
    if h != w {
        return Err(Error::shape("rot90", format!("patches must be square, got {h}x{w}")));
    }
    remap(t, (h, w), |_, y, x| (x, w - 1 - y))
}

/// Shifts every patch by `(dy, dx)` pixels, filling with the reflected image.
pub fn translate(t: &Tensor<f32>, dy: isize, dx: isize) -> Result<Tensor<f32>> {
    translate_each(t, &vec![(dy, dx); t.shape().first().copied().unwrap_or(0)])
}

fn translate_each(t: &Tensor<f32>, shifts: &[(isize, isize)]) -> Result<Tensor<f32>> {
    let (_, _, h, w) = t.dims4("translate")?;
    remap(t, (h, w), |i, y, x| {
        let (dy, dx) = shifts[i];
        (reflect(y as isize - dy, h), reflect(x as isize - dx, w))
    })
}

/// Bilinear resize of the `side × side` window at `(top, left)` to `size × size`
/// (half-pixel centers).
fn crop_resize(t: &Tensor<f32>, windows: &[(usize, usize, usize)]) -> Result<Tensor<f32>> {
    let (k, c, h, w) = t.dims4("random_crop")?;
    let src = t.data();
    let mut out = Vec::with_capacity(t.len());
    for i in 0..k {
        let (top, left, side) = windows[i];
        let scale = side as f64 / h as f64;
        let coord = |d: usize| ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for y in 0..h {
                let fy = coord(y);
                let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
                let y1 = (y0 + 1).min(side - 1);
                for x in 0..w {
                    let fx = coord(x);
                    let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
                    let x1 = (x0 + 1).min(side - 1);
                    let at = |yy: usize, xx: usize| src[base + (top + yy) * w + left + xx] as f64;
                    let v = (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x1))
                        + ty * ((1.0 - tx) * at(y1, x0) + tx * at(y1, x1));
                    out.push(v as f32);
                }
            }
        }
    }
    Tensor::from_vec(t.shape(), out)
}

fn random_shift(rng: &mut ChaCha8Rng) -> isize {
    let m = rng.gen_range(TRANSLATE_MIN..=TRANSLATE_MAX) as isize;
    if rng.gen_bool(0.5) {
        m
    } else {
        -m
    }
}

/// Applies `kind` to every patch of `(k, 3, P, P)`. Flips and rotation ignore
/// the RNG; translation and cropping draw per-patch parameters from it.
pub fn equivariant_transform(t: &Tensor<f32>, kind: TransformKind, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    let (k, _, h, w) = t.dims4("equivariant_transform")?;
    match kind {
        TransformKind::HFlip => hflip(t),
        TransformKind::VFlip => vflip(t),
        TransformKind::Rot90 => rot90(t),
        TransformKind::Translate => {
            let shifts: Vec<_> = (0..k).map(|_| (random_shift(rng), random_shift(rng))).collect();
            translate_each(t, &shifts)
        }
        TransformKind::HFlipTranslate => {
            let shifts: Vec<_> = (0..k).map(|_| (random_shift(rng), random_shift(rng))).collect();
            translate_each(&hflip(t)?, &shifts)
        }
        TransformKind::RandomCrop => {
            if h != w {
                return Err(Error::shape("random_crop", format!("patches must be square, got {h}x{w}")));
            }
            let min_side = ((CROP_MIN_FRACTION * h as f64).ceil() as usize).clamp(1, h);
            let windows: Vec<_> = (0..k)
                .map(|_| {
                    let side = rng.gen_range(min_side..=h);
                    (rng.gen_range(0..=h - side), rng.gen_range(0..=w - side), side)
                })
                .collect();
            crop_resize(t, &windows)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn ramp(k: usize, size: usize) -> Tensor<f32> {
        Tensor::from_fn(&[k, 3, size, size], |i| (i % 97) as f32 * 0.01)
    }

    #[test]
    fn exact_size_image_gives_whole_image() {
        let img = Tensor::from_fn(&[3, 8, 8], |i| i as f32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_patches(&img, 42.0, 5, 8, &mut rng).unwrap();
        assert_eq!(b.len(), 5);
        for i in 0..5 {
            assert_eq!(b.patches.slice_batch(i).data(), img.data());
        }
        assert!(b.scores.iter().all(|&s| s == 42.0));
    }

    #[test]
    fn rejects_small_image() {
        let img = Tensor::from_fn(&[3, 8, 8], |i| i as f32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_patches(&img, 1.0, 1, 9, &mut rng).is_err());
    }

    #[test]
    fn rot90_four_times_is_identity() {
        let t = ramp(2, 6);
        let r = rot90(&rot90(&rot90(&rot90(&t).unwrap()).unwrap()).unwrap()).unwrap();
        assert_eq!(r, t);
        assert_ne!(rot90(&t).unwrap(), t);
    }

    #[test]
    fn flips_are_involutions() {
        let t = ramp(2, 5);
        assert_eq!(hflip(&hflip(&t).unwrap()).unwrap(), t);
        assert_eq!(vflip(&vflip(&t).unwrap()).unwrap(), t);
        assert_eq!(hflip(&t).unwrap(), t.flip_last());
    }

    #[test]
    fn full_crop_is_identity() {
        let t = ramp(1, 8);
        assert_eq!(crop_resize(&t, &[(0, 0, 8)]).unwrap(), t);
    }

    #[test]
    fn unknown_kind() {
        assert!("shear".parse::<TransformKind>().is_err());
        for k in TransformKind::ALL {
            assert_eq!(k.name().parse::<TransformKind>().unwrap(), k);
        }
    }

    #[test]
    fn empty_policy_is_identity() {
        let t = ramp(4, 4);
        let b = PatchBatch {
            patches: t.clone(),
            scores: vec![1.0; 4],
            sources: vec![0; 4],
            corners: vec![(0, 0); 4],
            rng_state: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&b, &mut rng, AugmentPolicy::none()).unwrap(), b);
    }
}
