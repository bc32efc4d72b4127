//! Datasets: images, manifests, the synthetic generator, patches.

pub mod image;
pub mod manifest;
pub mod patches;
pub mod synth;

pub use image::RgbImage;
pub use manifest::{load_manifest, split, DatasetManifest, Record};
pub use patches::{
    augment, equivariant_transform, sample_patches, AugmentPolicy, PatchBatch, TransformKind,
};
pub use synth::{synth_generate, Family, SyntheticSpec};

use crate::error::Result;
use crate::tensor::Tensor;

/// Loads every record of a manifest as a `(3, H, W)` tensor in `[-1, 1]`.
pub fn load_images(manifest: &DatasetManifest) -> Result<Vec<Tensor<f32>>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let img = RgbImage::read_ppm(manifest.resolve(r))?;
            Tensor::from_vec(&[3, img.height(), img.width()], img.to_planes())
        })
        .collect()
}
