//! Synthetic segmentation data: toy instrument assets, procedural tissue
//! backgrounds, augmentation, compositing with exact masks, colour
//! harmonization and class-balanced dataset assembly.

mod assets;
mod augment;
mod background;
mod compose;
mod dataset;

pub use assets::{gen_toy_assets, AssetBank, ForegroundAsset, Pose, ASSET_SIZE};
pub use augment::{augment, augment_background, warp_rgba, AugmentationSpec, Border, Transform};
pub use background::{gen_background, reference_background, BackgroundAsset, BackgroundKind, BackgroundOrigin};
pub use compose::{blend, harmonize, Placement, SegSample, MAX_PLACEMENTS};
pub use dataset::{
    generate, synth_dataset, write_dataset, BackgroundRouting, DatasetManifest, GeneratedDataset, GeneratedSample, InstanceRecord,
    PlacedInstance, SampleRecord, SynthConfig, MANIFEST_FILE,
};

use image::{GrayImage, Rgb32FImage};

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid augmentation: {0}")]
    Augmentation(String),
    #[error("scale factor {0} must be positive")]
    DegenerateScale(f64),
    #[error("image size {0} must be a positive multiple of 8")]
    InvalidSize(usize),
    #[error("{0} placements exceed the limit of {MAX_PLACEMENTS}")]
    TooManyPlacements(usize),
    #[error("missing assets: {0}")]
    MissingAssets(String),
    #[error("unreachable balance target: {0}")]
    UnreachableTarget(String),
    #[error("old classes may only be composited onto procedural backgrounds")]
    Privacy,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Planar `[3, h, w]` tensor of an RGB image.
pub fn rgb_to_tensor(img: &Rgb32FImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p.0[c] as f64;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("consistent shape")
}

/// Inverse of [`rgb_to_tensor`]; values are clamped to `[0, 1]`.
pub fn tensor_to_rgb(t: &Tensor) -> Rgb32FImage {
    let s = t.shape();
    let (h, w) = (s[1], s[2]);
    Rgb32FImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| t.data()[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) as f32;
        image::Rgb([at(0), at(1), at(2)])
    })
}

pub fn to_rgb8(img: &Rgb32FImage) -> image::RgbImage {
    image::RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y).0;
        image::Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

pub fn from_rgb8(img: &image::RgbImage) -> Rgb32FImage {
    Rgb32FImage::from_fn(img.width(), img.height(), |x, y| image::Rgb(img.get_pixel(x, y).0.map(|v| v as f32 / 255.0)))
}

/// Class ids of a mask, row-major.
pub fn mask_to_labels(mask: &GrayImage) -> Vec<u32> {
    mask.as_raw().iter().map(|&v| v as u32).collect()
}
