//! Crop embedding step. Real backbones run in an external worker; the
//! pixel-grid embedder gives the pipeline a deterministic stand-in.

use image::imageops::FilterType;
use image::DynamicImage;

use crate::embedstore::{RESNET_18_DIM, RESNET_50_DIM};

#[derive(Debug, Clone, PartialEq)]
pub struct CropEmbedding {
    pub resnet_50: Vec<f32>,
    pub resnet_18: Vec<f32>,
}

pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn embed(&self, crop: &DynamicImage) -> Result<CropEmbedding, String>;
}

/// Mean-centred grayscale thumbnails: 32×16 for the 512-d slot and 64×32
/// for the 2,048-d slot. A flat crop yields a zero vector.
#[derive(Debug, Clone, Default)]
pub struct PixelGridEmbedder;

fn grid(crop: &DynamicImage, w: u32, h: u32) -> Vec<f32> {
    let thumb = image::imageops::resize(&crop.to_luma8(), w, h, FilterType::Triangle);
    let values: Vec<f32> = thumb.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
    let mean = values.iter().sum::<f32>() / values.len() as f32;
    values.into_iter().map(|v| v - mean).collect()
}

impl Embedder for PixelGridEmbedder {
    fn name(&self) -> &str {
        "pixel-grid"
    }

    fn embed(&self, crop: &DynamicImage) -> Result<CropEmbedding, String> {
        let out = CropEmbedding {
            resnet_50: grid(crop, 64, 32),
            resnet_18: grid(crop, 32, 16),
        };
        debug_assert_eq!(out.resnet_50.len(), RESNET_50_DIM);
        debug_assert_eq!(out.resnet_18.len(), RESNET_18_DIM);
        Ok(out)
    }
}
