//! Downsampling, cropping and JPEG encoding of page images.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::{DynamicImage, ImageBuffer, ImageError, Pixel};

use crate::geometry::NormBox;

/// Integer-factor box-filter reduction.
///
/// Output is `ceil(W/f) × ceil(H/f)`; each output pixel is the mean of the
/// source pixels in its block (edge blocks may be partial). Grayscale
/// sources stay grayscale, everything else becomes RGB.
pub fn downsample(img: &DynamicImage, factor: u32) -> DynamicImage {
    let factor = factor.max(1);
    let grayscale = !img.color().has_color();
    if factor == 1 {
        return if grayscale {
            DynamicImage::ImageLuma8(img.to_luma8())
        } else {
            DynamicImage::ImageRgb8(img.to_rgb8())
        };
    }
    if grayscale {
        DynamicImage::ImageLuma8(box_filter::<image::Luma<u8>>(&img.to_luma8(), factor))
    } else {
        DynamicImage::ImageRgb8(box_filter::<image::Rgb<u8>>(&img.to_rgb8(), factor))
    }
}

fn box_filter<P>(src: &ImageBuffer<P, Vec<u8>>, factor: u32) -> ImageBuffer<P, Vec<u8>>
where
    P: Pixel<Subpixel = u8>,
{
    let (w, h) = src.dimensions();
    let (ow, oh) = (w.div_ceil(factor), h.div_ceil(factor));
    let channels = P::CHANNEL_COUNT as usize;
    let raw = src.as_raw();
    let mut out = Vec::with_capacity((ow * oh) as usize * channels);
    let mut acc = vec![0u64; channels];
    for by in 0..oh {
        let y0 = by * factor;
        let y1 = (y0 + factor).min(h);
        for bx in 0..ow {
            let x0 = bx * factor;
            let x1 = (x0 + factor).min(w);
            acc.iter_mut().for_each(|a| *a = 0);
            for y in y0..y1 {
                let row = (y as usize * w as usize) * channels;
                for x in x0..x1 {
                    let px = row + x as usize * channels;
                    for c in 0..channels {
                        acc[c] += u64::from(raw[px + c]);
                    }
                }
            }
            let n = u64::from((x1 - x0) * (y1 - y0));
            out.extend(acc.iter().map(|a| ((a + n / 2) / n) as u8));
        }
    }
    ImageBuffer::from_raw(ow, oh, out).expect("buffer sized from dimensions")
}

/// Pixel rectangle `[round(x1·W), round(x2·W)) × [round(y1·H), round(y2·H))`.
///
/// A side that rounds to zero pixels is widened to one pixel, so every box
/// yields a crop. `None` only for an empty image.
pub fn crop_rect(width: u32, height: u32, b: &NormBox) -> Option<(u32, u32, u32, u32)> {
    if width == 0 || height == 0 {
        return None;
    }
    let span = |lo: f64, hi: f64, extent: u32| {
        let px = |v: f64| ((v * f64::from(extent)).round().max(0.0) as u32).min(extent);
        let (a, b) = (px(lo), px(hi));
        if b > a {
            (a, b - a)
        } else {
            (a.min(extent - 1), 1)
        }
    };
    let (x, w) = span(b.x1(), b.x2(), width);
    let (y, h) = span(b.y1(), b.y2(), height);
    Some((x, y, w, h))
}

pub fn crop(img: &DynamicImage, b: &NormBox) -> Option<DynamicImage> {
    crop_rect(img.width(), img.height(), b).map(|(x, y, w, h)| img.crop_imm(x, y, w, h))
}

pub fn encode_jpeg(img: &DynamicImage, quality: u8) -> Result<Vec<u8>, ImageError> {
    let mut buf = Cursor::new(Vec::new());
    let encoder = JpegEncoder::new_with_quality(&mut buf, quality.clamp(1, 100));
    match img {
        DynamicImage::ImageLuma8(g) => g.write_with_encoder(encoder)?,
        other => other.to_rgb8().write_with_encoder(encoder)?,
    }
    Ok(buf.into_inner())
}
