//! Horizontal flip, random resized crop and bilinear resampling.

use super::image::{Image, CHANNELS};
use crate::rng::RngStream;

/// Failed box proposals before falling back to the centred crop.
const CROP_ATTEMPTS: usize = 10;

pub fn flip_horizontal(img: &Image) -> Image {
    let (h, w) = img.dims();
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                out.set(y, x, c, img.get(y, w - 1 - x, c));
            }
        }
    }
    out
}

/// Flips with probability 0.5.
pub fn hflip(img: &Image, rng: &mut RngStream) -> Image {
    hflip_with_prob(img, 0.5, rng)
}

pub fn hflip_with_prob(img: &Image, p: f64, rng: &mut RngStream) -> Image {
    if rng.bernoulli(p) {
        flip_horizontal(img)
    } else {
        img.clone()
    }
}

/// Axis-aligned pixel box `[top, top + height) × [left, left + width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Samples a crop box the way random-resized-crop does: area fraction from
/// `scale`, log-uniform aspect ratio from `ratio`, uniform position; after
/// ten misses the largest centred box whose aspect lies in `ratio`.
pub fn sample_crop_box(
    height: usize,
    width: usize,
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut RngStream,
) -> CropBox {
    let area = (height * width) as f64;
    let (log_lo, log_hi) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..CROP_ATTEMPTS {
        let target_area = area * rng.uniform_in(scale.0, scale.1);
        let aspect = rng.uniform_in(log_lo, log_hi).exp();
        let w = (target_area * aspect).sqrt().round() as usize;
        let h = (target_area / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let top = rng.index(height - h + 1);
            let left = rng.index(width - w + 1);
            return CropBox {
                top,
                left,
                height: h,
                width: w,
            };
        }
    }
    center_crop_box(height, width, ratio)
}

fn center_crop_box(height: usize, width: usize, ratio: (f64, f64)) -> CropBox {
    let in_ratio = width as f64 / height as f64;
    let (w, h) = if in_ratio < ratio.0 {
        let h = ((width as f64 / ratio.0).round() as usize).clamp(1, height);
        (width, h)
    } else if in_ratio > ratio.1 {
        let w = ((height as f64 * ratio.1).round() as usize).clamp(1, width);
        (w, height)
    } else {
        (width, height)
    };
    CropBox {
        top: (height - h) / 2,
        left: (width - w) / 2,
        height: h,
        width: w,
    }
}

/// Bilinear resize of the `crop` region to `out_h × out_w` with half-pixel
/// centres; samples never read outside the crop.
pub fn crop_resize(img: &Image, crop: CropBox, out_h: usize, out_w: usize) -> Image {
    let mut out = Image::filled(out_h, out_w, 0.0);
    let sy = crop.height as f64 / out_h as f64;
    let sx = crop.width as f64 / out_w as f64;
    let taps_x: Vec<(usize, usize, f32)> = (0..out_w)
        .map(|x| axis_taps(x, sx, crop.left, crop.width))
        .collect();
    for y in 0..out_h {
        let (y0, y1, ty) = axis_taps(y, sy, crop.top, crop.height);
        for (x, &(x0, x1, tx)) in taps_x.iter().enumerate() {
            for c in 0..CHANNELS {
                let top = lerp(img.get(y0, x0, c), img.get(y0, x1, c), tx);
                let bottom = lerp(img.get(y1, x0, c), img.get(y1, x1, c), tx);
                out.set(y, x, c, lerp(top, bottom, ty).clamp(0.0, 1.0));
            }
        }
    }
    out
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    // exact when a == b or t == 0
    a + (b - a) * t
}

/// Source indices and weight for output coordinate `i` along one axis.
fn axis_taps(i: usize, scale: f64, offset: usize, len: usize) -> (usize, usize, f32) {
    let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    let t = (src - i0 as f64) as f32;
    (offset + i0, offset + i1, t)
}

pub fn rcrop(
    img: &Image,
    scale: (f64, f64),
    ratio: (f64, f64),
    out_hw: (usize, usize),
    rng: &mut RngStream,
) -> Image {
    let crop = sample_crop_box(img.height(), img.width(), scale, ratio, rng);
    crop_resize(img, crop, out_hw.0, out_hw.1)
}
