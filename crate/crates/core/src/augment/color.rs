//! Brightness / contrast / saturation jitter. Hue is never changed.

use super::image::Image;
use crate::rng::RngStream;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorProp {
    Brightness,
    Contrast,
    Saturation,
}

/// One concrete jitter draw: a factor per property and the order in which
/// the three adjustments are applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub order: [ColorProp; 3],
}

impl ColorFactors {
    pub fn identity() -> Self {
        ColorFactors {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            order: [
                ColorProp::Brightness,
                ColorProp::Contrast,
                ColorProp::Saturation,
            ],
        }
    }

    pub fn sample(range: (f64, f64), rng: &mut RngStream) -> Self {
        let mut order = Self::identity().order;
        rng.shuffle(&mut order);
        ColorFactors {
            brightness: rng.uniform_in(range.0, range.1),
            contrast: rng.uniform_in(range.0, range.1),
            saturation: rng.uniform_in(range.0, range.1),
            order,
        }
    }
}

fn luma(px: &[f32]) -> f64 {
    LUMA[0] * px[0] as f64 + LUMA[1] * px[1] as f64 + LUMA[2] * px[2] as f64
}

#[inline]
fn blend(x: f32, target: f64, f: f64) -> f32 {
    (f * x as f64 + (1.0 - f) * target).clamp(0.0, 1.0) as f32
}

pub fn adjust_brightness(img: &mut Image, f: f64) {
    for v in img.data_mut() {
        *v = (*v as f64 * f).clamp(0.0, 1.0) as f32;
    }
}

/// Interpolates every value toward the image's mean luma.
pub fn adjust_contrast(img: &mut Image, f: f64) {
    let data = img.data();
    let n = data.len() / 3;
    let mean = data.chunks_exact(3).map(luma).sum::<f64>() / n as f64;
    for v in img.data_mut() {
        *v = blend(*v, mean, f);
    }
}

/// Interpolates each pixel toward its own luma.
pub fn adjust_saturation(img: &mut Image, f: f64) {
    for px in img.data_mut().chunks_exact_mut(3) {
        let l = luma(px);
        for v in px.iter_mut() {
            *v = blend(*v, l, f);
        }
    }
}

pub fn apply_color(img: &Image, factors: &ColorFactors) -> Image {
    let mut out = img.clone();
    for prop in factors.order {
        match prop {
            ColorProp::Brightness => adjust_brightness(&mut out, factors.brightness),
            ColorProp::Contrast => adjust_contrast(&mut out, factors.contrast),
            ColorProp::Saturation => adjust_saturation(&mut out, factors.saturation),
        }
    }
    out
}

pub fn cjitter(img: &Image, range: (f64, f64), rng: &mut RngStream) -> Image {
    let factors = ColorFactors::sample(range, rng);
    apply_color(img, &factors)
}
