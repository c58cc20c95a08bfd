//! Procedural image domains. Each class has a prototype built from random
//! 2-D sinusoids; samples are jittered copies of it.

use std::f64::consts::TAU;

use super::Dataset;
use crate::augment::{Image, CHANNELS};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Sinusoids summed per channel of a prototype.
const COMPONENTS: usize = 4;

pub const PRESETS: [&str; 3] = ["source-a", "target-shifted", "target-near"];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub name: String,
    pub n_classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    /// Spatial frequency band in cycles per image.
    pub f_lo: f64,
    pub f_hi: f64,
    /// Per-channel contrast around mid-grey, applied before `channel_perm`.
    pub channel_gain: [f64; 3],
    /// Output channel `c` takes generated channel `channel_perm[c]`.
    pub channel_perm: [usize; 3],
    pub noise_sigma: f64,
    /// Circular translation in pixels, drawn from `[-r, r]` per axis.
    pub translate_radius: usize,
    pub brightness: (f64, f64),
}

impl SynthConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let source = SynthConfig {
            name: name.to_string(),
            n_classes: 20,
            per_class: 100,
            height: 32,
            width: 32,
            f_lo: 1.0,
            f_hi: 4.0,
            channel_gain: [1.0, 1.0, 1.0],
            channel_perm: [0, 1, 2],
            noise_sigma: 0.05,
            translate_radius: 2,
            brightness: (0.85, 1.15),
        };
        match name {
            "source-a" => Ok(source),
            "target-shifted" => Ok(SynthConfig {
                f_lo: 5.0,
                f_hi: 9.0,
                channel_gain: [1.0, 0.75, 0.5],
                channel_perm: [2, 0, 1],
                ..source
            }),
            "target-near" => Ok(SynthConfig {
                f_lo: 2.0,
                f_hi: 5.0,
                ..source
            }),
            _ => Err(Error::config(format!(
                "unknown dataset preset {name:?} (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn with_size(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.per_class == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid("synthetic dataset needs positive sizes"));
        }
        if !(self.f_lo < self.f_hi) || self.f_lo < 0.0 {
            return Err(Error::invalid("frequency band needs 0 <= f_lo < f_hi"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise sigma must be >= 0"));
        }
        let (lo, hi) = self.brightness;
        if !(0.0 < lo && lo <= hi) {
            return Err(Error::invalid("brightness range must satisfy 0 < lo <= hi"));
        }
        let mut perm = self.channel_perm;
        perm.sort_unstable();
        if perm != [0, 1, 2] {
            return Err(Error::invalid("channel_perm must be a permutation of 0, 1, 2"));
        }
        Ok(())
    }

    fn prototype(&self, rng: &mut RngStream) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let mut gen = vec![0.0; h * w * CHANNELS];
        for ch in 0..CHANNELS {
            let mut plane = vec![0.0; h * w];
            for _ in 0..COMPONENTS {
                let f = rng.uniform_in(self.f_lo, self.f_hi);
                let theta = rng.uniform_in(0.0, TAU);
                let phase = rng.uniform_in(0.0, TAU);
                let (fy, fx) = (f * theta.sin(), f * theta.cos());
                for y in 0..h {
                    for x in 0..w {
                        let arg = TAU * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64) + phase;
                        plane[y * w + x] += arg.sin();
                    }
                }
            }
            let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = (hi - lo).max(1e-12);
            for (i, v) in plane.iter().enumerate() {
                let unit = 0.2 + 0.6 * (v - lo) / span;
                gen[i * CHANNELS + ch] = 0.5 + self.channel_gain[ch] * (unit - 0.5);
            }
        }
        let mut out = vec![0.0; gen.len()];
        for (o, g) in out.chunks_exact_mut(CHANNELS).zip(gen.chunks_exact(CHANNELS)) {
            for c in 0..CHANNELS {
                o[c] = g[self.channel_perm[c]];
            }
        }
        out
    }

    fn sample(&self, proto: &[f64], rng: &mut RngStream) -> Result<Image> {
        let (h, w) = (self.height, self.width);
        let r = self.translate_radius as i64;
        let dy = rng.below(2 * r as u64 + 1) as i64 - r;
        let dx = rng.below(2 * r as u64 + 1) as i64 - r;
        let b = rng.uniform_in(self.brightness.0, self.brightness.1);
        let mut px = Vec::with_capacity(h * w * CHANNELS);
        for y in 0..h as i64 {
            let sy = (y - dy).rem_euclid(h as i64) as usize;
            for x in 0..w as i64 {
                let sx = (x - dx).rem_euclid(w as i64) as usize;
                for c in 0..CHANNELS {
                    let mut v = b * proto[(sy * w + sx) * CHANNELS + c];
                    if self.noise_sigma > 0.0 {
                        v += self.noise_sigma * rng.normal();
                    }
                    px.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        Image::new(h, w, px)
    }
}

/// Class `c`'s prototype comes from `rng.child_idx("class", c)`; sample `i`
/// (dataset index) from `rng.child_idx("sample", i)`. Images are stored
/// class-major.
pub fn generate_synthetic(cfg: &SynthConfig, rng: &RngStream) -> Result<Dataset> {
    cfg.validate()?;
    let mut images = Vec::with_capacity(cfg.n_classes * cfg.per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for c in 0..cfg.n_classes {
        let proto = cfg.prototype(&mut rng.child_idx("class", c as u64));
        for _ in 0..cfg.per_class {
            let mut srng = rng.child_idx("sample", images.len() as u64);
            images.push(cfg.sample(&proto, &mut srng)?);
            labels.push(c);
        }
    }
    Dataset::new(images, labels, cfg.n_classes, cfg.name.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(name: &str) -> SynthConfig {
        SynthConfig {
            n_classes: 4,
            per_class: 6,
            ..SynthConfig::preset(name).unwrap()
        }
    }

    #[test]
    fn noiseless_samples_equal_prototype() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            translate_radius: 0,
            brightness: (1.0, 1.0),
            ..small("source-a")
        };
        let ds = generate_synthetic(&cfg, &RngStream::new(1)).unwrap();
        for c in 0..4 {
            let ids = ds.class_indices(c);
            for &i in ids {
                assert_eq!(ds.images()[i], ds.images()[ids[0]]);
            }
        }
        assert_ne!(ds.images()[0], ds.images()[6]);
        let lo = ds.images()[0].data().iter().copied().fold(1.0f32, f32::min);
        let hi = ds.images()[0].data().iter().copied().fold(0.0f32, f32::max);
        assert!((lo - 0.2).abs() < 1e-6 && (hi - 0.8).abs() < 1e-6);
    }

    #[test]
    fn deterministic_and_in_range() {
        let cfg = small("target-shifted");
        let a = generate_synthetic(&cfg, &RngStream::new(4)).unwrap();
        let b = generate_synthetic(&cfg, &RngStream::new(4)).unwrap();
        assert_eq!(a, b);
        assert!(a.images().iter().all(|im| im.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert_eq!(a.class_counts(), vec![6; 4]);
    }

    #[test]
    fn presets() {
        assert_eq!(SynthConfig::preset("target-near").unwrap().f_lo, 2.0);
        assert!(SynthConfig::preset("imagenet").is_err());
        for p in PRESETS {
            SynthConfig::preset(p).unwrap().validate().unwrap();
        }
    }

    /// Nearest class centroid in pixel space, fitted on the first half of
    /// each class and scored on the second half.
    fn centroid_accuracy(ds: &Dataset) -> f64 {
        let d = ds.images()[0].data().len();
        let mut correct = 0;
        let mut total = 0;
        let cents: Vec<Vec<f64>> = (0..ds.n_classes())
            .map(|c| {
                let ids = ds.class_indices(c);
                let fit = &ids[..ids.len() / 2];
                let mut m = vec![0.0; d];
                for &i in fit {
                    for (a, &v) in m.iter_mut().zip(ds.images()[i].data()) {
                        *a += v as f64 / fit.len() as f64;
                    }
                }
                m
            })
            .collect();
        for c in 0..ds.n_classes() {
            let ids = ds.class_indices(c);
            for &i in &ids[ids.len() / 2..] {
                let x = ds.images()[i].data();
                let dist = |m: &Vec<f64>| -> f64 { m.iter().zip(x).map(|(a, &b)| (a - b as f64).powi(2)).sum() };
                let best = (0..cents.len())
                    .min_by(|&a, &b| dist(&cents[a]).total_cmp(&dist(&cents[b])))
                    .unwrap();
                correct += (best == c) as usize;
                total += 1;
            }
        }
        correct as f64 / total as f64
    }

    #[test]
    fn source_preset_is_learnable() {
        let ds = generate_synthetic(&SynthConfig::preset("source-a").unwrap(), &RngStream::new(0)).unwrap();
        let acc = centroid_accuracy(&ds);
        assert!(acc > 0.8, "centroid accuracy {acc}");
    }
}
