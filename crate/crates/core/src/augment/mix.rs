//! MixUp, CutMix and the within/between-class pairing used to decompose them.

use std::fmt;
use std::str::FromStr;

use super::geometric::CropBox;
use super::image::{Image, CHANNELS};
use crate::error::{Error, Result};
use crate::rng::{beta_1_1, RngStream};

/// Which pairs a mixing augmentation may combine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum MixMode {
    /// Any two distinct examples.
    #[default]
    WB,
    /// Same class only.
    W,
    /// Different classes only.
    B,
}

impl MixMode {
    pub fn name(self) -> &'static str {
        match self {
            MixMode::WB => "WB",
            MixMode::W => "W",
            MixMode::B => "B",
        }
    }

    pub fn admits(self, label_i: usize, label_j: usize) -> bool {
        match self {
            MixMode::WB => true,
            MixMode::W => label_i == label_j,
            MixMode::B => label_i != label_j,
        }
    }
}

impl fmt::Display for MixMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MixMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "WB" | "W+B" => Ok(MixMode::WB),
            "W" => Ok(MixMode::W),
            "B" => Ok(MixMode::B),
            _ => Err(Error::config(format!("unknown mix mode {s:?} (WB, W, B)"))),
        }
    }
}

/// An image produced by mixing two labelled examples. The label target is
/// `weight_a · onehot(label_a) + (1 − weight_a) · onehot(label_b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixSample {
    pub image: Image,
    pub label_a: usize,
    pub label_b: usize,
    pub weight_a: f64,
}

impl MixSample {
    pub fn plain(image: Image, label: usize) -> Self {
        MixSample {
            image,
            label_a: label,
            label_b: label,
            weight_a: 1.0,
        }
    }

    pub fn weight_b(&self) -> f64 {
        1.0 - self.weight_a
    }
}

pub fn mixup_with_lambda(
    x1: &Image,
    y1: usize,
    x2: &Image,
    y2: usize,
    lambda: f64,
) -> Result<MixSample> {
    x1.same_shape(x2)?;
    let mut image = x1.clone();
    // a + (1-λ)(b-a): exact for λ = 1 and for a == b
    for (o, &b) in image.data_mut().iter_mut().zip(x2.data()) {
        let a = *o as f64;
        *o = (a + (1.0 - lambda) * (b as f64 - a)).clamp(0.0, 1.0) as f32;
    }
    Ok(MixSample {
        image,
        label_a: y1,
        label_b: y2,
        weight_a: lambda,
    })
}

pub fn mixup(
    x1: &Image,
    y1: usize,
    x2: &Image,
    y2: usize,
    rng: &mut RngStream,
) -> Result<MixSample> {
    let lambda = beta_1_1(rng);
    mixup_with_lambda(x1, y1, x2, y2, lambda)
}

/// The CutMix box for mixing ratio `lambda`: sides `round(H·√(1−λ))` and
/// `round(W·√(1−λ))` around a uniform centre, clipped to the image.
pub fn sample_cut_box(height: usize, width: usize, lambda: f64, rng: &mut RngStream) -> CropBox {
    let cut = (1.0 - lambda).max(0.0).sqrt();
    let cut_w = (width as f64 * cut).round() as i64;
    let cut_h = (height as f64 * cut).round() as i64;
    let cx = rng.index(width) as i64;
    let cy = rng.index(height) as i64;
    let x1 = (cx - cut_w / 2).clamp(0, width as i64) as usize;
    let x2 = (cx + cut_w / 2).clamp(0, width as i64) as usize;
    let y1 = (cy - cut_h / 2).clamp(0, height as i64) as usize;
    let y2 = (cy + cut_h / 2).clamp(0, height as i64) as usize;
    CropBox {
        top: y1,
        left: x1,
        height: y2 - y1,
        width: x2 - x1,
    }
}

/// Pastes `x2`'s `cut` region onto `x1`. `weight_a` is the exact fraction of
/// pixels still coming from `x1`.
pub fn cutmix_with_box(
    x1: &Image,
    y1: usize,
    x2: &Image,
    y2: usize,
    cut: CropBox,
) -> Result<MixSample> {
    x1.same_shape(x2)?;
    let (h, w) = x1.dims();
    if cut.top + cut.height > h || cut.left + cut.width > w {
        return Err(Error::invalid(format!("cut box {cut:?} outside {h}x{w} image")));
    }
    let mut image = x1.clone();
    for y in cut.top..cut.top + cut.height {
        for x in cut.left..cut.left + cut.width {
            for c in 0..CHANNELS {
                image.set(y, x, c, x2.get(y, x, c));
            }
        }
    }
    let pasted = cut.height * cut.width;
    Ok(MixSample {
        image,
        label_a: y1,
        label_b: y2,
        weight_a: 1.0 - pasted as f64 / (h * w) as f64,
    })
}

pub fn cutmix(
    x1: &Image,
    y1: usize,
    x2: &Image,
    y2: usize,
    rng: &mut RngStream,
) -> Result<MixSample> {
    x1.same_shape(x2)?;
    let lambda = beta_1_1(rng);
    let cut = sample_cut_box(x1.height(), x1.width(), lambda, rng);
    cutmix_with_box(x1, y1, x2, y2, cut)
}

/// Checks that `labels` admit at least one pair under `mode`.
pub fn check_feasible(labels: &[usize], mode: MixMode) -> Result<()> {
    if labels.len() < 2 {
        return Err(Error::InfeasibleMix {
            mode: mode.name(),
            reason: format!("pool has {} example(s), mixing needs at least 2", labels.len()),
        });
    }
    match mode {
        MixMode::WB => Ok(()),
        MixMode::W => {
            let mut sorted = labels.to_vec();
            sorted.sort_unstable();
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                Ok(())
            } else {
                Err(Error::InfeasibleMix {
                    mode: "W",
                    reason: "within-class mixing needs some class with at least 2 examples (k > 1)"
                        .into(),
                })
            }
        }
        MixMode::B => {
            if labels.iter().any(|&l| l != labels[0]) {
                Ok(())
            } else {
                Err(Error::InfeasibleMix {
                    mode: "B",
                    reason: "between-class mixing needs at least 2 distinct classes".into(),
                })
            }
        }
    }
}

/// Draws `count` ordered index pairs `(i, j)`, `i != j`, uniformly among the
/// pairs admitted by `mode`.
pub fn sample_mix_pairs(
    labels: &[usize],
    mode: MixMode,
    count: usize,
    rng: &mut RngStream,
) -> Result<Vec<(usize, usize)>> {
    check_feasible(labels, mode)?;
    let n = labels.len();
    if mode == MixMode::WB {
        return Ok((0..count)
            .map(|_| {
                let i = rng.index(n);
                let mut j = rng.index(n - 1);
                if j >= i {
                    j += 1;
                }
                (i, j)
            })
            .collect());
    }
    let feasible: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && mode.admits(labels[i], labels[j]))
        .collect();
    Ok((0..count)
        .map(|_| feasible[rng.index(feasible.len())])
        .collect())
}
