//! Image augmentation: flip, random resized crop, colour jitter, their
//! combination ("Base Aug") at designed intensity presets, and the MixUp /
//! CutMix mixing techniques.

mod color;
mod geometric;
mod image;
mod mix;

use std::fmt;
use std::str::FromStr;

pub use color::{
    adjust_brightness, adjust_contrast, adjust_saturation, apply_color, cjitter, ColorFactors,
    ColorProp,
};
pub use geometric::{
    crop_resize, flip_horizontal, hflip, hflip_with_prob, rcrop, sample_crop_box, CropBox,
};
pub use image::{Image, CHANNELS};
pub use mix::{
    check_feasible, cutmix, cutmix_with_box, mixup, mixup_with_lambda, sample_cut_box,
    sample_mix_pairs, MixMode, MixSample,
};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Aspect-ratio range used by every random resized crop.
pub const CROP_RATIO: (f64, f64) = (0.75, 1.33);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AugKind {
    None,
    HFlip,
    RCrop,
    CJitter,
    BaseAug,
    MixUp,
    CutMix,
}

impl AugKind {
    pub const ALL: [AugKind; 7] = [
        AugKind::None,
        AugKind::HFlip,
        AugKind::RCrop,
        AugKind::CJitter,
        AugKind::BaseAug,
        AugKind::MixUp,
        AugKind::CutMix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugKind::None => "None",
            AugKind::HFlip => "HFlip",
            AugKind::RCrop => "RCrop",
            AugKind::CJitter => "CJitter",
            AugKind::BaseAug => "BaseAug",
            AugKind::MixUp => "MixUp",
            AugKind::CutMix => "CutMix",
        }
    }

    pub fn is_mixing(self) -> bool {
        matches!(self, AugKind::MixUp | AugKind::CutMix)
    }
}

impl fmt::Display for AugKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        AugKind::ALL
            .into_iter()
            .find(|k| k.name().to_ascii_lowercase() == lower)
            .or(match lower.as_str() {
                "base" | "base_aug" | "base-aug" => Some(AugKind::BaseAug),
                "none" | "" => Some(AugKind::None),
                _ => None,
            })
            .ok_or_else(|| Error::config(format!("unknown augmentation kind {s:?}")))
    }
}

/// Designed intensity levels of the combined flip + crop + jitter policy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum IntensityPreset {
    Weaker,
    Weak,
    #[default]
    Default,
    Strong,
    Stronger,
}

impl IntensityPreset {
    pub const ALL: [IntensityPreset; 5] = [
        IntensityPreset::Weaker,
        IntensityPreset::Weak,
        IntensityPreset::Default,
        IntensityPreset::Strong,
        IntensityPreset::Stronger,
    ];

    /// Crop-scale range.
    pub fn crop_scale(self) -> (f64, f64) {
        match self {
            IntensityPreset::Weaker => (0.9, 1.0),
            IntensityPreset::Weak => (0.6, 1.0),
            IntensityPreset::Default => (0.08, 1.0),
            IntensityPreset::Strong => (0.3, 1.0),
            IntensityPreset::Stronger => (0.01, 1.0),
        }
    }

    /// Shared brightness / contrast / saturation factor range.
    pub fn jitter(self) -> (f64, f64) {
        match self {
            IntensityPreset::Weaker => (0.8, 1.2),
            IntensityPreset::Weak => (0.6, 1.4),
            IntensityPreset::Default => (0.6, 1.4),
            IntensityPreset::Strong => (0.4, 1.6),
            IntensityPreset::Stronger => (0.2, 1.8),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            IntensityPreset::Weaker => "Weaker",
            IntensityPreset::Weak => "Weak",
            IntensityPreset::Default => "Default",
            IntensityPreset::Strong => "Strong",
            IntensityPreset::Stronger => "Stronger",
        }
    }
}

impl fmt::Display for IntensityPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IntensityPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        IntensityPreset::ALL
            .into_iter()
            .find(|p| p.name().to_ascii_lowercase() == lower)
            .ok_or_else(|| Error::config(format!("unknown intensity preset {s:?}")))
    }
}

/// One augmentation technique with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AugPolicy {
    pub kind: AugKind,
    pub preset: IntensityPreset,
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub jitter: (f64, f64),
    pub flip_prob: f64,
    pub mix_mode: MixMode,
    /// Share one parameter draw across every image of a call (one draw per
    /// epoch in training) instead of drawing per image.
    pub shared_params: bool,
}

impl Default for AugPolicy {
    fn default() -> Self {
        AugPolicy::new(AugKind::None, IntensityPreset::Default)
    }
}

impl AugPolicy {
    /// Policy of `kind` with crop and jitter ranges taken from `preset`.
    pub fn new(kind: AugKind, preset: IntensityPreset) -> Self {
        AugPolicy {
            kind,
            preset,
            crop_scale: preset.crop_scale(),
            crop_ratio: CROP_RATIO,
            jitter: preset.jitter(),
            flip_prob: 0.5,
            mix_mode: MixMode::WB,
            shared_params: false,
        }
    }

    pub fn none() -> Self {
        Self::new(AugKind::None, IntensityPreset::Default)
    }

    pub fn base_aug(preset: IntensityPreset) -> Self {
        Self::new(AugKind::BaseAug, preset)
    }

    pub fn mixing(kind: AugKind, mode: MixMode) -> Self {
        debug_assert!(kind.is_mixing());
        AugPolicy {
            mix_mode: mode,
            ..Self::new(kind, IntensityPreset::Default)
        }
    }

    pub fn is_mixing(&self) -> bool {
        self.kind.is_mixing()
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, (lo, hi): (f64, f64)| {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::invalid(format!("{name} range [{lo}, {hi}] is invalid")));
            }
            Ok(())
        };
        check("crop scale", self.crop_scale)?;
        check("crop ratio", self.crop_ratio)?;
        check("jitter", self.jitter)?;
        if self.crop_scale.0 <= 0.0 || self.crop_scale.1 > 1.0 {
            return Err(Error::invalid("crop scale must lie in (0, 1]"));
        }
        if self.crop_ratio.0 <= 0.0 {
            return Err(Error::invalid("crop ratio must be positive"));
        }
        if self.jitter.0 < 0.0 {
            return Err(Error::invalid("jitter factors must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid("flip probability must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Short identifier used in reports, e.g. `BaseAug/Strong` or `MixUp/B`.
    pub fn id(&self) -> String {
        match self.kind {
            AugKind::None | AugKind::HFlip => self.kind.name().to_string(),
            AugKind::MixUp | AugKind::CutMix => format!("{}/{}", self.kind, self.mix_mode),
            _ => format!("{}/{}", self.kind, self.preset),
        }
    }
}

/// Flip, then random resized crop (preset scale, fixed ratio), then colour
/// jitter (preset range).
pub fn base_aug(
    img: &Image,
    preset: IntensityPreset,
    out_hw: (usize, usize),
    rng: &mut RngStream,
) -> Image {
    let flipped = hflip(img, rng);
    let cropped = rcrop(&flipped, preset.crop_scale(), CROP_RATIO, out_hw, rng);
    cjitter(&cropped, preset.jitter(), rng)
}

/// Applies a single-image policy; the output keeps the input's size.
pub fn augment_image(policy: &AugPolicy, img: &Image, rng: &mut RngStream) -> Result<Image> {
    let out_hw = img.dims();
    Ok(match policy.kind {
        AugKind::None => img.clone(),
        AugKind::HFlip => hflip_with_prob(img, policy.flip_prob, rng),
        AugKind::RCrop => rcrop(img, policy.crop_scale, policy.crop_ratio, out_hw, rng),
        AugKind::CJitter => cjitter(img, policy.jitter, rng),
        AugKind::BaseAug => {
            let flipped = hflip_with_prob(img, policy.flip_prob, rng);
            let cropped = rcrop(&flipped, policy.crop_scale, policy.crop_ratio, out_hw, rng);
            cjitter(&cropped, policy.jitter, rng)
        }
        AugKind::MixUp | AugKind::CutMix => {
            return Err(Error::invalid(format!(
                "{} mixes two images; use the mixing entry points",
                policy.kind
            )))
        }
    })
}

/// Mixes one ordered pair under `policy` (MixUp or CutMix).
pub fn mix_pair(
    policy: &AugPolicy,
    (x1, y1): (&Image, usize),
    (x2, y2): (&Image, usize),
    rng: &mut RngStream,
) -> Result<MixSample> {
    match policy.kind {
        AugKind::MixUp => mixup(x1, y1, x2, y2, rng),
        AugKind::CutMix => cutmix(x1, y1, x2, y2, rng),
        k => Err(Error::invalid(format!("{k} is not a mixing augmentation"))),
    }
}

/// Stream for item `i` of a call: an independent child per item, or the same
/// stream for every item when parameters are shared.
fn item_stream(policy: &AugPolicy, rng: &RngStream, i: usize) -> RngStream {
    if policy.shared_params {
        rng.child("shared")
    } else {
        rng.child_idx("item", i as u64)
    }
}

/// Draws `count` mixed samples from `pool` with pairs constrained by the
/// policy's mix mode.
pub fn mix_from_pool(
    policy: &AugPolicy,
    pool: &[(Image, usize)],
    count: usize,
    rng: &RngStream,
) -> Result<Vec<MixSample>> {
    let labels: Vec<usize> = pool.iter().map(|(_, y)| *y).collect();
    let pairs = sample_mix_pairs(&labels, policy.mix_mode, count, &mut rng.child("pairs"))?;
    pairs
        .iter()
        .enumerate()
        .map(|(n, &(i, j))| {
            let mut r = item_stream(policy, rng, n);
            mix_pair(policy, (&pool[i].0, pool[i].1), (&pool[j].0, pool[j].1), &mut r)
        })
        .collect()
}

/// Applies `policy` to a labelled batch. Single-image kinds transform each
/// image independently and keep labels; mixing kinds return one mixed sample
/// per batch element, pairs drawn from the batch itself.
pub fn apply_policy(
    policy: &AugPolicy,
    batch: &[(Image, usize)],
    rng: &RngStream,
) -> Result<Vec<MixSample>> {
    if batch.is_empty() {
        return Err(Error::invalid("cannot augment an empty batch"));
    }
    policy.validate()?;
    if policy.is_mixing() {
        return mix_from_pool(policy, batch, batch.len(), rng);
    }
    batch
        .iter()
        .enumerate()
        .map(|(i, (img, y))| {
            let mut r = item_stream(policy, rng, i);
            Ok(MixSample::plain(augment_image(policy, img, &mut r)?, *y))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labelled(n: usize, classes: usize) -> Vec<(Image, usize)> {
        (0..n)
            .map(|i| {
                let data = (0..8 * 8 * 3)
                    .map(|p| ((p * (i + 3)) % 251) as f32 / 251.0)
                    .collect();
                (Image::new(8, 8, data).unwrap(), i % classes)
            })
            .collect()
    }

    #[test]
    fn preset_values() {
        use IntensityPreset::*;
        assert_eq!(Weaker.crop_scale(), (0.9, 1.0));
        assert_eq!(Weaker.jitter(), (0.8, 1.2));
        assert_eq!(Default.crop_scale(), (0.08, 1.0));
        assert_eq!(Default.jitter(), (0.6, 1.4));
        assert_eq!(Weak.crop_scale(), (0.6, 1.0));
        assert_eq!(Weak.jitter(), (0.6, 1.4));
        assert_eq!(Strong.crop_scale(), (0.3, 1.0));
        assert_eq!(Strong.jitter(), (0.4, 1.6));
        assert_eq!(Stronger.crop_scale(), (0.01, 1.0));
        assert_eq!(Stronger.jitter(), (0.2, 1.8));
    }

    #[test]
    fn presets_nest_and_jitter_is_symmetric() {
        use IntensityPreset::*;
        let chain = [Weaker, Weak, Strong, Stronger];
        for w in chain.windows(2) {
            let (a, b) = (w[0], w[1]);
            assert!(b.crop_scale().0 <= a.crop_scale().0);
            assert!(b.jitter().0 <= a.jitter().0 && b.jitter().1 >= a.jitter().1);
        }
        for p in IntensityPreset::ALL {
            let (lo, hi) = p.jitter();
            assert!((lo - (2.0 - hi)).abs() < 1e-12, "{p}");
            assert!(AugPolicy::base_aug(p).validate().is_ok());
        }
    }

    #[test]
    fn degenerate_base_aug_is_identity() {
        let (img, _) = labelled(1, 1).remove(0);
        let policy = AugPolicy {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            jitter: (1.0, 1.0),
            flip_prob: 0.0,
            ..AugPolicy::base_aug(IntensityPreset::Default)
        };
        let mut rng = RngStream::new(4);
        for _ in 0..5 {
            assert_eq!(augment_image(&policy, &img, &mut rng).unwrap(), img);
        }
    }

    #[test]
    fn base_aug_stays_in_unit_range() {
        let (img, _) = labelled(1, 1).remove(0);
        let mut rng = RngStream::new(5);
        for p in IntensityPreset::ALL {
            let out = base_aug(&img, p, (8, 8), &mut rng);
            assert_eq!(out.dims(), (8, 8));
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn none_policy_returns_batch() {
        let batch = labelled(3, 3);
        let out = apply_policy(&AugPolicy::none(), &batch, &RngStream::new(1)).unwrap();
        for ((img, y), s) in batch.iter().zip(&out) {
            assert_eq!(&s.image, img);
            assert_eq!((s.label_a, s.label_b, s.weight_a), (*y, *y, 1.0));
        }
    }

    #[test]
    fn hflip_policy_keeps_labels() {
        let batch = labelled(3, 3);
        let policy = AugPolicy::new(AugKind::HFlip, IntensityPreset::Default);
        let out = apply_policy(&policy, &batch, &RngStream::new(2)).unwrap();
        assert_eq!(out.len(), 3);
        for ((img, y), s) in batch.iter().zip(&out) {
            assert_eq!(s.label_a, *y);
            assert!(s.image == *img || s.image == flip_horizontal(img));
        }
    }

    #[test]
    fn mixup_mode_b_on_one_shot_support() {
        let batch = labelled(5, 5);
        let policy = AugPolicy::mixing(AugKind::MixUp, MixMode::B);
        let out = apply_policy(&policy, &batch, &RngStream::new(3)).unwrap();
        assert_eq!(out.len(), 5);
        assert!(out.iter().all(|s| s.label_a != s.label_b));
        let w = AugPolicy::mixing(AugKind::CutMix, MixMode::W);
        assert!(apply_policy(&w, &batch, &RngStream::new(3)).is_err());
    }

    #[test]
    fn shared_params_apply_same_draw() {
        let (img, _) = labelled(1, 1).remove(0);
        let batch = vec![(img.clone(), 0), (img, 1)];
        let policy = AugPolicy {
            shared_params: true,
            ..AugPolicy::base_aug(IntensityPreset::Strong)
        };
        let out = apply_policy(&policy, &batch, &RngStream::new(9)).unwrap();
        assert_eq!(out[0].image, out[1].image);
        let per_image = AugPolicy::base_aug(IntensityPreset::Strong);
        let out = apply_policy(&per_image, &batch, &RngStream::new(9)).unwrap();
        assert_ne!(out[0].image, out[1].image);
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(apply_policy(&AugPolicy::none(), &[], &RngStream::new(0)).is_err());
    }

    #[test]
    fn parse_names() {
        assert_eq!("mixup".parse::<AugKind>().unwrap(), AugKind::MixUp);
        assert_eq!("Base".parse::<AugKind>().unwrap(), AugKind::BaseAug);
        assert_eq!("stronger".parse::<IntensityPreset>().unwrap(), IntensityPreset::Stronger);
        assert!("Hue".parse::<AugKind>().is_err());
    }
}
