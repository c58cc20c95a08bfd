//! Augmentation intensity: how far an augmentation moves images in the
//! feature space of a fixed extractor, plus the training-loss diversity.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::augment::{
    augment_image, check_feasible, cutmix_with_box, mixup_with_lambda, sample_cut_box, AugKind,
    AugPolicy, Image, MixSample,
};
use crate::episodes::{Dataset, Episode};
use crate::error::{Error, Result};
use crate::finetune::{finetune_episode, FineTuneConfig};
use crate::model::FeatureExtractor;
use crate::rng::{beta_1_1, fnv1a64, RngStream};
use crate::tensor::Tensor;

/// Mixed images featurised per block; bounds memory in full pair mode.
const BLOCK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairsMode {
    /// Every ordered pair of the subset, diagonal included.
    Full,
    /// This many pairs drawn uniformly (with replacement) from the admitted ones.
    Sampled(usize),
}

impl fmt::Display for PairsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PairsMode::Full => f.write_str("full"),
            PairsMode::Sampled(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for PairsMode {
    type Err = Error;
    /// `full` or a pair count.
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(PairsMode::Full);
        }
        s.parse()
            .map(PairsMode::Sampled)
            .map_err(|_| Error::invalid(format!("pairs must be `full` or a count, got `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntensityConfig {
    pub subset_size: usize,
    pub subset_seed: u64,
    pub pairs: PairsMode,
    /// λ draws averaged per pair.
    pub lambda_draws: usize,
    /// Overrides the sampled mixing ratio.
    pub fixed_lambda: Option<f64>,
}

impl Default for IntensityConfig {
    fn default() -> Self {
        IntensityConfig {
            subset_size: 256,
            subset_seed: 0,
            pairs: PairsMode::Full,
            lambda_draws: 1,
            fixed_lambda: None,
        }
    }
}

impl IntensityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subset_size == 0 {
            return Err(Error::invalid("intensity subset must be non-empty"));
        }
        if self.pairs == PairsMode::Sampled(0) {
            return Err(Error::invalid("sampled pair mode needs at least 1 pair"));
        }
        if self.lambda_draws == 0 {
            return Err(Error::invalid("lambda_draws must be at least 1"));
        }
        if let Some(l) = self.fixed_lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::invalid(format!("fixed lambda {l} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Stable hex digest of every field.
    pub fn hash(&self) -> String {
        let lambda = self.fixed_lambda.map_or("-".to_string(), |l| format!("{:016x}", l.to_bits()));
        let text = format!(
            "S={};seed={};pairs={};m={};lambda={lambda}",
            self.subset_size, self.subset_seed, self.pairs, self.lambda_draws
        );
        format!("{:016x}", fnv1a64(text.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntensityReport {
    pub policy: AugPolicy,
    pub value: f64,
    pub n_terms: usize,
    pub extractor_id: String,
    pub config_hash: String,
    pub seed: u64,
}

impl IntensityReport {
    pub const CSV_HEADER: &'static str = "policy,preset,mode,value,n_terms,extractor_id,seed";

    pub fn csv_row(&self) -> String {
        let p = &self.policy;
        let preset = match p.kind {
            AugKind::RCrop | AugKind::CJitter | AugKind::BaseAug => p.preset.to_string(),
            _ => "-".into(),
        };
        let mode = if p.is_mixing() { p.mix_mode.to_string() } else { "-".into() };
        format!(
            "{},{preset},{mode},{},{},{},{}",
            p.kind,
            crate::evaluate::fmt_num(self.value),
            self.n_terms,
            self.extractor_id,
            self.seed
        )
    }
}

/// Digest of every parameter and running statistic of `ext`.
pub fn extractor_id(ext: &FeatureExtractor) -> String {
    let mut bytes = Vec::new();
    bytes.extend((ext.config.base_width as u64).to_le_bytes());
    bytes.extend((ext.config.blocks as u64).to_le_bytes());
    for st in &ext.stages {
        for t in [&st.weight, &st.bn.scale, &st.bn.shift, &st.bn.running_mean, &st.bn.running_var] {
            for v in t.data() {
                bytes.extend(v.to_le_bytes());
            }
        }
    }
    format!("{:016x}", fnv1a64(&bytes))
}

fn distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn row(t: &Tensor, i: usize) -> &[f32] {
    let d = t.shape()[1];
    &t.data()[i * d..(i + 1) * d]
}

/// A fixed subset and its clean features, reused across policies.
pub struct IntensityProbe<'a> {
    extractor: &'a FeatureExtractor,
    cfg: IntensityConfig,
    images: Vec<Image>,
    labels: Vec<usize>,
    clean: Tensor,
}

impl<'a> IntensityProbe<'a> {
    /// Draws `cfg.subset_size` examples of `source` without replacement
    /// (stream `subset` of `cfg.subset_seed`), kept in dataset order.
    pub fn new(extractor: &'a FeatureExtractor, source: &Dataset, cfg: &IntensityConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.subset_size > source.len() {
            return Err(Error::invalid(format!(
                "intensity subset of {} exceeds the dataset size {}",
                cfg.subset_size,
                source.len()
            )));
        }
        let mut ids = RngStream::new(cfg.subset_seed)
            .child("subset")
            .sample_without_replacement(source.len(), cfg.subset_size);
        ids.sort_unstable();
        let images = ids.iter().map(|&i| source.images()[i].clone()).collect();
        let labels = ids.iter().map(|&i| source.labels()[i]).collect();
        Self::from_images(extractor, images, labels, cfg)
    }

    pub fn from_images(
        extractor: &'a FeatureExtractor,
        images: Vec<Image>,
        labels: Vec<usize>,
        cfg: &IntensityConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::invalid("intensity subset needs one label per image and at least one image"));
        }
        let refs: Vec<&Image> = images.iter().collect();
        let clean = extractor.features_of(&refs)?;
        Ok(IntensityProbe {
            extractor,
            cfg: cfg.clone(),
            images,
            labels,
            clean,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn report(&self, policy: &AugPolicy, value: f64, n_terms: usize, rng: &RngStream) -> IntensityReport {
        IntensityReport {
            policy: policy.clone(),
            value,
            n_terms,
            extractor_id: extractor_id(self.extractor),
            config_hash: self.cfg.hash(),
            seed: rng.root_seed(),
        }
    }

    /// Mean distance between `f(x)` and `f(Aug(x))` over the subset. Image
    /// `i` draws its parameters from `rng.child_idx("item", i)`.
    pub fn single(&self, policy: &AugPolicy, rng: &RngStream) -> Result<IntensityReport> {
        if policy.is_mixing() {
            return Err(Error::invalid(format!(
                "{} mixes two images; use the mixing intensity",
                policy.kind
            )));
        }
        policy.validate()?;
        let augmented = self
            .images
            .iter()
            .enumerate()
            .map(|(i, img)| augment_image(policy, img, &mut rng.child_idx("item", i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Image> = augmented.iter().collect();
        let feats = self.extractor.features_of(&refs)?;
        let total: f64 = (0..self.len()).map(|i| distance(row(&self.clean, i), row(&feats, i))).sum();
        Ok(self.report(policy, total / self.len() as f64, self.len(), rng))
    }

    /// Ordered pairs `(i, j)` admitted by the policy's mix mode.
    fn pairs(&self, policy: &AugPolicy, rng: &RngStream) -> Result<Vec<(usize, usize)>> {
        check_feasible(&self.labels, policy.mix_mode)?;
        let n = self.len();
        let admits = |i: usize, j: usize| policy.mix_mode.admits(self.labels[i], self.labels[j]);
        Ok(match self.cfg.pairs {
            PairsMode::Full => (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .filter(|&(i, j)| admits(i, j))
                .collect(),
            PairsMode::Sampled(count) => {
                let mut r = rng.child("pairs");
                (0..count)
                    .map(|_| loop {
                        let (i, j) = (r.index(n), r.index(n));
                        if admits(i, j) {
                            break (i, j);
                        }
                    })
                    .collect()
            }
        })
    }

    fn mix(&self, policy: &AugPolicy, i: usize, j: usize, rng: &mut RngStream) -> Result<MixSample> {
        let (x1, x2) = (&self.images[i], &self.images[j]);
        let (y1, y2) = (self.labels[i], self.labels[j]);
        let lambda = match self.cfg.fixed_lambda {
            Some(l) => l,
            None => beta_1_1(rng),
        };
        match policy.kind {
            AugKind::MixUp => mixup_with_lambda(x1, y1, x2, y2, lambda),
            AugKind::CutMix => {
                let cut = sample_cut_box(x1.height(), x1.width(), lambda, rng);
                cutmix_with_box(x1, y1, x2, y2, cut)
            }
            k => Err(Error::invalid(format!("{k} is not a mixing augmentation"))),
        }
    }

    /// Mean over pairs of `[d(f(x1), f(x̃)) + d(f(x2), f(x̃))] / 2`. Pair `p`
    /// draw `t` uses `rng.child_idx("pair", p).child_idx("draw", t)`.
    pub fn mixing(&self, policy: &AugPolicy, rng: &RngStream) -> Result<IntensityReport> {
        if !policy.is_mixing() {
            return Err(Error::invalid(format!(
                "{} is a single-image augmentation; use the single intensity",
                policy.kind
            )));
        }
        let pairs = self.pairs(policy, rng)?;
        let m = self.cfg.lambda_draws;
        let jobs: Vec<(usize, usize)> = (0..pairs.len()).flat_map(|p| (0..m).map(move |t| (p, t))).collect();
        let terms: Vec<Vec<f64>> = jobs
            .par_chunks(BLOCK)
            .map(|block| {
                let mixed = block
                    .iter()
                    .map(|&(p, t)| {
                        let (i, j) = pairs[p];
                        let mut r = rng.child_idx("pair", p as u64).child_idx("draw", t as u64);
                        self.mix(policy, i, j, &mut r).map(|s| s.image)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&Image> = mixed.iter().collect();
                let feats = self.extractor.features_of(&refs)?;
                Ok(block
                    .iter()
                    .enumerate()
                    .map(|(b, &(p, _))| {
                        let (i, j) = pairs[p];
                        let f = row(&feats, b);
                        (distance(row(&self.clean, i), f) + distance(row(&self.clean, j), f)) / 2.0
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        let mut total = 0.0;
        for pair in terms.concat().chunks(m) {
            total += pair.iter().sum::<f64>() / m as f64;
        }
        Ok(self.report(policy, total / pairs.len() as f64, pairs.len(), rng))
    }

    /// Dispatches on the policy kind.
    pub fn measure(&self, policy: &AugPolicy, rng: &RngStream) -> Result<IntensityReport> {
        if policy.is_mixing() {
            self.mixing(policy, rng)
        } else {
            self.single(policy, rng)
        }
    }
}

pub fn intensity_single(
    policy: &AugPolicy,
    extractor: &FeatureExtractor,
    source: &Dataset,
    cfg: &IntensityConfig,
    rng: &RngStream,
) -> Result<IntensityReport> {
    IntensityProbe::new(extractor, source, cfg)?.single(policy, rng)
}

pub fn intensity_mixing(
    policy: &AugPolicy,
    extractor: &FeatureExtractor,
    source: &Dataset,
    cfg: &IntensityConfig,
    rng: &RngStream,
) -> Result<IntensityReport> {
    IntensityProbe::new(extractor, source, cfg)?.mixing(policy, rng)
}

/// Final-epoch mean training loss when fine-tuning `pretrained` on all of
/// `data` under `policy` (applied every epoch).
pub fn diversity(
    policy: &AugPolicy,
    pretrained: &FeatureExtractor,
    data: &Dataset,
    cfg: &FineTuneConfig,
    rng: &RngStream,
) -> Result<f64> {
    if cfg.epochs == 0 {
        return Err(Error::invalid("diversity needs at least one training epoch"));
    }
    let episode = Episode {
        support: data.images().to_vec(),
        support_labels: data.labels().to_vec(),
        query: Vec::new(),
        query_labels: Vec::new(),
        class_map: (0..data.n_classes()).collect(),
        support_ids: (0..data.len()).collect(),
        query_ids: Vec::new(),
    };
    let cfg = cfg.clone().with_da(policy.clone());
    let out = finetune_episode(pretrained, &episode, &cfg, rng)?;
    Ok(*out.trace.losses.last().expect("at least one epoch"))
}
