//! Labelled datasets, the n-way k-shot episode sampler, synthetic domains
//! and the `FSDS` dataset file format.

mod io;
mod synth;

pub use io::{load_dataset, read_dataset, save_dataset, write_dataset};
pub use synth::{generate_synthetic, SynthConfig, PRESETS};

use crate::augment::Image;
use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<Image>,
    labels: Vec<usize>,
    n_classes: usize,
    pub domain_tag: String,
    by_class: Vec<Vec<usize>>,
}

impl Dataset {
    /// Validates labels and that every class has at least one example.
    pub fn new(
        images: Vec<Image>,
        labels: Vec<usize>,
        n_classes: usize,
        domain_tag: impl Into<String>,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|im| im.dims() != first.dims()) {
                return Err(Error::invalid("dataset images must share one shape"));
            }
        }
        let mut by_class = vec![Vec::new(); n_classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= n_classes {
                return Err(Error::LabelOutOfRange { label: l, n_classes });
            }
            by_class[l].push(i);
        }
        if let Some(c) = by_class.iter().position(|v| v.is_empty()) {
            return Err(Error::invalid(format!("class {c} has no examples")));
        }
        Ok(Dataset {
            images,
            labels,
            n_classes,
            domain_tag: domain_tag.into(),
            by_class,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `(height, width)` of the images; `None` for an empty dataset.
    pub fn image_dims(&self) -> Option<(usize, usize)> {
        self.images.first().map(Image::dims)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.by_class.iter().map(Vec::len).collect()
    }

    /// Dataset indices of the examples of class `c`.
    pub fn class_indices(&self, c: usize) -> &[usize] {
        &self.by_class[c]
    }
}

/// `n`-way `k`-shot with `k_q` queries per class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub n: usize,
    pub k: usize,
    pub k_q: usize,
}

impl EpisodeSpec {
    pub const DEFAULT_QUERIES: usize = 15;

    pub fn new(n: usize, k: usize, k_q: usize) -> Result<Self> {
        let spec = EpisodeSpec { n, k, k_q };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::invalid(format!("episode needs n >= 2 ways, got {}", self.n)));
        }
        if self.k < 1 || self.k_q < 1 {
            return Err(Error::invalid("episode needs k >= 1 and k_q >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support: Vec<Image>,
    pub support_labels: Vec<usize>,
    pub query: Vec<Image>,
    pub query_labels: Vec<usize>,
    /// `class_map[local]` is the dataset class behind episode-local id `local`.
    pub class_map: Vec<usize>,
    /// Dataset indices of the support and query examples.
    pub support_ids: Vec<usize>,
    pub query_ids: Vec<usize>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.class_map.len()
    }

    /// Episode-local id of dataset class `class`, if it was sampled.
    pub fn local_id(&self, class: usize) -> Option<usize> {
        self.class_map.iter().position(|&c| c == class)
    }

    /// Support examples paired with their labels.
    pub fn support_pairs(&self) -> Vec<(Image, usize)> {
        self.support
            .iter()
            .cloned()
            .zip(self.support_labels.iter().copied())
            .collect()
    }
}

/// Draws `n` classes, then `k + k_q` examples of each, all without
/// replacement. The first `k` examples of a class go to the support set.
pub fn sample_episode(ds: &Dataset, spec: EpisodeSpec, rng: &mut RngStream) -> Result<Episode> {
    spec.validate()?;
    if ds.n_classes() < spec.n {
        return Err(Error::InsufficientData(format!(
            "{}-way episode needs {} classes, dataset has {}",
            spec.n,
            spec.n,
            ds.n_classes()
        )));
    }
    let need = spec.k + spec.k_q;
    if let Some((c, have)) = ds
        .class_counts()
        .into_iter()
        .enumerate()
        .find(|&(_, have)| have < need)
    {
        return Err(Error::InsufficientData(format!(
            "class {c} has {have} examples, k + k_q = {need} are needed"
        )));
    }
    let class_map = rng.sample_without_replacement(ds.n_classes(), spec.n);
    let mut ep = Episode {
        support: Vec::with_capacity(spec.n * spec.k),
        support_labels: Vec::with_capacity(spec.n * spec.k),
        query: Vec::with_capacity(spec.n * spec.k_q),
        query_labels: Vec::with_capacity(spec.n * spec.k_q),
        class_map,
        support_ids: Vec::new(),
        query_ids: Vec::new(),
    };
    for local in 0..spec.n {
        let members = ds.class_indices(ep.class_map[local]);
        let picks = rng.sample_without_replacement(members.len(), need);
        for (j, &p) in picks.iter().enumerate() {
            let id = members[p];
            if j < spec.k {
                ep.support.push(ds.images[id].clone());
                ep.support_labels.push(local);
                ep.support_ids.push(id);
            } else {
                ep.query.push(ds.images[id].clone());
                ep.query_labels.push(local);
                ep.query_ids.push(id);
            }
        }
    }
    Ok(ep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n_classes: usize, per_class: usize) -> Dataset {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for c in 0..n_classes {
            for i in 0..per_class {
                images.push(Image::filled(2, 2, (c * per_class + i) as f32 / 1000.0));
                labels.push(c);
            }
        }
        Dataset::new(images, labels, n_classes, "toy").unwrap()
    }

    #[test]
    fn sizes_and_disjointness() {
        let ds = toy(10, 20);
        let spec = EpisodeSpec::new(5, 1, 15).unwrap();
        let mut rng = RngStream::new(3);
        for _ in 0..50 {
            let ep = sample_episode(&ds, spec, &mut rng).unwrap();
            assert_eq!(ep.support.len(), 5);
            assert_eq!(ep.query.len(), 75);
            assert!(ep.support_ids.iter().all(|i| !ep.query_ids.contains(i)));
            for local in 0..5 {
                assert_eq!(ep.support_labels.iter().filter(|&&l| l == local).count(), 1);
                assert_eq!(ep.query_labels.iter().filter(|&&l| l == local).count(), 15);
            }
            for (&id, &l) in ep.support_ids.iter().zip(&ep.support_labels) {
                assert_eq!(ds.labels()[id], ep.class_map[l]);
            }
        }
    }

    #[test]
    fn class_frequency_is_uniform() {
        // each class is drawn with probability n/10 = 0.5 per episode
        let ds = toy(10, 2);
        let spec = EpisodeSpec::new(5, 1, 1).unwrap();
        let mut rng = RngStream::new(9);
        let trials = 10_000;
        let mut hits = [0usize; 10];
        for _ in 0..trials {
            for c in sample_episode(&ds, spec, &mut rng).unwrap().class_map {
                hits[c] += 1;
            }
        }
        let sd = (trials as f64 * 0.25).sqrt();
        for h in hits {
            assert!((h as f64 - 5000.0).abs() < 3.0 * sd, "{h}");
        }
    }

    #[test]
    fn deficits_are_named() {
        let ds = toy(4, 3);
        let mut rng = RngStream::new(0);
        let e = sample_episode(&ds, EpisodeSpec::new(5, 1, 1).unwrap(), &mut rng).unwrap_err();
        assert!(e.to_string().contains("needs 5 classes"));
        let e = sample_episode(&ds, EpisodeSpec::new(2, 2, 2).unwrap(), &mut rng).unwrap_err();
        assert!(e.to_string().contains("3 examples"));
    }

    #[test]
    fn spec_validation() {
        assert!(EpisodeSpec::new(1, 1, 1).is_err());
        assert!(EpisodeSpec::new(2, 0, 1).is_err());
        assert!(EpisodeSpec::new(2, 1, 0).is_err());
    }

    #[test]
    fn same_seed_same_episode() {
        let ds = toy(10, 20);
        let spec = EpisodeSpec::new(5, 5, 15).unwrap();
        let a = sample_episode(&ds, spec, &mut RngStream::new(5)).unwrap();
        let b = sample_episode(&ds, spec, &mut RngStream::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dataset_validation() {
        let im = Image::filled(2, 2, 0.0);
        assert!(Dataset::new(vec![im.clone()], vec![1], 1, "x").is_err());
        assert!(Dataset::new(vec![im.clone()], vec![0], 2, "x").is_err());
        assert!(Dataset::new(vec![im.clone(), Image::filled(3, 2, 0.0)], vec![0, 0], 1, "x").is_err());
    }
}
