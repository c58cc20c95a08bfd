//! Query prediction (plain and test-time augmented), clustering analysis
//! and the episodic experiment runner.

mod cluster;
mod report;

pub use cluster::{kmeans, v_measure, Clustering, KMEANS_MAX_ITER, KMEANS_RESTARTS, KMEANS_TOL};
pub use report::{
    ci95, evaluate_episode, fmt_num, run_experiment, EpisodeResult, ExperimentConfig, Report,
};

use std::fmt;
use std::str::FromStr;

use crate::augment::{augment_image, AugKind, AugPolicy, Image, IntensityPreset};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::finetune::TrainTrace;
use crate::model::{FeatureExtractor, Network};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

/// Row-wise argmax; ties go to the lowest class index.
pub fn predict_logits<F: Scalar>(logits: &Tensor<F>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of matching entries; 0 for empty input.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}

/// Eval-mode class predictions.
pub fn predict(net: &Network, images: &[Image]) -> Result<Vec<usize>> {
    let imgs: Vec<&Image> = images.iter().collect();
    let feats = net.extractor.features_of(&imgs)?;
    Ok(predict_logits(&net.head.logits(&feats)))
}

/// What the TTA ensemble averages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EnsembleSpace {
    #[default]
    Probabilities,
    Logits,
}

impl fmt::Display for EnsembleSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnsembleSpace::Probabilities => "probs",
            EnsembleSpace::Logits => "logits",
        })
    }
}

impl FromStr for EnsembleSpace {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "probs" | "probabilities" | "softmax" => Ok(EnsembleSpace::Probabilities),
            "logits" => Ok(EnsembleSpace::Logits),
            _ => Err(Error::config(format!("unknown TTA ensemble space {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TtaConfig {
    pub policy: AugPolicy,
    /// Predictions per query, the original included.
    pub v: usize,
    pub space: EnsembleSpace,
}

impl TtaConfig {
    pub const DEFAULT_V: usize = 32;

    pub fn base_aug(preset: IntensityPreset, v: usize) -> Self {
        TtaConfig {
            policy: AugPolicy::base_aug(preset),
            v,
            space: EnsembleSpace::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.v < 1 {
            return Err(Error::invalid("TTA needs v >= 1"));
        }
        if self.policy.is_mixing() {
            return Err(Error::invalid(format!(
                "{} cannot be used for test-time augmentation",
                self.policy.kind
            )));
        }
        self.policy.validate()
    }

    /// True when predictions differ from plain `predict`.
    pub fn is_effective(&self) -> bool {
        self.v > 1 && self.policy.kind != AugKind::None
    }
}

fn softmax_f64(row: &[f32]) -> Vec<f64> {
    let max = row.iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Ensembled predictions for `images`: the original plus `v − 1` augmented
/// copies of each. Copy `j` of image `i` is drawn from
/// `rng.child_idx("query", i).child_idx("view", j)`. Scores are summed in
/// view order, then argmax with ties to the lowest index. With `v = 1` or
/// policy `None` this is exactly `predict`.
pub fn predict_tta(net: &Network, images: &[Image], tta: &TtaConfig, rng: &RngStream) -> Result<Vec<usize>> {
    tta.validate()?;
    if !tta.is_effective() {
        return predict(net, images);
    }
    let k = net.n_classes();
    let mut scores = vec![0.0f64; images.len() * k];
    let qrngs: Vec<RngStream> = (0..images.len()).map(|i| rng.child_idx("query", i as u64)).collect();
    for view in 0..tta.v {
        let batch: Vec<Image> = if view == 0 {
            images.to_vec()
        } else {
            images
                .iter()
                .zip(&qrngs)
                .map(|(im, r)| augment_image(&tta.policy, im, &mut r.child_idx("view", view as u64)))
                .collect::<Result<_>>()?
        };
        let refs: Vec<&Image> = batch.iter().collect();
        let logits = net.head.logits(&net.extractor.features_of(&refs)?);
        for (acc, row) in scores.chunks_exact_mut(k).zip(logits.data().chunks_exact(k)) {
            let add: Vec<f64> = match tta.space {
                EnsembleSpace::Probabilities => softmax_f64(row),
                EnsembleSpace::Logits => row.iter().map(|&v| v as f64).collect(),
            };
            for (a, v) in acc.iter_mut().zip(add) {
                *a += v;
            }
        }
    }
    let mean: Vec<f64> = scores.iter().map(|s| s / tta.v as f64).collect();
    Ok(predict_logits(&Tensor::from_vec(&[images.len(), k], mean)?))
}

/// Best-epoch over last-epoch query accuracy. `1` when both are zero and
/// `+inf` when only the last is zero.
pub fn expected_gain(trace: &TrainTrace) -> Result<f64> {
    let (best, _) = trace
        .best()
        .ok_or_else(|| Error::invalid("expected gain of an empty trace"))?;
    let last = trace.acc_last().expect("non-empty");
    Ok(match (best == 0.0, last == 0.0) {
        (true, _) => 1.0,
        (false, true) => f64::INFINITY,
        _ => best / last,
    })
}

/// Eval-mode query features as f64 rows.
fn query_rows(ext: &FeatureExtractor, episode: &Episode) -> Result<Vec<Vec<f64>>> {
    let imgs: Vec<&Image> = episode.query.iter().collect();
    let f = ext.features_of(&imgs)?;
    let d = f.shape()[1];
    Ok(f.data()
        .chunks_exact(d)
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect())
}

/// V-measure of K-Means (K = n-way) on query features from the pre-trained
/// and the fine-tuned extractor. Both clusterings use `rng`.
pub fn v_measure_analysis(
    pretrained: &FeatureExtractor,
    finetuned: &FeatureExtractor,
    episode: &Episode,
    rng: &RngStream,
) -> Result<(f64, f64)> {
    let k = episode.n_way();
    let score = |ext: &FeatureExtractor| -> Result<f64> {
        let c = kmeans(&query_rows(ext, episode)?, k, rng)?;
        v_measure(&episode.query_labels, &c.assignment)
    };
    let pre = score(pretrained)?;
    let post = if finetuned == pretrained { pre } else { score(finetuned)? };
    Ok((pre, post))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_extractor, init_head, ModelConfig};

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::from_vec(&[2, 5], vec![0., 0., 0., 0., 1., 2., 2., 2., 2., 2.]).unwrap();
        assert_eq!(predict_logits(&t), vec![4, 0]);
    }

    #[test]
    fn gain_rules() {
        let t = |a: Vec<f64>| TrainTrace {
            query_acc: a,
            ..Default::default()
        };
        assert_eq!(expected_gain(&t(vec![0.2, 0.4, 0.4])).unwrap(), 1.0);
        assert!((expected_gain(&t(vec![0.6, 0.9, 0.6])).unwrap() - 1.5).abs() < 1e-15);
        assert_eq!(expected_gain(&t(vec![0.0, 0.0])).unwrap(), 1.0);
        assert_eq!(expected_gain(&t(vec![0.5, 0.0])).unwrap(), f64::INFINITY);
        assert!(expected_gain(&t(vec![])).is_err());
    }

    fn net() -> Network {
        let cfg = ModelConfig {
            base_width: 4,
            blocks: 2,
        };
        let rng = RngStream::new(3);
        Network::new(init_extractor(cfg, &rng), init_head(cfg.feature_dim(), 3, &rng).unwrap()).unwrap()
    }

    fn images() -> Vec<Image> {
        (0..4)
            .map(|i| Image::new(8, 8, (0..192).map(|p| ((p * (i + 2)) % 17) as f32 / 17.0).collect()).unwrap())
            .collect()
    }

    #[test]
    fn tta_degenerate_cases_equal_predict() {
        let (n, im) = (net(), images());
        let plain = predict(&n, &im).unwrap();
        let rng = RngStream::new(1);
        let v1 = TtaConfig::base_aug(IntensityPreset::Strong, 1);
        assert_eq!(predict_tta(&n, &im, &v1, &rng).unwrap(), plain);
        let none = TtaConfig {
            policy: AugPolicy::none(),
            ..TtaConfig::base_aug(IntensityPreset::Strong, 8)
        };
        assert_eq!(predict_tta(&n, &im, &none, &rng).unwrap(), plain);
    }

    #[test]
    fn tta_averages_softmax_of_views() {
        let (n, im) = (net(), images());
        let tta = TtaConfig::base_aug(IntensityPreset::Stronger, 3);
        let rng = RngStream::new(9);
        let got = predict_tta(&n, &im, &tta, &rng).unwrap();
        for (i, x) in im.iter().enumerate() {
            let q = rng.child_idx("query", i as u64);
            let views = [
                x.clone(),
                augment_image(&tta.policy, x, &mut q.child_idx("view", 1)).unwrap(),
                augment_image(&tta.policy, x, &mut q.child_idx("view", 2)).unwrap(),
            ];
            let mut avg = vec![0.0; 3];
            for v in &views {
                let l = n.logits(&crate::model::batch_tensor(&[v]).unwrap()).unwrap();
                for (a, p) in avg.iter_mut().zip(softmax_f64(l.data())) {
                    *a += p / 3.0;
                }
            }
            let want = (0..3).fold(0, |b, j| if avg[j] > avg[b] { j } else { b });
            assert_eq!(got[i], want);
        }
    }

    #[test]
    fn tta_rejects_mixing() {
        let tta = TtaConfig {
            policy: AugPolicy::mixing(AugKind::MixUp, crate::augment::MixMode::WB),
            v: 4,
            space: EnsembleSpace::Probabilities,
        };
        assert!(predict_tta(&net(), &images(), &tta, &RngStream::new(0)).is_err());
    }
}
