//! The trainable feature extractor, linear heads, loss, optimizer and
//! checkpoint format.

mod checkpoint;
pub mod layers;
mod loss;
mod net;
mod optim;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use loss::{softmax_cross_entropy, Target};
pub use net::{
    batch_tensor, init_extractor, init_head, BatchNorm, ConvBn, FeatureExtractor, Forward,
    ForwardCache, LinearHead, Mode, ModelConfig, Network,
};
pub use optim::{sgd_update, OptState, SgdConfig};

use crate::error::{Error, Result};
use crate::finetune::UpdateMode;
use crate::tensor::{Scalar, Tensor};

/// Coarse layer family of a parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupKind {
    Conv,
    BatchNorm,
    Classifier,
}

/// Ordered names of the trainable parameter groups, stem first and
/// classifier last.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroupIndex {
    names: Vec<String>,
    blocks: usize,
}

pub(crate) fn stage_name(stage: usize) -> String {
    if stage == 0 {
        "stem".to_string()
    } else {
        format!("block{stage}")
    }
}

impl ParamGroupIndex {
    pub fn new(config: ModelConfig) -> Self {
        let mut names = Vec::new();
        for s in 0..config.stages() {
            let p = stage_name(s);
            names.push(format!("{p}.conv"));
            names.push(format!("{p}.bn.scale"));
            names.push(format!("{p}.bn.shift"));
        }
        names.push("classifier.weight".into());
        names.push("classifier.bias".into());
        ParamGroupIndex {
            names,
            blocks: config.blocks,
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn kind(&self, group: usize) -> GroupKind {
        if group + 2 >= self.names.len() {
            GroupKind::Classifier
        } else if group % 3 == 0 {
            GroupKind::Conv
        } else {
            GroupKind::BatchNorm
        }
    }

    /// Extractor stage owning `group`, `None` for the classifier.
    pub fn stage(&self, group: usize) -> Option<usize> {
        (group + 2 < self.names.len()).then_some(group / 3)
    }
}

/// Trainable-group mask for a single-stage update mode.
///
/// `Partial(d)` trains the classifier plus the last `d` blocks (conv and
/// batch norm). `Partial(0)` is LP; FT is `Partial(blocks)` plus the stem.
pub fn freeze_mask(mode: UpdateMode, index: &ParamGroupIndex) -> Result<Vec<bool>> {
    let g = index.len();
    let blocks = index.blocks();
    let first_stage = match mode {
        UpdateMode::LP => blocks + 1,
        UpdateMode::FT => 0,
        UpdateMode::Partial(d) if d <= blocks => blocks + 1 - d,
        UpdateMode::Partial(d) => {
            return Err(Error::invalid(format!(
                "partial depth {d} outside 0..={blocks}"
            )))
        }
        UpdateMode::TwoStage { .. } => {
            return Err(Error::invalid(
                "two-stage mode has no single mask; resolve it with at_epoch first",
            ))
        }
    };
    Ok((0..g)
        .map(|i| index.stage(i).is_none_or(|s| s >= first_stage))
        .collect())
}

/// Lowest extractor stage with a trainable group; `stages` when only the
/// classifier trains.
pub fn first_trainable_stage(mask: &[bool], stages: usize) -> usize {
    (0..stages)
        .find(|&s| mask[3 * s..3 * s + 3].iter().any(|&t| t))
        .unwrap_or(stages)
}

/// Mean loss and parameter gradients for a cached forward pass.
pub fn loss_and_backward<F: Scalar>(
    net: &Network<F>,
    forward: &Forward<F>,
    targets: &[Target],
    trainable: &[bool],
) -> Result<(f64, Vec<Tensor<F>>)> {
    let (loss, dlogits) = softmax_cross_entropy(&forward.logits, targets)?;
    let grads = net.backward(&forward.cache, &dlogits, trainable)?;
    Ok((loss, grads))
}

/// Per-group L1 distance `Σ|a − b|`, in group order.
pub fn layer_diff<F: Scalar>(a: &Network<F>, b: &Network<F>) -> Result<Vec<f64>> {
    let (pa, pb) = (a.params(), b.params());
    if pa.len() != pb.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![pa.len()],
            actual: vec![pb.len()],
        });
    }
    pa.iter()
        .zip(&pb)
        .map(|(x, y)| {
            if x.shape() != y.shape() {
                return Err(Error::ShapeMismatch {
                    expected: x.shape().to_vec(),
                    actual: y.shape().to_vec(),
                });
            }
            Ok(x.data()
                .iter()
                .zip(y.data())
                .map(|(u, v)| (u.as_f64() - v.as_f64()).abs())
                .sum())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::Image;
    use crate::rng::RngStream;

    fn small_net(seed: u64) -> Network<f64> {
        let cfg = ModelConfig {
            base_width: 4,
            blocks: 2,
        };
        let rng = RngStream::new(seed);
        let ext = init_extractor(cfg, &rng.child("ext"));
        let head = init_head(cfg.feature_dim(), 3, &rng.child("head")).unwrap();
        Network::new(ext, head).unwrap()
    }

    fn batch(n: usize, hw: usize, seed: u64) -> Tensor<f64> {
        let mut r = RngStream::new(seed);
        let data = (0..n * hw * hw * 3).map(|_| r.uniform()).collect();
        Tensor::from_vec(&[n, hw, hw, 3], data).unwrap()
    }

    #[test]
    fn group_index_order() {
        let idx = ParamGroupIndex::new(ModelConfig::default());
        let names = idx.names();
        assert_eq!(names.len(), 14);
        assert_eq!(names[0], "stem.conv");
        assert_eq!(names[4], "block1.bn.scale");
        assert_eq!(names[11], "block3.bn.shift");
        assert_eq!(names[12], "classifier.weight");
        assert_eq!(names[13], "classifier.bias");
        assert_eq!(idx.kind(3), GroupKind::Conv);
        assert_eq!(idx.kind(5), GroupKind::BatchNorm);
        assert_eq!(idx.kind(13), GroupKind::Classifier);
    }

    #[test]
    fn masks_by_mode() {
        let idx = ParamGroupIndex::new(ModelConfig::default());
        let on = |m| {
            let mask = freeze_mask(m, &idx).unwrap();
            idx.names()
                .iter()
                .zip(mask)
                .filter(|(_, t)| *t)
                .map(|(n, _)| n.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(on(UpdateMode::LP), ["classifier.weight", "classifier.bias"]);
        assert_eq!(on(UpdateMode::FT).len(), 14);
        assert_eq!(
            on(UpdateMode::Partial(1)),
            [
                "block3.conv",
                "block3.bn.scale",
                "block3.bn.shift",
                "classifier.weight",
                "classifier.bias"
            ]
        );
        assert_eq!(on(UpdateMode::Partial(0)), on(UpdateMode::LP));
        assert_eq!(on(UpdateMode::Partial(3)).len(), 11);
        assert!(freeze_mask(UpdateMode::Partial(4), &idx).is_err());
    }

    #[test]
    fn init_is_deterministic_and_bn_starts_at_identity() {
        let a = small_net(1);
        assert_eq!(a, small_net(1));
        assert_ne!(a, small_net(2));
        for st in &a.extractor.stages {
            assert!(st.bn.scale.data().iter().all(|&v| v == 1.0));
            assert!(st.bn.shift.data().iter().all(|&v| v == 0.0));
            assert!(st.bn.running_var.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn conv_init_mean_within_bound() {
        // Uniform(±b): sd of the mean of n draws is b/sqrt(3n).
        let ext: FeatureExtractor<f32> = init_extractor(ModelConfig::default(), &RngStream::new(3));
        let w = &ext.stages[2].weight; // 288 x 64 = 18432 entries
        let n = w.len() as f64;
        let b = 1.0 / 288f64.sqrt();
        let mean = w.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        assert!(mean.abs() < 3.0 * b / (3.0 * n).sqrt(), "{mean}");
        assert!(w.data().iter().all(|&v| (v as f64).abs() <= b));
    }

    #[test]
    fn head_shapes_and_forks() {
        let rng = RngStream::new(10);
        let h: LinearHead<f32> = init_head(128, 5, &rng).unwrap();
        assert_eq!(h.weight.shape(), [5, 128]);
        assert_eq!(h.bias.shape(), [5]);
        assert_eq!(h, init_head(128, 5, &rng).unwrap());
        let other: LinearHead<f32> = init_head(128, 5, &rng.child("x")).unwrap();
        assert_ne!(h.weight.data()[0], other.weight.data()[0]);
        assert!(init_head::<f32>(0, 5, &rng).is_err());
    }

    #[test]
    fn eval_forward_is_pure() {
        let mut net = small_net(4);
        let x = batch(3, 8, 5);
        let a = net.forward(&x, Mode::Eval).unwrap().logits;
        let b = net.forward(&x, Mode::Eval).unwrap().logits;
        assert_eq!(a, b);
        assert_eq!(a, net.logits(&x).unwrap());
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let mut net = small_net(6);
        for st in &mut net.extractor.stages {
            st.weight.data_mut().fill(0.0);
        }
        let x = Tensor::<f64>::zeros(&[2, 8, 8, 3]);
        let out = net.forward(&x, Mode::Eval).unwrap();
        assert!(out.features.data().iter().all(|&v| v == 0.0));
        for row in out.logits.data().chunks(3) {
            assert_eq!(row, net.head.bias.data());
        }
    }

    #[test]
    fn train_mode_needs_two_samples() {
        let mut net = small_net(7);
        assert!(matches!(
            net.forward(&batch(1, 8, 1), Mode::Train),
            Err(Error::BatchTooSmall(1))
        ));
        assert!(net.forward(&batch(1, 8, 1), Mode::Eval).is_ok());
    }

    #[test]
    fn train_forward_updates_running_stats() {
        let mut net = small_net(8);
        let before = net.extractor.stages[0].bn.running_mean.clone();
        net.forward(&batch(4, 8, 2), Mode::Train).unwrap();
        assert_ne!(before, net.extractor.stages[0].bn.running_mean);
        let mut eval_net = small_net(8);
        eval_net.forward(&batch(4, 8, 2), Mode::TrainFrom(3)).unwrap();
        assert_eq!(before, eval_net.extractor.stages[0].bn.running_mean);
    }

    #[test]
    fn frozen_groups_get_zero_grads() {
        let mut net = small_net(9);
        let idx = ParamGroupIndex::new(net.config());
        let mask = freeze_mask(UpdateMode::Partial(1), &idx).unwrap();
        let first = first_trainable_stage(&mask, 3);
        assert_eq!(first, 2);
        let fwd = net.forward(&batch(4, 8, 3), Mode::TrainFrom(first)).unwrap();
        let targets = [Target::hard(0), Target::hard(1), Target::hard(2), Target::hard(0)];
        let (_, grads) = loss_and_backward(&net, &fwd, &targets, &mask).unwrap();
        for (g, t) in grads.iter().zip(&mask) {
            assert_eq!(g.data().iter().any(|&v| v != 0.0), *t);
        }
        // Asking for stem grads from an eval-mode stem is an error.
        let all = vec![true; idx.len()];
        assert!(net.backward(&fwd.cache, &fwd.logits, &all).is_err());
    }

    #[test]
    fn layer_diff_values() {
        let a = small_net(11);
        assert!(layer_diff(&a, &a).unwrap().iter().all(|&v| v == 0.0));
        let mut b = a.clone();
        for v in b.head.bias.data_mut() {
            *v += 0.5;
        }
        let d = layer_diff(&a, &b).unwrap();
        assert!((d[d.len() - 1] - 1.5).abs() < 1e-12);
        assert!(d[..d.len() - 1].iter().all(|&v| v == 0.0));

        let mut other = small_net(12);
        other.head = init_head(other.config().feature_dim(), 5, &RngStream::new(0)).unwrap();
        assert!(layer_diff(&a, &other).is_err());
    }

    #[test]
    fn image_batches_must_share_shape() {
        let a = Image::filled(8, 8, 0.1);
        let b = Image::filled(8, 16, 0.1);
        assert!(batch_tensor::<f32>(&[&a, &b]).is_err());
        assert_eq!(batch_tensor::<f32>(&[&a, &a]).unwrap().shape(), [2, 8, 8, 3]);
    }

    /// Central differences over every parameter group of a 2-block network,
    /// with BN in train mode so batch statistics are part of the graph.
    fn grad_check(mode: Mode, mask: Vec<bool>) {
        let mut net = small_net(11);
        let x = batch(8, 8, 12);
        let targets: Vec<Target> = (0..8)
            .map(|i| Target::mixed(i % 3, (i + 1) % 3, 0.25 + 0.05 * i as f64))
            .collect();
        let loss_at = |n: &Network<f64>| {
            let mut n = n.clone();
            let fw = n.forward(&x, mode).unwrap();
            softmax_cross_entropy(&fw.logits, &targets).unwrap().0
        };
        let fw = net.clone().forward(&x, mode).unwrap();
        let (_, grads) = loss_and_backward(&net, &fw, &targets, &mask).unwrap();
        let h = 1e-6;
        for (g, grad) in grads.iter().enumerate() {
            let len = grad.data().len();
            // a spread of coordinates per group keeps the test fast
            for i in (0..len).step_by((len / 7).max(1)) {
                let num = if mask[g] {
                    let orig = net.params()[g].data()[i];
                    net.params_mut()[g].data_mut()[i] = orig + h;
                    let up = loss_at(&net);
                    net.params_mut()[g].data_mut()[i] = orig - h;
                    let dn = loss_at(&net);
                    net.params_mut()[g].data_mut()[i] = orig;
                    (up - dn) / (2.0 * h)
                } else {
                    0.0
                };
                let ana = grad.data()[i];
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(rel < 1e-4, "group {g} coord {i}: numeric {num} analytic {ana}");
            }
        }
    }

    #[test]
    fn whole_network_gradients_match_finite_differences() {
        grad_check(Mode::Train, vec![true; 11]);
    }

    #[test]
    fn partial_network_gradients_match_finite_differences() {
        let idx = ParamGroupIndex::new(small_net(0).config());
        let mask = freeze_mask(UpdateMode::Partial(1), &idx).unwrap();
        grad_check(Mode::TrainFrom(first_trainable_stage(&mask, 3)), mask);
    }
}
